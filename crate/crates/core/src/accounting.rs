//! Analytic parameter and multiply-accumulate counts.
//!
//! A [`Block`] describes a layer or a sequential composition of layers.
//! Counts are exact integers: batch-norm layers contribute two learnable
//! scalars per channel (running statistics are not learnable), and MACs
//! count only the products of convolution and fully connected layers.
//! Padding taps are counted as full kernel applications.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghost::{BottleneckSpec, Ghost3DSpec};
use crate::nn::ConvSpec;

/// `[B, C, D, H, W]`; 2D feature maps use `D = 1`.
pub type Shape5 = [usize; 5];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Block {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        #[serde(default = "unit3")]
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
        #[serde(default = "one")]
        groups: usize,
        #[serde(default)]
        bias: bool,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
        #[serde(default)]
        bias: bool,
    },
    /// 1×1×1 convolution.
    Pointwise {
        in_channels: usize,
        out_channels: usize,
        #[serde(default)]
        bias: bool,
    },
    /// Per-channel convolution producing `multiplier` maps per input channel.
    Depthwise {
        channels: usize,
        #[serde(default = "one")]
        multiplier: usize,
        kernel: [usize; 3],
        #[serde(default = "unit3")]
        stride: [usize; 3],
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Ghost(Ghost3DSpec),
    Se {
        channels: usize,
        reduction: usize,
    },
    Bottleneck(BottleneckSpec),
    Seq {
        blocks: Vec<Block>,
    },
}

fn one() -> usize {
    1
}

fn unit3() -> [usize; 3] {
    [1, 1, 1]
}

fn out_len(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if n + 2 * p < k || s == 0 {
        return Err(Error::Shape(format!(
            "kernel {k} (stride {s}, pad {p}) does not fit extent {n}"
        )));
    }
    Ok((n + 2 * p - k) / s + 1)
}

fn check_channels(shape: &Shape5, expect: usize, what: &str) -> Result<()> {
    if shape[1] != expect {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects {expect} input channels, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl Block {
    pub fn conv(spec: &ConvSpec) -> Block {
        Block::Conv {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
            bias: spec.bias,
        }
    }

    pub fn conv_transpose(spec: &ConvSpec) -> Block {
        Block::ConvTranspose {
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            bias: spec.bias,
        }
    }

    /// Parse a JSON description; unknown `kind` values are rejected.
    pub fn from_json(text: &str) -> Result<Block> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown variant") {
                Error::UnknownBlock(msg)
            } else {
                Error::Json(e)
            }
        })
    }

    /// Expand composite blocks into primitive layers.
    pub fn expand(&self) -> Vec<Block> {
        match self {
            Block::Pointwise {
                in_channels,
                out_channels,
                bias,
            } => vec![Block::Conv {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: [1, 1, 1],
                stride: [1, 1, 1],
                padding: [0, 0, 0],
                groups: 1,
                bias: *bias,
            }],
            Block::Depthwise {
                channels,
                multiplier,
                kernel,
                stride,
                bias,
            } => vec![Block::Conv {
                in_channels: *channels,
                out_channels: channels * multiplier,
                kernel: *kernel,
                stride: *stride,
                padding: kernel.map(|k| k / 2),
                groups: *channels,
                bias: *bias,
            }],
            Block::Ghost(spec) => spec.blocks(),
            Block::Bottleneck(spec) => spec.blocks(),
            Block::Seq { blocks } => blocks.iter().flat_map(|b| b.expand()).collect(),
            other => vec![other.clone()],
        }
    }
}

/// Exact learnable-parameter count.
pub fn count_params(block: &Block) -> u64 {
    match block {
        Block::Conv {
            in_channels,
            out_channels,
            kernel,
            groups,
            bias,
            ..
        } => {
            let k: usize = kernel.iter().product();
            (out_channels * (in_channels / groups) * k + if *bias { *out_channels } else { 0 }) as u64
        }
        Block::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            let k: usize = kernel.iter().product();
            (in_channels * out_channels * k + if *bias { *out_channels } else { 0 }) as u64
        }
        Block::BatchNorm { channels } => 2 * *channels as u64,
        Block::Se { channels, reduction } => {
            let mid = channels / reduction;
            (channels * mid + mid + mid * channels + channels) as u64
        }
        Block::Seq { blocks } => blocks.iter().map(count_params).sum(),
        composite => composite.expand().iter().map(count_params).sum(),
    }
}

/// Multiply-accumulates for one forward pass at `input`, plus the output
/// shape.
pub fn count_macs(block: &Block, input: Shape5) -> Result<(u64, Shape5)> {
    match block {
        Block::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            ..
        } => {
            check_channels(&input, *in_channels, "conv")?;
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(Error::GroupDivisibility {
                    channels: *in_channels,
                    groups: *groups,
                });
            }
            let mut out = [input[0], *out_channels, 0, 0, 0];
            for a in 0..3 {
                out[2 + a] = out_len(input[2 + a], kernel[a], stride[a], padding[a])?;
            }
            let k: usize = kernel.iter().product();
            let positions = out[0] * out[2] * out[3] * out[4];
            Ok(((out_channels * (in_channels / groups) * k * positions) as u64, out))
        }
        Block::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            check_channels(&input, *in_channels, "transposed conv")?;
            let mut out = [input[0], *out_channels, 0, 0, 0];
            for a in 0..3 {
                let n = (input[2 + a] - 1) * stride[a] + kernel[a];
                out[2 + a] = n
                    .checked_sub(2 * padding[a])
                    .ok_or_else(|| Error::Shape(format!("transposed conv padding {} too large", padding[a])))?;
            }
            let k: usize = kernel.iter().product();
            let positions = input[0] * input[2] * input[3] * input[4];
            Ok(((in_channels * out_channels * k * positions) as u64, out))
        }
        Block::BatchNorm { channels } => {
            check_channels(&input, *channels, "batch norm")?;
            Ok((0, input))
        }
        Block::Se { channels, reduction } => {
            check_channels(&input, *channels, "SE")?;
            let mid = channels / reduction;
            Ok(((2 * channels * mid * input[0]) as u64, input))
        }
        Block::Seq { blocks } => {
            let mut shape = input;
            let mut total = 0;
            for b in blocks {
                let (m, s) = count_macs(b, shape)?;
                total += m;
                shape = s;
            }
            Ok((total, shape))
        }
        Block::Ghost(spec) => {
            check_channels(&input, spec.in_channels, "ghost module")?;
            let (mut total, mut shape) = (0, input);
            for b in spec.blocks() {
                if let Block::BatchNorm { .. } = b {
                    continue;
                }
                let (m, s) = count_macs(&b, shape)?;
                total += m;
                shape = s;
            }
            // The cheap branch reads the intrinsic maps; the output is the
            // truncated concatenation.
            Ok((total, [input[0], spec.out_channels, shape[2], shape[3], shape[4]]))
        }
        Block::Bottleneck(spec) => spec.count_macs(input),
        other => count_macs(&Block::Seq { blocks: other.expand() }, input),
    }
}

/// A named layer with the input shape it sees inside a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRecord {
    pub module: &'static str,
    pub name: String,
    pub block: Block,
    pub input: Shape5,
}

impl LayerRecord {
    pub fn new(module: &'static str, name: impl Into<String>, block: Block, input: Shape5) -> Self {
        LayerRecord {
            module,
            name: name.into(),
            block,
            input,
        }
    }
}

/// Per-module totals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCount {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

pub fn summarize(records: &[LayerRecord]) -> Result<Vec<ModuleCount>> {
    let mut out: Vec<ModuleCount> = Vec::new();
    for r in records {
        let params = count_params(&r.block);
        let (macs, _) = count_macs(&r.block, r.input)?;
        match out.iter_mut().find(|m| m.module == r.module) {
            Some(m) => {
                m.params += params;
                m.macs += macs;
            }
            None => out.push(ModuleCount {
                module: r.module.to_string(),
                params,
                macs,
            }),
        }
    }
    Ok(out)
}

/// Shape helper for 2D maps.
pub fn shape2d(b: usize, c: usize, h: usize, w: usize) -> Shape5 {
    [b, c, 1, h, w]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv3(cin: usize, cout: usize) -> Block {
        Block::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            padding: [1, 1, 1],
            groups: 1,
            bias: false,
        }
    }

    /// Weight tensor shape, enumerated.
    #[test]
    fn vanilla_conv3d_counts() {
        assert_eq!(count_params(&conv3(16, 32)), 16 * 32 * 27);
        assert_eq!(count_params(&conv3(16, 32)), 13824);
        let (macs, out) = count_macs(&conv3(16, 32), [1, 16, 4, 8, 8]).unwrap();
        assert_eq!(macs, 13824 * 4 * 8 * 8);
        assert_eq!(macs, 3_538_944);
        assert_eq!(out, [1, 32, 4, 8, 8]);
    }

    #[test]
    fn pointwise_macs_are_c_squared_positions() {
        let pw = Block::Pointwise {
            in_channels: 12,
            out_channels: 12,
            bias: false,
        };
        let (macs, _) = count_macs(&pw, [2, 12, 3, 5, 7]).unwrap();
        assert_eq!(macs, 12 * 12 * 2 * 3 * 5 * 7);
    }

    #[test]
    fn empty_composition_is_zero() {
        let empty = Block::Seq { blocks: vec![] };
        assert_eq!(count_params(&empty), 0);
        assert_eq!(count_macs(&empty, [1, 3, 1, 4, 4]).unwrap(), (0, [1, 3, 1, 4, 4]));
    }

    #[test]
    fn json_descriptions_parse_and_reject_unknown_kinds() {
        let b = Block::from_json(r#"{"kind":"seq","blocks":[{"kind":"pointwise","in_channels":4,"out_channels":8},{"kind":"batch_norm","channels":8}]}"#).unwrap();
        assert_eq!(count_params(&b), 32 + 16);
        assert!(matches!(
            Block::from_json(r#"{"kind":"attention","channels":8}"#),
            Err(Error::UnknownBlock(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_reported() {
        assert!(count_macs(&conv3(16, 32), [1, 8, 4, 8, 8]).is_err());
    }

    #[test]
    fn transposed_conv_doubles_and_counts_input_positions() {
        let t = Block::ConvTranspose {
            in_channels: 8,
            out_channels: 4,
            kernel: [4, 4, 4],
            stride: [2, 2, 2],
            padding: [1, 1, 1],
            bias: false,
        };
        let (macs, out) = count_macs(&t, [1, 8, 2, 3, 4]).unwrap();
        assert_eq!(out, [1, 4, 4, 6, 8]);
        assert_eq!(macs, (8 * 4 * 64 * 24) as u64);
        assert_eq!(count_params(&t), 8 * 4 * 64);
    }
}
