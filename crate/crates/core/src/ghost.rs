//! Ghost modules, squeeze-and-excitation and Ghost bottlenecks, in 2D
//! (feature extraction) and 3D (cost-volume aggregation) variants.
//!
//! A Ghost module produces `ceil(out / ratio)` "intrinsic" channels with a
//! pointwise convolution and derives the remaining channels from them with
//! a cheap depthwise convolution. The two halves are concatenated
//! (intrinsic first) and truncated to exactly `out` channels.

use serde::{Deserialize, Serialize};

use crate::accounting::{count_macs, Block, Shape5};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Act, BatchNorm, Builder, Conv, ConvSpec, Dims, Session};

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

fn yes() -> bool {
    true
}

fn cube3() -> [usize; 3] {
    [3, 3, 3]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ghost3DSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "two")]
    pub ratio: usize,
    /// Kernel of the depthwise cheap branch; `[1, k, k]` for 2D maps.
    #[serde(default = "cube3")]
    pub cheap_kernel: [usize; 3],
    #[serde(default = "yes")]
    pub relu: bool,
    #[serde(default = "yes")]
    pub bn: bool,
}

impl Ghost3DSpec {
    pub fn new(dims: Dims, in_channels: usize, out_channels: usize) -> Self {
        Ghost3DSpec {
            in_channels,
            out_channels,
            ratio: 2,
            cheap_kernel: dims.cube(3),
            relu: true,
            bn: true,
        }
    }

    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(self.ratio)
    }

    pub fn cheap(&self) -> usize {
        self.intrinsic() * (self.ratio - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("degenerate ghost module {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn blocks(&self) -> Vec<Block> {
        let intrinsic = self.intrinsic();
        let mut v = vec![Block::Pointwise {
            in_channels: self.in_channels,
            out_channels: intrinsic,
            bias: false,
        }];
        if self.bn {
            v.push(Block::BatchNorm { channels: intrinsic });
        }
        if self.cheap() > 0 {
            v.push(Block::Depthwise {
                channels: intrinsic,
                multiplier: self.ratio - 1,
                kernel: self.cheap_kernel,
                stride: [1, 1, 1],
                bias: false,
            });
            if self.bn {
                v.push(Block::BatchNorm { channels: self.cheap() });
            }
        }
        v
    }
}

pub struct GhostModule {
    pub spec: Ghost3DSpec,
    pub primary: Conv,
    pub primary_bn: Option<BatchNorm>,
    pub cheap: Option<Conv>,
    pub cheap_bn: Option<BatchNorm>,
}

impl GhostModule {
    pub fn new(b: &mut Builder, name: &str, dims: Dims, spec: Ghost3DSpec) -> Result<Self> {
        spec.validate()?;
        if dims == Dims::Two && spec.cheap_kernel[0] != 1 {
            return Err(Error::Config(format!(
                "{name}: 2D ghost module with cheap kernel {:?}",
                spec.cheap_kernel
            )));
        }
        let intrinsic = spec.intrinsic();
        let primary = Conv::new(
            b,
            &format!("{name}.primary"),
            ConvSpec::new(dims, spec.in_channels, intrinsic, 1, 1),
        );
        let primary_bn = spec
            .bn
            .then(|| BatchNorm::new(b, &format!("{name}.primary_bn"), intrinsic));
        let (cheap, cheap_bn) = if spec.cheap() > 0 {
            let cs = ConvSpec::new(dims, intrinsic, spec.cheap(), 3, 1)
                .kernel(spec.cheap_kernel)
                .groups(intrinsic);
            (
                Some(Conv::new(b, &format!("{name}.cheap"), cs)),
                spec.bn
                    .then(|| BatchNorm::new(b, &format!("{name}.cheap_bn"), spec.cheap())),
            )
        } else {
            (None, None)
        };
        Ok(GhostModule {
            spec,
            primary,
            primary_bn,
            cheap,
            cheap_bn,
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let act = if self.spec.relu { Act::Relu } else { Act::Identity };
        let mut p = self.primary.forward(s, x);
        if let Some(bn) = &self.primary_bn {
            p = bn.forward(s, p);
        }
        let p = act.apply(s, p);
        let Some(cheap) = &self.cheap else {
            return s.graph.narrow(p, 1, 0, self.spec.out_channels);
        };
        let mut c = cheap.forward(s, p);
        if let Some(bn) = &self.cheap_bn {
            c = bn.forward(s, c);
        }
        let c = act.apply(s, c);
        let y = s.graph.cat(&[p, c], 1);
        if self.spec.intrinsic() + self.spec.cheap() == self.spec.out_channels {
            y
        } else {
            s.graph.narrow(y, 1, 0, self.spec.out_channels)
        }
    }

    pub fn block(&self) -> Block {
        Block::Ghost(self.spec)
    }
}

/// Squeeze-and-excitation with a hard-sigmoid gate:
/// `y = x ⊙ hsig(W2 relu(W1 pool(x) + b1) + b2)`.
pub struct SqueezeExcite {
    pub channels: usize,
    pub reduction: usize,
    pub reduce: Conv,
    pub expand: Conv,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder, name: &str, dims: Dims, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::ReductionDivisibility { channels, reduction });
        }
        let mid = channels / reduction;
        Ok(SqueezeExcite {
            channels,
            reduction,
            reduce: Conv::new(
                b,
                &format!("{name}.reduce"),
                ConvSpec::new(dims, channels, mid, 1, 1).with_bias(),
            ),
            expand: Conv::new(
                b,
                &format!("{name}.expand"),
                ConvSpec::new(dims, mid, channels, 1, 1).with_bias(),
            ),
        })
    }

    /// Per-channel gate in `[0, 1]`, shaped `[B, C, 1, ...]`.
    pub fn gate(&self, s: &Session, x: Var) -> Var {
        let pooled = s.graph.global_avg_pool(x);
        let h = s.graph.relu(self.reduce.forward(s, pooled));
        s.graph.hard_sigmoid(self.expand.forward(s, h))
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let g = self.gate(s, x);
        s.graph.mul(x, g)
    }

    pub fn block(&self) -> Block {
        Block::Se {
            channels: self.channels,
            reduction: self.reduction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BottleneckSpec {
    pub dims: Dims,
    pub in_channels: usize,
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "yes")]
    pub use_se: bool,
    #[serde(default = "four")]
    pub se_reduction: usize,
    #[serde(default = "two")]
    pub ratio: usize,
    /// Kernel of the strided depthwise convolutions (main path and shortcut).
    #[serde(default = "three")]
    pub dw_kernel: usize,
    /// Allow a depthwise + pointwise shortcut when stride 1 changes width.
    #[serde(default)]
    pub project_shortcut: bool,
}

impl BottleneckSpec {
    pub fn new(dims: Dims, in_channels: usize, expansion_channels: usize, out_channels: usize, stride: usize) -> Self {
        BottleneckSpec {
            dims,
            in_channels,
            expansion_channels,
            out_channels,
            stride,
            use_se: true,
            se_reduction: 4,
            ratio: 2,
            dw_kernel: 3,
            project_shortcut: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!(
                "bottleneck stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.stride == 1 && self.in_channels != self.out_channels && !self.project_shortcut {
            return Err(Error::Config(format!(
                "stride-1 bottleneck {} -> {} needs a projection shortcut",
                self.in_channels, self.out_channels
            )));
        }
        if self.use_se && (self.se_reduction == 0 || !self.expansion_channels.is_multiple_of(self.se_reduction)) {
            return Err(Error::ReductionDivisibility {
                channels: self.expansion_channels,
                reduction: self.se_reduction,
            });
        }
        Ok(())
    }

    pub fn identity_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn ghost(&self, cin: usize, cout: usize, relu: bool) -> Ghost3DSpec {
        Ghost3DSpec {
            in_channels: cin,
            out_channels: cout,
            ratio: self.ratio,
            cheap_kernel: self.dims.cube(3),
            relu,
            bn: true,
        }
    }

    fn main_blocks(&self) -> Vec<Block> {
        let mid = self.expansion_channels;
        let mut v = vec![Block::Ghost(self.ghost(self.in_channels, mid, true))];
        if self.stride == 2 {
            v.push(Block::Depthwise {
                channels: mid,
                multiplier: 1,
                kernel: self.dims.cube(self.dw_kernel),
                stride: self.dims.stride(2),
                bias: false,
            });
            v.push(Block::BatchNorm { channels: mid });
        }
        if self.use_se {
            v.push(Block::Se {
                channels: mid,
                reduction: self.se_reduction,
            });
        }
        v.push(Block::Ghost(self.ghost(mid, self.out_channels, false)));
        v
    }

    fn shortcut_blocks(&self) -> Vec<Block> {
        if self.identity_shortcut() {
            return vec![];
        }
        vec![
            Block::Depthwise {
                channels: self.in_channels,
                multiplier: 1,
                kernel: self.dims.cube(self.dw_kernel),
                stride: self.dims.stride(self.stride),
                bias: false,
            },
            Block::BatchNorm {
                channels: self.in_channels,
            },
            Block::Pointwise {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                bias: false,
            },
            Block::BatchNorm {
                channels: self.out_channels,
            },
        ]
    }

    pub(crate) fn blocks(&self) -> Vec<Block> {
        let mut v = self.main_blocks();
        v.extend(self.shortcut_blocks());
        v
    }

    pub(crate) fn count_macs(&self, input: Shape5) -> Result<(u64, Shape5)> {
        let (main, out) = count_macs(
            &Block::Seq {
                blocks: self.main_blocks(),
            },
            input,
        )?;
        let (short, _) = count_macs(
            &Block::Seq {
                blocks: self.shortcut_blocks(),
            },
            input,
        )?;
        Ok((main + short, out))
    }
}

struct DwBn {
    conv: Conv,
    bn: BatchNorm,
}

impl DwBn {
    fn new(b: &mut Builder, name: &str, dims: Dims, channels: usize, k: usize, stride: usize) -> Self {
        DwBn {
            conv: Conv::new(
                b,
                &format!("{name}.conv"),
                ConvSpec::new(dims, channels, channels, k, stride).groups(channels),
            ),
            bn: BatchNorm::new(b, &format!("{name}.bn"), channels),
        }
    }

    fn forward(&self, s: &Session, x: Var) -> Var {
        self.bn.forward(s, self.conv.forward(s, x))
    }
}

struct Projection {
    dw: DwBn,
    pw: Conv,
    pw_bn: BatchNorm,
}

/// Ghost bottleneck. Stride 1: expand → [SE] → project, identity shortcut.
/// Stride 2: expand → strided depthwise → [SE] → project, with a strided
/// depthwise + pointwise shortcut.
pub struct GhostBottleneck {
    pub spec: BottleneckSpec,
    expand: GhostModule,
    downsample: Option<DwBn>,
    se: Option<SqueezeExcite>,
    project: GhostModule,
    shortcut: Option<Projection>,
}

impl GhostBottleneck {
    pub fn new(b: &mut Builder, name: &str, spec: BottleneckSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims;
        let mid = spec.expansion_channels;
        let expand = GhostModule::new(
            b,
            &format!("{name}.expand"),
            dims,
            spec.ghost(spec.in_channels, mid, true),
        )?;
        let downsample = (spec.stride == 2).then(|| DwBn::new(b, &format!("{name}.dw"), dims, mid, spec.dw_kernel, 2));
        let se = if spec.use_se {
            Some(SqueezeExcite::new(
                b,
                &format!("{name}.se"),
                dims,
                mid,
                spec.se_reduction,
            )?)
        } else {
            None
        };
        let project = GhostModule::new(
            b,
            &format!("{name}.project"),
            dims,
            spec.ghost(mid, spec.out_channels, false),
        )?;
        let shortcut = (!spec.identity_shortcut()).then(|| Projection {
            dw: DwBn::new(
                b,
                &format!("{name}.shortcut.dw"),
                dims,
                spec.in_channels,
                spec.dw_kernel,
                spec.stride,
            ),
            pw: Conv::new(
                b,
                &format!("{name}.shortcut.pw.conv"),
                ConvSpec::new(dims, spec.in_channels, spec.out_channels, 1, 1),
            ),
            pw_bn: BatchNorm::new(b, &format!("{name}.shortcut.pw.bn"), spec.out_channels),
        });
        Ok(GhostBottleneck {
            spec,
            expand,
            downsample,
            se,
            project,
            shortcut,
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let mut h = self.expand.forward(s, x);
        if let Some(dw) = &self.downsample {
            h = dw.forward(s, h);
        }
        if let Some(se) = &self.se {
            h = se.forward(s, h);
        }
        let h = self.project.forward(s, h);
        let skip = match &self.shortcut {
            None => x,
            Some(p) => {
                let d = p.dw.forward(s, x);
                p.pw_bn.forward(s, p.pw.forward(s, d))
            }
        };
        s.graph.add(h, skip)
    }

    pub fn block(&self) -> Block {
        Block::Bottleneck(self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::count_params;
    use crate::gradcheck::{check_param_gradients, jitter, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand5(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn ghost_split_is_intrinsic_first() {
        let spec = Ghost3DSpec::new(Dims::Three, 16, 32);
        assert_eq!((spec.intrinsic(), spec.cheap()), (16, 16));
        let mut b = Builder::new(0);
        let g = GhostModule::new(&mut b, "g", Dims::Three, spec).unwrap();
        let store = b.finish();
        let s = Session::train(&store);
        let x = s.input(rand5(&[1, 16, 2, 3, 3], 1));
        let y = g.forward(&s, x);
        assert_eq!(s.graph.shape(y), vec![1, 32, 2, 3, 3]);
        // First 16 output channels are exactly the activated intrinsic maps.
        let p = s
            .graph
            .relu(g.primary_bn.as_ref().unwrap().forward(&s, g.primary.forward(&s, x)));
        assert_eq!(s.value(p), s.value(y).narrow(1, 0, 16));
    }

    #[test]
    fn odd_width_is_truncated() {
        let spec = Ghost3DSpec {
            ratio: 3,
            ..Ghost3DSpec::new(Dims::Two, 4, 7)
        };
        assert_eq!((spec.intrinsic(), spec.cheap()), (3, 6));
        let mut b = Builder::new(0);
        let g = GhostModule::new(&mut b, "g", Dims::Two, spec).unwrap();
        let store = b.finish();
        assert_eq!(store.num_learnable() as u64, count_params(&g.block()));
        let s = Session::train(&store);
        let y = g.forward(&s, s.input(rand5(&[1, 4, 5, 5], 2)));
        assert_eq!(s.graph.shape(y), vec![1, 7, 5, 5]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut b = Builder::new(3);
        let g = GhostModule::new(&mut b, "g", Dims::Three, Ghost3DSpec::new(Dims::Three, 4, 8)).unwrap();
        let store = b.finish();
        for s in [Session::train(&store), Session::eval(&store)] {
            let y = g.forward(&s, s.input(Tensor::zeros(&[1, 4, 2, 2, 2])));
            assert!(s.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn delta_cheap_kernel_copies_intrinsic_maps() {
        let spec = Ghost3DSpec {
            bn: false,
            ..Ghost3DSpec::new(Dims::Three, 3, 8)
        };
        let mut b = Builder::new(4);
        let g = GhostModule::new(&mut b, "g", Dims::Three, spec).unwrap();
        let mut store = b.finish();
        let cheap = g.cheap.as_ref().unwrap().weight;
        let w = store.get_mut(cheap);
        w.data_mut().fill(0.0);
        for c in 0..4 {
            w.set(&[c, 0, 1, 1, 1], 1.0);
        }
        let s = Session::eval(&store);
        let y = s.value(g.forward(&s, s.input(rand5(&[2, 3, 3, 4, 4], 5))));
        assert_eq!(y.narrow(1, 0, 4), y.narrow(1, 4, 4));
    }

    /// Direct evaluation of pool → FC → ReLU → FC → hard-sigmoid → scale.
    #[test]
    fn se_matches_loop_oracle() {
        let mut b = Builder::new(6);
        let se = SqueezeExcite::new(&mut b, "se", Dims::Three, 4, 2).unwrap();
        let mut store = b.finish();
        let w1 = Tensor::from_vec(&[2, 4, 1, 1, 1], vec![0.5, -1.0, 0.25, 2.0, -0.5, 0.75, 1.5, -2.0]).unwrap();
        let b1 = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let w2 = Tensor::from_vec(&[4, 2, 1, 1, 1], vec![1.0, -1.0, 2.0, 0.5, -3.0, 1.0, 0.25, 0.25]).unwrap();
        let b2 = Tensor::from_vec(&[4], vec![0.0, 1.0, -0.5, 2.5]).unwrap();
        store.set("se.reduce.weight", w1.clone()).unwrap();
        store.set("se.reduce.bias", b1.clone()).unwrap();
        store.set("se.expand.weight", w2.clone()).unwrap();
        store.set("se.expand.bias", b2.clone()).unwrap();
        let x = rand5(&[1, 4, 2, 3, 3], 7);
        let s = Session::eval(&store);
        let y = s.value(se.forward(&s, s.input(x.clone())));

        let pooled: Vec<f64> = (0..4).map(|c| x.narrow(1, c, 1).mean()).collect();
        let hidden: Vec<f64> = (0..2)
            .map(|j| ((0..4).map(|c| w1.data()[j * 4 + c] * pooled[c]).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..4)
            .map(|c| {
                let z = (0..2).map(|j| w2.data()[c * 2 + j] * hidden[j]).sum::<f64>() + b2.data()[c];
                (z + 3.0).clamp(0.0, 6.0) / 6.0
            })
            .collect();
        let expect = Tensor::from_fn(x.shape(), |i| x.get(i) * gate[i[1]]);
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn se_identity_gate_and_constant_descriptor() {
        let mut b = Builder::new(8);
        let se = SqueezeExcite::new(&mut b, "se", Dims::Three, 4, 4).unwrap();
        let mut store = b.finish();
        store.set("se.expand.weight", Tensor::zeros(&[4, 1, 1, 1, 1])).unwrap();
        store.set("se.expand.bias", Tensor::full(&[4], 3.0)).unwrap();
        let x = rand5(&[2, 4, 2, 2, 3], 9);
        let s = Session::eval(&store);
        assert_eq!(s.value(se.forward(&s, s.input(x.clone()))), x);

        let c = Tensor::from_fn(&[1, 4, 2, 2, 2], |i| i[1] as f64 * 0.5 - 0.3);
        let pooled = s.graph.global_avg_pool(s.input(c));
        let expect = Tensor::from_vec(&[1, 4, 1, 1, 1], vec![-0.3, 0.2, 0.7, 1.2]).unwrap();
        assert!(s.value(pooled).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut b = Builder::new(0);
        assert!(matches!(
            SqueezeExcite::new(&mut b, "se", Dims::Three, 6, 4),
            Err(Error::ReductionDivisibility { .. })
        ));
    }

    #[test]
    fn stride2_halves_every_axis() {
        let mut b = Builder::new(10);
        let blk = GhostBottleneck::new(&mut b, "b", BottleneckSpec::new(Dims::Three, 16, 32, 24, 2)).unwrap();
        let store = b.finish();
        assert_eq!(store.num_learnable() as u64, count_params(&blk.block()));
        let s = Session::train(&store);
        let y = blk.forward(&s, s.input(rand5(&[1, 16, 8, 16, 16], 11)));
        assert_eq!(s.graph.shape(y), vec![1, 24, 4, 8, 8]);
    }

    #[test]
    fn stride1_with_zero_weights_is_identity() {
        let mut b = Builder::new(12);
        let blk = GhostBottleneck::new(&mut b, "b", BottleneckSpec::new(Dims::Three, 8, 16, 8, 1)).unwrap();
        let mut store = b.finish();
        let ids: Vec<_> = store.learnable_ids().collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            if name.ends_with(".weight") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let x = rand5(&[1, 8, 2, 4, 4], 13);
        for s in [Session::train(&store), Session::eval(&store)] {
            let y = s.value(blk.forward(&s, s.input(x.clone())));
            assert_eq!(y, x);
        }
    }

    #[test]
    fn stride1_width_change_needs_projection() {
        let mut b = Builder::new(0);
        let spec = BottleneckSpec::new(Dims::Three, 8, 16, 12, 1);
        assert!(GhostBottleneck::new(&mut b, "b", spec).is_err());
        let spec = BottleneckSpec {
            project_shortcut: true,
            ..spec
        };
        assert!(GhostBottleneck::new(&mut b, "b", spec).is_ok());
        assert!(BottleneckSpec::new(Dims::Three, 8, 16, 8, 3).validate().is_err());
    }

    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        for (stride, seed) in [(1, 14), (2, 15)] {
            let mut b = Builder::new(seed);
            let blk = GhostBottleneck::new(&mut b, "b", BottleneckSpec::new(Dims::Three, 4, 8, 4, stride)).unwrap();
            let mut store = b.finish();
            // Fresh BN (beta = 0) with one sample makes pooled SE inputs
            // exactly zero, which sits on the ReLU kink.
            jitter(&mut store, 0.1, seed);
            let x = rand5(&[1, 4, 3, 4, 4], seed + 100);
            let report = check_param_gradients(&store, &GradCheckConfig::default(), |s| {
                let y = blk.forward(s, s.input(x.clone()));
                let probe = rand5(&s.graph.shape(y), 99);
                s.graph.weighted_sum(y, &probe)
            });
            assert!(report.passed(), "stride {stride}: {report}");
        }
    }
}
