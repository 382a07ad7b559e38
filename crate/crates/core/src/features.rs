//! U-shaped Ghost feature extractor and the shallow bypass branch.
//!
//! The encoder is a stem convolution at 1/2 resolution followed by four
//! stages of 2D Ghost bottlenecks producing features at 1/4 … 1/32. Three
//! decoder blocks (transposed convolution, concatenated skip, fusing
//! convolution) bring the 1/32 map back to 1/4. The bypass branch is two
//! blocks of a stride-2 and a stride-1 convolution. Left and right images
//! share every weight.

use crate::accounting::{count_macs, shape2d, Block, LayerRecord, Shape5};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ghost::{BottleneckSpec, GhostBottleneck};
use crate::nn::{Act, BatchNorm, Builder, ConvBn, ConvSpec, ConvTranspose, Dims, Session};

const MODULE: &str = "feature_extraction";

pub struct FeatureBundle {
    /// 1/4, 1/8, 1/16, 1/32.
    pub encoder: [Var; 4],
    /// 1/16, 1/8, 1/4.
    pub decoder: [Var; 3],
    /// 1/4.
    pub bypass: Var,
    /// 1/4, `fused_channels` wide.
    pub fused: Var,
}

impl FeatureBundle {
    /// Context maps for the hourglass at 1/8, 1/16 and 1/32.
    pub fn context(&self) -> [Var; 3] {
        [self.decoder[1], self.decoder[0], self.encoder[3]]
    }
}

/// Transposed convolution (2× upsampling) → BN → ReLU.
pub struct UpBlock {
    pub deconv: ConvTranspose,
    pub bn: BatchNorm,
}

impl UpBlock {
    pub fn new(b: &mut Builder, name: &str, dims: Dims, cin: usize, cout: usize) -> Self {
        UpBlock {
            deconv: ConvTranspose::upsample2(b, &format!("{name}.deconv"), dims, cin, cout, 4),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let y = self.bn.forward(s, self.deconv.forward(s, x));
        s.graph.relu(y)
    }

    pub fn block(&self) -> Block {
        Block::Seq {
            blocks: vec![
                self.deconv.block(),
                Block::BatchNorm {
                    channels: self.bn.channels,
                },
            ],
        }
    }
}

struct DecoderBlock {
    up: UpBlock,
    merge: ConvBn,
}

pub struct FeatureExtractor {
    stem: ConvBn,
    stages: Vec<Vec<GhostBottleneck>>,
    decoder: Vec<DecoderBlock>,
    bypass: [ConvBn; 4],
    fuse: ConvBn,
    pub feature_channels: [usize; 4],
    pub fused_channels: usize,
    pub bypass_channels: usize,
}

impl FeatureExtractor {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let name = "features";
        let c = cfg.feature_channels;
        let stem = ConvBn::new(
            b,
            &format!("{name}.stem"),
            ConvSpec::new(Dims::Two, 3, cfg.stem_channels, 3, 2),
            Act::Relu,
        );
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (i, (&cout, &depth)) in c.iter().zip(&cfg.encoder_depths).enumerate() {
            let mut stage = Vec::new();
            for j in 0..depth {
                let stride = if j == 0 { 2 } else { 1 };
                let spec = BottleneckSpec {
                    use_se: cfg.use_se,
                    se_reduction: cfg.se_reduction,
                    ratio: cfg.ghost_ratio,
                    ..BottleneckSpec::new(Dims::Two, cin, cin * cfg.expansion, cout, stride)
                };
                stage.push(GhostBottleneck::new(b, &format!("{name}.stage{i}.{j}"), spec)?);
                cin = cout;
            }
            stages.push(stage);
        }
        let decoder = (0..3)
            .map(|i| {
                let (from, to) = (c[3 - i], c[2 - i]);
                let n = format!("{name}.decoder{i}");
                DecoderBlock {
                    up: UpBlock::new(b, &format!("{n}.up"), Dims::Two, from, to),
                    merge: ConvBn::new(
                        b,
                        &format!("{n}.merge"),
                        ConvSpec::new(Dims::Two, 2 * to, to, 3, 1),
                        Act::Relu,
                    ),
                }
            })
            .collect();
        let cb = cfg.bypass_channels;
        let conv = |b: &mut Builder, i: usize, cin: usize, stride: usize| {
            ConvBn::new(
                b,
                &format!("{name}.bypass{i}"),
                ConvSpec::new(Dims::Two, cin, cb, 3, stride),
                Act::Relu,
            )
        };
        let bypass = [
            conv(b, 0, 3, 2),
            conv(b, 1, cb, 1),
            conv(b, 2, cb, 2),
            conv(b, 3, cb, 1),
        ];
        // No activation: matching features keep their sign.
        let fuse = ConvBn::new(
            b,
            &format!("{name}.fuse"),
            ConvSpec::new(Dims::Two, c[0] + cb, cfg.fused_channels, 3, 1),
            Act::Identity,
        );
        Ok(FeatureExtractor {
            stem,
            stages,
            decoder,
            bypass,
            fuse,
            feature_channels: c,
            fused_channels: cfg.fused_channels,
            bypass_channels: cb,
        })
    }

    fn check_input(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("image batch must be [B, 3, H, W], got {shape:?}")));
        }
        if !shape[2].is_multiple_of(32) || !shape[3].is_multiple_of(32) || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "image height and width must be positive multiples of 32, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn encode(&self, s: &Session, image: Var) -> Result<[Var; 4]> {
        Self::check_input(&s.graph.shape(image))?;
        let mut x = self.stem.forward(s, image);
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(s, x);
            }
            out.push(x);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    pub fn decode(&self, s: &Session, enc: &[Var; 4]) -> [Var; 3] {
        let mut x = enc[3];
        let mut out = Vec::with_capacity(3);
        for (i, blk) in self.decoder.iter().enumerate() {
            let up = blk.up.forward(s, x);
            let cat = s.graph.cat(&[up, enc[2 - i]], 1);
            x = blk.merge.forward(s, cat);
            out.push(x);
        }
        [out[0], out[1], out[2]]
    }

    pub fn bypass(&self, s: &Session, image: Var) -> Result<Var> {
        Self::check_input(&s.graph.shape(image))?;
        Ok(self.bypass.iter().fold(image, |x, c| c.forward(s, x)))
    }

    pub fn fuse(&self, s: &Session, decoder_quarter: Var, bypass: Var) -> Result<Var> {
        let (a, b) = (s.graph.shape(decoder_quarter), s.graph.shape(bypass));
        if a[2..] != b[2..] || a[0] != b[0] {
            return Err(Error::ShapeMismatch(format!(
                "fuse inputs {a:?} and {b:?} differ spatially"
            )));
        }
        let cat = s.graph.cat(&[decoder_quarter, bypass], 1);
        Ok(self.fuse.forward(s, cat))
    }

    pub fn forward(&self, s: &Session, image: Var) -> Result<FeatureBundle> {
        let encoder = self.encode(s, image)?;
        let decoder = self.decode(s, &encoder);
        let bypass = self.bypass(s, image)?;
        let fused = self.fuse(s, decoder[2], bypass)?;
        Ok(FeatureBundle {
            encoder,
            decoder,
            bypass,
            fused,
        })
    }

    /// Layer inventory for one image of `input = [B, 3, 1, H, W]`.
    pub fn describe(&self, input: Shape5) -> Result<Vec<LayerRecord>> {
        let mut rec = Vec::new();
        let push = |rec: &mut Vec<LayerRecord>, name: String, block: Block, at: Shape5| -> Result<Shape5> {
            let (_, out) = count_macs(&block, at)?;
            rec.push(LayerRecord::new(MODULE, name, block, at));
            Ok(out)
        };
        let mut x = push(&mut rec, "stem".into(), self.stem.block(), input)?;
        let mut enc = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, blk) in stage.iter().enumerate() {
                x = push(&mut rec, format!("stage{i}.{j}"), blk.block(), x)?;
            }
            enc.push(x);
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            let up = push(&mut rec, format!("decoder{i}.up"), blk.up.block(), x)?;
            let skip = enc[2 - i];
            let cat = [up[0], up[1] + skip[1], up[2], up[3], up[4]];
            x = push(&mut rec, format!("decoder{i}.merge"), blk.merge.block(), cat)?;
        }
        let mut y = input;
        for (i, c) in self.bypass.iter().enumerate() {
            y = push(&mut rec, format!("bypass{i}"), c.block(), y)?;
        }
        let cat = [x[0], x[1] + y[1], x[2], x[3], x[4]];
        push(&mut rec, "fuse".into(), self.fuse.block(), cat)?;
        Ok(rec)
    }
}

/// `[B, 3, 1, H, W]` accounting shape for an image batch.
pub fn image_shape(batch: usize, h: usize, w: usize) -> Shape5 {
    shape2d(batch, 3, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::count_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (FeatureExtractor, crate::nn::ParamStore) {
        let mut b = Builder::new(0);
        let f = FeatureExtractor::new(&mut b, &ModelConfig::desk()).unwrap();
        (f, b.finish())
    }

    fn image(seed: u64) -> Tensor {
        Tensor::rand_uniform(&[1, 3, 64, 96], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn scale_pyramid_shapes() {
        let (f, store) = build();
        let s = Session::eval(&store);
        let out = f.forward(&s, s.input(image(1))).unwrap();
        let c = ModelConfig::desk().feature_channels;
        let shapes: Vec<_> = out.encoder.iter().map(|&v| s.graph.shape(v)).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, c[0], 16, 24],
                vec![1, c[1], 8, 12],
                vec![1, c[2], 4, 6],
                vec![1, c[3], 2, 3]
            ]
        );
        let dec: Vec<_> = out.decoder.iter().map(|&v| s.graph.shape(v)).collect();
        assert_eq!(
            dec,
            vec![vec![1, c[2], 4, 6], vec![1, c[1], 8, 12], vec![1, c[0], 16, 24]]
        );
        assert_eq!(s.graph.shape(out.bypass), vec![1, 16, 16, 24]);
        assert_eq!(s.graph.shape(out.fused), vec![1, 32, 16, 24]);
        assert!(s.value(out.fused).all_finite());
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let (f, store) = build();
        let s = Session::eval(&store);
        let x = s.input(Tensor::zeros(&[1, 3, 48, 64]));
        assert!(matches!(f.forward(&s, x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (f, store) = build();
        for s in [Session::train(&store), Session::eval(&store)] {
            let out = f.forward(&s, s.input(Tensor::zeros(&[1, 3, 32, 32]))).unwrap();
            for v in out.encoder.iter().chain(&out.decoder).chain([&out.bypass, &out.fused]) {
                assert!(s.value(*v).data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn deterministic_and_siamese() {
        let (f, store) = build();
        let (l, r) = (image(2), image(3));
        let run = |a: &Tensor, b: &Tensor| {
            let s = Session::eval(&store);
            let x = s.input(Tensor::cat(&[a, b], 0));
            s.value(f.forward(&s, x).unwrap().fused)
        };
        let lr = run(&l, &r);
        let rl = run(&r, &l);
        assert_eq!(lr, run(&l, &r));
        assert_eq!(lr.narrow(0, 0, 1), rl.narrow(0, 1, 1));
        assert_eq!(lr.narrow(0, 1, 1), rl.narrow(0, 0, 1));
        let (f2, store2) = build();
        let s = Session::eval(&store2);
        let single = s.value(f2.forward(&s, s.input(l.clone())).unwrap().fused);
        assert!(single.max_abs_diff(&lr.narrow(0, 0, 1)) < 1e-12);
    }

    #[test]
    fn inventory_matches_parameters() {
        let (f, store) = build();
        let rec = f.describe(image_shape(1, 64, 96)).unwrap();
        let total: u64 = rec.iter().map(|r| count_params(&r.block)).sum();
        assert_eq!(total, store.num_learnable() as u64);
    }
}
