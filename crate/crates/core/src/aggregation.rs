//! Hourglass cost aggregation with context-geometry fusion.
//!
//! Three stride-2 blocks take the quarter-resolution volume down to 1/32
//! of the image (halving disparity too). Decoding runs from the deepest
//! level: gate the volume with context features of the same scale,
//! upsample with a transposed 3D convolution, add the encoder skip and
//! refine with a stride-1 block. A pointwise convolution reduces the
//! result to one score per disparity.

use crate::accounting::{count_macs, Block, LayerRecord, Shape5};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::UpBlock;
use crate::ghost::{BottleneckSpec, GhostBottleneck};
use crate::nn::{Act, Builder, Conv, ConvBn, ConvSpec, Dims, Session};

const MODULE: &str = "aggregation";

/// Context and geometry fusion: `σ(W_g * geom + U(W_c * ctx)) ⊙ geom`,
/// with 1×1×1 and 1×1 convolutions and `U` broadcasting over disparity.
pub struct Cgf {
    pub geometry: Conv,
    pub context: Conv,
    pub channels: usize,
    pub context_channels: usize,
}

impl Cgf {
    pub fn new(b: &mut Builder, name: &str, channels: usize, context_channels: usize) -> Self {
        Cgf {
            geometry: Conv::new(
                b,
                &format!("{name}.geometry"),
                ConvSpec::new(Dims::Three, channels, channels, 1, 1).with_bias(),
            ),
            context: Conv::new(
                b,
                &format!("{name}.context"),
                ConvSpec::new(Dims::Two, context_channels, channels, 1, 1).with_bias(),
            ),
            channels,
            context_channels,
        }
    }

    /// The pre-sigmoid attention logits.
    pub fn logits(&self, s: &Session, geometry: Var, context: Var) -> Result<Var> {
        let (g, c) = (s.graph.shape(geometry), s.graph.shape(context));
        if g.len() != 5 || c.len() != 4 || g[0] != c[0] || g[3..] != c[2..] {
            return Err(Error::ShapeMismatch(format!(
                "context {c:?} does not match geometry {g:?}"
            )));
        }
        if g[1] != self.channels || c[1] != self.context_channels {
            return Err(Error::ShapeMismatch(format!(
                "fusion expects {} geometry and {} context channels, got {g:?} and {c:?}",
                self.channels, self.context_channels
            )));
        }
        let ag = self.geometry.forward(s, geometry);
        let ac = self.context.forward(s, context);
        let ac = s.graph.reshape(ac, &[c[0], self.channels, 1, c[2], c[3]]);
        Ok(s.graph.add(ag, ac))
    }

    pub fn forward(&self, s: &Session, geometry: Var, context: Var) -> Result<Var> {
        let att = self.logits(s, geometry, context)?;
        let gate = s.graph.sigmoid(att);
        Ok(s.graph.mul(gate, geometry))
    }

    pub fn blocks(&self) -> (Block, Block) {
        (self.geometry.block(), self.context.block())
    }
}

/// One hourglass block: a Ghost bottleneck or a plain 3×3×3 convolution.
pub enum AggBlock {
    Ghost(Box<GhostBottleneck>),
    Dense(ConvBn),
}

impl AggBlock {
    fn new(b: &mut Builder, name: &str, cfg: &ModelConfig, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(if cfg.use_cva {
            let spec = BottleneckSpec {
                use_se: cfg.use_se,
                se_reduction: cfg.se_reduction,
                ratio: cfg.ghost_ratio,
                ..BottleneckSpec::new(Dims::Three, cin, cin * cfg.expansion, cout, stride)
            };
            AggBlock::Ghost(Box::new(GhostBottleneck::new(b, name, spec)?))
        } else {
            AggBlock::Dense(ConvBn::new(
                b,
                name,
                ConvSpec::new(Dims::Three, cin, cout, 3, stride),
                Act::Relu,
            ))
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        match self {
            AggBlock::Ghost(g) => g.forward(s, x),
            AggBlock::Dense(c) => c.forward(s, x),
        }
    }

    pub fn block(&self) -> Block {
        match self {
            AggBlock::Ghost(g) => g.block(),
            AggBlock::Dense(c) => c.block(),
        }
    }
}

struct DecoderLevel {
    fusion: Cgf,
    up: UpBlock,
    refine: AggBlock,
}

pub struct Hourglass {
    pub channels: [usize; 4],
    encoder: Vec<AggBlock>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl Hourglass {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let name = "agg";
        let ch = cfg.aggregation_channels;
        // Context widths at 1/8, 1/16, 1/32 (decoder, decoder, encoder).
        let fc = cfg.feature_channels;
        let ctx = [fc[1], fc[2], fc[3]];
        let encoder = (0..3)
            .map(|i| AggBlock::new(b, &format!("{name}.down{i}"), cfg, ch[i], ch[i + 1], 2))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::new();
        for lvl in (1..4).rev() {
            let n = format!("{name}.up{lvl}");
            decoder.push(DecoderLevel {
                fusion: Cgf::new(b, &format!("{n}.cgf"), ch[lvl], ctx[lvl - 1]),
                up: UpBlock::new(b, &format!("{n}.deconv"), Dims::Three, ch[lvl], ch[lvl - 1]),
                refine: AggBlock::new(b, &format!("{n}.refine"), cfg, ch[lvl - 1], ch[lvl - 1], 1)?,
            });
        }
        let head = Conv::new(b, &format!("{name}.head"), ConvSpec::new(Dims::Three, ch[0], 1, 1, 1));
        Ok(Hourglass {
            channels: ch,
            encoder,
            decoder,
            head,
        })
    }

    /// `volume` is `[B, G, D, h, w]`; `context` holds the 1/8, 1/16 and
    /// 1/32 feature maps. Returns scores `[B, D, h, w]`.
    pub fn forward(&self, s: &Session, volume: Var, context: &[Var; 3]) -> Result<Var> {
        let v = s.graph.shape(volume);
        if v.len() != 5 || v[1] != self.channels[0] {
            return Err(Error::ShapeMismatch(format!(
                "volume {v:?} must have {} channels",
                self.channels[0]
            )));
        }
        if v[2..].iter().any(|&n| n % 8 != 0) {
            return Err(Error::Shape(format!(
                "volume extents {:?} must be multiples of 8",
                &v[2..]
            )));
        }
        let mut levels = vec![volume];
        for blk in &self.encoder {
            let x = blk.forward(s, *levels.last().unwrap());
            levels.push(x);
        }
        let mut x = levels[3];
        for (i, dec) in self.decoder.iter().enumerate() {
            let lvl = 3 - i;
            x = dec.fusion.forward(s, x, context[lvl - 1])?;
            x = dec.up.forward(s, x);
            x = s.graph.add(x, levels[lvl - 1]);
            x = dec.refine.forward(s, x);
        }
        let y = self.head.forward(s, x);
        Ok(s.graph.reshape(y, &[v[0], v[2], v[3], v[4]]))
    }

    /// Inventory for a `[B, G, D, h, w]` volume; `context` holds the
    /// accounting shapes of the three context maps.
    pub fn describe(&self, volume: Shape5, context: [Shape5; 3]) -> Result<Vec<LayerRecord>> {
        let mut rec = Vec::new();
        let mut shapes = vec![volume];
        for (i, blk) in self.encoder.iter().enumerate() {
            let at = *shapes.last().unwrap();
            let (_, out) = count_macs(&blk.block(), at)?;
            rec.push(LayerRecord::new(MODULE, format!("down{i}"), blk.block(), at));
            shapes.push(out);
        }
        let mut x = shapes[3];
        for (i, dec) in self.decoder.iter().enumerate() {
            let lvl = 3 - i;
            let (g, c) = dec.fusion.blocks();
            rec.push(LayerRecord::new(MODULE, format!("up{lvl}.cgf.geometry"), g, x));
            rec.push(LayerRecord::new(
                MODULE,
                format!("up{lvl}.cgf.context"),
                c,
                context[lvl - 1],
            ));
            let (_, up) = count_macs(&dec.up.block(), x)?;
            rec.push(LayerRecord::new(MODULE, format!("up{lvl}.deconv"), dec.up.block(), x));
            rec.push(LayerRecord::new(
                MODULE,
                format!("up{lvl}.refine"),
                dec.refine.block(),
                up,
            ));
            x = up;
        }
        rec.push(LayerRecord::new(MODULE, "head", self.head.block(), x));
        Ok(rec)
    }

    /// Records for the three downsampling blocks only.
    pub fn describe_encoder(&self, volume: Shape5) -> Result<Vec<LayerRecord>> {
        let ctx = [[0; 5]; 3];
        Ok(self
            .describe(volume, ctx)?
            .into_iter()
            .filter(|r| r.name.starts_with("down"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::count_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn context(s: &Session, c: [usize; 4], h: usize, w: usize, seed: u64) -> [Var; 3] {
        [
            s.input(rnd(&[1, c[1], h / 2, w / 2], seed)),
            s.input(rnd(&[1, c[2], h / 4, w / 4], seed + 1)),
            s.input(rnd(&[1, c[3], h / 8, w / 8], seed + 2)),
        ]
    }

    #[test]
    fn zeroed_fusion_halves_geometry() {
        let mut b = Builder::new(0);
        let cgf = Cgf::new(&mut b, "cgf", 3, 2);
        let mut store = b.finish();
        for id in store.learnable_ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let s = Session::eval(&store);
        let g = rnd(&[1, 3, 2, 2, 3], 1);
        let y = s.value(
            cgf.forward(&s, s.input(g.clone()), s.input(rnd(&[1, 2, 2, 3], 2)))
                .unwrap(),
        );
        assert!(y.max_abs_diff(&g.scale(0.5)) < 1e-15);
    }

    #[test]
    fn shape_trace_and_round_trip() {
        for use_cva in [true, false] {
            let cfg = ModelConfig {
                use_cva,
                ..ModelConfig::desk()
            };
            let mut b = Builder::new(1);
            let hg = Hourglass::new(&mut b, &cfg).unwrap();
            let store = b.finish();
            let s = Session::train(&store);
            let v = s.input(rnd(&[1, 8, 8, 16, 24], 3));
            let ctx = context(&s, cfg.feature_channels, 16, 24, 4);
            let y = hg.forward(&s, v, &ctx).unwrap();
            assert_eq!(s.graph.shape(y), vec![1, 8, 16, 24]);
            assert!(s.value(y).all_finite());
            let rec = hg
                .describe(
                    [1, 8, 8, 16, 24],
                    [[1, 24, 1, 8, 12], [1, 32, 1, 4, 6], [1, 48, 1, 2, 3]],
                )
                .unwrap();
            let total: u64 = rec.iter().map(|r| count_params(&r.block)).sum();
            assert_eq!(total, store.num_learnable() as u64);
        }
    }

    #[test]
    fn encoder_levels_halve() {
        let mut b = Builder::new(2);
        let hg = Hourglass::new(&mut b, &ModelConfig::desk()).unwrap();
        let enc = hg.describe_encoder([1, 8, 48, 16, 24]).unwrap();
        let outs: Vec<Shape5> = enc.iter().map(|r| count_macs(&r.block, r.input).unwrap().1).collect();
        assert_eq!(outs, vec![[1, 16, 24, 8, 12], [1, 32, 12, 4, 6], [1, 48, 6, 2, 3]]);
    }

    #[test]
    fn zero_context_still_finite() {
        let cfg = ModelConfig::desk();
        let mut b = Builder::new(5);
        let hg = Hourglass::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::eval(&store);
        let c = cfg.feature_channels;
        let ctx = [
            s.input(Tensor::zeros(&[1, c[1], 4, 4])),
            s.input(Tensor::zeros(&[1, c[2], 2, 2])),
            s.input(Tensor::zeros(&[1, c[3], 1, 1])),
        ];
        let y = hg.forward(&s, s.input(rnd(&[1, 8, 8, 8, 8], 6)), &ctx).unwrap();
        assert_eq!(s.graph.shape(y), vec![1, 8, 8, 8]);
        assert!(s.value(y).all_finite());
    }

    #[test]
    fn context_mismatch_is_an_error() {
        let mut b = Builder::new(0);
        let cgf = Cgf::new(&mut b, "cgf", 3, 2);
        let store = b.finish();
        let s = Session::eval(&store);
        let g = s.input(Tensor::zeros(&[1, 3, 2, 2, 2]));
        assert!(cgf.forward(&s, g, s.input(Tensor::zeros(&[1, 2, 4, 4]))).is_err());
    }
}
