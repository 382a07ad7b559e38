//! The full stereo network.

use crate::accounting::{shape2d, LayerRecord};
use crate::aggregation::Hourglass;
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::cost_volume::CostVolumeStage;
use crate::error::{Error, Result};
use crate::features::{image_shape, FeatureExtractor};
use crate::nn::{Builder, ParamStore, Session};
use crate::regression::{convex_upsample, topk_disparity, UpsampleHead};
use crate::tensor::Tensor;

pub struct GhostStereo {
    pub config: ModelConfig,
    pub features: FeatureExtractor,
    pub cost: CostVolumeStage,
    pub hourglass: Hourglass,
    pub head: UpsampleHead,
}

/// Both supervised outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[B, H/4, W/4]` in quarter-resolution pixels.
    pub quarter: Var,
    /// `[B, H, W]` in full-resolution pixels.
    pub full: Var,
}

impl GhostStereo {
    /// Build the network and its freshly initialised parameters, seeded by
    /// `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut b = Builder::new(config.seed);
        let features = FeatureExtractor::new(&mut b, config)?;
        let cost = CostVolumeStage::new(&mut b, config)?;
        let hourglass = Hourglass::new(&mut b, config)?;
        let head = UpsampleHead::new(&mut b, config);
        let model = GhostStereo {
            config: config.clone(),
            features,
            cost,
            hourglass,
            head,
        };
        Ok((model, b.finish()))
    }

    /// `left` and `right` are `[B, 3, H, W]` normalized images with `H` and
    /// `W` multiples of 32.
    pub fn forward(&self, s: &Session, left: Var, right: Var) -> Result<Prediction> {
        let (ls, rs) = (s.graph.shape(left), s.graph.shape(right));
        if ls != rs {
            return Err(Error::ShapeMismatch(format!("left {ls:?} and right {rs:?} differ")));
        }
        let fl = self.features.forward(s, left)?;
        let fr = self.features.forward(s, right)?;
        let volume = self.cost.forward(s, fl.fused, fr.fused)?;
        let scores = self.hourglass.forward(s, volume, &fl.context())?;
        let quarter = topk_disparity(s, scores, self.config.topk)?;
        let weights = self.head.forward(s, fl.fused, fl.bypass)?;
        let full = convex_upsample(s, quarter, weights)?;
        Ok(Prediction { quarter, full })
    }

    /// Inference on plain tensors with running batch-norm statistics.
    /// Returns the quarter and full resolution maps.
    pub fn predict(&self, store: &ParamStore, left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = Session::eval(store);
        let p = self.forward(&s, s.input(left.clone()), s.input(right.clone()))?;
        Ok((s.value(p.quarter), s.value(p.full)))
    }

    /// Every parameterised layer with its input shape for a `batch` of
    /// `h × w` pairs. Layers that run on both images are listed once per
    /// image so that MAC totals cover the whole forward pass; parameter
    /// totals should be taken from [`GhostStereo::describe_unique`].
    pub fn describe(&self, batch: usize, h: usize, w: usize) -> Result<Vec<LayerRecord>> {
        let mut rec = self.features.describe(image_shape(batch, h, w))?;
        let right: Vec<LayerRecord> = rec
            .iter()
            .map(|r| LayerRecord {
                name: format!("right.{}", r.name),
                ..r.clone()
            })
            .collect();
        for r in &mut rec {
            r.name = format!("left.{}", r.name);
        }
        rec.extend(right);
        rec.extend(self.tail(batch, h, w)?);
        Ok(rec)
    }

    /// Like [`GhostStereo::describe`] with the shared extractor listed once.
    pub fn describe_unique(&self, batch: usize, h: usize, w: usize) -> Result<Vec<LayerRecord>> {
        let mut rec = self.features.describe(image_shape(batch, h, w))?;
        rec.extend(self.tail(batch, h, w)?);
        Ok(rec)
    }

    fn tail(&self, batch: usize, h: usize, w: usize) -> Result<Vec<LayerRecord>> {
        let cfg = &self.config;
        let (hq, wq) = (h / 4, w / 4);
        let fc = cfg.feature_channels;
        let mut rec = self.cost.describe(shape2d(batch, cfg.fused_channels, hq, wq))?;
        let volume = [batch, cfg.num_groups, cfg.disparity_levels(), hq, wq];
        let context = [
            shape2d(batch, fc[1], h / 8, w / 8),
            shape2d(batch, fc[2], h / 16, w / 16),
            shape2d(batch, fc[3], h / 32, w / 32),
        ];
        rec.extend(self.hourglass.describe(volume, context)?);
        rec.extend(
            self.head
                .describe(shape2d(batch, cfg.fused_channels + cfg.bypass_channels, hq, wq))?,
        );
        Ok(rec)
    }
}
