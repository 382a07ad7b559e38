//! Group-wise correlation volume and its context enhancement.
//!
//! The volume correlates group-normalized left and right features at every
//! candidate disparity. The enhancement stage preprocesses it with a
//! 3×3×3 convolution, multiplies every disparity plane by a per-group
//! attention map computed from the left features, and post-processes the
//! result with a 1×5×5 convolution.

use crate::accounting::{count_macs, shape2d, LayerRecord, Shape5};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, ConvBn, ConvSpec, Dims, Session};

const MODULE: &str = "cost_volume";

/// Added to each group norm before dividing.
pub const GROUP_NORM_EPS: f64 = 1e-6;

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::GroupDivisibility { channels, groups });
    }
    Ok(())
}

/// `[B, G, levels, H, W]` volume of `(G/C) <l_g(y,x), r_g(y,x-d)>` over
/// raw (unnormalized) features, zero where `x < d`.
pub fn correlate(s: &Session, left: Var, right: Var, groups: usize, levels: usize) -> Result<Var> {
    let (ls, rs) = (s.graph.shape(left), s.graph.shape(right));
    if ls != rs || ls.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "features {ls:?} and {rs:?} must be equal [B, C, H, W]"
        )));
    }
    check_groups(ls[1], groups)?;
    Ok(s.graph.group_correlation(left, right, groups, levels))
}

/// Group-wise correlation of L2-normalized feature groups.
pub fn build_gwc_volume(s: &Session, left: Var, right: Var, groups: usize, levels: usize) -> Result<Var> {
    check_groups(s.graph.shape(left)[1], groups)?;
    let l = s.graph.group_l2_normalize(left, groups, GROUP_NORM_EPS);
    let r = s.graph.group_l2_normalize(right, groups, GROUP_NORM_EPS);
    correlate(s, l, r, groups, levels)
}

/// Multiply every disparity plane of `[B, G, D, H, W]` by a `[B, G, H, W]`
/// map.
pub fn attention_fusion(s: &Session, volume: Var, attention: Var) -> Result<Var> {
    let (v, a) = (s.graph.shape(volume), s.graph.shape(attention));
    if v.len() != 5 || a.len() != 4 || v[..2] != a[..2] || v[3..] != a[2..] {
        return Err(Error::ShapeMismatch(format!(
            "attention {a:?} does not fit volume {v:?}"
        )));
    }
    let a5 = s.graph.reshape(attention, &[a[0], a[1], 1, a[2], a[3]]);
    Ok(s.graph.mul(volume, a5))
}

pub struct CostVolumeStage {
    pub groups: usize,
    pub levels: usize,
    pre: ConvBn,
    /// Present only when the enhancement is enabled.
    enhancement: Option<Enhancement>,
}

pub struct Enhancement {
    /// Left features → `groups` channels; the second layer has a bias and
    /// no normalization or activation.
    pub attention: [ConvBn; 2],
    pub post: ConvBn,
}

impl CostVolumeStage {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let name = "cost";
        let g = cfg.num_groups;
        let cf = cfg.fused_channels;
        check_groups(cf, g)?;
        let pre = ConvBn::new(
            b,
            &format!("{name}.pre"),
            ConvSpec::new(Dims::Three, g, g, 3, 1),
            Act::Relu,
        );
        let enhancement = cfg.use_cve.then(|| Enhancement {
            attention: [
                ConvBn::new(
                    b,
                    &format!("{name}.attention0"),
                    ConvSpec::new(Dims::Two, cf, cf / 2, 3, 1),
                    Act::Relu,
                ),
                ConvBn::without_bn(
                    b,
                    &format!("{name}.attention1"),
                    ConvSpec::new(Dims::Two, cf / 2, g, 3, 1).with_bias(),
                    Act::Identity,
                ),
            ],
            post: ConvBn::new(
                b,
                &format!("{name}.post"),
                ConvSpec::new(Dims::Three, g, g, 3, 1).kernel([1, 5, 5]),
                Act::Relu,
            ),
        });
        Ok(CostVolumeStage {
            groups: g,
            levels: cfg.disparity_levels(),
            pre,
            enhancement,
        })
    }

    pub fn use_cve(&self) -> bool {
        self.enhancement.is_some()
    }

    pub fn enhancement(&self) -> Option<&Enhancement> {
        self.enhancement.as_ref()
    }

    /// Stage (a) only, or the full enhancement when enabled.
    pub fn enhance(&self, s: &Session, volume: Var, left: Var) -> Result<Var> {
        let v = s.graph.shape(volume);
        if v.len() != 5 || v[1] != self.groups {
            return Err(Error::ShapeMismatch(format!(
                "volume {v:?} must have {} channels",
                self.groups
            )));
        }
        let pre = self.pre.forward(s, volume);
        let Some(e) = &self.enhancement else {
            return Ok(pre);
        };
        let att = e.attention_map(s, left);
        let fused = attention_fusion(s, pre, att)?;
        Ok(e.post.forward(s, fused))
    }

    pub fn forward(&self, s: &Session, left: Var, right: Var) -> Result<Var> {
        let volume = build_gwc_volume(s, left, right, self.groups, self.levels)?;
        self.enhance(s, volume, left)
    }

    /// `feature` is the fused feature shape `[B, C_f, 1, h, w]`.
    pub fn describe(&self, feature: Shape5) -> Result<Vec<LayerRecord>> {
        let [b, _, _, h, w] = feature;
        let vol = [b, self.groups, self.levels, h, w];
        let mut rec = vec![LayerRecord::new(MODULE, "pre", self.pre.block(), vol)];
        if let Some(e) = &self.enhancement {
            let (_, mid) = count_macs(&e.attention[0].block(), feature)?;
            rec.push(LayerRecord::new(MODULE, "attention0", e.attention[0].block(), feature));
            rec.push(LayerRecord::new(MODULE, "attention1", e.attention[1].block(), mid));
            rec.push(LayerRecord::new(MODULE, "post", e.post.block(), vol));
        }
        Ok(rec)
    }
}

impl Enhancement {
    pub fn attention_map(&self, s: &Session, left: Var) -> Var {
        let h = self.attention[0].forward(s, left);
        self.attention[1].forward(s, h)
    }
}

pub fn feature_shape(batch: usize, channels: usize, h: usize, w: usize) -> Shape5 {
    shape2d(batch, channels, h, w)
}
