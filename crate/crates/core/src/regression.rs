//! Disparity regression: top-k soft-argmax at quarter resolution and
//! learned convex upsampling to full resolution.

use crate::accounting::{count_macs, LayerRecord, Shape5};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, ConvBn, ConvSpec, Dims, Session};

const MODULE: &str = "regression";

/// Upsampling factor from the volume to the image.
pub const UPSAMPLE: usize = 4;

/// Neighbourhood size of the convex combination.
pub const NEIGHBORS: usize = 9;

/// `[B, D, h, w]` scores → `[B, h, w]` expected disparity over the `k`
/// best candidates, in volume units.
pub fn topk_disparity(s: &Session, volume: Var, k: usize) -> Result<Var> {
    let shape = s.graph.shape(volume);
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "score volume must be [B, D, h, w], got {shape:?}"
        )));
    }
    if k == 0 || k > shape[1] {
        return Err(Error::TopKOutOfRange { k, levels: shape[1] });
    }
    Ok(s.graph.topk_regression(volume, k))
}

/// Full-resolution disparity from a quarter map and `[B, 9, 4, 4, h, w]`
/// weights; values are scaled to full-resolution pixels.
pub fn convex_upsample(s: &Session, disp: Var, weights: Var) -> Result<Var> {
    let (d, w) = (s.graph.shape(disp), s.graph.shape(weights));
    if d.len() != 3 || w != [d[0], NEIGHBORS, UPSAMPLE, UPSAMPLE, d[1], d[2]] {
        return Err(Error::ShapeMismatch(format!(
            "weights {w:?} do not fit disparity {d:?}"
        )));
    }
    debug_assert!(
        {
            let v = s.graph.value(weights);
            !v.all_finite() || weights_normalized(&v, 1e-6)
        },
        "upsample weights are not normalized"
    );
    Ok(s.graph.convex_upsample(disp, weights, UPSAMPLE as f64))
}

/// Whether every 9-vector of `[B, 9, ...]` is a convex combination.
pub fn weights_normalized(w: &crate::Tensor, tol: f64) -> bool {
    let b = w.dim(0);
    let inner = w.numel() / (b * NEIGHBORS);
    (0..b).all(|bi| {
        (0..inner).all(|p| {
            let vals = (0..NEIGHBORS).map(|n| w.data()[(bi * NEIGHBORS + n) * inner + p]);
            let mut sum = 0.0;
            for v in vals {
                if !(-tol..=1.0 + tol).contains(&v) {
                    return false;
                }
                sum += v;
            }
            (sum - 1.0).abs() <= tol
        })
    })
}

/// Predicts convex upsampling weights from the fused left features and the
/// left bypass features.
pub struct UpsampleHead {
    hidden: ConvBn,
    out: ConvBn,
}

impl UpsampleHead {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let name = "regress";
        let cin = cfg.fused_channels + cfg.bypass_channels;
        let ch = cfg.upsample_head_channels;
        UpsampleHead {
            hidden: ConvBn::new(
                b,
                &format!("{name}.hidden"),
                ConvSpec::new(Dims::Two, cin, ch, 3, 1),
                Act::Relu,
            ),
            out: ConvBn::without_bn(
                b,
                &format!("{name}.out"),
                ConvSpec::new(Dims::Two, ch, NEIGHBORS * UPSAMPLE * UPSAMPLE, 1, 1).with_bias(),
                Act::Identity,
            ),
        }
    }

    /// `[B, 144, h, w]` raw logits.
    pub fn logits(&self, s: &Session, fused: Var, bypass: Var) -> Result<Var> {
        let (a, c) = (s.graph.shape(fused), s.graph.shape(bypass));
        if a.len() != 4 || c.len() != 4 || a[0] != c[0] || a[2..] != c[2..] {
            return Err(Error::ShapeMismatch(format!(
                "head inputs {a:?} and {c:?} differ spatially"
            )));
        }
        let x = s.graph.cat(&[fused, bypass], 1);
        Ok(self.out.forward(s, self.hidden.forward(s, x)))
    }

    pub fn forward(&self, s: &Session, fused: Var, bypass: Var) -> Result<Var> {
        let logits = self.logits(s, fused, bypass)?;
        Ok(normalize_logits(s, logits))
    }

    /// `head_input` is the concatenated input shape `[B, C_f + C_b, 1, h, w]`.
    pub fn describe(&self, head_input: Shape5) -> Result<Vec<LayerRecord>> {
        let (_, mid) = count_macs(&self.hidden.block(), head_input)?;
        Ok(vec![
            LayerRecord::new(MODULE, "upsample.hidden", self.hidden.block(), head_input),
            LayerRecord::new(MODULE, "upsample.out", self.out.block(), mid),
        ])
    }
}

/// `[B, 144, h, w]` logits → `[B, 9, 4, 4, h, w]` softmax weights.
pub fn normalize_logits(s: &Session, logits: Var) -> Var {
    let l = s.graph.shape(logits);
    let w = s
        .graph
        .reshape(logits, &[l[0], NEIGHBORS, UPSAMPLE, UPSAMPLE, l[2], l[3]]);
    s.graph.softmax(w, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        Tensor::rand_uniform(shape, -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn hand_example() {
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let v = s.input(Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 3.0, 2.0, 0.0]).unwrap());
        let d = s.value(topk_disparity(&s, v, 2).unwrap()).item();
        let w1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((d - (w1 + 2.0 * (1.0 - w1))).abs() < 1e-12);
        assert!((d - 1.26894).abs() < 1e-4);
    }

    #[test]
    fn k_out_of_range() {
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let v = s.input(Tensor::zeros(&[1, 4, 1, 1]));
        assert!(matches!(
            topk_disparity(&s, v, 5),
            Err(Error::TopKOutOfRange { k: 5, levels: 4 })
        ));
        assert!(topk_disparity(&s, v, 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let v = s.input(Tensor::from_vec(&[1, 4, 1, 1], vec![0.0, 5.0, 5.0, 5.0]).unwrap());
        assert_eq!(s.value(topk_disparity(&s, v, 1).unwrap()).item(), 1.0);
        let d2 = s.value(topk_disparity(&s, v, 2).unwrap()).item();
        assert!((d2 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn head_weights_are_convex() {
        let cfg = ModelConfig::desk();
        let mut b = Builder::new(0);
        let head = UpsampleHead::new(&mut b, &cfg);
        let store = b.finish();
        let s = Session::eval(&store);
        let f = s.input(rnd(&[1, cfg.fused_channels, 4, 6], 1, 1.0));
        let p = s.input(rnd(&[1, cfg.bypass_channels, 4, 6], 2, 1.0));
        let w = s.value(head.forward(&s, f, p).unwrap());
        assert_eq!(w.shape(), &[1, 9, 4, 4, 4, 6]);
        assert!(weights_normalized(&w, 1e-9));
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let w = s.value(normalize_logits(&s, s.input(Tensor::full(&[2, 144, 3, 2], 0.7))));
        assert!(w.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn constant_disparity_scales_by_four() {
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let d = s.input(Tensor::full(&[1, 3, 4], 2.5));
        let w = normalize_logits(&s, s.input(rnd(&[1, 144, 3, 4], 3, 2.0)));
        let up = s.value(convex_upsample(&s, d, w).unwrap());
        assert_eq!(up.shape(), &[1, 12, 16]);
        assert!(up.data().iter().all(|&v| (v - 10.0).abs() < 1e-12));
    }
}
