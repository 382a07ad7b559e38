//! Dataset IO, synthetic data, batching and metrics.

pub mod datasets;
pub mod kitti;
pub mod metrics;
pub mod pfm;
pub mod synthetic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::StereoSample;

/// Per-channel image standardization, fitted on the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    /// Statistics over both images of every sample.
    pub fn fit(samples: &[StereoSample]) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for s in samples {
            for img in [&s.left, &s.right] {
                let hw = img.dim(1) * img.dim(2);
                for c in 0..3 {
                    for &v in &img.data()[c * hw..(c + 1) * hw] {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                n += hw;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n as f64);
        let mut std = [1.0; 3];
        for c in 0..3 {
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    /// `[3, H, W]` → standardized copy.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let hw = image.dim(1) * image.dim(2);
        let mut out = image.clone();
        for (c, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Top-left corner of a `ch × cw` window inside `h × w`.
pub fn crop_origin<R: Rng + ?Sized>(h: usize, w: usize, ch: usize, cw: usize, rng: &mut R) -> (usize, usize) {
    (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw))
}

fn crop_chw(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    Tensor::from_fn(&[t.dim(0), ch, cw], |i| t.get(&[i[0], y0 + i[1], x0 + i[2]]))
}

/// Crop left, right, ground truth and mask with one window.
pub fn crop_at(sample: &StereoSample, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    if y0 + ch > h || x0 + cw > w {
        return Err(Error::Shape(format!("crop {ch}x{cw} at ({y0}, {x0}) exceeds {h}x{w}")));
    }
    Ok(StereoSample {
        left: crop_chw(&sample.left, y0, x0, ch, cw),
        right: crop_chw(&sample.right, y0, x0, ch, cw),
        gt_disparity: sample
            .gt_disparity
            .as_ref()
            .map(|g| Tensor::from_fn(&[ch, cw], |i| g.get(&[y0 + i[0], x0 + i[1]]))),
        valid_mask: sample
            .valid_mask
            .as_ref()
            .map(|m| (0..ch * cw).map(|i| m[(y0 + i / cw) * w + x0 + i % cw]).collect()),
    })
}

/// Deterministic random crop for `seed`.
pub fn random_crop(sample: &StereoSample, ch: usize, cw: usize, seed: u64) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Shape(format!("crop {ch}x{cw} does not fit {h}x{w}")));
    }
    let (y0, x0) = crop_origin(h, w, ch, cw, &mut ChaCha8Rng::seed_from_u64(seed));
    crop_at(sample, y0, x0, ch, cw)
}

/// Stacked network inputs and supervision.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`, normalized.
    pub left: Tensor,
    pub right: Tensor,
    /// `[B, H, W]`; zero where absent.
    pub gt: Tensor,
    /// `B * H * W` validity flags.
    pub mask: Vec<bool>,
    pub ids: Vec<String>,
}

pub fn collate(samples: &[&StereoSample], ids: Vec<String>, norm: &Normalization) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut left = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut right = Vec::with_capacity(left.capacity());
    let mut gt = Vec::with_capacity(samples.len() * h * w);
    let mut mask = Vec::with_capacity(gt.capacity());
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {}x{}",
                s.height(),
                s.width()
            )));
        }
        left.extend_from_slice(norm.apply(&s.left).data());
        right.extend_from_slice(norm.apply(&s.right).data());
        match &s.gt_disparity {
            Some(g) => gt.extend_from_slice(g.data()),
            None => gt.extend(std::iter::repeat_n(0.0, h * w)),
        }
        match &s.valid_mask {
            Some(m) => mask.extend_from_slice(m),
            None => mask.extend(std::iter::repeat_n(false, h * w)),
        }
    }
    let b = samples.len();
    Ok(Batch {
        left: Tensor::from_vec(&[b, 3, h, w], left)?,
        right: Tensor::from_vec(&[b, 3, h, w], right)?,
        gt: Tensor::from_vec(&[b, h, w], gt)?,
        mask,
        ids,
    })
}

/// Pad `[C, H, W]` on the bottom and right by edge replication so both
/// extents are multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Tensor {
    let (h, w) = (image.dim(1), image.dim(2));
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    Tensor::from_fn(&[image.dim(0), ph, pw], |i| {
        image.get(&[i[0], i[1].min(h - 1), i[2].min(w - 1)])
    })
}

/// Top-left `h × w` block of an `[H', W']` map.
pub fn crop_map(map: &Tensor, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| map.get(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> StereoSample {
        let mut s = StereoSample::new(
            Tensor::from_fn(&[3, h, w], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64),
            Tensor::from_fn(&[3, h, w], |i| -((i[0] * 100 + i[1] * 10 + i[2]) as f64)),
        )
        .with_gt(Tensor::from_fn(&[h, w], |i| (i[0] * w + i[1]) as f64));
        s.valid_mask = Some((0..h * w).map(|i| i % 3 != 0).collect());
        s
    }

    #[test]
    fn full_crop_is_identity() {
        let s = sample(4, 6);
        assert_eq!(random_crop(&s, 4, 6, 9).unwrap(), s);
    }

    #[test]
    fn crop_keeps_alignment() {
        let s = sample(6, 8);
        let c = random_crop(&s, 3, 4, 5).unwrap();
        let gt = c.gt_disparity.as_ref().unwrap();
        let y0 = (gt.get(&[0, 0]) as usize) / 8;
        let x0 = (gt.get(&[0, 0]) as usize) % 8;
        for y in 0..3 {
            for x in 0..4 {
                let src = (y0 + y) * 8 + x0 + x;
                assert_eq!(c.valid_mask.as_ref().unwrap()[y * 4 + x], !src.is_multiple_of(3));
                assert_eq!(c.left.get(&[2, y, x]), s.left.get(&[2, y0 + y, x0 + x]));
                assert_eq!(c.right.get(&[1, y, x]), s.right.get(&[1, y0 + y, x0 + x]));
            }
        }
        assert!(random_crop(&s, 7, 4, 0).is_err());
    }

    #[test]
    fn normalization_standardizes() {
        let s = sample(4, 6);
        let n = Normalization::fit(std::slice::from_ref(&s));
        let a = n.apply(&s.left);
        let b = n.apply(&s.right);
        let hw = 24;
        for c in 0..3 {
            let vals: Vec<f64> = a.data()[c * hw..(c + 1) * hw]
                .iter()
                .chain(&b.data()[c * hw..(c + 1) * hw])
                .copied()
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn padding_round_trip() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i[0] + i[1] * 7 + i[2]) as f64);
        let p = pad_to_multiple(&img, 4);
        assert_eq!(p.shape(), &[3, 8, 8]);
        assert_eq!(p.get(&[1, 7, 7]), img.get(&[1, 4, 6]));
        assert_eq!(
            crop_map(&p.narrow(0, 0, 1).reshape(&[8, 8]).unwrap(), 5, 7),
            img.narrow(0, 0, 1).reshape(&[5, 7]).unwrap()
        );
    }

    #[test]
    fn collate_stacks() {
        let s = sample(2, 3);
        let b = collate(&[&s, &s], vec!["a".into(), "b".into()], &Normalization::default()).unwrap();
        assert_eq!(b.left.shape(), &[2, 3, 2, 3]);
        assert_eq!(b.gt.shape(), &[2, 2, 3]);
        assert_eq!(b.mask.len(), 12);
    }
}
