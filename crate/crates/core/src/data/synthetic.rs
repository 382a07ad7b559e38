//! Random-dot stereograms with known disparity.
//!
//! The right image is uniform noise. Each left pixel copies the right pixel
//! `d(y, x)` columns to its left. Pixels whose match falls outside the frame
//! or is hidden behind a nearer surface (a larger disparity landing on the
//! same right pixel) are marked invalid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::StereoSample;

/// Largest disparity the generator accepts for width `w`.
pub fn max_field_value(w: usize) -> usize {
    w / 8
}

/// `field` is `[h, w]` with integer values in `[0, w / 8]`.
pub fn make_random_dot_pair(h: usize, w: usize, field: &Tensor, seed: u64) -> Result<StereoSample> {
    if field.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "field {:?} is not {h}x{w}",
            field.shape()
        )));
    }
    let limit = max_field_value(w) as f64;
    if let Some(&bad) = field
        .data()
        .iter()
        .find(|&&d| !(0.0..=limit).contains(&d) || d.fract() != 0.0)
    {
        return Err(Error::FieldOutOfRange(format!(
            "disparity {bad} is not an integer in [0, {limit}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
    let mut left = Tensor::zeros(&[3, h, w]);
    let mut mask = vec![false; h * w];
    let disp = |y: usize, x: usize| field.data()[y * w + x] as usize;
    for y in 0..h {
        // Nearest surface seen by each right pixel.
        let mut nearest = vec![None::<usize>; w];
        for x in 0..w {
            let d = disp(y, x);
            if x >= d {
                let slot = &mut nearest[x - d];
                *slot = Some(slot.map_or(d, |o: usize| o.max(d)));
            }
        }
        for x in 0..w {
            let d = disp(y, x);
            if x >= d {
                for c in 0..3 {
                    left.set(&[c, y, x], right.get(&[c, y, x - d]));
                }
                mask[y * w + x] = nearest[x - d] == Some(d);
            } else {
                for c in 0..3 {
                    left.set(&[c, y, x], rng.random::<f64>());
                }
            }
        }
    }
    Ok(StereoSample {
        left,
        right,
        gt_disparity: Some(field.clone()),
        valid_mask: Some(mask),
    })
}

/// A fronto-parallel background with a nearer rectangle, integer valued in
/// `[1, w / 8]`.
pub fn layered_field(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = max_field_value(w).max(2);
    let bg = rng.random_range(1..top) as f64;
    let fg = rng.random_range(bg as usize + 1..=top) as f64;
    let (rh, rw) = (rng.random_range(h / 4..=h / 2), rng.random_range(w / 4..=w / 2));
    let (y0, x0) = (rng.random_range(0..=h - rh), rng.random_range(w / 8..=w - rw));
    Tensor::from_fn(&[h, w], |i| {
        if (y0..y0 + rh).contains(&i[0]) && (x0..x0 + rw).contains(&i[1]) {
            fg
        } else {
            bg
        }
    })
}

/// `count` independent layered pairs; pair `i` uses seed `seed + i`.
pub fn random_dot_dataset(h: usize, w: usize, count: usize, seed: u64) -> Result<Vec<StereoSample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            make_random_dot_pair(h, w, &layered_field(h, w, s), s ^ 0x5eed)
        })
        .collect()
}

/// Winner-take-all matcher over single-pixel squared differences; the
/// returned map holds the best `d ∈ [0, max_d]` per pixel (ties to the
/// smaller disparity).
pub fn ssd_match(left: &Tensor, right: &Tensor, max_d: usize) -> Tensor {
    let (h, w) = (left.dim(1), left.dim(2));
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i[0], i[1]);
        let mut best = (f64::INFINITY, 0usize);
        for d in 0..=max_d.min(x) {
            let cost: f64 = (0..3)
                .map(|c| (left.get(&[c, y, x]) - right.get(&[c, y, x - d])).powi(2))
                .sum();
            if cost < best.0 {
                best = (cost, d);
            }
        }
        best.1 as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_copies_right() {
        let s = make_random_dot_pair(4, 16, &Tensor::zeros(&[4, 16]), 1).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.valid_mask.unwrap().iter().all(|&v| v));
    }

    #[test]
    fn constant_field_shifts() {
        let s = make_random_dot_pair(3, 64, &Tensor::full(&[3, 64], 8.0), 2).unwrap();
        let mask = s.valid_mask.unwrap();
        for y in 0..3 {
            for x in 0..64 {
                assert_eq!(mask[y * 64 + x], x >= 8);
                if x >= 8 {
                    for c in 0..3 {
                        assert_eq!(s.left.get(&[c, y, x]), s.right.get(&[c, y, x - 8]));
                    }
                }
            }
        }
    }

    #[test]
    fn occluded_background_is_masked() {
        let field = Tensor::from_fn(&[1, 32], |i| if (10..20).contains(&i[1]) { 4.0 } else { 1.0 });
        let s = make_random_dot_pair(1, 32, &field, 3).unwrap();
        let mask = s.valid_mask.unwrap();
        // Background columns 7..10 land on right columns 6..9, also hit by
        // foreground columns 10..13.
        assert!(!mask[7] && !mask[8] && !mask[9]);
        assert!(mask[6] && mask[10]);
    }

    #[test]
    fn field_range_is_checked() {
        assert!(make_random_dot_pair(2, 16, &Tensor::full(&[2, 16], 3.0), 0).is_err());
        assert!(make_random_dot_pair(2, 16, &Tensor::full(&[2, 16], 1.5), 0).is_err());
    }

    #[test]
    fn layered_fields_are_in_range() {
        for seed in 0..20 {
            let f = layered_field(64, 96, seed);
            assert!(f.data().iter().all(|&d| (1.0..=12.0).contains(&d) && d.fract() == 0.0));
        }
    }
}
