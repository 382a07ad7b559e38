//! Stereo samples and disparity maps.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rectified image pair with optional dense or sparse ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]`.
    pub left: Tensor,
    /// `[3, H, W]`.
    pub right: Tensor,
    /// `[H, W]` pixels.
    pub gt_disparity: Option<Tensor>,
    /// Row-major `H * W` validity flags.
    pub valid_mask: Option<Vec<bool>>,
}

impl StereoSample {
    pub fn new(left: Tensor, right: Tensor) -> Self {
        StereoSample {
            left,
            right,
            gt_disparity: None,
            valid_mask: None,
        }
    }

    pub fn with_gt(mut self, gt: Tensor) -> Self {
        self.gt_disparity = Some(gt);
        self
    }

    pub fn height(&self) -> usize {
        self.left.dim(1)
    }

    pub fn width(&self) -> usize {
        self.left.dim(2)
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v).count())
    }
}

/// Check shapes and finiteness and derive the validity mask: a pixel is
/// valid when its ground truth is finite and strictly inside
/// `(0, max_disparity)`. An existing mask is intersected, never widened,
/// so the operation is idempotent.
pub fn validate_sample(mut sample: StereoSample, config: &ModelConfig) -> Result<StereoSample> {
    let ls = sample.left.shape();
    if ls.len() != 3 || ls[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "left image must be [3, H, W], got {ls:?}"
        )));
    }
    if sample.right.shape() != ls {
        return Err(Error::ShapeMismatch(format!(
            "left {:?} and right {:?} differ",
            ls,
            sample.right.shape()
        )));
    }
    if !sample.left.all_finite() || !sample.right.all_finite() {
        return Err(Error::NonFiniteImage);
    }
    let (h, w) = (ls[1], ls[2]);
    if let Some(m) = &sample.valid_mask {
        if m.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} entries, image is {h}x{w}",
                m.len()
            )));
        }
    }
    let Some(gt) = &sample.gt_disparity else {
        return Ok(sample);
    };
    if gt.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {:?} does not match image {h}x{w}",
            gt.shape()
        )));
    }
    let limit = config.max_disparity as f64;
    let derived = gt.data().iter().map(|&d| d.is_finite() && d > 0.0 && d < limit);
    let mask = match sample.valid_mask.take() {
        Some(old) => old.into_iter().zip(derived).map(|(a, b)| a && b).collect(),
        None => derived.collect(),
    };
    sample.valid_mask = Some(mask);
    Ok(sample)
}

/// Disparity in pixels of the map's own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    /// `[H_s, W_s]`.
    pub values: Tensor,
    /// Downsampling factor relative to the input image (1 or 4).
    pub scale: usize,
}

impl DisparityMap {
    pub fn new(values: Tensor, scale: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "disparity map must be [H, W], got {:?}",
                values.shape()
            )));
        }
        if scale != 1 && scale != 4 {
            return Err(Error::Shape(format!("disparity scale must be 1 or 4, got {scale}")));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::FieldOutOfRange(
                "disparity values must be finite and non-negative".into(),
            ));
        }
        Ok(DisparityMap { values, scale })
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }
}
