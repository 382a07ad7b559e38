//! Whole-image prediction and dataset evaluation shared by training,
//! evaluation and inference.

use crate::data::metrics::{evaluate, MetricReport};
use crate::data::{crop_map, pad_to_multiple, Normalization};
use crate::error::{Error, Result};
use crate::model::GhostStereo;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::types::StereoSample;

/// Spatial multiple required by the encoder.
pub const INPUT_MULTIPLE: usize = 32;

/// Full-resolution `[H, W]` disparity for a `[3, H, W]` pair of raw images.
/// Inputs are standardized, edge-padded to multiples of 32 and the output
/// is cropped back to the input size.
pub fn predict_disparity(
    model: &GhostStereo,
    store: &ParamStore,
    norm: &Normalization,
    left: &Tensor,
    right: &Tensor,
) -> Result<Tensor> {
    if left.rank() != 3 || left.dim(0) != 3 || left.shape() != right.shape() {
        return Err(Error::ShapeMismatch(format!(
            "stereo pair must be two [3, H, W] images, got {:?} and {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let (h, w) = (left.dim(1), left.dim(2));
    let prep = |img: &Tensor| -> Result<Tensor> {
        let padded = pad_to_multiple(&norm.apply(img), INPUT_MULTIPLE);
        let shape = [1, 3, padded.dim(1), padded.dim(2)];
        padded.reshape(&shape)
    };
    let (_, full) = model.predict(store, &prep(left)?, &prep(right)?)?;
    let (ph, pw) = (full.dim(1), full.dim(2));
    Ok(crop_map(&full.reshape(&[ph, pw])?, h, w))
}

/// A sample together with its optional foreground mask.
pub struct EvalItem<'a> {
    pub sample: &'a StereoSample,
    pub foreground: Option<&'a [bool]>,
}

/// Pixel-pooled metrics over every item (batch of one, running batch-norm
/// statistics). Foreground D1 is reported only when every item has a mask.
pub fn evaluate_dataset(
    model: &GhostStereo,
    store: &ParamStore,
    norm: &Normalization,
    items: &[EvalItem],
) -> Result<MetricReport> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut masks = Vec::new();
    let mut fg = Vec::new();
    let with_fg = !items.is_empty() && items.iter().all(|i| i.foreground.is_some());
    for item in items {
        let s = item.sample;
        let pred = predict_disparity(model, store, norm, &s.left, &s.right)?;
        let n = pred.numel();
        preds.extend_from_slice(pred.data());
        match (&s.gt_disparity, &s.valid_mask) {
            (Some(g), Some(m)) => {
                gts.extend_from_slice(g.data());
                masks.extend_from_slice(m);
            }
            (Some(g), None) => {
                gts.extend_from_slice(g.data());
                masks.extend(g.data().iter().map(|d| d.is_finite() && *d > 0.0));
            }
            _ => {
                gts.extend(std::iter::repeat_n(0.0, n));
                masks.extend(std::iter::repeat_n(false, n));
            }
        }
        if let (true, Some(f)) = (with_fg, item.foreground) {
            if f.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "foreground mask has {} entries for {n} pixels",
                    f.len()
                )));
            }
            fg.extend_from_slice(f);
        }
    }
    let n = preds.len();
    let (p, g) = (Tensor::from_vec(&[n], preds)?, Tensor::from_vec(&[n], gts)?);
    evaluate(&p, &g, &masks, with_fg.then_some(&fg[..]))
}
