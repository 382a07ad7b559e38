//! Disparity error metrics over valid pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Errors above both this many pixels and [`D1_RELATIVE`] of the ground
/// truth count as outliers.
pub const D1_ABSOLUTE: f64 = 3.0;
pub const D1_RELATIVE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe: f64,
    pub d1_all: f64,
    pub d1_bg: Option<f64>,
    pub d1_fg: Option<f64>,
    pub bad1: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub num_valid_pixels: usize,
}

fn check(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<()> {
    if pred.shape() != gt.shape() || mask.len() != gt.numel() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, ground truth {:?} and mask of {} entries disagree",
            pred.shape(),
            gt.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Absolute errors at selected pixels.
fn errors<'a>(pred: &'a Tensor, gt: &'a Tensor, mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| ((p - g).abs(), g))
}

fn percentage(pred: &Tensor, gt: &Tensor, mask: &[bool], outlier: impl Fn(f64, f64) -> bool) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut n, mut bad) = (0usize, 0usize);
    for (e, g) in errors(pred, gt, mask) {
        n += 1;
        bad += outlier(e, g) as usize;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Mean absolute error over the mask.
pub fn epe(pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for (e, _) in errors(pred, gt, mask) {
        n += 1;
        sum += e;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

pub fn is_d1_outlier(err: f64, gt: f64) -> bool {
    err > D1_ABSOLUTE && err > D1_RELATIVE * gt.abs()
}

/// Outlier percentage over `mask`, optionally restricted to `region`.
pub fn d1(pred: &Tensor, gt: &Tensor, mask: &[bool], region: Option<&[bool]>) -> Result<f64> {
    match region {
        None => percentage(pred, gt, mask, is_d1_outlier),
        Some(r) => {
            if r.len() != mask.len() {
                return Err(Error::ShapeMismatch("region mask length".into()));
            }
            let both: Vec<bool> = mask.iter().zip(r).map(|(&a, &b)| a && b).collect();
            percentage(pred, gt, &both, is_d1_outlier)
        }
    }
}

/// Percentage of valid pixels with error above `tau`.
pub fn bad_tau(pred: &Tensor, gt: &Tensor, mask: &[bool], tau: f64) -> Result<f64> {
    percentage(pred, gt, mask, |e, _| e > tau)
}

/// Full report. With a foreground mask, D1 is also split into foreground
/// and background; an empty split is reported as `None`.
pub fn evaluate(pred: &Tensor, gt: &Tensor, mask: &[bool], foreground: Option<&[bool]>) -> Result<MetricReport> {
    let split = |fg: bool| {
        foreground.and_then(|f| {
            let region: Vec<bool> = f.iter().map(|&v| v == fg).collect();
            d1(pred, gt, mask, Some(&region)).ok()
        })
    };
    Ok(MetricReport {
        epe: epe(pred, gt, mask)?,
        d1_all: d1(pred, gt, mask, None)?,
        d1_bg: split(false),
        d1_fg: split(true),
        bad1: bad_tau(pred, gt, mask, 1.0)?,
        bad2: bad_tau(pred, gt, mask, 2.0)?,
        bad3: bad_tau(pred, gt, mask, 3.0)?,
        num_valid_pixels: mask.iter().filter(|&&m| m).count(),
    })
}
