//! Mask accuracy, mask IoU and image PSNR.

use thiserror::Error;

use crate::mask::Mask;
use crate::raster::ColorImage;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Fraction of pixels where the masks agree.
pub fn mask_accuracy(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    same_dims((pred.width(), pred.height()), (gt.width(), gt.height()))?;
    let total = pred.bits().len();
    if total == 0 {
        return Ok(1.0);
    }
    let agree = pred.bits().iter().zip(gt.bits()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / total as f64)
}

/// Intersection over union; two empty masks score 1.0.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    same_dims((pred.width(), pred.height()), (gt.width(), gt.height()))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.bits().iter().zip(gt.bits()) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    if union == 0 {
        log::debug!("IoU of two empty masks defined as 1.0");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricError> {
    same_dims((a.width, a.height), (b.width, b.height))?;
    let n = a.pixels.len() * 3;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum();
    Ok(sum / n as f64)
}

/// `10 log10(max^2 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &ColorImage, b: &ColorImage, max_val: f64) -> Result<f64, MetricError> {
    let e = mse(a, b)?;
    Ok(psnr_from_mse(e, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}
