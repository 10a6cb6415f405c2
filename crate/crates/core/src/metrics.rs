//! PSNR and SSIM on RGB frames.
//!
//! Frames are converted from `[-1, 1]` to `[0, 1]` before scoring, so the
//! peak signal is 1. Both metrics average over the three channels.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::Frame;

/// PSNR reported for identical frames (and the ceiling for near-identical ones).
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "cannot compare {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

#[inline]
fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) * 0.5
}

/// Mean squared error on `[0, 1]` data.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.pixels().len() as f64;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels().iter())
        .map(|(&x, &y)| {
            let d = to_unit(x) - to_unit(y);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Converts an MSE on `[0, 1]` data to decibels, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter over valid window positions only.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| kernel[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| kernel[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

fn channel(px: &Array3<f32>, c: usize) -> Array2<f64> {
    let (h, w, _) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| to_unit(px[[y, x, c]]))
}

/// Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::FrameTooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel(a.pixels(), c);
        let y = channel(b.pixels(), c);
        let mu_x = filter_valid(&x, &kernel);
        let mu_y = filter_valid(&y, &kernel);
        let xx = filter_valid(&(&x * &x), &kernel);
        let yy = filter_valid(&(&y * &y), &kernel);
        let xy = filter_valid(&(&x * &y), &kernel);
        let mut sum = 0.0;
        for idx in 0..mu_x.len() {
            let (mx, my) = (mu_x.as_slice().unwrap()[idx], mu_y.as_slice().unwrap()[idx]);
            let var_x = xx.as_slice().unwrap()[idx] - mx * mx;
            let var_y = yy.as_slice().unwrap()[idx] - my * my;
            let cov = xy.as_slice().unwrap()[idx] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
            sum += num / den;
        }
        total += sum / mu_x.len() as f64;
    }
    Ok(total / 3.0)
}
