//! Fidelity, consistency and diversity metrics on `[0, 1]` images.

use crate::conditioning::{downscale, DownscaleKernel};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub lr_psnr_db: f64,
    pub diversity_sigma: f64,
}

/// `10·log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Formats a metric value, writing infinities as `inf`.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// ITU-R BT.601 luma of each image in an NCHW batch (single-channel
/// images pass through).
pub fn luma(img: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = img.dims4()?;
    match c {
        1 => Ok(img.clone()),
        3 => {
            let plane = h * w;
            let mut out = Vec::with_capacity(b * plane);
            for item in img.data().chunks(3 * plane) {
                let (r, rest) = item.split_at(plane);
                let (g, bl) = rest.split_at(plane);
                out.extend((0..plane).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i]));
            }
            Tensor::new(vec![b, 1, h, w], out)
        }
        _ => shape_err(format!("luma needs 1 or 3 channels, got {c}")),
    }
}

/// Normalized 1-d Gaussian weights of length `SSIM_WINDOW`.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            tmp[i * ow + j] = (0..n).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * tmp[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local structural similarity of the luma channels, averaged over
/// the batch. Dynamic range is 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let (la, lb) = (luma(a)?, luma(b)?);
    let (batch, _, h, w) = la.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for n in 0..batch {
        let x = &la.data()[n * plane..(n + 1) * plane];
        let y = &lb.data()[n * plane..(n + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (mux, muy) = (mx[i], my[i]);
            let vx = sxx[i] - mux * mux;
            let vy = syy[i] - muy * muy;
            let cov = sxy[i] - mux * muy;
            acc += ((2.0 * mux * muy + c1) * (2.0 * cov + c2)) / ((mux * mux + muy * muy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / batch as f64)
}

/// PSNR between the down-scaled SR output and the LR input.
pub fn lr_psnr(y_sr: &Tensor, x_lr: &Tensor, kernel: &DownscaleKernel) -> Result<f64> {
    let down = downscale(y_sr, kernel)?;
    if down.shape() != x_lr.shape() {
        return shape_err(format!("down-scaled output {:?} does not match LR image {:?}", down.shape(), x_lr.shape()));
    }
    psnr(&down, x_lr, 1.0)
}

/// Mean per-pixel sample standard deviation (divisor `N - 1`) across
/// `samples`, on the 0–255 scale.
pub fn diversity_sigma(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    for s in &samples[1..] {
        samples[0].check_same_shape(s)?;
    }
    let n = samples.len() as f64;
    let len = samples[0].numel();
    let mut acc = 0.0;
    for p in 0..len {
        let pivot = samples[0].data()[p];
        let mean = samples.iter().map(|s| s.data()[p] - pivot).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.data()[p] - pivot - mean).powi(2)).sum::<f64>() / (n - 1.0);
        acc += var.sqrt();
    }
    Ok(255.0 * acc / len as f64)
}
