//! Separable image down-scaling with MATLAB-style antialiasing.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Taps};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// Keys cubic convolution with `a = -0.5`.
    Bicubic,
    Box,
    /// Triangle kernel.
    Bilinear,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Bicubic => "bicubic",
            KernelKind::Box => "box",
            KernelKind::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(KernelKind::Bicubic),
            "box" => Ok(KernelKind::Box),
            "bilinear" => Ok(KernelKind::Bilinear),
            other => Err(Error::Config(format!("unknown kernel '{other}' (expected bicubic, box or bilinear)"))),
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            KernelKind::Bicubic => cubic(x),
            KernelKind::Box => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::Bilinear => (1.0 - x.abs()).max(0.0),
        }
    }

    fn support(self) -> f64 {
        match self {
            KernelKind::Bicubic => 4.0,
            KernelKind::Box => 1.0,
            KernelKind::Bilinear => 2.0,
        }
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownscaleKernel {
    pub kind: KernelKind,
    pub factor: usize,
    pub antialias: bool,
}

impl DownscaleKernel {
    pub fn bicubic(factor: usize) -> Self {
        DownscaleKernel { kind: KernelKind::Bicubic, factor, antialias: true }
    }

    pub fn new(kind: KernelKind, factor: usize, antialias: bool) -> Self {
        DownscaleKernel { kind, factor, antialias }
    }

    /// Sampling weights along one axis, folded onto valid indices by
    /// symmetric reflection and normalized to sum to one.
    pub fn taps(&self, in_len: usize) -> Taps {
        let out_len = in_len / self.factor;
        let scale = 1.0 / self.factor as f64;
        let (kscale, width) =
            if self.antialias { (scale, self.kind.support() / scale) } else { (1.0, self.kind.support()) };
        let count = width.ceil() as i64 + 2;
        (1..=out_len)
            .map(|i| {
                let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
                let left = (u - width / 2.0).floor() as i64;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for j in 0..count {
                    let idx = left + j;
                    let w = kscale * self.kind.eval(kscale * (u - idx as f64));
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let src = reflect(idx - 1, in_len);
                    match taps.iter_mut().find(|(s, _)| *s == src) {
                        Some(t) => t.1 += w,
                        None => taps.push((src, w)),
                    }
                }
                taps.iter_mut().for_each(|t| t.1 /= total);
                taps
            })
            .collect()
    }
}

/// Maps any integer index into `0..n` by mirroring about the borders with
/// the edge sample repeated.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Down-scales an NCHW image by the kernel's integer factor.
pub fn downscale(y: &Tensor, kernel: &DownscaleKernel) -> Result<Tensor> {
    let (_, _, h, w) = y.dims4()?;
    let f = kernel.factor;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible by factor {f}")));
    }
    if f == 1 {
        return Ok(y.clone());
    }
    kernels::resample(y, &kernel.taps(h), &kernel.taps(w))
}

/// Nearest-neighbour up-scaling by an integer factor.
pub fn upscale_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                out.push(plane[(i / factor) * w + j / factor]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for kind in [KernelKind::Bicubic, KernelKind::Box, KernelKind::Bilinear] {
            for factor in [2, 4, 8] {
                for aa in [true, false] {
                    for taps in DownscaleKernel::new(kind, factor, aa).taps(32) {
                        let s: f64 = taps.iter().map(|t| t.1).sum();
                        assert!((s - 1.0).abs() < 1e-12);
                        assert!(taps.iter().all(|t| t.0 < 32));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_preserved() {
        let y = Tensor::full(&[1, 3, 16, 16], 0.37);
        for kind in [KernelKind::Bicubic, KernelKind::Box, KernelKind::Bilinear] {
            let x = downscale(&y, &DownscaleKernel::new(kind, 4, true)).unwrap();
            assert_eq!(x.shape(), &[1, 3, 4, 4]);
            assert!(x.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
    }

    #[test]
    fn box_is_block_mean() {
        let y = Tensor::new(vec![1, 1, 2, 2], vec![1., 3., 5., 7.]).unwrap();
        let x = downscale(&y, &DownscaleKernel::new(KernelKind::Box, 2, true)).unwrap();
        assert_eq!(x.data(), &[4.0]);
    }

    #[test]
    fn indivisible_rejected() {
        let y = Tensor::zeros(&[1, 1, 6, 8]);
        assert!(matches!(downscale(&y, &DownscaleKernel::bicubic(4)), Err(Error::Config(_))));
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn reflection() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
