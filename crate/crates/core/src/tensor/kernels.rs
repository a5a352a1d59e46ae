//! Value-level kernels shared by the tape and by gradient-free code paths.

use super::Tensor;
use crate::error::{shape_err, Result};

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; `c` is row-major contiguous with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 2-d cross-correlation.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return shape_err(format!("conv2d: input has {cin} channels but weight expects {wcin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d: kernel {kh}x{kw} must be odd"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err("conv2d: kernel larger than padded input");
        }
        Ok(ConvGeom { batch, cin, h, w, cout, kh, kw, pad, oh: h + 2 * pad - kh + 1, ow: w + 2 * pad - kw + 1 })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `oj + kj - pad` is in range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.ow);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
    (lo, hi)
}

/// Writes the patch matrix of one batch item into columns `off..off + p`
/// of `cols`, whose rows have stride `ld`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64], ld: usize, off: usize) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.oh {
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    let ii = (oi + ki).wrapping_sub(g.pad);
                    if ii >= g.h {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = ii * g.w + lo + kj - g.pad;
                    out_row[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, off: usize, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + p];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.oh {
                    let ii = (oi + ki).wrapping_sub(g.pad);
                    if ii >= g.h {
                        continue;
                    }
                    let start = ii * g.w + lo + kj - g.pad;
                    let dst = &mut plane[start..start + hi - lo];
                    for (d, s) in dst.iter_mut().zip(&src[oi * g.ow + lo..oi * g.ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Patch matrix of the whole batch, shape `[cin·kh·kw, B·p]`.
fn batch_cols(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let ld = g.batch * p;
    let item = g.cin * g.h * g.w;
    let mut cols = vec![0.0; g.patch() * ld];
    for b in 0..g.batch {
        let xb = &x[b * item..(b + 1) * item];
        if g.is_pointwise() {
            for (c, plane) in xb.chunks(p).enumerate() {
                cols[c * ld + b * p..c * ld + (b + 1) * p].copy_from_slice(plane);
            }
        } else {
            im2col(g, xb, &mut cols, ld, b * p);
        }
    }
    cols
}

/// Stride-1 cross-correlation with symmetric zero padding.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return shape_err(format!("conv2d: bias shape {:?} != [{}]", b.shape(), g.cout));
        }
    }
    let p = g.oh * g.ow;
    let ld = g.batch * p;
    let cols = batch_cols(&g, input.data());
    let mut wide = vec![0.0; g.cout * ld];
    gemm(g.cout, g.patch(), ld, weight.data(), (g.patch() as isize, 1), &cols, (ld as isize, 1), 0.0, &mut wide);
    let mut out = vec![0.0; g.batch * g.cout * p];
    for b in 0..g.batch {
        for c in 0..g.cout {
            let add = bias.map_or(0.0, |t| t.data()[c]);
            let dst = &mut out[(b * g.cout + c) * p..(b * g.cout + c + 1) * p];
            let src = &wide[c * ld + b * p..c * ld + (b + 1) * p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + add;
            }
        }
    }
    Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out)
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Each requested gradient is returned only when its flag is set.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    pad: usize,
    dy: &Tensor,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(input, weight, pad)?;
    let p = g.oh * g.ow;
    let k = g.patch();
    let ld = g.batch * p;
    let mut dy_wide = vec![0.0; g.cout * ld];
    for b in 0..g.batch {
        for c in 0..g.cout {
            dy_wide[c * ld + b * p..c * ld + (b + 1) * p]
                .copy_from_slice(&dy.data()[(b * g.cout + c) * p..(b * g.cout + c + 1) * p]);
        }
    }
    let db = want_db.then(|| dy_wide.chunks(ld).map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>());
    let dw = want_dw.then(|| {
        let cols = batch_cols(&g, input.data());
        let mut dw = vec![0.0; weight.numel()];
        // dW[cout, k] = dY[cout, B·p] · cols[k, B·p]^T
        gemm(g.cout, ld, k, &dy_wide, (ld as isize, 1), &cols, (1, ld as isize), 0.0, &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        // dcols[k, B·p] = W[cout, k]^T · dY[cout, B·p]
        let mut dcols = vec![0.0; k * ld];
        gemm(k, g.cout, ld, weight.data(), (1, k as isize), &dy_wide, (ld as isize, 1), 0.0, &mut dcols);
        let item = g.cin * g.h * g.w;
        let mut dx = vec![0.0; input.numel()];
        for b in 0..g.batch {
            let dxb = &mut dx[b * item..(b + 1) * item];
            if g.is_pointwise() {
                for (c, plane) in dxb.chunks_mut(p).enumerate() {
                    plane.copy_from_slice(&dcols[c * ld + b * p..c * ld + (b + 1) * p]);
                }
            } else {
                col2im(&g, &dcols, ld, b * p, dxb);
            }
        }
        dx
    });
    Ok((
        dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(vec![g.cout], d)).transpose()?,
    ))
}

/// Applies `W` (shape `[C, C]`) to the channel vector at every pixel.
pub fn channel_mix(weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = input.dims4()?;
    if weight.shape() != [c, c] {
        return shape_err(format!("channel_mix: weight {:?} incompatible with {c} channels", weight.shape()));
    }
    let w4 = weight.clone().reshape(vec![c, c, 1, 1])?;
    conv2d(input, &w4, None, 0)
}

/// Space-to-depth by 2. Input channel `c` becomes output channels
/// `4c..4c+4` holding the top-left, top-right, bottom-left and bottom-right
/// pixel of each 2×2 block.
pub fn squeeze2(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("squeeze: spatial size {h}x{w} must be even"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for k in 0..4 {
                let (di, dj) = (k / 2, k % 2);
                let o = ((bi * c + ci) * 4 + k) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        out[o + i * ow + j] = src[(2 * i + di) * w + 2 * j + dj];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, 4 * c, oh, ow], out)
}

/// Exact inverse of [`squeeze2`].
pub fn unsqueeze2(input: &Tensor) -> Result<Tensor> {
    let (b, c4, oh, ow) = input.dims4()?;
    if c4 % 4 != 0 {
        return shape_err(format!("unsqueeze: channel count {c4} not divisible by 4"));
    }
    let c = c4 / 4;
    let (h, w) = (oh * 2, ow * 2);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let dst = (bi * c + ci) * h * w;
            for k in 0..4 {
                let (di, dj) = (k / 2, k % 2);
                let o = ((bi * c + ci) * 4 + k) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        out[dst + (2 * i + di) * w + 2 * j + dj] = x[o + i * ow + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

pub fn narrow_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if len == 0 || start + len > c {
        return shape_err(format!("narrow: channels {start}..{} of {c}", start + len));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * len * plane);
    for bi in 0..b {
        let base = (bi * c + start) * plane;
        out.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Tensor::new(vec![b, len, h, w], out)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = match parts.first() {
        Some(t) => t,
        None => return shape_err("concat of zero tensors"),
    };
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return shape_err(format!("concat: {:?} vs {:?}", p.shape(), first.shape()));
        }
        total += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[bi * pc * plane..(bi + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![b, total, h, w], out)
}

/// Sparse 1-d interpolation weights: for each output index, a list of
/// `(input index, weight)` pairs.
pub type Taps = Vec<Vec<(usize, f64)>>;

/// Bilinear sampling weights with half-pixel centers and edge clamping.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = src - i0 as f64;
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

/// Separable resampling of the two trailing axes of a `[B, C, H, W]` tensor.
pub fn resample(input: &Tensor, rows: &Taps, cols: &Taps) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (oh, ow) = (rows.len(), cols.len());
    let x = input.data();
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; b * c * oh * ow];
    for n in 0..b * c {
        let src = &x[n * h * w..(n + 1) * h * w];
        for i in 0..h {
            for (oj, taps) in cols.iter().enumerate() {
                tmp[i * ow + oj] = taps.iter().map(|&(j, wt)| wt * src[i * w + j]).sum();
            }
        }
        let dst = &mut out[n * oh * ow..(n + 1) * oh * ow];
        for (oi, taps) in rows.iter().enumerate() {
            for oj in 0..ow {
                dst[oi * ow + oj] = taps.iter().map(|&(i, wt)| wt * tmp[i * ow + oj]).sum();
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Adjoint of [`resample`], mapping an output-sized gradient back to
/// input size.
pub fn resample_adjoint(grad: &Tensor, h: usize, w: usize, rows: &Taps, cols: &Taps) -> Result<Tensor> {
    let (b, c, oh, ow) = grad.dims4()?;
    let g = grad.data();
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; b * c * h * w];
    for n in 0..b * c {
        tmp.fill(0.0);
        let src = &g[n * oh * ow..(n + 1) * oh * ow];
        for (oi, taps) in rows.iter().enumerate() {
            for &(i, wt) in taps {
                for oj in 0..ow {
                    tmp[i * ow + oj] += wt * src[oi * ow + oj];
                }
            }
        }
        let dst = &mut out[n * h * w..(n + 1) * h * w];
        for i in 0..h {
            for (oj, taps) in cols.iter().enumerate() {
                for &(j, wt) in taps {
                    dst[i * w + j] += wt * tmp[i * ow + oj];
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

pub fn bilinear_resize(input: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = input.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(input.clone());
    }
    resample(input, &bilinear_taps(h, oh), &bilinear_taps(w, ow))
}

/// Maps each flat input index to its flat output index for a reduction over
/// `axes`, returning the output shape and the index map.
pub fn reduction_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let nd = shape.len();
    if axes.is_empty() {
        return shape_err("reduction needs at least one axis");
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= nd || axes[..i].contains(&a) {
            return shape_err(format!("invalid reduction axes {axes:?} for shape {shape:?}"));
        }
    }
    let out_shape: Vec<usize> = (0..nd).filter(|d| !axes.contains(d)).map(|d| shape[d]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    for _ in 0..numel {
        let mut o = 0;
        for d in 0..nd {
            if !axes.contains(&d) {
                o = o * shape[d] + idx[d];
            }
        }
        map.push(o);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out_shape, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = t(&[1, 1, 2, 3], &[1., -2., 3., 4., 5., -6.]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::ones(&[1, 2, 3, 3]);
        let w = Tensor::ones(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn squeeze_ordering() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = squeeze2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        assert!(squeeze2(&Tensor::ones(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn squeeze_roundtrip() {
        let x = Tensor::new(vec![2, 3, 4, 6], (0..144).map(|v| v as f64).collect()).unwrap();
        let y = squeeze2(&x).unwrap();
        let mut sorted = y.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, x.data());
        assert_eq!(unsqueeze2(&y).unwrap(), x);
    }

    #[test]
    fn bilinear_taps_sum_to_one() {
        for (a, b) in [(4, 8), (8, 4), (5, 16), (16, 5)] {
            for taps in bilinear_taps(a, b) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_adjoint_is_transpose() {
        let x = Tensor::new(vec![1, 1, 3, 4], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let g = Tensor::new(vec![1, 1, 5, 7], (0..35).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
        let (rows, cols) = (bilinear_taps(3, 5), bilinear_taps(4, 7));
        let y = resample(&x, &rows, &cols).unwrap();
        let xt = resample_adjoint(&g, 3, 4, &rows, &cols).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
