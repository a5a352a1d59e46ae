//! Define-by-run reverse-mode differentiation.
//!
//! Every op on a [`Tape`] evaluates eagerly and appends a node holding its
//! value and the handles of its inputs. [`Tape::backward`] walks the nodes in
//! exact reverse recording order. Nodes whose inputs are all constants are
//! marked as not requiring gradients and are skipped entirely.

use super::kernels::{self, Taps};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    LogAbs(Var),
    Relu(Var),
    Abs(Var),
    SoftClamp(Var, f64),
    /// `exp(s) * x + b`, elementwise.
    AffineExp {
        x: Var,
        s: Var,
        b: Var,
    },
    /// `x * s[c] + b[c]` for a `[B, C, H, W]` input.
    AffineChannel {
        x: Var,
        s: Var,
        b: Var,
    },
    Broadcast(Var),
    Sum {
        x: Var,
        map: Vec<usize>,
    },
    Mean {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    Variance {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ChannelMix {
        w: Var,
        x: Var,
    },
    LogAbsDet {
        w: Var,
        inv_t: Tensor,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Squeeze(Var),
    Unsqueeze(Var),
    Resample {
        x: Var,
        rows: Taps,
        cols: Taps,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn reduce_with(map: &[usize], out_len: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (i, &o) in map.iter().enumerate() {
        out[o] += x[i];
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// `ln|x|`; zero entries are a singularity.
    pub fn log_abs(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v == 0.0 || v.is_nan()) {
            return Err(Error::Singular("log|x| at x = 0".into()));
        }
        Ok(self.unary(a, |v| v.abs().ln(), Op::LogAbs(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `limit * tanh(x / limit)`: smooth, odd, bounded by `limit`.
    pub fn soft_clamp(&mut self, a: Var, limit: f64) -> Var {
        self.unary(a, |x| limit * (x / limit).tanh(), Op::SoftClamp(a, limit))
    }

    pub fn affine_exp(&mut self, x: Var, s: Var, b: Var) -> Result<Var> {
        let (xv, sv, bv) = (self.value(x), self.value(s), self.value(b));
        xv.check_same_shape(sv)?;
        xv.check_same_shape(bv)?;
        let data = xv.data().iter().zip(sv.data()).zip(bv.data()).map(|((&x, &s), &b)| s.exp() * x + b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s, b]);
        Ok(self.push(value, Op::AffineExp { x, s, b }, rg))
    }

    pub fn affine_channel(&mut self, x: Var, s: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [c] || self.value(b).shape() != [c] {
            return shape_err(format!(
                "affine_channel: params {:?}/{:?} for {c} channels",
                self.value(s).shape(),
                self.value(b).shape()
            ));
        }
        let plane = h * w;
        let (sv, bv) = (self.value(s).data(), self.value(b).data());
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * sv[ch] + bv[ch];
            }
        }
        let rg = self.rg(&[x, s, b]);
        Ok(self.push(value, Op::AffineChannel { x, s, b }, rg))
    }

    /// Expands a single-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if !v.is_scalar() {
            return shape_err(format!("broadcast source {:?} is not a scalar", v.shape()));
        }
        let value = Tensor::full(shape, v.data()[0]);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = kernels::reduction_plan(self.value(a).shape(), axes)?;
        let out_len = shape.iter().product();
        let value = Tensor::new(shape, reduce_with(&map, out_len, self.value(a).data()))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum { x: a, map }, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = kernels::reduction_plan(self.value(a).shape(), axes)?;
        let out_len: usize = shape.iter().product();
        let count = self.value(a).numel() / out_len;
        let mut sums = reduce_with(&map, out_len, self.value(a).data());
        sums.iter_mut().for_each(|s| *s /= count as f64);
        let value = Tensor::new(shape, sums)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean { x: a, map, count }, rg))
    }

    /// Unbiased variance (divisor `N - 1`) over `axes`.
    pub fn variance(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = kernels::reduction_plan(self.value(a).shape(), axes)?;
        let out_len: usize = shape.iter().product();
        let count = self.value(a).numel() / out_len;
        if count < 2 {
            return Err(Error::Degenerate("variance of a single element".into()));
        }
        let x = self.value(a).data();
        let means: Vec<f64> = reduce_with(&map, out_len, x).into_iter().map(|s| s / count as f64).collect();
        let mut out = vec![0.0; out_len];
        for (i, &o) in map.iter().enumerate() {
            let d = x[i] - means[o];
            out[o] += d * d;
        }
        out.iter_mut().for_each(|s| *s /= (count - 1) as f64);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Variance { x: a, map, count }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    pub fn channel_mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let value = kernels::channel_mix(self.value(w), self.value(x))?;
        let rg = self.rg(&[w, x]);
        Ok(self.push(value, Op::ChannelMix { w, x }, rg))
    }

    /// `ln|det W|` of a square matrix, via LU with partial pivoting.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        let m = self.value(w);
        let lu = crate::linalg::Lu::factor(m)?;
        let value = Tensor::scalar(lu.log_abs_det());
        let inv_t = crate::linalg::transpose(&lu.inverse()?)?;
        let rg = self.rg(&[w]);
        Ok(self.push(value, Op::LogAbsDet { w, inv_t }, rg))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow_channels(self.value(x), start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_channels(&refs)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn squeeze2(&mut self, x: Var) -> Result<Var> {
        let value = kernels::squeeze2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Squeeze(x), rg))
    }

    pub fn unsqueeze2(&mut self, x: Var) -> Result<Var> {
        let value = kernels::unsqueeze2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Unsqueeze(x), rg))
    }

    /// Bilinear resize of the spatial axes; a no-op when sizes already match.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let rows = kernels::bilinear_taps(h, oh);
        let cols = kernels::bilinear_taps(w, ow);
        let value = kernels::resample(self.value(x), &rows, &cols)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Resample { x, rows, cols }, rg))
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape; record a new one".into()));
        }
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() || node.value.ndim() > 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Usage("loss does not depend on any tensor that requires gradients".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(node.value.shape()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        let mut send = |v: &Var, t: Tensor| {
            if rg(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(b, g.clone());
                send(a, g);
            }
            Op::Sub(a, b) => {
                send(b, g.scale(-1.0));
                send(a, g);
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    send(a, g.zip_map(val(b), |g, y| g * y)?);
                }
                if rg(b) {
                    send(b, g.zip_map(val(a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, k) => send(a, g.scale(*k)),
            Op::AddScalar(a) => send(a, g),
            Op::Neg(a) => send(a, g.scale(-1.0)),
            Op::Exp(a) => send(a, g.zip_map(out, |g, y| g * y)?),
            Op::Log(a) | Op::LogAbs(a) => send(a, g.zip_map(val(a), |g, x| g / x)?),
            Op::Relu(a) => send(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?),
            Op::Abs(a) => send(a, g.zip_map(val(a), |g, x| g * x.signum() * (x != 0.0) as u8 as f64)?),
            Op::SoftClamp(a, limit) => {
                let l = *limit;
                send(a, g.zip_map(out, |g, y| g * (1.0 - (y / l) * (y / l)))?)
            }
            Op::AffineExp { x, s, b } => {
                let sv = val(s);
                if rg(x) {
                    send(x, g.zip_map(sv, |g, s| g * s.exp())?);
                }
                if rg(s) {
                    let gs: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(sv.data())
                        .zip(val(x).data())
                        .map(|((&g, &s), &x)| g * s.exp() * x)
                        .collect();
                    send(s, Tensor::new(g.shape().to_vec(), gs)?);
                }
                send(b, g);
            }
            Op::AffineChannel { x, s, b } => {
                let (_, c, h, w) = val(x).dims4()?;
                let plane = h * w;
                let sv = val(s).data();
                if rg(s) || rg(b) {
                    let mut ds = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (k, (gc, xc)) in g.data().chunks(plane).zip(val(x).data().chunks(plane)).enumerate() {
                        let ch = k % c;
                        for (gv, xv) in gc.iter().zip(xc) {
                            ds[ch] += gv * xv;
                            db[ch] += gv;
                        }
                    }
                    send(s, Tensor::from_vec(ds));
                    send(b, Tensor::from_vec(db));
                }
                if rg(x) {
                    let mut dx = g;
                    for (k, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let sc = sv[k % c];
                        chunk.iter_mut().for_each(|v| *v *= sc);
                    }
                    send(x, dx);
                }
            }
            Op::Broadcast(a) => {
                let shape = val(a).shape().to_vec();
                send(a, Tensor::new(shape, vec![g.sum()])?);
            }
            Op::Sum { x, map } => {
                let gd = g.data();
                let data = map.iter().map(|&o| gd[o]).collect();
                send(x, Tensor::new(val(x).shape().to_vec(), data)?);
            }
            Op::Mean { x, map, count } => {
                let gd = g.data();
                let k = 1.0 / *count as f64;
                let data = map.iter().map(|&o| gd[o] * k).collect();
                send(x, Tensor::new(val(x).shape().to_vec(), data)?);
            }
            Op::Variance { x, map, count } => {
                let xv = val(x).data();
                let n = *count as f64;
                let means: Vec<f64> = reduce_with(map, g.numel(), xv).into_iter().map(|s| s / n).collect();
                let gd = g.data();
                let data = map.iter().enumerate().map(|(i, &o)| gd[o] * 2.0 * (xv[i] - means[o]) / (n - 1.0)).collect();
                send(x, Tensor::new(val(x).shape().to_vec(), data)?);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(x), val(w), *pad, &g, rg(x), rg(w), b.as_ref().is_some_and(rg))?;
                if let Some(dx) = dx {
                    send(x, dx);
                }
                if let Some(dw) = dw {
                    send(w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    send(b, db);
                }
            }
            Op::ChannelMix { w, x } => {
                let c = val(w).shape()[0];
                let w4 = val(w).clone().reshape(vec![c, c, 1, 1])?;
                let (dx, dw, _) = kernels::conv2d_backward(val(x), &w4, 0, &g, rg(x), rg(w), false)?;
                if let Some(dx) = dx {
                    send(x, dx);
                }
                if let Some(dw) = dw {
                    send(w, dw.reshape(vec![c, c])?);
                }
            }
            Op::LogAbsDet { w, inv_t } => {
                let k = g.data()[0];
                send(w, inv_t.scale(k));
            }
            Op::Narrow { x, start } => {
                let (b, c, h, wd) = val(x).dims4()?;
                let len = g.shape()[1];
                let plane = h * wd;
                let mut data = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    data[dst..dst + len * plane].copy_from_slice(&g.data()[bi * len * plane..(bi + 1) * len * plane]);
                }
                send(x, Tensor::new(val(x).shape().to_vec(), data)?);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = val(p).shape()[1];
                    if rg(p) {
                        send(p, kernels::narrow_channels(&g, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Squeeze(x) => send(x, kernels::unsqueeze2(&g)?),
            Op::Unsqueeze(x) => send(x, kernels::squeeze2(&g)?),
            Op::Resample { x, rows, cols } => {
                let (_, _, h, w) = val(x).dims4()?;
                send(x, kernels::resample_adjoint(&g, h, w, rows, cols)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    /// Central finite-difference gradient of a scalar function.
    fn fd_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64, step: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += step;
                let mut m = x.clone();
                m.data_mut()[i] -= step;
                (f(&p) - f(&m)) / (2.0 * step)
            })
            .collect()
    }

    /// Relative error, with an absolute floor for entries that are zero up
    /// to finite-difference rounding.
    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d < 1e-9 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec1(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut t = Tape::new();
        let x = t.param(vec1(&[1.0]));
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn detached_loss_is_usage_error() {
        let mut t = Tape::new();
        let x = t.constant(vec1(&[1.0, 3.0]));
        let loss = t.sum_all(x).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec1(&[1.0, 2.0]));
        let c = t.constant(vec1(&[3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let loss = t.sum_all(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3]));
        let e = t.exp(z);
        assert_eq!(t.value(e).data(), &[1.0, 1.0, 1.0]);
        let r = t.constant(vec1(&[-3.0, 2.0]));
        let r = t.relu(r);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let bad = t.constant(vec1(&[1.0, 0.0]));
        assert!(matches!(t.log(bad), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_derivative_at_one() {
        let mut t = Tape::new();
        let x = t.param(vec1(&[1.0]));
        let e = t.exp(x);
        let loss = t.sum_all(e).unwrap();
        let g = t.backward(loss).unwrap().get(x).unwrap().data()[0];
        let fd = fd_grad(&vec1(&[1.0]), |x| x.data()[0].exp(), 1e-5)[0];
        assert!((g - std::f64::consts::E).abs() < 1e-12);
        assert!(rel_err(g, fd) < 1e-8);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.constant(vec1(&[1.0, 2.0, 3.0, 4.0]));
        let s = t.sum(x, &[0]).unwrap();
        assert_eq!(t.value(s).item().unwrap(), 10.0);
        let v = t.variance(x, &[0]).unwrap();
        assert!((t.value(v).item().unwrap() - 5.0 / 3.0).abs() < 1e-12);
        let z = t.constant(Tensor::zeros(&[2, 3]));
        let m = t.mean(z, &[0, 1]).unwrap();
        assert_eq!(t.value(m).item().unwrap(), 0.0);
        let one = t.constant(vec1(&[1.0]));
        assert!(matches!(t.variance(one, &[0]), Err(Error::Degenerate(_))));
        assert!(t.sum(x, &[1]).is_err());
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_weight_gradient_matches_fd() {
        let x = Tensor::new(vec![2, 2, 4, 3], (0..48).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
        let w = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect()).unwrap();
        let b = vec1(&[0.1, -0.2, 0.3]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(w.clone());
        let bv = t.param(b.clone());
        let y = t.conv2d(xv, wv, Some(bv), 1).unwrap();
        let loss = t.sum_all(y).unwrap();
        let g = t.backward(loss).unwrap();
        let f = |w: &Tensor| kernels::conv2d(&x, w, Some(&b), 1).unwrap().sum();
        for (a, n) in g.get(wv).unwrap().data().iter().zip(fd_grad(&w, f, 1e-5)) {
            assert!(rel_err(*a, n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn chained_exp_sum_matches_fd() {
        let x0 = vec1(&[0.3, -1.2, 0.7]);
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sum_all(x).unwrap();
        let e = t.exp(s);
        let g = t.backward(e).unwrap();
        let fd = fd_grad(&x0, |x| x.sum().exp(), 1e-5);
        for (a, n) in g.get(x).unwrap().data().iter().zip(fd) {
            assert!(rel_err(*a, n) < 1e-6);
        }
    }
}
