//! Small dense linear algebra on square matrices stored as `[n, n]` tensors.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pivots smaller than this are treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// LU decomposition with partial pivoting, `P·A = L·U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

fn square_dim(m: &Tensor) -> Result<usize> {
    match m.shape() {
        [a, b] if a == b => Ok(*a),
        s => shape_err(format!("expected a square matrix, got {s:?}")),
    }
}

impl Lu {
    pub fn factor(m: &Tensor) -> Result<Self> {
        let n = square_dim(m)?;
        let mut lu = m.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) =
                (k..n).map(|i| (i, lu[i * n + k].abs())).fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(pmax > SINGULAR_TOL) {
                return Err(Error::Singular(format!("pivot {pmax:e} at column {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>() * self.sign
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Result<Tensor> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                inv[i * n + j] = v;
            }
        }
        Tensor::new(vec![n, n], inv)
    }
}

pub fn transpose(m: &Tensor) -> Result<Tensor> {
    let (r, c) = match m.shape() {
        [r, c] => (*r, *c),
        s => return shape_err(format!("transpose needs a matrix, got {s:?}")),
    };
    let d = m.data();
    let data = (0..c).flat_map(|j| (0..r).map(move |i| d[i * c + j])).collect();
    Tensor::new(vec![c, r], data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
        return shape_err("matmul needs matrices");
    };
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let (m, k, n) = (*m, *k, *n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn identity(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = 1.0;
    }
    m
}

/// Random rotation: Gram–Schmidt QR of a Gaussian matrix with the sign of
/// each column fixed by the diagonal of R, then one column flipped if needed
/// so that the determinant is +1.
pub fn random_rotation(n: usize, rng: &mut Rng) -> Tensor {
    loop {
        let a: Vec<f64> = (0..n * n).map(|_| rng.gaussian()).collect();
        let mut q = vec![0.0; n * n];
        let mut ok = true;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| a[i * n + j]).collect();
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q[i * n + k] * v[i]).sum();
                for i in 0..n {
                    v[i] -= dot * q[i * n + k];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                q[i * n + j] = v[i] / norm;
            }
        }
        if !ok {
            continue;
        }
        let m = Tensor::new(vec![n, n], q).expect("square");
        let det = Lu::factor(&m).map(|lu| lu.det()).unwrap_or(0.0);
        if det.abs() < 0.5 {
            continue;
        }
        let mut m = m;
        if det < 0.0 {
            for i in 0..n {
                m.data_mut()[i * n] = -m.data()[i * n];
            }
        }
        return m;
    }
}
