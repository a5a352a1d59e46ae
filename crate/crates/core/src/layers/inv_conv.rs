use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Learned channel-mixing matrix applied at every pixel, stored unfactorized.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

/// Matrices with `|det W|` at or below this are rejected.
pub const DET_TOL: f64 = 1e-12;

impl InvConv1x1 {
    /// Initialized to a random rotation.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_weight(store, name, linalg::random_rotation(channels, rng))
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor) -> Result<Self> {
        let channels = weight.shape()[0];
        Ok(InvConv1x1 { weight: store.add(format!("{name}.weight"), weight, true)?, channels })
    }

    fn check(w: &Tensor) -> Result<Lu> {
        let lu = Lu::factor(w)?;
        if lu.det().abs() <= DET_TOL {
            return Err(Error::Singular(format!("|det W| = {:e}", lu.det().abs())));
        }
        Ok(lu)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let (b, _, hh, ww) = tape.value(h).dims4()?;
        let w = p[self.weight];
        Self::check(tape.value(w))?;
        let y = tape.channel_mix(w, h)?;
        let lad = tape.log_abs_det(w)?;
        let lad = tape.scale(lad, (hh * ww) as f64);
        let ld = tape.broadcast(lad, &[b])?;
        Ok((y, ld))
    }

    /// Inverts with `W⁻¹` from a fresh LU factorization.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let inv = Self::check(tape.value(p[self.weight]))?.inverse()?;
        let wi = tape.constant(inv);
        tape.channel_mix(wi, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FlowLayer;

    fn with(w: Tensor) -> (ParamStore, FlowLayer) {
        let mut store = ParamStore::new();
        let l = InvConv1x1::with_weight(&mut store, "w", w).unwrap();
        (store, FlowLayer::InvConv(l))
    }

    #[test]
    fn identity_weight() {
        let (store, l) = with(linalg::identity(3));
        let h = Tensor::new(vec![1, 3, 1, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (y, ld) = l.forward_values(&store, &h, None).unwrap();
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0]);
    }

    #[test]
    fn permutation_swaps_channels() {
        let (store, l) = with(Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap());
        let h = Tensor::new(vec![1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, ld) = l.forward_values(&store, &h, None).unwrap();
        assert_eq!(y.data(), &[3., 4., 1., 2.]);
        assert_eq!(ld.data(), &[0.0]);
    }

    #[test]
    fn doubled_identity_logdet() {
        let (store, l) = with(linalg::identity(2).scale(2.0));
        let h = Tensor::ones(&[1, 2, 3, 3]);
        let (_, ld) = l.forward_values(&store, &h, None).unwrap();
        assert!((ld.data()[0] - 9.0 * 4f64.ln()).abs() < 1e-12);
        assert!((ld.data()[0] - 12.476649250079015).abs() < 1e-12);
    }

    #[test]
    fn near_singular_rejected() {
        let (store, l) = with(Tensor::new(vec![2, 2], vec![1., 1., 1., 1. + 1e-14]).unwrap());
        let h = Tensor::ones(&[1, 2, 1, 1]);
        assert!(matches!(l.forward_values(&store, &h, None), Err(Error::Singular(_))));
    }
}
