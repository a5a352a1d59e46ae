//! Invertible layers. Each exposes a forward pass returning the transformed
//! activation together with its exact Jacobian log-determinant, and an
//! inverse that needs only the output, the parameters and the conditioning.

mod actnorm;
mod coupling;
mod inv_conv;

pub use actnorm::ActNorm;
pub use coupling::{AffineCoupling, AffineInjector, CouplingNet, SCALE_LIMIT};
pub use inv_conv::InvConv1x1;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Structural tag of a layer, used for describing a model's layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Squeeze,
    ActNorm,
    InvConv,
    /// Affine coupling; `conditional` is false in transitional steps.
    Coupling {
        conditional: bool,
    },
    Injector,
    Split,
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Squeeze,
    ActNorm(ActNorm),
    InvConv(InvConv1x1),
    Coupling(AffineCoupling),
    Injector(AffineInjector),
    /// Routes the upper half of the channels out as a latent.
    Split,
}

impl FlowLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayer::Squeeze => LayerKind::Squeeze,
            FlowLayer::ActNorm(_) => LayerKind::ActNorm,
            FlowLayer::InvConv(_) => LayerKind::InvConv,
            FlowLayer::Coupling(c) => LayerKind::Coupling { conditional: c.is_conditional() },
            FlowLayer::Injector(_) => LayerKind::Injector,
            FlowLayer::Split => LayerKind::Split,
        }
    }

    /// Forward pass. The log-determinant is `None` for volume-preserving
    /// layers, otherwise a `[B]` tensor in nats.
    ///
    /// `Split` is not a bijection of `h` alone and is rejected here; see
    /// [`split_forward`].
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, u: Option<Var>) -> Result<(Var, Option<Var>)> {
        match self {
            FlowLayer::Squeeze => Ok((tape.squeeze2(h)?, None)),
            FlowLayer::ActNorm(l) => l.forward(tape, p, h).map(|(y, ld)| (y, Some(ld))),
            FlowLayer::InvConv(l) => l.forward(tape, p, h).map(|(y, ld)| (y, Some(ld))),
            FlowLayer::Coupling(l) => l.forward(tape, p, h, u).map(|(y, ld)| (y, Some(ld))),
            FlowLayer::Injector(l) => l.forward(tape, p, h, need(u)?).map(|(y, ld)| (y, Some(ld))),
            FlowLayer::Split => Err(Error::Usage("split is applied through split_forward".into())),
        }
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, h: Var, u: Option<Var>) -> Result<Var> {
        match self {
            FlowLayer::Squeeze => tape.unsqueeze2(h),
            FlowLayer::ActNorm(l) => l.inverse(tape, p, h),
            FlowLayer::InvConv(l) => l.inverse(tape, p, h),
            FlowLayer::Coupling(l) => l.inverse(tape, p, h, u),
            FlowLayer::Injector(l) => l.inverse(tape, p, h, need(u)?),
            FlowLayer::Split => Err(Error::Usage("split is inverted through split_inverse".into())),
        }
    }

    /// Gradient-free forward on plain tensors. Returns the output and a `[B]`
    /// log-determinant (zeros for volume-preserving layers).
    pub fn forward_values(&self, store: &ParamStore, h: &Tensor, u: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let hv = tape.constant(h.clone());
        let uv = u.map(|u| tape.constant(u.clone()));
        let (y, ld) = self.forward(&mut tape, &p, hv, uv)?;
        let ld = match ld {
            Some(ld) => tape.value(ld).clone(),
            None => Tensor::zeros(&[h.batch_size()]),
        };
        Ok((tape.value(y).clone(), ld))
    }

    pub fn inverse_values(&self, store: &ParamStore, y: &Tensor, u: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let yv = tape.constant(y.clone());
        let uv = u.map(|u| tape.constant(u.clone()));
        let h = self.inverse(&mut tape, &p, yv, uv)?;
        Ok(tape.value(h).clone())
    }
}

fn need(u: Option<Var>) -> Result<Var> {
    u.ok_or_else(|| Error::Usage("conditional layer called without conditioning".into()))
}

/// Splits `h` into the kept lower half and the emitted upper half of its
/// channels.
pub fn split_forward(tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
    let (_, c, _, _) = tape.value(h).dims4()?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("split needs an even channel count, got {c}")));
    }
    Ok((tape.narrow_channels(h, 0, c / 2)?, tape.narrow_channels(h, c / 2, c / 2)?))
}

pub fn split_inverse(tape: &mut Tape, keep: Var, z: Var) -> Result<Var> {
    tape.concat_channels(&[keep, z])
}

/// Value-level split, returning `(kept, latent)`.
pub fn split(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = h.dims4()?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("split needs an even channel count, got {c}")));
    }
    Ok((kernels::narrow_channels(h, 0, c / 2)?, kernels::narrow_channels(h, c / 2, c / 2)?))
}

pub fn merge(keep: &Tensor, z: &Tensor) -> Result<Tensor> {
    kernels::concat_channels(&[keep, z])
}

/// `-log N(z; 0, I)` per batch element, in nats.
pub fn gaussian_nll(z: &Tensor) -> Result<Tensor> {
    let b = z.batch_size();
    let per = z.numel() / b;
    let half_log_2pi = 0.5 * std::f64::consts::TAU.ln();
    let v =
        z.data().chunks(per).map(|c| c.iter().map(|x| 0.5 * x * x).sum::<f64>() + per as f64 * half_log_2pi).collect();
    Ok(Tensor::from_vec(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_convention_and_merge() {
        let h = Tensor::new(vec![1, 4, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let (keep, z) = split(&h).unwrap();
        assert_eq!(keep.data(), &[0., 1., 2., 3.]);
        assert_eq!(z.data(), &[4., 5., 6., 7.]);
        assert_eq!(merge(&keep, &z).unwrap(), h);
        assert!(matches!(split(&Tensor::zeros(&[1, 3, 1, 1])), Err(Error::Config(_))));
    }

    #[test]
    fn zero_latent_prior_cost() {
        let nll = gaussian_nll(&Tensor::zeros(&[1, 2, 2, 1])).unwrap();
        assert!((nll.data()[0] - 2.0 * std::f64::consts::TAU.ln()).abs() < 1e-12);
    }
}
