use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Bound on the magnitude of log-scales, enforced by `α·tanh(s/α)`.
pub const SCALE_LIMIT: f64 = 5.0;

/// Two 3×3 conv + relu trunk with zero-initialized scale and bias heads.
#[derive(Clone, Debug)]
pub struct CouplingNet {
    pub conv1: Conv,
    pub conv2: Conv,
    pub scale_head: Conv,
    pub bias_head: Conv,
}

impl CouplingNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(CouplingNet {
            conv1: Conv::new(store, &format!("{name}.conv1"), in_channels, hidden, 3, Init::Scaled, rng)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), hidden, hidden, 3, Init::Scaled, rng)?,
            scale_head: Conv::new(store, &format!("{name}.scale"), hidden, out_channels, 3, Init::Zero, rng)?,
            bias_head: Conv::new(store, &format!("{name}.bias"), hidden, out_channels, 3, Init::Zero, rng)?,
        })
    }

    /// Returns the clamped log-scale and the bias.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let t = self.conv1.apply(tape, p, x)?;
        let t = tape.relu(t);
        let t = self.conv2.apply(tape, p, t)?;
        let t = tape.relu(t);
        let s = self.scale_head.apply(tape, p, t)?;
        let s = tape.soft_clamp(s, SCALE_LIMIT);
        let b = self.bias_head.apply(tape, p, t)?;
        Ok((s, b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.conv1, &self.conv2, &self.scale_head, &self.bias_head].iter().flat_map(|c| c.params()).collect()
    }
}

fn resize_to(tape: &mut Tape, u: Var, like: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(like).dims4()?;
    tape.bilinear_resize(u, h, w)
}

/// `exp(-s)·(y - b)` built from differentiable primitives.
fn affine_exp_inverse(tape: &mut Tape, y: Var, s: Var, b: Var) -> Result<Var> {
    let neg_s = tape.neg(s);
    let e = tape.exp(neg_s);
    let shift = tape.mul(b, e)?;
    let shift = tape.neg(shift);
    tape.affine_exp(y, neg_s, shift)
}

fn per_item_sum(tape: &mut Tape, s: Var) -> Result<Var> {
    tape.sum(s, &[1, 2, 3])
}

/// Affine coupling on the channel partition `h = [h_A, h_B]`, `h_A` being
/// the first half. When conditional, the conditioning is resized to the
/// activation's resolution and concatenated to `h_A` as the net input.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub net: CouplingNet,
    pub channels: usize,
    pub cond_channels: Option<usize>,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: Option<usize>,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) || channels == 0 {
            return Err(Error::Config(format!("coupling needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        let net = CouplingNet::new(store, name, half + cond_channels.unwrap_or(0), hidden, half, rng)?;
        Ok(AffineCoupling { net, channels, cond_channels })
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_channels.is_some()
    }

    fn net_out(&self, tape: &mut Tape, p: &Bound, ha: Var, u: Option<Var>) -> Result<(Var, Var)> {
        let input = match (self.cond_channels, u) {
            (None, _) => ha,
            (Some(_), Some(u)) => {
                let u = resize_to(tape, u, ha)?;
                tape.concat_channels(&[ha, u])?
            }
            (Some(_), None) => return Err(Error::Usage("conditional coupling called without conditioning".into())),
        };
        self.net.apply(tape, p, input)
    }

    fn halves(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let (_, c, _, _) = tape.value(h).dims4()?;
        if c != self.channels {
            return Err(Error::Config(format!("coupling built for {} channels, got {c}", self.channels)));
        }
        let half = c / 2;
        Ok((tape.narrow_channels(h, 0, half)?, tape.narrow_channels(h, half, c - half)?))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, u: Option<Var>) -> Result<(Var, Var)> {
        let (ha, hb) = self.halves(tape, h)?;
        let (s, b) = self.net_out(tape, p, ha, u)?;
        let yb = tape.affine_exp(hb, s, b)?;
        let y = tape.concat_channels(&[ha, yb])?;
        Ok((y, per_item_sum(tape, s)?))
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var, u: Option<Var>) -> Result<Var> {
        let (ya, yb) = self.halves(tape, y)?;
        let (s, b) = self.net_out(tape, p, ya, u)?;
        let hb = affine_exp_inverse(tape, yb, s, b)?;
        tape.concat_channels(&[ya, hb])
    }
}

/// Element-wise affine map whose scale and bias are functions of the
/// conditioning alone.
#[derive(Clone, Debug)]
pub struct AffineInjector {
    pub net: CouplingNet,
    pub channels: usize,
}

impl AffineInjector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let net = CouplingNet::new(store, name, cond_channels, hidden, channels, rng)?;
        Ok(AffineInjector { net, channels })
    }

    fn net_out(&self, tape: &mut Tape, p: &Bound, like: Var, u: Var) -> Result<(Var, Var)> {
        let u = resize_to(tape, u, like)?;
        self.net.apply(tape, p, u)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, u: Var) -> Result<(Var, Var)> {
        let (s, b) = self.net_out(tape, p, h, u)?;
        let y = tape.affine_exp(h, s, b)?;
        Ok((y, per_item_sum(tape, s)?))
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var, u: Var) -> Result<Var> {
        let (s, b) = self.net_out(tape, p, y, u)?;
        affine_exp_inverse(tape, y, s, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FlowLayer;
    use crate::tensor::Tensor;

    fn randomize(store: &mut ParamStore, net: &CouplingNet, rng: &mut Rng, scale: f64) {
        for id in [net.scale_head.weight, net.scale_head.bias, net.bias_head.weight, net.bias_head.bias] {
            let t = store.get(id);
            let v = Tensor::new(t.shape().to_vec(), rng.gaussian_vec(t.numel(), scale)).unwrap();
            store.set(id, v).unwrap();
        }
    }

    fn stub_constant(store: &mut ParamStore, net: &CouplingNet, s: f64) {
        let out = net.scale_head.out_channels;
        store.set(net.scale_head.bias, Tensor::full(&[out], s)).unwrap();
    }

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), rng.gaussian_vec(shape.iter().product(), 1.0)).unwrap()
    }

    #[test]
    fn zero_init_coupling_is_identity() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let c = AffineCoupling::new(&mut store, "c", 4, Some(3), 8, &mut rng).unwrap();
        let l = FlowLayer::Coupling(c);
        let h = rand(&mut rng, &[2, 4, 4, 4]);
        let u = rand(&mut rng, &[2, 3, 2, 2]);
        let (y, ld) = l.forward_values(&store, &h, Some(&u)).unwrap();
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_scale_coupling_logdet() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let c = AffineCoupling::new(&mut store, "c", 4, Some(2), 8, &mut rng).unwrap();
        stub_constant(&mut store, &c.net, 0.3);
        let l = FlowLayer::Coupling(c);
        let h = rand(&mut rng, &[1, 4, 3, 5]);
        let u = rand(&mut rng, &[1, 2, 3, 5]);
        let (y, ld) = l.forward_values(&store, &h, Some(&u)).unwrap();
        let expect_s = SCALE_LIMIT * (0.3 / SCALE_LIMIT).tanh();
        assert!((ld.data()[0] - expect_s * 2.0 * 15.0).abs() < 1e-12);
        assert_eq!(y.data()[..30], h.data()[..30]);
        for (a, b) in y.data()[30..].iter().zip(&h.data()[30..]) {
            assert!((a - expect_s.exp() * b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let mut store = ParamStore::new();
        let r = AffineCoupling::new(&mut store, "c", 3, None, 4, &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn coupling_round_trip() {
        let mut rng = Rng::new(3);
        for cond in [None, Some(5)] {
            let mut store = ParamStore::new();
            let c = AffineCoupling::new(&mut store, "c", 6, cond, 8, &mut rng).unwrap();
            randomize(&mut store, &c.net, &mut rng, 0.3);
            let l = FlowLayer::Coupling(c);
            let h = rand(&mut rng, &[2, 6, 4, 4]);
            let u = rand(&mut rng, &[2, 5, 2, 2]);
            let u = cond.map(|_| &u);
            let (y, ld) = l.forward_values(&store, &h, u).unwrap();
            assert!(ld.max_abs() > 0.0);
            let back = l.inverse_values(&store, &y, u).unwrap();
            assert!(back.max_abs_diff(&h).unwrap() < 1e-9);
        }
    }

    #[test]
    fn injector_zero_init_and_constant() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let inj = AffineInjector::new(&mut store, "i", 3, 2, 8, &mut rng).unwrap();
        let net = inj.net.clone();
        let l = FlowLayer::Injector(inj);
        let h = rand(&mut rng, &[1, 3, 2, 4]);
        let u = rand(&mut rng, &[1, 2, 1, 2]);
        let (y, ld) = l.forward_values(&store, &h, Some(&u)).unwrap();
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0]);

        stub_constant(&mut store, &net, -0.7);
        let (_, ld) = l.forward_values(&store, &h, Some(&u)).unwrap();
        let s = SCALE_LIMIT * (-0.7 / SCALE_LIMIT).tanh();
        assert!((ld.data()[0] - s * 3.0 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn injector_round_trip_and_needs_conditioning() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let inj = AffineInjector::new(&mut store, "i", 4, 3, 8, &mut rng).unwrap();
        randomize(&mut store, &inj.net, &mut rng, 0.3);
        let l = FlowLayer::Injector(inj);
        let h = rand(&mut rng, &[2, 4, 4, 4]);
        let u = rand(&mut rng, &[2, 3, 4, 4]);
        let (y, _) = l.forward_values(&store, &h, Some(&u)).unwrap();
        let back = l.inverse_values(&store, &y, Some(&u)).unwrap();
        assert!(back.max_abs_diff(&h).unwrap() < 1e-9);
        assert!(matches!(l.forward_values(&store, &h, None), Err(Error::Usage(_))));
    }

    #[test]
    fn scale_clamp_keeps_inverse_exact() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let c = AffineCoupling::new(&mut store, "c", 2, None, 4, &mut rng).unwrap();
        stub_constant(&mut store, &c.net, 40.0);
        let l = FlowLayer::Coupling(c);
        let h = rand(&mut rng, &[1, 2, 2, 2]).scale(1e-3);
        let (y, ld) = l.forward_values(&store, &h, None).unwrap();
        assert!(ld.data()[0] <= SCALE_LIMIT * 4.0);
        let back = l.inverse_values(&store, &y, None).unwrap();
        assert!(back.max_abs_diff(&h).unwrap() < 1e-9);
    }
}
