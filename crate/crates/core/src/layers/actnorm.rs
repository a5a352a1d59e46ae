use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Per-channel affine map `h' = s[c]·h + b[c]`.
///
/// The `initialized` buffer records whether data-dependent initialization
/// has run; it is serialized with the parameters.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub scale: ParamId,
    pub bias: ParamId,
    pub initialized: ParamId,
    pub channels: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(ActNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels]), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true)?,
            initialized: store.add(format!("{name}.initialized"), Tensor::zeros(&[1]), false)?,
            channels,
        })
    }

    pub fn is_initialized(&self, store: &ParamStore) -> bool {
        store.get(self.initialized).data()[0] != 0.0
    }

    /// Sets scale and bias so that `h` maps to zero mean and unit
    /// (population) variance per channel.
    pub fn initialize_from(&self, store: &mut ParamStore, h: &Tensor) -> Result<()> {
        let (b, c, hh, ww) = h.dims4()?;
        if c != self.channels {
            return shape_err(format!("actnorm init: {c} channels, expected {}", self.channels));
        }
        let plane = hh * ww;
        let n = (b * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (k, chunk) in h.data().chunks(plane).enumerate() {
            for v in chunk {
                mean[k % c] += v;
                sq[k % c] += v * v;
            }
        }
        let mut scale = vec![1.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let m = mean[ch] / n;
            let var = (sq[ch] / n - m * m).max(0.0);
            let std = var.sqrt();
            scale[ch] = if std > 1e-8 { 1.0 / std } else { 1.0 };
            bias[ch] = -m * scale[ch];
        }
        store.set(self.scale, Tensor::from_vec(scale))?;
        store.set(self.bias, Tensor::from_vec(bias))?;
        store.set(self.initialized, Tensor::ones(&[1]))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<(Var, Var)> {
        let (b, _, hh, ww) = tape.value(h).dims4()?;
        let (s, bias) = (p[self.scale], p[self.bias]);
        if tape.value(s).data().contains(&0.0) {
            return Err(Error::Singular("actnorm scale has a zero entry".into()));
        }
        let y = tape.affine_channel(h, s, bias)?;
        let log_s = tape.log_abs(s)?;
        let total = tape.sum_all(log_s)?;
        let total = tape.scale(total, (hh * ww) as f64);
        let ld = tape.broadcast(total, &[b])?;
        Ok((y, ld))
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let s = tape.value(p[self.scale]).clone();
        let b = tape.value(p[self.bias]).clone();
        if s.data().contains(&0.0) {
            return Err(Error::Singular("actnorm scale has a zero entry".into()));
        }
        let inv_s = s.map(f64::recip);
        let inv_b = b.zip_map(&s, |b, s| -b / s)?;
        let (sv, bv) = (tape.constant(inv_s), tape.constant(inv_b));
        tape.affine_channel(y, sv, bv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::FlowLayer;

    fn layer(c: usize) -> (ParamStore, FlowLayer) {
        let mut store = ParamStore::new();
        let a = ActNorm::new(&mut store, "an", c).unwrap();
        (store, FlowLayer::ActNorm(a))
    }

    fn actnorm(l: &FlowLayer) -> &ActNorm {
        match l {
            FlowLayer::ActNorm(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_at_default_params() {
        let (store, l) = layer(2);
        let h = Tensor::new(vec![1, 2, 1, 2], vec![1., -2., 3., 0.5]).unwrap();
        let (y, ld) = l.forward_values(&store, &h, None).unwrap();
        assert_eq!(y, h);
        assert_eq!(ld.data(), &[0.0]);
    }

    #[test]
    fn hand_computed_example() {
        let (mut store, l) = layer(1);
        let a = actnorm(&l).clone();
        store.set(a.scale, Tensor::from_vec(vec![2.0])).unwrap();
        store.set(a.bias, Tensor::from_vec(vec![0.5])).unwrap();
        let h = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, ld) = l.forward_values(&store, &h, None).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 6.5, 8.5]);
        assert!((ld.data()[0] - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld.data()[0] - 2.772588722239781).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_is_singular() {
        let (mut store, l) = layer(2);
        let a = actnorm(&l).clone();
        store.set(a.scale, Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        let h = Tensor::ones(&[1, 2, 2, 2]);
        assert!(matches!(l.forward_values(&store, &h, None), Err(Error::Singular(_))));
    }

    #[test]
    fn data_dependent_init_standardizes() {
        let (mut store, l) = layer(3);
        let a = actnorm(&l).clone();
        let mut rng = crate::Rng::new(9);
        let h =
            Tensor::new(vec![4, 3, 5, 5], (0..300).map(|i| 3.0 * rng.gaussian() + (i % 7) as f64).collect()).unwrap();
        assert!(!a.is_initialized(&store));
        a.initialize_from(&mut store, &h).unwrap();
        assert!(a.is_initialized(&store));
        let (y, _) = l.forward_values(&store, &h, None).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|b| y.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "channel {c}: {m} {v}");
        }
    }
}
