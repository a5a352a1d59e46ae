//! Convolution modules backed by a [`ParamStore`].

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian weights with variance `1 / fan_in`, zero bias.
    Scaled,
    /// All zeros.
    Zero,
}

/// Shape-preserving `k×k` convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::Scaled => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                Tensor::new(shape.to_vec(), rng.gaussian_vec(shape.iter().product(), fan_in.sqrt().recip()))?
            }
        };
        Ok(Conv {
            weight: store.add(format!("{name}.weight"), weight, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.kernel / 2)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
