//! Low-resolution encoder producing conditioning features, and the
//! down-scaling operator that links HR and LR images.

mod downscale;
mod pretrain;

pub use downscale::{cubic, downscale, upscale_nearest, DownscaleKernel, KernelKind};
pub use pretrain::{pretrain_encoder, PretrainOptions};

use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Prefix of every encoder parameter name.
pub const ENCODER_PREFIX: &str = "enc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub width: usize,
    /// Number of block outputs concatenated into the features.
    pub taps: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { blocks: 4, width: 64, taps: 5, in_channels: 3 }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        self.taps * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder width and input channels must be positive".into()));
        }
        if self.taps == 0 || self.taps > self.blocks + 1 {
            return Err(Error::Config(format!(
                "encoder taps must be in 1..={} for {} blocks, got {}",
                self.blocks + 1,
                self.blocks,
                self.taps
            )));
        }
        Ok(())
    }

    /// Indices into the sequence `[stem, block 1, …, block n]` that are
    /// concatenated, equally spaced and including both ends.
    pub fn tap_indices(&self) -> Vec<usize> {
        if self.taps == 1 {
            return vec![self.blocks];
        }
        (0..self.taps).map(|t| ((t * self.blocks) as f64 / (self.taps - 1) as f64).round() as usize).collect()
    }
}

/// Conv stem followed by plain residual blocks `x + conv(relu(conv(x)))`.
/// The second conv of every block starts at zero.
#[derive(Clone, Debug)]
pub struct LrEncoder {
    pub cfg: EncoderConfig,
    pub stem: Conv,
    pub blocks: Vec<(Conv, Conv)>,
}

impl LrEncoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let p = ENCODER_PREFIX;
        let stem = Conv::new(store, &format!("{p}stem"), cfg.in_channels, cfg.width, 3, Init::Scaled, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                Ok((
                    Conv::new(store, &format!("{p}block{i}.conv1"), cfg.width, cfg.width, 3, Init::Scaled, rng)?,
                    Conv::new(store, &format!("{p}block{i}.conv2"), cfg.width, cfg.width, 3, Init::Zero, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LrEncoder { cfg, stem, blocks })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("encoder expects {} input channels, got {c}", self.cfg.in_channels)));
        }
        let mut outs = vec![self.stem.apply(tape, p, x)?];
        for (c1, c2) in &self.blocks {
            let prev = *outs.last().expect("stem output");
            let t = c1.apply(tape, p, prev)?;
            let t = tape.relu(t);
            let t = c2.apply(tape, p, t)?;
            outs.push(tape.add(prev, t)?);
        }
        let taps: Vec<Var> = self.cfg.tap_indices().into_iter().map(|i| outs[i]).collect();
        if taps.len() == 1 {
            return Ok(taps[0]);
        }
        tape.concat_channels(&taps)
    }

    /// Gradient-free evaluation.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let u = self.apply(&mut tape, &p, xv)?;
        Ok(tape.value(u).clone())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.stem.params().to_vec();
        for (a, b) in &self.blocks {
            ids.extend(a.params());
            ids.extend(b.params());
        }
        ids
    }
}
