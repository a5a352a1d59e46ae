use crate::conditioning::{downscale, DownscaleKernel, LrEncoder};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub kernel: DownscaleKernel,
    pub seed: u64,
}

/// Trains the encoder as a regressor of the HR image under an L1 loss,
/// using a temporary conv head followed by depth-to-space. The head is
/// dropped afterwards; only encoder entries of `store` are updated.
///
/// Returns the loss of every step.
pub fn pretrain_encoder(
    encoder: &LrEncoder,
    store: &mut ParamStore,
    hr_images: &[Tensor],
    opts: &PretrainOptions,
) -> Result<Vec<f64>> {
    if hr_images.is_empty() {
        return Err(Error::Config("encoder pretraining needs a non-empty dataset".into()));
    }
    let factor = opts.kernel.factor;
    if !factor.is_power_of_two() || factor < 2 {
        return Err(Error::Config(format!("pretraining head needs a power-of-two factor, got {factor}")));
    }
    let mut rng = Rng::new(opts.seed);
    let mut work = store.clone();
    let out = encoder.cfg.in_channels * factor * factor;
    let head = Conv::new(&mut work, "pretrain.head", encoder.cfg.out_channels(), out, 3, Init::Scaled, &mut rng)?;
    let enc_ids = encoder.params();
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(opts.steps);

    for _ in 0..opts.steps {
        let picks: Vec<Tensor> =
            (0..opts.batch.max(1)).map(|_| hr_images[rng.below(hr_images.len())].clone()).collect();
        let y = Tensor::stack_batch(&picks)?;
        let x = downscale(&y, &opts.kernel)?;

        let mut tape = Tape::new();
        let p = work.bind(&mut tape, |_| true);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let u = encoder.apply(&mut tape, &p, xv)?;
        let mut pred = head.apply(&mut tape, &p, u)?;
        for _ in 0..factor.trailing_zeros() {
            pred = tape.unsqueeze2(pred)?;
        }
        let diff = tape.sub(pred, yv)?;
        let diff = tape.abs(diff);
        let axes: Vec<usize> = (0..4).collect();
        let loss = tape.mean(diff, &axes)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step: losses.len(), detail: "encoder pretraining loss".into() });
        }
        losses.push(value);
        let mut grads = tape.backward(loss)?;
        let mut updates = Vec::new();
        for id in enc_ids.iter().chain(head.params().iter()) {
            if let Some(g) = grads.take(p[*id]) {
                updates.push((*id, g));
            }
        }
        adam.step(&mut work, &updates, opts.lr)?;
    }

    for id in enc_ids {
        store.set(id, work.get(id).clone())?;
    }
    Ok(losses)
}
