//! Maximum-likelihood training, the synthetic image corpus and
//! temperature sweeps.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use crate::conditioning::{downscale, DownscaleKernel, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::FlowModel;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::ParamId;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch: usize,
    pub lr0: f64,
    /// Fractions of training at which the learning rate halves.
    pub lr_halving_points: Vec<f64>,
    pub hr_patch: usize,
    /// Standard deviation of the noise added to HR targets, in `[0, 1]`
    /// units.
    pub noise_std: f64,
    /// Fraction of steps during which encoder parameters stay fixed.
    pub freeze_encoder_frac: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub pretrain_steps: usize,
    pub seed: u64,
}

/// Noise of standard deviation `4/√3` on the 0–255 scale, in `[0, 1]` units.
pub fn default_noise_std() -> f64 {
    4.0 / (3f64.sqrt() * 255.0)
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            total_steps: 200_000,
            batch: 16,
            lr0: 5e-4,
            lr_halving_points: vec![0.5, 0.75, 0.9, 0.95],
            hr_patch: 160,
            noise_std: default_noise_std(),
            freeze_encoder_frac: 0.5,
            adam: AdamConfig::default(),
            grad_clip: 50.0,
            pretrain_steps: 20_000,
            seed: 0,
        }
    }

    pub fn toy() -> Self {
        TrainConfig { total_steps: 5000, batch: 8, hr_patch: 32, pretrain_steps: 200, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.hr_patch == 0 {
            return bad("batch and hr_patch must be positive".into());
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.lr_halving_points.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("halving points must lie in [0, 1]: {:?}", self.lr_halving_points));
        }
        if !(0.0..=1.0).contains(&self.freeze_encoder_frac) {
            return bad(format!("freeze_encoder_frac must lie in [0, 1], got {}", self.freeze_encoder_frac));
        }
        if !(self.noise_std >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("noise_std must be non-negative and grad_clip positive".into());
        }
        Ok(())
    }

    /// Learning rate after fraction `f` of training.
    pub fn lr_at_fraction(&self, f: f64) -> f64 {
        let halvings = self.lr_halving_points.iter().filter(|&&p| p <= f).count();
        self.lr0 * 0.5f64.powi(halvings as i32)
    }

    pub fn lr_at_step(&self, step: usize) -> f64 {
        self.lr_at_fraction(step as f64 / self.total_steps.max(1) as f64)
    }

    pub fn encoder_frozen_at(&self, step: usize) -> bool {
        (step as f64) < self.freeze_encoder_frac * self.total_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub nll_nats: f64,
    pub bits_per_dim: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,nll_nats,bits_per_dim,lr";

pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.nll_nats, r.bits_per_dim, r.lr);
    }
    s
}

/// Moving average with a trailing window of `window` entries.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Optimizer state and position of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    pub kernel: DownscaleKernel,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, kernel: DownscaleKernel) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { adam: Adam::new(cfg.adam), cfg, step: 0, kernel })
    }

    /// Draws the HR batch of `step`; depends only on the seed and the step.
    pub fn batch_for(&self, data: &[Tensor], step: usize) -> Result<Tensor> {
        let mut rng = Rng::stream(self.cfg.seed, step as u64);
        let p = self.cfg.hr_patch;
        let picks = (0..self.cfg.batch)
            .map(|_| {
                let img = &data[rng.below(data.len())];
                random_crop(img, p, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&picks)
    }

    /// Runs until `total_steps` or `until` (exclusive), whichever is first,
    /// and returns the rows logged by this call.
    pub fn run(&mut self, model: &mut FlowModel, data: &[Tensor], until: Option<usize>) -> Result<Vec<LogRow>> {
        if data.is_empty() {
            return Err(Error::Config("training needs a non-empty dataset".into()));
        }
        let end = until.unwrap_or(self.cfg.total_steps).min(self.cfg.total_steps);
        let mut rows = Vec::new();
        while self.step < end {
            rows.push(self.step_once(model, data)?);
        }
        Ok(rows)
    }

    fn step_once(&mut self, model: &mut FlowModel, data: &[Tensor]) -> Result<LogRow> {
        let step = self.step;
        let y = self.batch_for(data, step)?;
        let x = downscale(&y, &self.kernel)?;
        let mut noise_rng = Rng::stream(self.cfg.seed ^ 0x6E6F_6973_6500, step as u64);
        let y_noisy = y.zip_map(
            &Tensor::new(y.shape().to_vec(), noise_rng.gaussian_vec(y.numel(), self.cfg.noise_std))?,
            |a, b| a + b,
        )?;

        if model.actnorm_layers().any(|a| !a.is_initialized(&model.store)) {
            let u = model.condition(&x)?;
            model.initialize_actnorm(&y_noisy, u.as_ref())?;
        }

        let frozen = self.cfg.encoder_frozen_at(step);
        let dims = (y.numel() / y.batch_size()) as f64;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, |name| !(frozen && name.starts_with(ENCODER_PREFIX)));
        let yv = tape.constant(y_noisy.clone());
        let xv = tape.constant(x.clone());
        let u = match &model.encoder {
            Some(enc) => Some(enc.apply(&mut tape, &p, xv)?),
            None => None,
        };
        let nll = model.nll_tape(&mut tape, &p, yv, u)?;
        let mean_nll = tape.mean(nll, &[0])?;
        let loss = tape.scale(mean_nll, 1.0 / dims);
        let nll_nats = tape.value(mean_nll).item()?;
        if !nll_nats.is_finite() {
            return Err(self.non_finite(model, &y_noisy, &x, step, "loss"));
        }
        let mut grads = tape.backward(loss)?;
        let mut updates: Vec<(ParamId, Tensor)> = Vec::new();
        for (id, var) in p.vars() {
            if let Some(g) = grads.take(var) {
                updates.push((id, g));
            }
        }
        let norm = clip_grad_norm(&mut updates, self.cfg.grad_clip);
        if !norm.is_finite() {
            return Err(self.non_finite(model, &y_noisy, &x, step, "gradient norm"));
        }
        let lr = self.cfg.lr_at_step(step);
        self.adam.step(&mut model.store, &updates, lr)?;
        self.step += 1;
        Ok(LogRow { step, nll_nats, bits_per_dim: nll_nats / (dims * LN_2), lr })
    }

    fn non_finite(&self, model: &FlowModel, y: &Tensor, x: &Tensor, step: usize, what: &str) -> Error {
        let mut detail = format!("non-finite {what}");
        let trace = model.condition(x).and_then(|u| model.encode_trace(y, u.as_ref()));
        if let Ok(t) = trace {
            let tail: Vec<String> =
                t.logdets.iter().rev().take(6).map(|(k, ld)| format!("{k:?}: {}", ld.mean())).collect();
            let _ = write!(detail, "; last layer logdets (newest first): {}", tail.join(", "));
        }
        Error::NonFinite { step, detail }
    }
}

/// Trains `model` from scratch for `cfg.total_steps` steps.
pub fn train(
    model: &mut FlowModel,
    data: &[Tensor],
    cfg: &TrainConfig,
    kernel: &DownscaleKernel,
) -> Result<Vec<LogRow>> {
    Trainer::new(cfg.clone(), *kernel)?.run(model, data, None)
}

fn random_crop(img: &Tensor, size: usize, rng: &mut Rng) -> Result<Tensor> {
    let (_, c, h, w) = img.dims4()?;
    if h < size || w < size {
        return Err(Error::Shape(format!("image {h}×{w} is smaller than the {size} patch")));
    }
    if (h, w) == (size, size) {
        return Ok(img.clone());
    }
    let (y0, x0) = (rng.below(h - size + 1), rng.below(w - size + 1));
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            let start = (ch * h + y0 + i) * w + x0;
            out.extend_from_slice(&img.data()[start..start + size]);
        }
    }
    Tensor::new(vec![1, c, size, size], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Gradients,
    Blobs,
    Checkerboards,
    Mixed,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::Gradients => "gradients",
            CorpusKind::Blobs => "blobs",
            CorpusKind::Checkerboards => "checkerboards",
            CorpusKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(CorpusKind::Gradients),
            "blobs" => Ok(CorpusKind::Blobs),
            "checkerboards" => Ok(CorpusKind::Checkerboards),
            "mixed" => Ok(CorpusKind::Mixed),
            other => Err(Error::Config(format!(
                "unknown corpus kind '{other}' (expected gradients, blobs, checkerboards or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

/// Deterministic RGB images of `spec.size` squared pixels in `[0, 1]`.
/// The size must be a positive multiple of `multiple`.
pub fn make_corpus(spec: &CorpusSpec, multiple: usize) -> Result<Vec<Tensor>> {
    if spec.size == 0 || !spec.size.is_multiple_of(multiple.max(1)) {
        return Err(Error::Config(format!(
            "corpus image size {} must be a positive multiple of {multiple}",
            spec.size
        )));
    }
    (0..spec.count)
        .map(|i| {
            let mut rng = Rng::stream(spec.seed, i as u64);
            let kind = match spec.kind {
                CorpusKind::Mixed => [CorpusKind::Gradients, CorpusKind::Blobs, CorpusKind::Checkerboards][i % 3],
                k => k,
            };
            match kind {
                CorpusKind::Gradients => gradient_image(spec.size, &mut rng),
                CorpusKind::Blobs => blob_image(spec.size, &mut rng),
                _ => {
                    let cell = [2, 4, 8][rng.below(3)];
                    let a = random_color(&mut rng);
                    let b = random_color(&mut rng);
                    checkerboard(spec.size, cell, a, b)
                }
            }
        })
        .collect()
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn image_from(size: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for i in 0..size {
            for j in 0..size {
                data.push(f(c, i, j).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![1, 3, size, size], data)
}

/// Cells of `cell` pixels alternating between colors `a` (top-left) and `b`.
pub fn checkerboard(size: usize, cell: usize, a: [f64; 3], b: [f64; 3]) -> Result<Tensor> {
    image_from(size, |c, i, j| if (i / cell + j / cell).is_multiple_of(2) { a[c] } else { b[c] })
}

fn gradient_image(size: usize, rng: &mut Rng) -> Result<Tensor> {
    let base = random_color(rng);
    let gx: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.8, 0.8)).collect();
    let gy: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.8, 0.8)).collect();
    let s = size as f64;
    image_from(size, |c, i, j| base[c] + gx[c] * (j as f64 / s - 0.5) + gy[c] * (i as f64 / s - 0.5))
}

fn blob_image(size: usize, rng: &mut Rng) -> Result<Tensor> {
    let bg = random_color(rng);
    let n = 2 + rng.below(4);
    let s = size as f64;
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..n)
        .map(|_| {
            let color = random_color(rng);
            let cy = rng.uniform() * s;
            let cx = rng.uniform() * s;
            let sigma = rng.uniform_range(0.08, 0.25) * s;
            (color, cy, cx, sigma)
        })
        .collect();
    image_from(size, |c, i, j| {
        let mut v = bg[c];
        for (color, cy, cx, sigma) in &blobs {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
            v = v * (1.0 - wgt) + color[c] * wgt;
        }
        v
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lr_psnr: f64,
    pub diversity: f64,
}

pub const SWEEP_HEADER: &str = "tau,psnr,ssim,lr_psnr,diversity";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let f = metrics::format_metric;
        let _ = writeln!(s, "{},{},{},{},{}", r.tau, f(r.psnr), f(r.ssim), f(r.lr_psnr), f(r.diversity));
    }
    s
}

/// Per temperature, mean PSNR, SSIM and LR-PSNR of `samples` draws per
/// image and the mean diversity across those draws. Image `i` uses the
/// same random stream at every temperature.
pub fn eval_sweep(
    model: &FlowModel,
    images: &[Tensor],
    taus: &[f64],
    samples: usize,
    kernel: &DownscaleKernel,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if images.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample per image".into()));
    }
    let prepared = images
        .iter()
        .map(|y| {
            let x = downscale(y, kernel)?;
            let u = model.condition(&x)?;
            Ok((y, x, u))
        })
        .collect::<Result<Vec<_>>>()?;
    taus.iter()
        .map(|&tau| {
            let (mut p, mut s, mut l, mut d) = (0.0, 0.0, 0.0, 0.0);
            for (i, (y, x, u)) in prepared.iter().enumerate() {
                let mut rng = Rng::stream(seed, i as u64);
                let outs = (0..samples)
                    .map(|_| model.sample(u.as_ref(), y.shape(), tau, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                for o in &outs {
                    p += metrics::psnr(o, y, 1.0)?;
                    s += metrics::ssim(o, y)?;
                    l += metrics::lr_psnr(o, x, kernel)?;
                }
                if samples > 1 {
                    d += metrics::diversity_sigma(&outs)?;
                }
            }
            let n = images.len() as f64;
            let ns = n * samples as f64;
            Ok(SweepRow { tau, psnr: p / ns, ssim: s / ns, lr_psnr: l / ns, diversity: d / n })
        })
        .collect()
}
