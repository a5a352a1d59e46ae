//! Latent-space manipulation: moment-matched normalization of latent
//! collections, style and content transfer, restoration and best-of-n
//! sampling.

use crate::conditioning::{downscale, DownscaleKernel};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{FlowModel, LatentStack};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Collections with an empirical standard deviation at or below this are
/// left untouched.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// All coordinates of one batch item, across every level.
    Global,
    /// One collection per `(i, j, l)` over channels.
    Local,
    /// One collection per `(k, l)` over spatial positions.
    Spatial,
}

/// Address of one latent value: level and flat offset within that level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Member {
    pub level: usize,
    pub index: usize,
}

/// Axis-aligned rectangle in HR pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Region {
    /// Parses `x,y,w,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("region must be x,y,w,h with non-negative integers, got '{s}'")))?;
        match parts[..] {
            [x, y, w, h] if w > 0 && h > 0 => Ok(Region { x, y, w, h }),
            _ => Err(Error::Config(format!("region must be x,y,w,h with positive size, got '{s}'"))),
        }
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Config(format!(
                "region {},{},{},{} exceeds image bounds {width}×{height}",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Per-level spatial selection of latent positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    /// Row-major `h×w` flags per level.
    pub levels: Vec<Vec<bool>>,
}

impl LatentMask {
    /// Maps an HR rectangle onto every latent level by integer division of
    /// its coordinates by the level's down-sampling factor, then dilates by
    /// one position and clamps to the grid. An empty rectangle selects
    /// nothing.
    pub fn from_region(region: &Region, hr_height: usize, hr_width: usize, shapes: &[Vec<usize>]) -> Self {
        let levels = shapes
            .iter()
            .map(|s| {
                let (lh, lw) = (s[2], s[3]);
                let mut flags = vec![false; lh * lw];
                if region.w == 0 || region.h == 0 {
                    return flags;
                }
                let (fy, fx) = (hr_height / lh, hr_width / lw);
                let r0 = (region.y / fy).saturating_sub(1);
                let r1 = ((region.y + region.h).div_ceil(fy) + 1).min(lh);
                let c0 = (region.x / fx).saturating_sub(1);
                let c1 = ((region.x + region.w).div_ceil(fx) + 1).min(lw);
                for i in r0..r1 {
                    for j in c0..c1 {
                        flags[i * lw + j] = true;
                    }
                }
                flags
            })
            .collect();
        LatentMask { levels }
    }

    fn contains(&self, level: usize, i: usize, j: usize, w: usize) -> bool {
        self.levels[level][i * w + j]
    }

    pub fn count(&self) -> usize {
        self.levels.iter().flatten().filter(|&&f| f).count()
    }
}

/// Partitions the latent coordinates of `shapes` into collections. With a
/// mask, only positions it selects are included and empty collections are
/// dropped.
pub fn collections(shapes: &[Vec<usize>], strategy: Strategy, mask: Option<&LatentMask>) -> Vec<Vec<Member>> {
    let batch = shapes.first().map_or(0, |s| s[0]);
    let keep = |l: usize, i: usize, j: usize, w: usize| mask.is_none_or(|m| m.contains(l, i, j, w));
    let at = |s: &[usize], b: usize, k: usize, i: usize, j: usize| ((b * s[1] + k) * s[2] + i) * s[3] + j;
    let mut out = Vec::new();
    for b in 0..batch {
        match strategy {
            Strategy::Global => {
                let mut all = Vec::new();
                for (l, s) in shapes.iter().enumerate() {
                    for k in 0..s[1] {
                        for i in 0..s[2] {
                            for j in 0..s[3] {
                                if keep(l, i, j, s[3]) {
                                    all.push(Member { level: l, index: at(s, b, k, i, j) });
                                }
                            }
                        }
                    }
                }
                out.push(all);
            }
            Strategy::Local => {
                for (l, s) in shapes.iter().enumerate() {
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            if keep(l, i, j, s[3]) {
                                out.push((0..s[1]).map(|k| Member { level: l, index: at(s, b, k, i, j) }).collect());
                            }
                        }
                    }
                }
            }
            Strategy::Spatial => {
                for (l, s) in shapes.iter().enumerate() {
                    for k in 0..s[1] {
                        let mut c = Vec::new();
                        for i in 0..s[2] {
                            for j in 0..s[3] {
                                if keep(l, i, j, s[3]) {
                                    c.push(Member { level: l, index: at(s, b, k, i, j) });
                                }
                            }
                        }
                        out.push(c);
                    }
                }
            }
        }
    }
    out.retain(|c| !c.is_empty());
    out
}

/// Gamma variate with shape `k` and scale `theta` (Marsaglia–Tsang, with
/// the `U^(1/k)` boost for `k < 1`).
pub fn gamma_sample(rng: &mut Rng, k: f64, theta: f64) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Domain(format!("gamma shape must be positive, got {k}")));
    }
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::Domain(format!("gamma scale must be non-negative, got {theta}")));
    }
    if theta == 0.0 {
        return Ok(0.0);
    }
    if k < 1.0 {
        let g = gamma_sample(rng, k + 1.0, 1.0)?;
        let u = loop {
            let u = rng.uniform();
            if u > 0.0 {
                break u;
            }
        };
        return Ok(theta * g * u.powf(1.0 / k));
    }
    let d = k - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = rng.gaussian();
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u = rng.uniform();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return Ok(theta * d * v);
        }
        if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return Ok(theta * d * v);
        }
    }
}

/// Target moments of one collection: the sampling distribution of the
/// empirical mean and unbiased variance of `n` i.i.d. `N(0, variance)`
/// values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentDraw {
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    pub n: usize,
    pub variance: f64,
}

impl MomentDraw {
    pub fn draw(rng: &mut Rng, n: usize, variance: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Degenerate(format!("moment draw needs at least 2 members, got {n}")));
        }
        if !(variance >= 0.0) {
            return Err(Error::Domain(format!("variance must be non-negative, got {variance}")));
        }
        let nf = n as f64;
        let mu_hat = (variance / nf).sqrt() * rng.gaussian();
        let sigma2_hat = gamma_sample(rng, (nf - 1.0) / 2.0, 2.0 * variance / (nf - 1.0))?;
        Ok(MomentDraw { mu_hat, sigma2_hat, n, variance })
    }
}

/// Outcome for one collection.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectionOutcome {
    pub members: Vec<Member>,
    /// `None` when the collection was skipped as degenerate.
    pub draw: Option<MomentDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizeReport {
    pub outcomes: Vec<CollectionOutcome>,
    pub skipped: usize,
}

/// Empirical mean and unbiased variance of the members.
pub fn member_moments(z: &LatentStack, members: &[Member]) -> (f64, f64) {
    let vals: Vec<f64> = members.iter().map(|m| z.levels[m.level].data()[m.index]).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Re-standardizes every collection to freshly drawn moments at
/// temperature `tau` (standard deviation of the reference Gaussian).
/// Each collection uses its own random stream derived from one draw of
/// `rng` and the collection index.
pub fn normalize_latents(
    z: &LatentStack,
    strategy: Strategy,
    tau: f64,
    rng: &mut Rng,
    mask: Option<&LatentMask>,
) -> Result<(LatentStack, NormalizeReport)> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be non-negative, got {tau}")));
    }
    let variance = tau * tau;
    let base = rng.next_u64();
    let mut out = z.clone();
    let mut outcomes = Vec::new();
    let mut skipped = 0;
    for (ci, members) in collections(&z.shapes(), strategy, mask).into_iter().enumerate() {
        let (mean, var) = member_moments(z, &members);
        let std = var.sqrt();
        if members.len() < 2 || std <= DEGENERATE_STD {
            log::warn!("skipping degenerate latent collection {ci} ({} members, std {std:e})", members.len());
            skipped += 1;
            outcomes.push(CollectionOutcome { members, draw: None });
            continue;
        }
        let mut stream = Rng::stream(base, ci as u64);
        let draw = MomentDraw::draw(&mut stream, members.len(), variance)?;
        let gain = draw.sigma2_hat.sqrt() / std;
        for m in &members {
            let v = &mut out.levels[m.level].data_mut()[m.index];
            *v = gain * (*v - mean) + draw.mu_hat;
        }
        outcomes.push(CollectionOutcome { members, draw: Some(draw) });
    }
    Ok((out, NormalizeReport { outcomes, skipped }))
}

fn conditioned_encode(
    model: &FlowModel,
    y: &Tensor,
    kernel: &DownscaleKernel,
) -> Result<(LatentStack, Option<Tensor>)> {
    let x = downscale(y, kernel)?;
    let u = model.condition(&x)?;
    let (z, _) = model.encode(y, u.as_ref())?;
    Ok((z, u))
}

/// Encodes `y_src` under its own LR conditioning and decodes the latents
/// under the conditioning of `x_tgt`. With a region, latents outside the
/// mapped region are drawn at temperature `tau` instead.
pub fn style_transfer(
    model: &FlowModel,
    y_src: &Tensor,
    x_tgt: &Tensor,
    kernel: &DownscaleKernel,
    region: Option<&Region>,
    tau: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let hr = model.hr_shape_for(x_tgt.shape())?;
    if hr != y_src.shape() {
        return Err(Error::Shape(format!(
            "source {:?} does not match the HR shape {hr:?} of the target",
            y_src.shape()
        )));
    }
    let (src_z, _) = conditioned_encode(model, y_src, kernel)?;
    let z = match region {
        None => src_z,
        Some(r) => {
            r.check_inside(hr[3], hr[2])?;
            let shapes = src_z.shapes();
            let mask = LatentMask::from_region(r, hr[2], hr[3], &shapes);
            let mut z = LatentStack::sample(&shapes, tau, rng)?;
            for (l, s) in shapes.iter().enumerate() {
                for (idx, v) in z.levels[l].data_mut().iter_mut().enumerate() {
                    let (i, j) = ((idx / s[3]) % s[2], idx % s[3]);
                    if mask.contains(l, i, j, s[3]) {
                        *v = src_z.levels[l].data()[idx];
                    }
                }
            }
            z
        }
    };
    let u = model.condition(x_tgt)?;
    model.decode(&z, u.as_ref())
}

/// Copies `patch` into `base` with its top-left corner at `(x, y)`.
pub fn paste(base: &Tensor, patch: &Tensor, x: usize, y: usize) -> Result<Tensor> {
    let (b, c, h, w) = base.dims4()?;
    let (pb, pc, ph, pw) = patch.dims4()?;
    if (pb, pc) != (b, c) {
        return Err(Error::Shape(format!("patch {:?} incompatible with {:?}", patch.shape(), base.shape())));
    }
    Region { x, y, w: pw, h: ph }.check_inside(w, h)?;
    let mut out = base.clone();
    for n in 0..b * c {
        for i in 0..ph {
            let dst = (n * h + y + i) * w + x;
            let src = (n * ph + i) * pw;
            out.data_mut()[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
        }
    }
    Ok(out)
}

/// The `region` of every image in `img`.
pub fn crop(img: &Tensor, region: &Region) -> Result<Tensor> {
    let (b, c, h, w) = img.dims4()?;
    region.check_inside(w, h)?;
    let mut out = Vec::with_capacity(b * c * region.w * region.h);
    for n in 0..b * c {
        for i in 0..region.h {
            let start = (n * h + region.y + i) * w + region.x;
            out.extend_from_slice(&img.data()[start..start + region.w]);
        }
    }
    Tensor::new(vec![b, c, region.h, region.w], out)
}

/// Pastes `patch` at `(x, y)`, encodes under the conditioning of the
/// original image, locally normalizes only the affected latents and
/// decodes.
#[allow(clippy::too_many_arguments)]
pub fn content_transfer(
    model: &FlowModel,
    y_base: &Tensor,
    patch: &Tensor,
    x: usize,
    y: usize,
    kernel: &DownscaleKernel,
    tau: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let edited = paste(y_base, patch, x, y)?;
    let (_, _, ph, pw) = patch.dims4()?;
    let lr = downscale(y_base, kernel)?;
    let u = model.condition(&lr)?;
    let (z, _) = model.encode(&edited, u.as_ref())?;
    let (h, w) = (y_base.shape()[2], y_base.shape()[3]);
    let mask = LatentMask::from_region(&Region { x, y, w: pw, h: ph }, h, w, &z.shapes());
    let (z, _) = normalize_latents(&z, Strategy::Local, tau, rng, Some(&mask))?;
    model.decode(&z, u.as_ref())
}

/// Projects a degraded image onto the model's output distribution: spatial
/// then local latent normalization, decoded under the image's own LR
/// conditioning.
pub fn restore(model: &FlowModel, y: &Tensor, kernel: &DownscaleKernel, tau: f64, rng: &mut Rng) -> Result<Tensor> {
    let (z, u) = conditioned_encode(model, y, kernel)?;
    let (z, _) = normalize_latents(&z, Strategy::Spatial, tau, rng, None)?;
    let (z, _) = normalize_latents(&z, Strategy::Local, tau, rng, None)?;
    model.decode(&z, u.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMetric {
    Psnr,
    Ssim,
}

/// Draws `n` samples in sequence from `rng` and returns the one scoring
/// highest against `y_ref`, with its score. Ties keep the earliest.
pub fn sample_best_of_n(
    model: &FlowModel,
    x: &Tensor,
    tau: f64,
    n: usize,
    metric: SelectMetric,
    y_ref: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, f64)> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n ≥ 1".into()));
    }
    let hr = model.hr_shape_for(x.shape())?;
    let u = model.condition(x)?;
    let mut best: Option<(Tensor, f64)> = None;
    for _ in 0..n {
        let y = model.sample(u.as_ref(), &hr, tau, rng)?;
        let score = match metric {
            SelectMetric::Psnr => metrics::psnr(&y, y_ref, 1.0)?,
            SelectMetric::Ssim => metrics::ssim(&y, y_ref)?,
        };
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((y, score));
        }
    }
    Ok(best.expect("n ≥ 1"))
}
