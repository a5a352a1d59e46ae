//! The multi-level conditional flow and its likelihood, encoding, decoding
//! and sampling.

use std::f64::consts::{LN_2, TAU};

use crate::conditioning::{EncoderConfig, LrEncoder};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, ActNorm, AffineCoupling, AffineInjector, FlowLayer, InvConv1x1, LayerKind};
use crate::linalg;
use crate::params::{Bound, ParamStore};
use crate::rng::{gauss_sample, Rng};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub levels: usize,
    pub steps_per_level: usize,
    pub transitional_steps: usize,
    pub hidden: usize,
    pub use_affine_injector: bool,
    pub use_transitional_steps: bool,
    pub scale_factor: usize,
    pub hr_channels: usize,
    pub encoder: EncoderConfig,
}

impl ArchConfig {
    /// Full-size layout: 16 steps per level, 3 levels at 4× and 4 at 8×.
    pub fn full(scale_factor: usize) -> Result<Self> {
        let levels = match scale_factor {
            4 => 3,
            8 => 4,
            f => return Err(Error::Config(format!("scale factor must be 4 or 8, got {f}"))),
        };
        Ok(ArchConfig {
            levels,
            steps_per_level: 16,
            transitional_steps: 2,
            hidden: 64,
            use_affine_injector: true,
            use_transitional_steps: true,
            scale_factor,
            hr_channels: 3,
            encoder: EncoderConfig::default(),
        })
    }

    /// Desk-scale layout for 32×32 HR patches at 4×.
    pub fn toy() -> Self {
        ArchConfig {
            levels: 2,
            steps_per_level: 4,
            transitional_steps: 2,
            hidden: 32,
            use_affine_injector: true,
            use_transitional_steps: true,
            scale_factor: 4,
            hr_channels: 3,
            encoder: EncoderConfig { blocks: 4, width: 8, taps: 5, in_channels: 3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale_factor, 4 | 8) {
            return Err(Error::Config(format!("scale factor must be 4 or 8, got {}", self.scale_factor)));
        }
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if self.hidden == 0 || self.hr_channels == 0 {
            return Err(Error::Config("hidden width and HR channels must be positive".into()));
        }
        if self.encoder.in_channels != self.hr_channels {
            return Err(Error::Config(format!(
                "encoder reads {} channels but images have {}",
                self.encoder.in_channels, self.hr_channels
            )));
        }
        self.encoder.validate()
    }

    /// HR height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let levels = 1usize << self.levels;
        levels.max(self.scale_factor)
    }

    fn active_transitional(&self) -> usize {
        if self.use_transitional_steps {
            self.transitional_steps
        } else {
            0
        }
    }
}

/// Per-level latent tensors, finest level first. Coordinates are addressed
/// as `(i, j, k, l)`: row, column, channel and level.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    pub levels: Vec<Tensor>,
}

impl LatentStack {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        LatentStack { levels: shapes.iter().map(|s| Tensor::zeros(s)).collect() }
    }

    /// `z_l ~ N(0, τ²)` at every level.
    pub fn sample(shapes: &[Vec<usize>], tau: f64, rng: &mut Rng) -> Result<Self> {
        if tau < 0.0 || !tau.is_finite() {
            return Err(Error::Domain(format!("temperature must be non-negative, got {tau}")));
        }
        let levels = shapes.iter().map(|s| gauss_sample(rng, s, tau)).collect::<Result<_>>()?;
        Ok(LatentStack { levels })
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn numel(&self) -> usize {
        self.levels.iter().map(Tensor::numel).sum()
    }

    pub fn scale(&self, k: f64) -> Self {
        LatentStack { levels: self.levels.iter().map(|t| t.scale(k)).collect() }
    }

    fn offset(&self, b: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
        let s = self.levels[l].shape();
        ((b * s[1] + k) * s[2] + i) * s[3] + j
    }

    pub fn get(&self, b: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.levels[l].data()[self.offset(b, i, j, k, l)]
    }

    pub fn set(&mut self, b: usize, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let o = self.offset(b, i, j, k, l);
        self.levels[l].data_mut()[o] = v;
    }

    /// `-log N(z; 0, I)` per batch element.
    pub fn prior_nll(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for z in &self.levels {
            let t = layers::gaussian_nll(z)?;
            total = Some(match total {
                Some(acc) => acc.add(&t)?,
                None => t,
            });
        }
        total.ok_or_else(|| Error::Shape("empty latent stack".into()))
    }
}

/// Values produced by a forward pass, kept per layer.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    pub latents: LatentStack,
    pub prior_nll: Tensor,
    /// One `[B]` log-determinant per non-split layer, in application order.
    pub logdets: Vec<(LayerKind, Tensor)>,
    pub nll: Tensor,
}

struct TapeForward {
    latents: Vec<Var>,
    logdets: Vec<(LayerKind, Var)>,
}

/// The conditional flow together with its LR encoder. Owns every parameter.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub encoder: Option<LrEncoder>,
    levels: Vec<Vec<FlowLayer>>,
}

impl FlowModel {
    /// Builds `levels` levels of: squeeze, unconditional transitional steps,
    /// `K` conditional steps, and a split on all but the last level.
    pub fn build(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let encoder = LrEncoder::new(&mut store, arch.encoder, rng)?;
        let cu = arch.encoder.out_channels();
        let mut channels = arch.hr_channels;
        let mut levels = Vec::with_capacity(arch.levels);
        for l in 0..arch.levels {
            let mut level = vec![FlowLayer::Squeeze];
            channels *= 4;
            for t in 0..arch.active_transitional() {
                let name = format!("flow.l{l}.t{t}");
                push_step(&mut level, &mut store, &name, channels, None, arch.hidden, false, rng)?;
            }
            for k in 0..arch.steps_per_level {
                let name = format!("flow.l{l}.k{k}");
                push_step(
                    &mut level,
                    &mut store,
                    &name,
                    channels,
                    Some(cu),
                    arch.hidden,
                    arch.use_affine_injector,
                    rng,
                )?;
            }
            if l + 1 < arch.levels {
                level.push(FlowLayer::Split);
                channels /= 2;
            }
            levels.push(level);
        }
        Ok(FlowModel { arch, store, encoder: Some(encoder), levels })
    }

    /// Single-level unconditional flow without squeeze or split, for
    /// inputs of any spatial size with `channels` channels.
    pub fn micro(channels: usize, steps: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut level = Vec::new();
        for k in 0..steps {
            push_step(&mut level, &mut store, &format!("flow.l0.k{k}"), channels, None, hidden, false, rng)?;
        }
        let arch = ArchConfig {
            levels: 1,
            steps_per_level: steps,
            transitional_steps: 0,
            hidden,
            use_affine_injector: false,
            use_transitional_steps: false,
            scale_factor: 4,
            hr_channels: channels,
            encoder: EncoderConfig::default(),
        };
        Ok(FlowModel { arch, store, encoder: None, levels: vec![level] })
    }

    /// Flattened layer layout.
    pub fn structure(&self) -> Vec<LayerKind> {
        self.layers().map(FlowLayer::kind).collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &FlowLayer> {
        self.levels.iter().flatten()
    }

    pub fn level_layers(&self) -> &[Vec<FlowLayer>] {
        &self.levels
    }

    /// Conditioning channel count expected by the conditional layers.
    pub fn cond_channels(&self) -> Option<usize> {
        self.layers().find_map(|l| match l {
            FlowLayer::Injector(_) => Some(self.arch.encoder.out_channels()),
            FlowLayer::Coupling(c) => c.cond_channels,
            _ => None,
        })
    }

    /// Sets every 1×1 mixing matrix to the identity.
    pub fn set_identity_mixing(&mut self) -> Result<()> {
        let ids: Vec<_> = self
            .layers()
            .filter_map(|l| match l {
                FlowLayer::InvConv(c) => Some((c.weight, c.channels)),
                _ => None,
            })
            .collect();
        for (id, c) in ids {
            self.store.set(id, linalg::identity(c))?;
        }
        Ok(())
    }

    /// Adds `N(0, std²)` noise to every trainable parameter.
    pub fn perturb(&mut self, rng: &mut Rng, std: f64) {
        let ids: Vec<_> = self.store.ids().filter(|&id| self.store.is_trainable(id)).collect();
        for id in ids {
            for v in self.store.get_mut(id).data_mut() {
                *v += std * rng.gaussian();
            }
        }
    }

    fn squeezes(&self) -> usize {
        self.layers().filter(|l| matches!(l, FlowLayer::Squeeze)).count()
    }

    pub fn check_hr_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return shape_err(format!("expected an NCHW image, got shape {shape:?}"));
        }
        if shape[1] != self.arch.hr_channels {
            return shape_err(format!("expected {} channels, got {}", self.arch.hr_channels, shape[1]));
        }
        let m = 1usize << self.squeezes();
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return shape_err(format!("image {}×{} is not divisible by {m} (2^levels)", shape[2], shape[3]));
        }
        Ok(())
    }

    /// Latent shapes for an HR batch of shape `[B, C, H, W]`.
    pub fn latent_shapes(&self, hr_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        self.check_hr_shape(hr_shape)?;
        let (b, mut c, mut h, mut w) = (hr_shape[0], hr_shape[1], hr_shape[2], hr_shape[3]);
        let mut shapes = Vec::new();
        for layer in self.layers() {
            match layer {
                FlowLayer::Squeeze => {
                    c *= 4;
                    h /= 2;
                    w /= 2;
                }
                FlowLayer::Split => {
                    c /= 2;
                    shapes.push(vec![b, c, h, w]);
                }
                _ => {}
            }
        }
        shapes.push(vec![b, c, h, w]);
        Ok(shapes)
    }

    /// HR shape produced from an LR image of shape `lr_shape`.
    pub fn hr_shape_for(&self, lr_shape: &[usize]) -> Result<Vec<usize>> {
        if lr_shape.len() != 4 {
            return shape_err(format!("expected an NCHW image, got shape {lr_shape:?}"));
        }
        let f = self.arch.scale_factor;
        let shape = vec![lr_shape[0], lr_shape[1], lr_shape[2] * f, lr_shape[3] * f];
        self.check_hr_shape(&shape).map_err(|_| {
            let m = self.arch.size_multiple() / f;
            Error::Shape(format!("LR image {}×{} must have sides divisible by {}", lr_shape[2], lr_shape[3], m.max(1)))
        })?;
        Ok(shape)
    }

    /// Encoder features for an LR batch, or `None` for a model without an
    /// encoder.
    pub fn condition(&self, x: &Tensor) -> Result<Option<Tensor>> {
        match &self.encoder {
            Some(enc) => enc.encode(&self.store, x).map(Some),
            None => Ok(None),
        }
    }

    /// Conditioning on the tape; substitutes zeros when `u` is absent and
    /// the model has conditional layers.
    fn cond_var(&self, tape: &mut Tape, batch: usize, u: Option<Var>) -> Result<Option<Var>> {
        match (self.cond_channels(), u) {
            (None, _) => Ok(None),
            (Some(cu), Some(u)) => {
                let (ub, uc, _, _) = tape.value(u).dims4()?;
                if ub != batch || uc != cu {
                    return shape_err(format!(
                        "conditioning has shape {:?}, expected batch {batch} and {cu} channels",
                        tape.value(u).shape()
                    ));
                }
                Ok(Some(u))
            }
            (Some(cu), None) => Ok(Some(tape.constant(Tensor::zeros(&[batch, cu, 1, 1])))),
        }
    }

    fn forward_tape(&self, tape: &mut Tape, p: &Bound, y: Var, u: Option<Var>) -> Result<TapeForward> {
        self.check_hr_shape(tape.value(y).shape())?;
        let batch = tape.value(y).batch_size();
        let u = self.cond_var(tape, batch, u)?;
        let mut h = y;
        let mut latents = Vec::new();
        let mut logdets = Vec::new();
        for level in &self.levels {
            let mut u_level = None;
            for layer in level {
                if let FlowLayer::Split = layer {
                    let (keep, z) = layers::split_forward(tape, h)?;
                    latents.push(z);
                    h = keep;
                    continue;
                }
                let ul = self.level_cond(tape, layer, h, u, &mut u_level)?;
                let (out, ld) = layer.forward(tape, p, h, ul)?;
                h = out;
                if let Some(ld) = ld {
                    logdets.push((layer.kind(), ld));
                }
            }
        }
        latents.push(h);
        Ok(TapeForward { latents, logdets })
    }

    fn level_cond(
        &self,
        tape: &mut Tape,
        layer: &FlowLayer,
        h: Var,
        u: Option<Var>,
        cache: &mut Option<Var>,
    ) -> Result<Option<Var>> {
        let needs =
            matches!(layer, FlowLayer::Injector(_)) || matches!(layer, FlowLayer::Coupling(c) if c.is_conditional());
        if !needs {
            return Ok(None);
        }
        if cache.is_none() {
            let u = u.ok_or_else(|| Error::Usage("conditional layer without conditioning".into()))?;
            let (_, _, hh, ww) = tape.value(h).dims4()?;
            *cache = Some(tape.bilinear_resize(u, hh, ww)?);
        }
        Ok(*cache)
    }

    /// Per-item NLL in nats, recorded on `tape`.
    pub fn nll_tape(&self, tape: &mut Tape, p: &Bound, y: Var, u: Option<Var>) -> Result<Var> {
        let fwd = self.forward_tape(tape, p, y, u)?;
        let mut total: Option<Var> = None;
        for z in fwd.latents {
            let per = tape.value(z).numel() / tape.value(z).batch_size();
            let sq = tape.mul(z, z)?;
            let s = tape.sum(sq, &[1, 2, 3])?;
            let s = tape.scale(s, 0.5);
            let s = tape.add_scalar(s, 0.5 * per as f64 * TAU.ln());
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let mut total = total.expect("at least one latent");
        for (_, ld) in fwd.logdets {
            total = tape.sub(total, ld)?;
        }
        Ok(total)
    }

    fn inverse_tape(&self, tape: &mut Tape, p: &Bound, z: &[Var], u: Option<Var>) -> Result<Var> {
        let batch = tape.value(z[0]).batch_size();
        let u = self.cond_var(tape, batch, u)?;
        let mut next = z.len() - 1;
        let mut h = z[next];
        for level in self.levels.iter().rev() {
            let mut u_level = None;
            for layer in level.iter().rev() {
                if let FlowLayer::Split = layer {
                    next = next.checked_sub(1).ok_or_else(|| Error::Shape("too few latent levels".into()))?;
                    h = layers::split_inverse(tape, h, z[next])?;
                    continue;
                }
                let ul = self.level_cond(tape, layer, h, u, &mut u_level)?;
                h = layer.inverse(tape, p, h, ul)?;
            }
        }
        if next != 0 {
            return shape_err(format!("{} latent levels supplied, {} consumed", z.len(), z.len() - next));
        }
        Ok(h)
    }

    /// Full forward pass with every per-layer log-determinant.
    pub fn encode_trace(&self, y: &Tensor, u: Option<&Tensor>) -> Result<EncodeTrace> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let yv = tape.constant(y.clone());
        let uv = u.map(|u| tape.constant(u.clone()));
        let fwd = self.forward_tape(&mut tape, &p, yv, uv)?;
        let latents = LatentStack { levels: fwd.latents.iter().map(|&v| tape.value(v).clone()).collect() };
        let logdets: Vec<(LayerKind, Tensor)> = fwd.logdets.iter().map(|&(k, v)| (k, tape.value(v).clone())).collect();
        let prior_nll = latents.prior_nll()?;
        let mut nll = prior_nll.clone();
        for (_, ld) in &logdets {
            nll = nll.sub(ld)?;
        }
        Ok(EncodeTrace { latents, prior_nll, logdets, nll })
    }

    /// Maps HR images to latents; also returns the per-item NLL in nats.
    pub fn encode(&self, y: &Tensor, u: Option<&Tensor>) -> Result<(LatentStack, Tensor)> {
        let t = self.encode_trace(y, u)?;
        Ok((t.latents, t.nll))
    }

    pub fn decode(&self, z: &LatentStack, u: Option<&Tensor>) -> Result<Tensor> {
        let Some(first) = z.levels.first() else {
            return shape_err("empty latent stack");
        };
        let b = first.batch_size();
        let expected_final = z.levels.last().expect("non-empty").shape();
        let hr = self.hr_shape_from_final(expected_final)?;
        let expected = self.latent_shapes(&[b, hr.0, hr.1, hr.2])?;
        if z.shapes() != expected {
            return shape_err(format!("latent shapes {:?} do not match {:?}", z.shapes(), expected));
        }
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let zs: Vec<Var> = z.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let uv = u.map(|u| tape.constant(u.clone()));
        let y = self.inverse_tape(&mut tape, &p, &zs, uv)?;
        Ok(tape.value(y).clone())
    }

    fn hr_shape_from_final(&self, last: &[usize]) -> Result<(usize, usize, usize)> {
        if last.len() != 4 {
            return shape_err(format!("latent of shape {last:?} is not 4-d"));
        }
        let m = 1usize << self.squeezes();
        Ok((self.arch.hr_channels, last[2] * m, last[3] * m))
    }

    /// Draws `z ~ N(0, τ²)` and decodes it for an HR batch of `hr_shape`.
    pub fn sample(&self, u: Option<&Tensor>, hr_shape: &[usize], tau: f64, rng: &mut Rng) -> Result<Tensor> {
        let shapes = self.latent_shapes(hr_shape)?;
        let z = LatentStack::sample(&shapes, tau, rng)?;
        self.decode(&z, u)
    }

    /// Conditions on an LR batch and samples at temperature `tau`.
    pub fn super_resolve(&self, x: &Tensor, tau: f64, rng: &mut Rng) -> Result<Tensor> {
        let hr = self.hr_shape_for(x.shape())?;
        let u = self.condition(x)?;
        self.sample(u.as_ref(), &hr, tau, rng)
    }

    pub fn log_density(&self, y: &Tensor, u: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.encode(y, u)?.1.scale(-1.0))
    }

    /// Converts a per-item NLL in nats to bits per dimension.
    pub fn bits_per_dim(nll: f64, dims: usize) -> f64 {
        nll / (dims as f64 * LN_2)
    }

    /// Runs data-dependent initialization of every uninitialized actnorm,
    /// in layer order, on the batch `y`.
    pub fn initialize_actnorm(&mut self, y: &Tensor, u: Option<&Tensor>) -> Result<()> {
        self.check_hr_shape(y.shape())?;
        let batch = y.batch_size();
        let u = match (self.cond_channels(), u) {
            (Some(cu), None) => Some(Tensor::zeros(&[batch, cu, 1, 1])),
            (_, u) => u.cloned(),
        };
        let mut h = y.clone();
        let levels = self.levels.clone();
        for level in &levels {
            let mut u_level: Option<Tensor> = None;
            for layer in level {
                match layer {
                    FlowLayer::Split => {
                        h = layers::split(&h)?.0;
                        continue;
                    }
                    FlowLayer::ActNorm(a) if !a.is_initialized(&self.store) => {
                        a.initialize_from(&mut self.store, &h)?;
                    }
                    _ => {}
                }
                let needs = matches!(layer, FlowLayer::Injector(_))
                    || matches!(layer, FlowLayer::Coupling(c) if c.is_conditional());
                if needs && u_level.is_none() {
                    let (_, _, hh, ww) = h.dims4()?;
                    let src = u.as_ref().expect("conditioning present");
                    u_level = Some(crate::tensor::kernels::bilinear_resize(src, hh, ww)?);
                }
                let ul = if needs { u_level.as_ref() } else { None };
                h = layer.forward_values(&self.store, &h, ul)?.0;
            }
        }
        Ok(())
    }

    pub fn actnorm_layers(&self) -> impl Iterator<Item = &ActNorm> {
        self.layers().filter_map(|l| match l {
            FlowLayer::ActNorm(a) => Some(a),
            _ => None,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn push_step(
    level: &mut Vec<FlowLayer>,
    store: &mut ParamStore,
    name: &str,
    channels: usize,
    cond: Option<usize>,
    hidden: usize,
    injector: bool,
    rng: &mut Rng,
) -> Result<()> {
    level.push(FlowLayer::ActNorm(ActNorm::new(store, &format!("{name}.actnorm"), channels)?));
    level.push(FlowLayer::InvConv(InvConv1x1::new(store, &format!("{name}.inv1x1"), channels, rng)?));
    if let (true, Some(cu)) = (injector, cond) {
        level.push(FlowLayer::Injector(AffineInjector::new(
            store,
            &format!("{name}.injector"),
            channels,
            cu,
            hidden,
            rng,
        )?));
    }
    level.push(FlowLayer::Coupling(AffineCoupling::new(
        store,
        &format!("{name}.coupling"),
        channels,
        cond,
        hidden,
        rng,
    )?));
    Ok(())
}
