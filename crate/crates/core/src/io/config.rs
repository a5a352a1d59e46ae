//! `key = value` run configuration with `[arch]`, `[train]`, `[data]` and
//! `[eval]` sections.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::conditioning::{DownscaleKernel, KernelKind};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::optim::AdamConfig;
use crate::training::{CorpusKind, CorpusSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: CorpusKind,
    /// Side length of the synthetic HR images.
    pub size: usize,
    pub count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub kernel: KernelKind,
    pub antialias: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: CorpusKind::Mixed,
            size: 32,
            count: 300,
            eval_count: 20,
            seed: 7,
            kernel: KernelKind::Bicubic,
            antialias: true,
        }
    }
}

impl DataConfig {
    pub fn train_corpus(&self) -> CorpusSpec {
        CorpusSpec { kind: self.kind, size: self.size, count: self.count, seed: self.seed }
    }

    /// Held-out images come from a seed stream disjoint from training.
    pub fn eval_corpus(&self) -> CorpusSpec {
        CorpusSpec { kind: self.kind, size: self.size, count: self.eval_count, seed: self.seed ^ 0x5eed_e7a1 }
    }

    pub fn downscale_kernel(&self, factor: usize) -> DownscaleKernel {
        DownscaleKernel::new(self.kernel, factor, self.antialias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tau_list: Vec<f64>,
    pub samples: usize,
    pub default_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tau_list: vec![0.0, 0.3, 0.6, 0.9], samples: 4, default_tau: 0.8 }
    }
}

/// Everything a run needs. Defaults describe the desk-scale toy setup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::toy(),
            train: TrainConfig::toy(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{key}'")))
}

fn list(key: &str, raw: &str) -> Result<Vec<f64>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| value(key, p.trim())).collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key '{key}' in section [{section}]"))
}

fn set_arch(a: &mut ArchConfig, key: &str, raw: &str) -> Result<()> {
    match key {
        "levels" => a.levels = value(key, raw)?,
        "steps_per_level" => a.steps_per_level = value(key, raw)?,
        "transitional_steps" => a.transitional_steps = value(key, raw)?,
        "hidden" => a.hidden = value(key, raw)?,
        "use_affine_injector" => a.use_affine_injector = value(key, raw)?,
        "use_transitional_steps" => a.use_transitional_steps = value(key, raw)?,
        "scale_factor" => a.scale_factor = value(key, raw)?,
        "hr_channels" => {
            a.hr_channels = value(key, raw)?;
            a.encoder.in_channels = a.hr_channels;
        }
        "encoder_blocks" => a.encoder.blocks = value(key, raw)?,
        "encoder_width" => a.encoder.width = value(key, raw)?,
        "encoder_taps" => a.encoder.taps = value(key, raw)?,
        _ => return Err(unknown("arch", key)),
    }
    Ok(())
}

fn set_train(t: &mut TrainConfig, key: &str, raw: &str) -> Result<()> {
    match key {
        "total_steps" => t.total_steps = value(key, raw)?,
        "batch" => t.batch = value(key, raw)?,
        "lr0" => t.lr0 = value(key, raw)?,
        "lr_halving_points" => t.lr_halving_points = list(key, raw)?,
        "hr_patch" => t.hr_patch = value(key, raw)?,
        "noise_std" => t.noise_std = value(key, raw)?,
        "freeze_encoder_frac" => t.freeze_encoder_frac = value(key, raw)?,
        "beta1" => t.adam.beta1 = value(key, raw)?,
        "beta2" => t.adam.beta2 = value(key, raw)?,
        "eps" => t.adam.eps = value(key, raw)?,
        "grad_clip" => t.grad_clip = value(key, raw)?,
        "pretrain_steps" => t.pretrain_steps = value(key, raw)?,
        "seed" => t.seed = value(key, raw)?,
        _ => return Err(unknown("train", key)),
    }
    Ok(())
}

fn set_data(d: &mut DataConfig, key: &str, raw: &str) -> Result<()> {
    match key {
        "kind" => d.kind = CorpusKind::parse(raw)?,
        "size" => d.size = value(key, raw)?,
        "count" => d.count = value(key, raw)?,
        "eval_count" => d.eval_count = value(key, raw)?,
        "seed" => d.seed = value(key, raw)?,
        "kernel" => d.kernel = KernelKind::parse(raw)?,
        "antialias" => d.antialias = value(key, raw)?,
        _ => return Err(unknown("data", key)),
    }
    Ok(())
}

fn set_eval(e: &mut EvalConfig, key: &str, raw: &str) -> Result<()> {
    match key {
        "tau_list" => e.tau_list = list(key, raw)?,
        "samples" => e.samples = value(key, raw)?,
        "default_tau" => e.default_tau = value(key, raw)?,
        _ => return Err(unknown("eval", key)),
    }
    Ok(())
}

/// Canonical text of the `[arch]` section, also embedded in checkpoints.
pub fn arch_section(a: &ArchConfig) -> String {
    let mut s = String::from("[arch]\n");
    let rows: [(&str, String); 11] = [
        ("levels", a.levels.to_string()),
        ("steps_per_level", a.steps_per_level.to_string()),
        ("transitional_steps", a.transitional_steps.to_string()),
        ("hidden", a.hidden.to_string()),
        ("use_affine_injector", a.use_affine_injector.to_string()),
        ("use_transitional_steps", a.use_transitional_steps.to_string()),
        ("scale_factor", a.scale_factor.to_string()),
        ("hr_channels", a.hr_channels.to_string()),
        ("encoder_blocks", a.encoder.blocks.to_string()),
        ("encoder_width", a.encoder.width.to_string()),
        ("encoder_taps", a.encoder.taps.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Parses text holding only an `[arch]` section.
pub fn parse_arch_section(text: &str) -> Result<ArchConfig> {
    let mut cfg = RunConfig::default();
    let sections = apply(text, &mut cfg)?;
    if sections.iter().any(|s| s != "arch") {
        return Err(Error::Config("architecture block may only hold an [arch] section".into()));
    }
    cfg.arch.validate()?;
    Ok(cfg.arch)
}

/// Applies every line of `text` to `cfg` and returns the section names seen.
fn apply(text: &str, cfg: &mut RunConfig) -> Result<Vec<String>> {
    let mut seen = Vec::new();
    let mut section: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
            other => other,
        };
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "arch" | "train" | "data" | "eval") {
                return Err(at(Error::Config(format!("unknown section [{name}]"))));
            }
            seen.push(name.to_string());
            section = Some(name.to_string());
            continue;
        }
        let (key, raw) =
            line.split_once('=').ok_or_else(|| at(Error::Config(format!("expected key = value, got '{line}'"))))?;
        let (key, raw) = (key.trim(), raw.trim());
        let result = match section.as_deref() {
            Some("arch") => set_arch(&mut cfg.arch, key, raw),
            Some("train") => set_train(&mut cfg.train, key, raw),
            Some("data") => set_data(&mut cfg.data, key, raw),
            Some("eval") => set_eval(&mut cfg.eval, key, raw),
            _ => Err(Error::Config(format!("key '{key}' appears before any section"))),
        };
        result.map_err(at)?;
    }
    Ok(seen)
}

impl RunConfig {
    /// Parses a config, starting from the defaults. Lines are `key = value`
    /// under a `[section]` header; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        apply(text, &mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if !self.data.size.is_multiple_of(self.arch.size_multiple()) {
            return Err(Error::Config(format!(
                "data size {} must be a multiple of {}",
                self.data.size,
                self.arch.size_multiple()
            )));
        }
        if self.train.hr_patch > self.data.size || !self.train.hr_patch.is_multiple_of(self.arch.size_multiple()) {
            return Err(Error::Config(format!(
                "hr_patch {} must be a multiple of {} no larger than the image size {}",
                self.train.hr_patch,
                self.arch.size_multiple(),
                self.data.size
            )));
        }
        if self.eval.tau_list.iter().any(|t| !(*t >= 0.0)) || !(self.eval.default_tau >= 0.0) {
            return Err(Error::Config("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Canonical text listing every key; parsing it gives back `self`.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let AdamConfig { beta1, beta2, eps } = t.adam;
        let mut s = arch_section(&self.arch);
        s.push_str("\n[train]\n");
        let _ = writeln!(s, "total_steps = {}", t.total_steps);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let _ = writeln!(s, "lr_halving_points = {}", join(&t.lr_halving_points));
        let _ = writeln!(s, "hr_patch = {}", t.hr_patch);
        let _ = writeln!(s, "noise_std = {}", t.noise_std);
        let _ = writeln!(s, "freeze_encoder_frac = {}", t.freeze_encoder_frac);
        let _ = writeln!(s, "beta1 = {beta1}");
        let _ = writeln!(s, "beta2 = {beta2}");
        let _ = writeln!(s, "eps = {eps}");
        let _ = writeln!(s, "grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "pretrain_steps = {}", t.pretrain_steps);
        let _ = writeln!(s, "seed = {}", t.seed);
        s.push_str("\n[data]\n");
        let _ = writeln!(s, "kind = {}", d.kind.name());
        let _ = writeln!(s, "size = {}", d.size);
        let _ = writeln!(s, "count = {}", d.count);
        let _ = writeln!(s, "eval_count = {}", d.eval_count);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "kernel = {}", d.kernel.name());
        let _ = writeln!(s, "antialias = {}", d.antialias);
        s.push_str("\n[eval]\n");
        let _ = writeln!(s, "tau_list = {}", join(&e.tau_list));
        let _ = writeln!(s, "samples = {}", e.samples);
        let _ = writeln!(s, "default_tau = {}", e.default_tau);
        s
    }
}
