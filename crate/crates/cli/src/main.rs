use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use condflow_core::conditioning::{downscale, pretrain_encoder, PretrainOptions};
use condflow_core::io::{read_ppm, write_ppm, Checkpoint, RunConfig};
use condflow_core::latent::{content_transfer, crop, restore, style_transfer, Region};
use condflow_core::training::{
    eval_sweep, make_corpus, metrics_csv, sweep_csv, CorpusKind, CorpusSpec, Trainer, METRICS_HEADER,
};
use condflow_core::{metrics, DownscaleKernel, Error, FlowModel, KernelKind, Rng, Tensor};

#[derive(Parser)]
#[command(name = "condflow", version, about = "Stochastic super-resolution with a conditional normalizing flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Style,
    Content,
}

#[derive(clap::Args)]
struct KernelArgs {
    /// Down-scaling kernel linking HR and LR images.
    #[arg(long, default_value = "bicubic")]
    kernel: String,
    #[arg(long)]
    no_antialias: bool,
}

impl KernelArgs {
    fn build(&self, factor: usize) -> Result<DownscaleKernel> {
        Ok(DownscaleKernel::new(KernelKind::parse(&self.kernel)?, factor, !self.no_antialias))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Pre-train the LR encoder before flow training.
        #[arg(long)]
        pretrain_encoder: bool,
        /// Continue from a checkpoint written with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV path; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Stop before this step; the checkpoint can be resumed later.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Draw super-resolved samples for an LR image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lr_image: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Transfer the style or content of one HR image onto another.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// HR image providing the latents (style) or the pasted region (content).
        #[arg(long)]
        source: PathBuf,
        /// LR image to super-resolve (style) or HR image to edit (content).
        #[arg(long)]
        target: PathBuf,
        /// `x,y,w,h` in HR pixels.
        #[arg(long)]
        region: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Restore a degraded HR image by latent normalization.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Clean image; when given, PSNR of the restored and of the direct
        /// super-resolved image are printed.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Sweep temperatures over a dataset and write fidelity/diversity metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PPM files, or `synthetic:KIND:COUNT:SIZE[:SEED]`.
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "0,0.3,0.6,0.9")]
        tau_list: String,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite { .. })));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed, out, pretrain_encoder, resume, metrics, stop_at } => {
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            train(&config, seed, &out, pretrain_encoder, resume.as_deref(), &metrics, stop_at)
        }
        Command::Sample { ckpt, lr_image, tau, n, seed, out_dir } => sample(&ckpt, &lr_image, tau, n, seed, &out_dir),
        Command::Transfer { ckpt, mode, source, target, region, tau, seed, out, kernel } => {
            transfer(&ckpt, mode, &source, &target, region.as_deref(), tau, seed, &out, &kernel)
        }
        Command::Restore { ckpt, image, tau, seed, out, reference, kernel } => {
            restore_cmd(&ckpt, &image, tau, seed, &out, reference.as_deref(), &kernel)
        }
        Command::Eval { ckpt, data, tau_list, samples, seed, out, kernel } => {
            eval(&ckpt, &data, &tau_list, samples, seed, &out, &kernel)
        }
    }
}

fn load_model(path: &Path) -> Result<FlowModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.to_model()?)
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau < 0.0 {
        bail!(Error::Config(format!("temperature must be a finite non-negative number, got {tau}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    pretrain: bool,
    resume: Option<&Path>,
    metrics_path: &Path,
    stop_at: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let kernel = cfg.data.downscale_kernel(cfg.arch.scale_factor);
    let data = make_corpus(&cfg.data.train_corpus(), cfg.arch.size_multiple())?;
    let mut trainer = Trainer::new(cfg.train.clone(), kernel)?;
    let mut model = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.arch != cfg.arch {
                bail!(Error::Config(format!("checkpoint {} was written for a different architecture", path.display())));
            }
            let model = ck.to_model()?;
            let (adam, step) = ck
                .training_state(&model, cfg.train.adam)?
                .with_context(|| format!("{} holds no optimizer state", path.display()))?;
            trainer.adam = adam;
            trainer.step = step;
            log::info!("resuming at step {step}");
            model
        }
        None => FlowModel::build(cfg.arch, &mut Rng::new(cfg.train.seed))?,
    };
    if pretrain && resume.is_none() {
        if cfg.train.pretrain_steps == 0 {
            bail!(Error::Config("--pretrain-encoder needs train.pretrain_steps > 0".into()));
        }
        let encoder = model.encoder.clone().context("model has no encoder")?;
        let opts = PretrainOptions {
            steps: cfg.train.pretrain_steps,
            batch: cfg.train.batch,
            lr: cfg.train.lr0,
            kernel,
            seed: cfg.train.seed,
        };
        let losses = pretrain_encoder(&encoder, &mut model.store, &data, &opts)?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            log::info!("encoder pretraining: L1 {first:.5} -> {last:.5}");
        }
    }
    let total = stop_at.unwrap_or(cfg.train.total_steps).min(cfg.train.total_steps);
    let report_every = (cfg.train.total_steps / 20).max(1);
    let mut rows = Vec::new();
    while trainer.step < total {
        let until = (trainer.step + report_every).min(total);
        let chunk = trainer.run(&mut model, &data, Some(until))?;
        if let Some(r) = chunk.last() {
            log::info!("step {} bits/dim {:.4} lr {:.2e}", r.step, r.bits_per_dim, r.lr);
        }
        rows.extend(chunk);
    }
    Checkpoint::from_model(&model).with_training_state(&model, &trainer.adam, trainer.step).save(out)?;
    let append = resume.is_some() && metrics_path.exists();
    if append {
        let body = metrics_csv(&rows);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(metrics_path)
            .with_context(|| format!("opening {}", metrics_path.display()))?;
        f.write_all(&body.as_bytes()[METRICS_HEADER.len() + 1..])?;
    } else {
        fs::write(metrics_path, metrics_csv(&rows)).with_context(|| format!("writing {}", metrics_path.display()))?;
    }
    println!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

fn sample(ckpt: &Path, lr_image: &Path, tau: f64, n: usize, seed: u64, out_dir: &Path) -> Result<()> {
    check_tau(tau)?;
    if n == 0 {
        bail!(Error::Config("--n must be at least 1".into()));
    }
    let model = load_model(ckpt)?;
    let x = read_ppm(lr_image)?;
    let hr = model.hr_shape_for(x.shape())?;
    let count = if tau == 0.0 && n > 1 {
        log::warn!("τ = 0 is deterministic; writing a single sample instead of {n}");
        1
    } else {
        n
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let u = model.condition(&x)?;
    let mut rng = Rng::new(seed);
    for k in 0..count {
        let y = model.sample(u.as_ref(), &hr, tau, &mut rng)?;
        let path = out_dir.join(format!("sample_{k:03}.ppm"));
        write_ppm(&path, &y)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn transfer(
    ckpt: &Path,
    mode: Mode,
    source: &Path,
    target: &Path,
    region: Option<&str>,
    tau: f64,
    seed: u64,
    out: &Path,
    kernel: &KernelArgs,
) -> Result<()> {
    check_tau(tau)?;
    let region = region.map(Region::parse).transpose()?;
    let model = load_model(ckpt)?;
    let kernel = kernel.build(model.arch.scale_factor)?;
    let src = read_ppm(source)?;
    let tgt = read_ppm(target)?;
    let mut rng = Rng::new(seed);
    let y = match mode {
        Mode::Style => {
            if let Some(r) = &region {
                r.check_inside(src.shape()[3], src.shape()[2])?;
            }
            style_transfer(&model, &src, &tgt, &kernel, region.as_ref(), tau, &mut rng)?
        }
        Mode::Content => {
            let Some(r) = region else {
                bail!(Error::Config("content transfer requires --region x,y,w,h".into()));
            };
            r.check_inside(tgt.shape()[3], tgt.shape()[2])?;
            let patch = crop(&src, &r)?;
            content_transfer(&model, &tgt, &patch, r.x, r.y, &kernel, tau, &mut rng)?
        }
    };
    write_ppm(out, &y)?;
    println!("{}", out.display());
    Ok(())
}

fn restore_cmd(
    ckpt: &Path,
    image: &Path,
    tau: f64,
    seed: u64,
    out: &Path,
    reference: Option<&Path>,
    kernel: &KernelArgs,
) -> Result<()> {
    check_tau(tau)?;
    let model = load_model(ckpt)?;
    let kernel = kernel.build(model.arch.scale_factor)?;
    let y = read_ppm(image)?;
    let restored = restore(&model, &y, &kernel, tau, &mut Rng::new(seed))?;
    write_ppm(out, &restored)?;
    println!("{}", out.display());
    if let Some(path) = reference {
        let clean = read_ppm(path)?;
        let direct = model.super_resolve(&downscale(&y, &kernel)?, 0.0, &mut Rng::new(seed))?;
        let q = condflow_core::io::quantize;
        println!("restored_psnr_db {}", metrics::format_metric(metrics::psnr(&q(&restored), &clean, 1.0)?));
        println!("direct_sr_psnr_db {}", metrics::format_metric(metrics::psnr(&q(&direct), &clean, 1.0)?));
    }
    Ok(())
}

fn parse_taus(s: &str) -> Result<Vec<f64>> {
    let taus = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("--tau-list must be comma-separated numbers, got '{s}'")))?;
    for &t in &taus {
        check_tau(t)?;
    }
    Ok(taus)
}

/// Parses `synthetic:KIND:COUNT:SIZE[:SEED]`.
fn synthetic_spec(s: &str) -> Result<Option<CorpusSpec>> {
    let Some(rest) = s.strip_prefix("synthetic:") else {
        return Ok(None);
    };
    let parts: Vec<&str> = rest.split(':').collect();
    let bad = || Error::Config(format!("expected synthetic:KIND:COUNT:SIZE[:SEED], got '{s}'"));
    if !(3..=4).contains(&parts.len()) {
        return Err(bad().into());
    }
    let kind = CorpusKind::parse(parts[0])?;
    let count = parts[1].parse().map_err(|_| bad())?;
    let size = parts[2].parse().map_err(|_| bad())?;
    let seed = match parts.get(3) {
        Some(p) => p.parse().map_err(|_| bad())?,
        None => 0,
    };
    Ok(Some(CorpusSpec { kind, size, count, seed }))
}

fn load_dataset(spec: &str, multiple: usize) -> Result<Vec<Tensor>> {
    if let Some(c) = synthetic_spec(spec)? {
        return Ok(make_corpus(&c, multiple)?);
    }
    let dir = Path::new(spec);
    let entries = fs::read_dir(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_ppm(p)?)).collect()
}

fn eval(
    ckpt: &Path,
    data: &str,
    tau_list: &str,
    samples: usize,
    seed: u64,
    out: &Path,
    kernel: &KernelArgs,
) -> Result<()> {
    let taus = parse_taus(tau_list)?;
    let model = load_model(ckpt)?;
    let kernel = kernel.build(model.arch.scale_factor)?;
    let images = load_dataset(data, model.arch.size_multiple())?;
    if images.is_empty() {
        bail!(Error::Config(format!("dataset '{data}' holds no images")));
    }
    let rows = eval_sweep(&model, &images, &taus, samples, &kernel, seed)?;
    fs::write(out, sweep_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(())
}
