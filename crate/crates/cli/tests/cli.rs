use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condflow_core::conditioning::downscale;
use condflow_core::io::{read_ppm, write_ppm, Checkpoint};
use condflow_core::training::{checkerboard, METRICS_HEADER, SWEEP_HEADER};
use condflow_core::{metrics, DownscaleKernel, Tensor};
use tempfile::TempDir;

const SMOKE: &str = "[train]\ntotal_steps = 10\nbatch = 2\npretrain_steps = 3\n[data]\ncount = 6\neval_count = 2\n";

fn condflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condflow")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `text` as a config and trains a checkpoint from it.
fn train(dir: &Path, name: &str, text: &str, extra: &[&str]) -> PathBuf {
    let cfg = dir.join(format!("{name}.ini"));
    std::fs::write(&cfg, text).unwrap();
    let ckpt = dir.join(format!("{name}.ckpt"));
    let mut args = vec!["train", "--config", p(&cfg), "--out", p(&ckpt)];
    args.extend_from_slice(extra);
    let o = condflow(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    ckpt
}

fn board(size: usize, cell: usize) -> Tensor {
    checkerboard(size, cell, [0.9, 0.2, 0.1], [0.1, 0.4, 0.8]).unwrap()
}

#[test]
fn missing_config_names_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.ini");
    let o = condflow(&["train", "--config", p(&missing), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("absent.ini"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[train]\nwarmup = 3\n").unwrap();
    let o = condflow(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("warmup"));
}

#[test]
fn diverging_run_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("hot.ini");
    std::fs::write(&cfg, "[train]\ntotal_steps = 40\nbatch = 2\nlr0 = 1e6\ngrad_clip = 1e300\n[data]\ncount = 4\n")
        .unwrap();
    let o = condflow(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn smoke_run_writes_loadable_checkpoint_and_deterministic_csv() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), "a", SMOKE, &["--seed", "5", "--pretrain-encoder"]);
    let b = train(dir.path(), "b", SMOKE, &["--seed", "5", "--pretrain-encoder"]);
    let c = train(dir.path(), "c", SMOKE, &["--seed", "6"]);
    let model = Checkpoint::load(&a).unwrap().to_model().unwrap();
    assert!(!model.store.is_empty());
    let csv_a = std::fs::read_to_string(a.with_extension("csv")).unwrap();
    let csv_b = std::fs::read_to_string(b.with_extension("csv")).unwrap();
    let csv_c = std::fs::read_to_string(c.with_extension("csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_ne!(csv_a, csv_c);
    let lines: Vec<&str> = csv_a.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 11);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted() {
    let dir = TempDir::new().unwrap();
    let full = train(dir.path(), "full", SMOKE, &[]);
    let half = train(dir.path(), "half", SMOKE, &["--stop-at", "4"]);
    let cfg = dir.path().join("half.ini");
    let resumed = dir.path().join("resumed.ckpt");
    let metrics = dir.path().join("half.csv");
    let o =
        condflow(&["train", "--config", p(&cfg), "--out", p(&resumed), "--resume", p(&half), "--metrics", p(&metrics)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
    assert_eq!(
        std::fs::read_to_string(full.with_extension("csv")).unwrap(),
        std::fs::read_to_string(&metrics).unwrap()
    );
}

#[test]
fn sampling_contract() {
    let dir = TempDir::new().unwrap();
    let ckpt = train(dir.path(), "m", SMOKE, &[]);
    let lr = dir.path().join("lr.ppm");
    write_ppm(&lr, &board(8, 2)).unwrap();
    let out0 = dir.path().join("t0");
    let o = condflow(&[
        "sample",
        "--ckpt",
        p(&ckpt),
        "--lr-image",
        p(&lr),
        "--tau",
        "0",
        "--n",
        "3",
        "--out-dir",
        p(&out0),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&out0).unwrap().count(), 1);
    assert_eq!(read_ppm(&out0.join("sample_000.ppm")).unwrap().shape(), &[1, 3, 32, 32]);

    let run = |seed: &str, name: &str| {
        let d = dir.path().join(name);
        let o = condflow(&[
            "sample",
            "--ckpt",
            p(&ckpt),
            "--lr-image",
            p(&lr),
            "--n",
            "2",
            "--seed",
            seed,
            "--out-dir",
            p(&d),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(std::fs::read_dir(&d).unwrap().count(), 2);
        std::fs::read(d.join("sample_000.ppm")).unwrap()
    };
    let s1 = run("1", "s1");
    assert_eq!(s1, run("1", "s1b"));
    assert_ne!(s1, run("2", "s2"));
}

#[test]
fn sampling_rejects_indivisible_lr() {
    let dir = TempDir::new().unwrap();
    let text = "[arch]\nlevels = 3\nsteps_per_level = 1\ntransitional_steps = 0\n[train]\ntotal_steps = 1\nbatch = 1\n[data]\ncount = 1\n";
    let ckpt = train(dir.path(), "deep", text, &[]);
    let lr = dir.path().join("odd.ppm");
    write_ppm(&lr, &board(7, 1)).unwrap();
    let o = condflow(&["sample", "--ckpt", p(&ckpt), "--lr-image", p(&lr), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("divisible by 2"), "{}", stderr(&o));
}

#[test]
fn style_transfer_onto_own_lr_reproduces_source() {
    let dir = TempDir::new().unwrap();
    let ckpt = train(dir.path(), "m", SMOKE, &[]);
    let src = dir.path().join("src.ppm");
    write_ppm(&src, &board(32, 4)).unwrap();
    let y = read_ppm(&src).unwrap();
    let lr = dir.path().join("lr.ppm");
    write_ppm(&lr, &downscale(&y, &DownscaleKernel::bicubic(4)).unwrap()).unwrap();
    let out = dir.path().join("out.ppm");
    let o = condflow(&[
        "transfer",
        "--ckpt",
        p(&ckpt),
        "--mode",
        "style",
        "--source",
        p(&src),
        "--target",
        p(&lr),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let diff = read_ppm(&out).unwrap().max_abs_diff(&y).unwrap();
    assert!(diff <= 1.0 / 255.0 + 1e-12, "max abs diff {diff}");
}

#[test]
fn content_transfer_contract() {
    let dir = TempDir::new().unwrap();
    let ckpt = train(dir.path(), "m", SMOKE, &[]);
    let src = dir.path().join("src.ppm");
    let tgt = dir.path().join("tgt.ppm");
    write_ppm(&src, &board(32, 4)).unwrap();
    write_ppm(&tgt, &board(32, 8)).unwrap();
    let base = ["transfer", "--ckpt", p(&ckpt), "--mode", "content", "--source", p(&src), "--target", p(&tgt)];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        condflow(&a)
    };
    let out = dir.path().join("o.ppm");
    let o = with(&["--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("region"));
    let o = with(&["--region", "28,0,8,8", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let out2 = dir.path().join("o2.ppm");
    for path in [&out, &out2] {
        let o = with(&["--region", "8,8,12,12", "--seed", "4", "--out", p(path)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn restore_prints_psnr_of_written_image() {
    let dir = TempDir::new().unwrap();
    let ckpt = train(dir.path(), "m", SMOKE, &[]);
    let clean = board(32, 4);
    let noisy = {
        let mut rng = condflow_core::Rng::new(9);
        clean
            .zip_map(
                &Tensor::new(clean.shape().to_vec(), rng.gaussian_vec(clean.numel(), 20.0 / 255.0)).unwrap(),
                |a, b| a + b,
            )
            .unwrap()
    };
    let (cp, np) = (dir.path().join("clean.ppm"), dir.path().join("noisy.ppm"));
    write_ppm(&cp, &clean).unwrap();
    write_ppm(&np, &noisy).unwrap();
    let outs = [dir.path().join("r1.ppm"), dir.path().join("r2.ppm")];
    let mut printed = Vec::new();
    for out in &outs {
        let o = condflow(&[
            "restore",
            "--ckpt",
            p(&ckpt),
            "--image",
            p(&np),
            "--seed",
            "3",
            "--reference",
            p(&cp),
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        printed.push(stdout(&o));
    }
    assert_eq!(std::fs::read(&outs[0]).unwrap(), std::fs::read(&outs[1]).unwrap());
    let value = |key: &str| -> f64 {
        let line = printed[0].lines().find(|l| l.starts_with(key)).expect("metric printed");
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let expected = metrics::psnr(&read_ppm(&outs[0]).unwrap(), &read_ppm(&cp).unwrap(), 1.0).unwrap();
    assert!((value("restored_psnr_db") - expected).abs() < 1e-6);
    assert!(value("direct_sr_psnr_db").is_finite());
    let o =
        condflow(&["restore", "--ckpt", p(&ckpt), "--image", p(&dir.path().join("nope.ppm")), "--out", p(&outs[0])]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_csv_contract() {
    let dir = TempDir::new().unwrap();
    let ckpt = train(dir.path(), "m", SMOKE, &[]);
    let out = dir.path().join("e.csv");
    let o = condflow(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        "synthetic:mixed:3:32",
        "--tau-list",
        "0",
        "--samples",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 2);
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols.len(), 5);
    assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0);

    let images = dir.path().join("imgs");
    std::fs::create_dir(&images).unwrap();
    for (i, cell) in [2, 4].iter().enumerate() {
        write_ppm(&images.join(format!("{i}.ppm")), &board(32, *cell)).unwrap();
    }
    let o = condflow(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&images),
        "--tau-list",
        "0,0.5,0.9",
        "--samples",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    for row in text.lines().skip(1) {
        assert!(row.split(',').all(|v| v.parse::<f64>().is_ok()), "{row}");
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = condflow(&["eval", "--ckpt", p(&ckpt), "--data", p(&empty), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}
