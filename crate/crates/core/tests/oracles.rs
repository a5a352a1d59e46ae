use condflow_core::conditioning::{cubic, downscale, pretrain_encoder, PretrainOptions};
use condflow_core::metrics::{gaussian_window, ssim};
use condflow_core::training::checkerboard;
use condflow_core::{
    ArchConfig, DownscaleKernel, EncoderConfig, FlowModel, KernelKind, LrEncoder, ParamStore, Rng, Tensor,
};

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.uniform()).collect()).unwrap()
}

/// Dense `out×n` resampling matrix built the way MATLAB's `imresize`
/// computes its contributions, with index mirroring through `[1..n, n..1]`.
fn reference_matrix(kind: KernelKind, n: usize, factor: usize, antialias: bool) -> Vec<Vec<f64>> {
    let scale = 1.0 / factor as f64;
    let (k, base_width): (Box<dyn Fn(f64) -> f64>, f64) = match kind {
        KernelKind::Bicubic => (Box::new(cubic), 4.0),
        KernelKind::Box => (Box::new(|x: f64| f64::from(u8::from((-0.5..0.5).contains(&x)))), 1.0),
        KernelKind::Bilinear => (Box::new(|x: f64| (1.0 - x.abs()).max(0.0)), 2.0),
    };
    let width = if antialias { base_width / scale } else { base_width };
    let aux: Vec<usize> = (0..n).chain((0..n).rev()).collect();
    (1..=n / factor)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as i64;
            let p = width.ceil() as i64 + 2;
            let mut row = vec![0.0; n];
            let mut weights = Vec::new();
            for t in 0..p {
                let idx = left + t;
                let w = if antialias { scale * k(scale * (u - idx as f64)) } else { k(u - idx as f64) };
                weights.push((idx, w));
            }
            let total: f64 = weights.iter().map(|(_, w)| w).sum();
            for (idx, w) in weights {
                let m = aux[(idx - 1).rem_euclid(2 * n as i64) as usize];
                row[m] += w / total;
            }
            row
        })
        .collect()
}

fn reference_downscale(img: &Tensor, kind: KernelKind, factor: usize, antialias: bool) -> Tensor {
    let (b, c, h, w) = img.dims4().unwrap();
    let rows = reference_matrix(kind, h, factor, antialias);
    let cols = reference_matrix(kind, w, factor, antialias);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in img.data().chunks(h * w) {
        for r in &rows {
            for q in &cols {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += r[i] * q[j] * plane[i * w + j];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).unwrap()
}

#[test]
fn downscale_matches_reference_construction() {
    let mut rng = Rng::new(1);
    for kind in [KernelKind::Bicubic, KernelKind::Box, KernelKind::Bilinear] {
        for factor in [2, 4, 8] {
            for antialias in [true, false] {
                let img = uniform(&mut rng, &[1, 2, 16, 24]);
                let got = downscale(&img, &DownscaleKernel::new(kind, factor, antialias)).unwrap();
                let want = reference_downscale(&img, kind, factor, antialias);
                let err = got.max_abs_diff(&want).unwrap();
                assert!(err < 1e-12, "{kind:?} ×{factor} antialias={antialias}: {err:e}");
            }
        }
    }
}

#[test]
fn downscale_reproduces_ramps_away_from_borders() {
    let n = 64;
    let ramp = Tensor::new(vec![1, 1, 1, n], (0..n).map(|j| 0.5 + 0.01 * j as f64).collect()).unwrap();
    let ramp = Tensor::new(vec![1, 1, n, n], ramp.data().repeat(n)).unwrap();
    for kind in [KernelKind::Bicubic, KernelKind::Box, KernelKind::Bilinear] {
        let f = 4;
        let out = downscale(&ramp, &DownscaleKernel::new(kind, f, true)).unwrap();
        let m = n / f;
        for j in 2..m - 2 {
            let centre = (j as f64 + 0.5) * f as f64 - 0.5;
            let v = out.data()[5 * m + j];
            assert!((v - (0.5 + 0.01 * centre)).abs() < 1e-12, "{kind:?} column {j}: {v}");
        }
    }
}

/// SSIM evaluated window by window with explicit 2-d Gaussian weights and
/// centred second moments.
fn reference_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let n = g.len();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let weight = |p: usize, q: usize| g[p] * g[q];
            let at = |v: &[f64], p: usize, q: usize| v[(i + p) * w + j + q];
            let (mut ma, mut mb) = (0.0, 0.0);
            for p in 0..n {
                for q in 0..n {
                    ma += weight(p, q) * at(a, p, q);
                    mb += weight(p, q) * at(b, p, q);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for p in 0..n {
                for q in 0..n {
                    let (da, db) = (at(a, p, q) - ma, at(b, p, q) - mb);
                    va += weight(p, q) * da * da;
                    vb += weight(p, q) * db * db;
                    cov += weight(p, q) * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_windowed_evaluation() {
    let mut rng = Rng::new(2);
    let pairs = [
        (checkerboard(16, 2, [0.0; 3], [1.0; 3]).unwrap(), checkerboard(16, 4, [0.0; 3], [1.0; 3]).unwrap()),
        (checkerboard(16, 2, [0.1, 0.5, 0.9], [0.8, 0.3, 0.2]).unwrap(), uniform(&mut rng, &[1, 3, 16, 16])),
        (uniform(&mut rng, &[1, 3, 20, 14]), uniform(&mut rng, &[1, 3, 20, 14])),
    ];
    for (a, b) in &pairs {
        let luma = |t: &Tensor| condflow_core::metrics::luma(t).unwrap().into_data();
        let (_, _, h, w) = a.dims4().unwrap();
        let want = reference_ssim(&luma(a), &luma(b), h, w);
        let got = ssim(a, b).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    let inverted = checkerboard(16, 2, [1.0; 3], [0.0; 3]).unwrap();
    let board = checkerboard(16, 2, [0.0; 3], [1.0; 3]).unwrap();
    assert!(ssim(&board, &inverted).unwrap() < 0.0);
}

#[test]
fn encoder_pretraining_lowers_loss_deterministically() {
    let mut rng = Rng::new(3);
    let images: Vec<Tensor> = (0..6)
        .map(|i| checkerboard(16, [2, 4, 8][i % 3], [rng.uniform(), 0.2, 0.7], [0.9, rng.uniform(), 0.1]).unwrap())
        .collect();
    let cfg = EncoderConfig { blocks: 2, width: 4, taps: 3, in_channels: 3 };
    let run = || {
        let mut store = ParamStore::new();
        let enc = LrEncoder::new(&mut store, cfg, &mut Rng::new(4)).unwrap();
        let before = store.clone();
        let opts = PretrainOptions { steps: 60, batch: 3, lr: 3e-3, kernel: DownscaleKernel::bicubic(4), seed: 5 };
        let losses = pretrain_encoder(&enc, &mut store, &images, &opts).unwrap();
        (losses, before, store)
    };
    let (losses, before, after) = run();
    let (again, _, _) = run();
    assert_eq!(losses, again);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
    assert_eq!(after.len(), before.len());
    assert!(after.id("pretrain.head.weight").is_none());
    let changed = after.iter().filter(|(id, _, t)| *t != before.get(*id)).count();
    assert!(changed > 0);
    assert!(pretrain_encoder(
        &LrEncoder::new(&mut ParamStore::new(), cfg, &mut Rng::new(4)).unwrap(),
        &mut ParamStore::new(),
        &[],
        &PretrainOptions { steps: 1, batch: 1, lr: 1e-3, kernel: DownscaleKernel::bicubic(4), seed: 0 }
    )
    .is_err());
}

#[test]
fn nll_is_prior_cost_minus_summed_logdets() {
    let mut rng = Rng::new(6);
    let mut model = FlowModel::build(ArchConfig::toy(), &mut rng).unwrap();
    model.perturb(&mut rng, 0.05);
    let y = uniform(&mut rng, &[2, 3, 32, 32]);
    let x = downscale(&y, &DownscaleKernel::bicubic(4)).unwrap();
    let u = model.condition(&x).unwrap();
    let trace = model.encode_trace(&y, u.as_ref()).unwrap();
    for b in 0..2 {
        let logdets: f64 = trace.logdets.iter().map(|(_, ld)| ld.data()[b]).sum();
        let want = trace.prior_nll.data()[b] - logdets;
        assert!((trace.nll.data()[b] - want).abs() < 1e-9 * want.abs().max(1.0));
        assert_eq!(trace.prior_nll.data()[b], trace.latents.prior_nll().unwrap().data()[b]);
    }
    let density = model.log_density(&y, u.as_ref()).unwrap();
    assert_eq!(density.data()[0], -trace.nll.data()[0]);
}
