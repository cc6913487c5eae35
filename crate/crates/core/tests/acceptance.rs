//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.
//!
//! Criteria 7 to 10 share one set of desk-scale training runs: three seeds,
//! each training the four ITFS / weighting variants for 30 epochs on a
//! 64x64 phantom dataset.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mtmr::cli::{variants, Matrix};
use mtmr::config::ExperimentConfig;
use mtmr::kspace::{self, data_consistency, forward_fft, inverse_fft, make_mask, ComplexImage, Domain};
use mtmr::metrics::{self, ConfusionCounts};
use mtmr::recon::{recon_forward, recon_init, ReconConfig};
use mtmr::schedule::{alpha_beta, WeightSchedule};
use mtmr::seg::{LabelMap, SegConfig};
use mtmr::trainer::{self, Losses, Reduction, RunOutput, SegLossKind, TrainState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_time(o: Outcome, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match limit {
        Some(l) if elapsed > l => outcome(false, format!("{}; took {:.1?}, limit {:.0?}", o.detail, elapsed, l)),
        _ => o,
    }
}

fn schedule_exactness() -> Outcome {
    let s = WeightSchedule::exponential();
    let ab = |t| alpha_beta(&s, t).unwrap();
    let (a0, b0) = ab(0);
    let (a3, _) = ab(3);
    let (a1, _) = ab(1);
    // exp(-1) - 0.2 to 30 significant digits.
    let reference = 0.167_879_441_171_442_321_595_523_770_161_f64;
    let mut worst_sum = 0.0f64;
    for t in 0..=10_000 {
        let (a, b) = ab(t);
        worst_sum = worst_sum.max((a + b - 1.0).abs());
    }
    let pass = a0 == 0.8 && b0 == 0.2 && a3 == 0.05 && (a1 - reference).abs() <= 1e-12 && worst_sum <= 1e-12;
    outcome(
        pass,
        format!("alpha(0)={a0} beta(0)={b0} alpha(3)={a3} |alpha(1)-ref|={:.1e} max|alpha+beta-1|={worst_sum:.1e}", (a1 - reference).abs()),
    )
}

fn mask_properties() -> Outcome {
    let mut center_ok = true;
    for seed in 0..1000 {
        let m = make_mask(256, 0.08, 4.0, seed).unwrap();
        center_ok &= m.center_lines() == 20 && m.lines()[m.center_range()].iter().all(|&k| k);
    }
    let n = 10_000;
    let total: usize = (0..n).map(|seed| make_mask(256, 0.08, 4.0, seed).unwrap().kept()).sum();
    let mean = total as f64 / n as f64;
    let pass = center_ok && (mean - 64.0).abs() <= 0.3;
    outcome(pass, format!("center block intact in all 1000: {center_ok}; mean kept lines {mean:.3}"))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
}

fn data_consistency_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_dc = 0.0f32;
    let mut worst_idem = 0.0f32;
    for (i, &(h, w)) in [(8, 8), (12, 16), (16, 16), (32, 24), (32, 32), (48, 64), (64, 64)].iter().enumerate() {
        let cfg = ReconConfig {
            channels: 8,
            ..ReconConfig::default()
        };
        let mut params = recon_init::<f32>(&cfg, 100 + i as u64).unwrap();
        for t in params.params_mut().iter_mut() {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let mask = make_mask(w, 0.125, 2.0, i as u64).unwrap();
        let m = kspace::measure(&random_image(&mut rng, h, w), &mask).unwrap();
        let out = recon_forward(&params, &m).unwrap();
        let k = forward_fft(&out).unwrap();
        for ((y, x), a) in k.data().indexed_iter() {
            if mask.lines()[x] {
                worst_dc = worst_dc.max((a - m.kspace().data()[(y, x)]).norm());
            }
        }
        let again = data_consistency(&out, &m, None).unwrap();
        for (a, b) in again.data().iter().zip(out.data()) {
            worst_idem = worst_idem.max((a - b).norm());
        }
    }
    outcome(
        worst_dc <= 1e-4 && worst_idem <= 1e-5,
        format!("max sampled-line error {worst_dc:.2e}, max idempotence error {worst_idem:.2e}"),
    )
}

/// Centered orthonormal DFT by direct summation.
fn naive_centered_dft(x: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    let (h, w) = x.dim();
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    Array2::from_shape_fn((h, w), |(ky, kx)| {
        let mut acc = Complex::new(0.0, 0.0);
        for ((ny, nx), &v) in x.indexed_iter() {
            let phase = -2.0
                * std::f64::consts::PI
                * ((ky as f64 - ch) * (ny as f64 - ch) / h as f64 + (kx as f64 - cw) * (nx as f64 - cw) / w as f64);
            acc += v * Complex::from_polar(1.0, phase);
        }
        acc * scale
    })
}

fn transform_unitarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_parseval = 0.0f64;
    let mut worst_roundtrip = 0.0f32;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=256), rng.random_range(1..=256));
        let x = Array2::from_shape_fn((h, w), |_| Complex::new(rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)));
        let img = ComplexImage::new(x.clone(), Domain::Image);
        let k = forward_fft(&img).unwrap();
        let e_img: f64 = x.iter().map(|v| v.norm_sqr() as f64).sum();
        let e_k: f64 = k.data().iter().map(|v| v.norm_sqr() as f64).sum();
        worst_parseval = worst_parseval.max((e_k - e_img).abs() / e_img);
        let back = inverse_fft(&k).unwrap();
        for (a, b) in back.data().iter().zip(&x) {
            worst_roundtrip = worst_roundtrip.max((a - b).norm());
        }
    }
    let mut worst_oracle = 0.0f64;
    for (h, w) in [(8, 8), (5, 7)] {
        let x = Array2::from_shape_fn((h, w), |_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let k = forward_fft(&ComplexImage::new(x.clone(), Domain::Image)).unwrap();
        for (a, b) in k.data().iter().zip(&naive_centered_dft(&x)) {
            worst_oracle = worst_oracle.max((a - b).norm());
        }
    }
    outcome(
        worst_parseval <= 1e-4 && worst_roundtrip <= 1e-5 && worst_oracle <= 1e-9,
        format!("Parseval {worst_parseval:.2e}, roundtrip {worst_roundtrip:.2e}, naive DFT {worst_oracle:.2e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let cases: [(usize, bool, (f64, f64), Losses); 3] = [
        (2, false, (0.6, 0.4), SegLossKind::SoftDice.into()),
        (3, true, (0.3, 0.7), SegLossKind::SoftDice.into()),
        (
            2,
            false,
            (0.05, 0.95),
            Losses {
                recon: Reduction::Sum,
                seg: SegLossKind::SoftDice,
            },
        ),
    ];
    for (i, &(classes, teacher, weights, losses)) in cases.iter().enumerate() {
        let state = common::perturbed_state(&common::toy_setup(classes), 20 + i as u64);
        let batch = common::random_batch(2, 8, classes as u8, 30 + i as u64);
        worst = worst.max(common::worst_relative_error(&state, &batch, weights, teacher, losses));
    }
    outcome(worst <= 1e-3, format!("worst relative error {worst:.2e}"))
}

fn brute_tally(pred: &LabelMap, truth: &LabelMap, class: u8) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        // Per-pair foreground density so that empty masks also occur.
        let density: f64 = rng.random_range(0.0..1.0);
        let draw = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((16, 16), |_| if rng.random_bool(density) { rng.random_range(1..4u8) } else { 0 })
        };
        let (pred, truth) = (draw(&mut rng), draw(&mut rng));
        for class in 1..4u8 {
            let c = brute_tally(&pred, &truth, class);
            let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
            let dice = if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else if fn_ > 0.0 { 0.0 } else { 1.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else if fp > 0.0 { 0.0 } else { 1.0 };
            let got = metrics::confusion(&pred, &truth, class).unwrap();
            if got != c
                || metrics::dice(&got) != dice
                || metrics::precision(&got) != precision
                || metrics::recall(&got) != recall
            {
                mismatches += 1;
            }
        }
    }
    let mut reference = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.0..0.9f64));
    reference[(5, 7)] = 1.0;
    let shifted = reference.mapv(|v| v + 0.1);
    let psnr_same = metrics::psnr(&reference, &reference).unwrap();
    let ssim_same = metrics::ssim(&reference, &reference).unwrap();
    let psnr_20 = metrics::psnr(&shifted, &reference).unwrap();
    let pass = mismatches == 0
        && psnr_same == metrics::PSNR_CAP
        && (ssim_same - 1.0).abs() <= 1e-9
        && (psnr_20 - 20.0).abs() <= 1e-9;
    outcome(
        pass,
        format!("{mismatches} tally mismatches; PSNR(x,x)={psnr_same} SSIM(x,x)={ssim_same} PSNR(MSE 0.01)={psnr_20:.12}"),
    )
}

/// Test-set numbers and loss trace of one desk-scale run.
struct DeskRun {
    psnr: f64,
    zero_filled_psnr: f64,
    lesion_dice: f64,
    seg_trace: Vec<f64>,
    dir: PathBuf,
}

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [&str; 4] = ["itfs+drlc", "itfs", "drlc", "neither"];

fn desk_config(seed: u64, root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_items = 200;
    cfg.data.test_items = 50;
    cfg.data.seed = seed;
    cfg.data.root = Some(root.join("data"));
    cfg.mask.center_fraction = 0.08;
    cfg.mask.acceleration = 4.0;
    cfg.mask.seed = seed;
    cfg.recon = ReconConfig::default();
    cfg.seg = SegConfig {
        base_channels: 8,
        ..SegConfig::default()
    };
    cfg.training.epochs = 30;
    cfg.training.batch_size = 8;
    cfg.training.learning_rate = 3e-4;
    cfg.training.recon_reduction = Reduction::Sum;
    cfg.training.seed = seed;
    cfg.validate().unwrap();
    cfg
}

fn desk_run(seed: u64, variant: &str, root: &Path, dir_name: &str) -> DeskRun {
    let base = desk_config(seed, root);
    let v = variants(Matrix::Table1, &base)
        .into_iter()
        .find(|v| v.name == variant)
        .unwrap();
    let mut cfg = base.clone();
    cfg.training.itfs = v.itfs;
    cfg.training.schedule = v.schedule;
    let dir = root.join(dir_name);
    let (train_set, test_set) = cfg.resolve_data(&dir).unwrap();
    let out = RunOutput {
        dir: &dir,
        checkpoint_every: 0,
    };
    let state: TrainState = trainer::train(&cfg.setup(), &train_set, Some(out)).unwrap();
    let report = metrics::evaluate(&state, &test_set, &cfg.mask).unwrap();
    DeskRun {
        psnr: report.mean("psnr").unwrap(),
        zero_filled_psnr: report.mean("zero_filled_psnr").unwrap(),
        lesion_dice: report.mean("dice_lesion").unwrap(),
        seg_trace: state.history.iter().map(|r| r.l_seg).collect(),
        dir,
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn final_third(v: &[f64]) -> &[f64] {
    &v[v.len() - v.len() / 3..]
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome, elapsed: Duration| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {name:<28} {verdict}  {} [{:.1?}]", o.detail, elapsed);
        if !o.pass {
            failed.push(n);
        }
    };

    let quick: [(usize, &str, fn() -> Outcome, u64); 6] = [
        (1, "schedule exactness", schedule_exactness, 1),
        (2, "mask properties", mask_properties, 10),
        (3, "data consistency", data_consistency_exactness, 30),
        (4, "transform unitarity", transform_unitarity, 60),
        (5, "gradient correctness", gradient_correctness, 120),
        (6, "metric oracles", metric_oracles, 30),
    ];
    for (n, name, f, limit) in quick {
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        report(n, name, within_time(o, elapsed, Some(Duration::from_secs(limit))), elapsed);
    }

    let tmp = tempfile::tempdir().unwrap();
    let mut runs: Vec<Vec<DeskRun>> = Vec::new();
    let t7 = Instant::now();
    for &seed in &DESK_SEEDS {
        let root = tmp.path().join(format!("seed{seed}"));
        runs.push(vec![desk_run(seed, VARIANTS[0], &root, VARIANTS[0])]);
    }
    let elapsed7 = t7.elapsed();
    for (seed, r) in DESK_SEEDS.iter().zip(&runs) {
        println!(
            "  seed {seed} itfs+drlc: PSNR {:.2} dB, zero-filled {:.2} dB, lesion Dice {:.4}",
            r[0].psnr, r[0].zero_filled_psnr, r[0].lesion_dice
        );
    }
    let ok7 = runs.iter().all(|r| r[0].psnr - r[0].zero_filled_psnr >= 2.0 && r[0].lesion_dice >= 0.7);
    let gains: Vec<String> = runs.iter().map(|r| format!("{:+.2}", r[0].psnr - r[0].zero_filled_psnr)).collect();
    let dices: Vec<String> = runs.iter().map(|r| format!("{:.3}", r[0].lesion_dice)).collect();
    report(
        7,
        "desk-scale end-to-end",
        within_time(
            outcome(ok7, format!("PSNR gain over zero-filled [{}] dB, lesion Dice [{}]", gains.join(", "), dices.join(", "))),
            elapsed7,
            Some(Duration::from_secs(30 * 60)),
        ),
        elapsed7,
    );

    let t8 = Instant::now();
    for (&seed, r) in DESK_SEEDS.iter().zip(runs.iter_mut()) {
        let root = tmp.path().join(format!("seed{seed}"));
        for v in &VARIANTS[1..] {
            r.push(desk_run(seed, v, &root, v));
        }
        let dice: Vec<String> = VARIANTS.iter().zip(r.iter()).map(|(v, x)| format!("{v} {:.4}", x.lesion_dice)).collect();
        println!("  seed {seed} lesion Dice: {}", dice.join(", "));
    }
    let wins = runs
        .iter()
        .filter(|r| r[1..].iter().all(|other| r[0].lesion_dice >= other.lesion_dice))
        .count();
    let elapsed8 = t8.elapsed() + elapsed7;
    report(8, "ablation ordering", outcome(wins >= 2, format!("ITFS+DRLC best in {wins} of 3 seeds")), elapsed8);

    // ITFS+DRLC against DRLC alone: same weighting, ITFS toggled.
    let mut stds = Vec::new();
    for r in &runs {
        stds.push((std_dev(final_third(&r[0].seg_trace)), std_dev(final_third(&r[2].seg_trace))));
    }
    let steadier = stds.iter().filter(|(with, without)| with < without).count();
    let detail: Vec<String> = stds.iter().map(|(a, b)| format!("{a:.4} vs {b:.4}")).collect();
    report(
        9,
        "ITFS stability",
        outcome(steadier >= 2, format!("final-third L_seg std with vs without ITFS: [{}]", detail.join(", "))),
        Duration::ZERO,
    );

    let t10 = Instant::now();
    let root = tmp.path().join("seed0");
    let again = desk_run(DESK_SEEDS[0], VARIANTS[0], &root, "itfs+drlc-repeat");
    let first = &runs[0][0];
    let same = |f: fn(&Path) -> PathBuf| fs::read(f(&first.dir)).unwrap() == fs::read(f(&again.dir)).unwrap();
    let csv_same = same(trainer::loss_csv_path);
    let ckpt_same = same(trainer::final_checkpoint_path);
    report(
        10,
        "determinism",
        outcome(csv_same && ckpt_same, format!("loss CSV identical: {csv_same}, final checkpoint identical: {ckpt_same}")),
        t10.elapsed(),
    );

    // `exit` skips destructors.
    drop(tmp);
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
