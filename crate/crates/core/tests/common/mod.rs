//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mtmr::kspace::make_mask;
use mtmr::nn::ParamSet;
use mtmr::recon::ReconConfig;
use mtmr::seg::SegConfig;
use mtmr::trainer::{joint_gradients, joint_loss, Losses, Sample, TrainSetup, TrainState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One cascade of three 4-channel convolutions and a depth-1 U-Net.
pub fn toy_setup(seg_classes: usize) -> TrainSetup {
    TrainSetup {
        recon: ReconConfig {
            n_cascades: 1,
            convs_per_block: 3,
            channels: 4,
            ..ReconConfig::default()
        },
        seg: SegConfig {
            depth: 1,
            base_channels: 4,
            n_classes: seg_classes,
            ..SegConfig::default()
        },
        ..TrainSetup::default()
    }
}

pub fn random_batch(n: usize, size: usize, classes: u8, seed: u64) -> Vec<Sample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = make_mask(size, 0.25, 2.0, seed).unwrap();
    (0..n)
        .map(|i| {
            let image = Array2::from_shape_fn((size, size), |_| rng.random_range(0.05..1.0));
            let labels = Array2::from_shape_fn((size, size), |_| rng.random_range(0..classes));
            Sample::new(image, labels, &mask, i as u32).unwrap()
        })
        .collect()
}

/// Fresh state with random biases, so every parameter has a generic gradient.
pub fn perturbed_state(setup: &TrainSetup, seed: u64) -> TrainState<f64> {
    let mut state = TrainState::<f64>::new(setup).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng| {
        for t in p.iter_mut() {
            if t.name.ends_with(".bias") {
                for v in t.data.iter_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
    };
    jitter(state.recon.params_mut(), &mut rng);
    jitter(state.seg.params_mut(), &mut rng);
    state
}

/// Largest relative gap between the analytic gradient of the joint loss and a
/// central difference, over every recon and seg parameter.
pub fn worst_relative_error(
    state: &TrainState<f64>,
    batch: &[Sample<f64>],
    weights: (f64, f64),
    teacher: bool,
    losses: Losses,
) -> f64 {
    let g = joint_gradients(&state.recon, &state.seg, batch, weights, teacher, losses).unwrap();
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        // Below 1e-6 the difference quotient's roundoff (~1e-10) swamps the value.
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    };
    let loss = |s: &TrainState<f64>| joint_loss(&s.recon, &s.seg, batch, weights, teacher, losses).unwrap().2;

    let mut worst = 0.0f64;
    for i in 0..state.recon.params().count() {
        let mut s = state.clone();
        let base = s.recon.params().scalar(i);
        *s.recon.params_mut().scalar_mut(i) = base + h;
        let plus = loss(&s);
        *s.recon.params_mut().scalar_mut(i) = base - h;
        let minus = loss(&s);
        worst = worst.max(check(g.recon.scalar(i), plus, minus));
    }
    for i in 0..state.seg.params().count() {
        let mut s = state.clone();
        let base = s.seg.params().scalar(i);
        *s.seg.params_mut().scalar_mut(i) = base + h;
        let plus = loss(&s);
        *s.seg.params_mut().scalar_mut(i) = base - h;
        let minus = loss(&s);
        worst = worst.max(check(g.seg.scalar(i), plus, minus));
    }
    worst
}
