//! The estimator is checked against the one case with a closed-form
//! answer: for bivariate Gaussians with correlation ρ the mutual
//! information is −½·ln(1−ρ²), so ρ = 0.9 gives 0.8303 nats.

use intapt_core::mine::Mine;
use intapt_core::optim::AdamW;
use intapt_core::rng::{normal, rng_for};
use intapt_core::tensor::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const RHO: f64 = 0.9;
const ANALYTIC_MI: f64 = 0.830366;

#[test]
fn analytic_oracle_is_what_we_think_it_is() {
    assert!((-0.5 * (1.0 - RHO * RHO).ln() - ANALYTIC_MI).abs() < 1e-6);
}

fn gaussian_pair_batch(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> (Mat<f64>, Mat<f64>) {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = normal::<f64>(rng);
        let eps = normal::<f64>(rng);
        xs.push(x);
        ys.push(rho * x + (1.0 - rho * rho).sqrt() * eps);
    }
    (Mat::from_vec(n, 1, xs), Mat::from_vec(n, 1, ys))
}

/// Trains a fresh critic on streaming Gaussian batches; returns the
/// per-step estimates.
fn train_on_gaussians(rho: f64, steps: usize, seed: u64) -> Vec<f64> {
    let mut mine = Mine::<f64>::new(1, 64, seed);
    let mut opt = AdamW::new(1e-3, 0.005);
    let mut data_rng = rng_for("mine-test-data", seed, 0);
    let mut rot_rng = rng_for("mine-test-rot", seed, 0);
    let batch = 128;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (x, y) = gaussian_pair_batch(&mut data_rng, batch, rho);
        let rotation = rot_rng.gen_range(1..batch);
        trace.push(mine.critic_step(&mut opt, &x, &y, rotation, 5.0).unwrap());
    }
    trace
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn trained_critic_recovers_gaussian_mutual_information() {
    let trace = train_on_gaussians(RHO, 2000, 5);
    let settled = mean(&trace[trace.len() - 100..]);
    assert!(
        (settled - ANALYTIC_MI).abs() <= 0.15,
        "estimate {settled} not within 0.15 of {ANALYTIC_MI}"
    );
}

#[test]
fn estimate_respects_the_lower_bound_direction() {
    let trace = train_on_gaussians(RHO, 2000, 6);
    let settled = mean(&trace[trace.len() - 100..]);
    assert!(settled <= ANALYTIC_MI + 0.15, "estimate {settled} overshoots the bound");
}

#[test]
fn training_raises_the_estimate_on_correlated_data() {
    let trace = train_on_gaussians(RHO, 2000, 7);
    let early = mean(&trace[..30]);
    let late = mean(&trace[trace.len() - 100..]);
    assert!(late > early + 0.25, "no ascent: early {early}, late {late}");
}

#[test]
fn independent_data_keeps_the_estimate_near_zero() {
    let trace = train_on_gaussians(0.0, 2000, 8);
    let settled = mean(&trace[trace.len() - 100..]);
    assert!(settled.abs() <= 0.05, "independent pairs estimated at {settled}");
}

#[test]
fn critic_training_is_reproducible() {
    let a = train_on_gaussians(RHO, 60, 9);
    let b = train_on_gaussians(RHO, 60, 9);
    assert_eq!(a, b);
}

#[test]
fn frozen_critic_estimate_is_deterministic() {
    let mine = Mine::<f64>::new(2, 16, 3);
    let mut rng = rng_for("mine-test-det", 0, 0);
    let (x, _) = gaussian_pair_batch(&mut rng, 8, 0.5);
    let (y, _) = gaussian_pair_batch(&mut rng, 8, 0.5);
    let xs = Mat::from_fn(8, 2, |i, j| if j == 0 { x[(i, 0)] } else { y[(i, 0)] });
    let ys = Mat::from_fn(8, 2, |i, j| if j == 0 { y[(i, 0)] } else { x[(i, 0)] });
    assert_eq!(mine.estimate(&xs, &ys, 3).unwrap(), mine.estimate(&xs, &ys, 3).unwrap());
}
