#![allow(dead_code)]

use agesel::model::{loss, minibatch_gradient, ModelSpec, Params, Sample};
use agesel::theory::TheoryConstants;
use agesel::RandomStream;

/// Random `(params, batch)` for `spec` drawn from `rng`.
pub fn random_instance(spec: &ModelSpec, batch: usize, rng: &mut RandomStream) -> (Params<f64>, Vec<Sample<f64>>) {
    let params = Params::new((0..spec.num_params()).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let samples = (0..batch)
        .map(|_| {
            let x = (0..spec.input_dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            Sample::new(x, rng.index(spec.num_classes))
        })
        .collect();
    (params, samples)
}

/// Largest coordinate error between the analytic gradient and central
/// differences with step `h`, relative to `max(|analytic|, |numeric|, 1e-6)`.
pub fn max_fd_error(spec: &ModelSpec, params: &Params<f64>, batch: &[Sample<f64>], h: f64) -> f64 {
    let g = minibatch_gradient(params, spec, batch).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone().into_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let lp = loss(&Params::new(plus).unwrap(), spec, batch).unwrap();
        let lm = loss(&Params::new(minus).unwrap(), spec, batch).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = g.as_slice()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Finite-difference check over `count` random instances; returns the worst error.
pub fn fd_suite(spec: &ModelSpec, count: usize, seed: u64) -> f64 {
    let mut rng = RandomStream::new(seed);
    (0..count)
        .map(|_| {
            let (p, b) = random_instance(spec, 1 + rng.index(8), &mut rng);
            max_fd_error(spec, &p, &b, 1e-5)
        })
        .fold(0.0, f64::max)
}

/// Independent term-by-term evaluation of the bound constants.
pub struct OracleTerms {
    pub z1: f64,
    pub z2: f64,
    pub c_upper: f64,
    pub v: f64,
    pub bound: f64,
}

pub fn oracle(k: &TheoryConstants<f64>, c: f64, j: usize) -> OracleTerms {
    let u = k.local_steps as f64;
    let eta = k.eta;
    let l = k.smoothness;
    let sl = k.sigma_local;
    let sg = k.sigma_global;
    let s = k.s as f64;
    let b = k.batch_size as f64;
    let m = k.num_workers as f64;
    let r = k.traversal_rounds as f64;

    let z1 = (5.0 * (u * u) * (eta * eta * eta) * (l * l) / 2.0) * (sl * sl + 6.0 * u * (sg * sg));
    let z2 = 15.0 * (u * u * u) * (l * l) * (eta * eta) * (sl * sl + 6.0 * u * (sg * sg)) + 3.0 * (u * u) * (sg * sg);
    let c_upper = 1.0 / 2.0
        - 15.0 * (u * u) * (eta * eta) * (l * l)
        - l * eta * (90.0 * (u * u * u) * (l * l) * (eta * eta) + 3.0 * u);
    let first = eta * l / (2.0 * s * b) * (sl * sl);
    let second = z1 / (eta * u);
    let third = (3.0 * eta * l - 2.0 * l * eta * m / (s * r)) * z2 / u;
    let v = (1.0 / c) * (first + second + third);
    let bound = (k.initial_loss - k.loss_floor) / (c * eta * u * j as f64) + v;
    OracleTerms {
        z1,
        z2,
        c_upper,
        v,
        bound,
    }
}

/// Random constants with `c_upper` comfortably positive and `R ≥ ⌈M/S⌉`.
pub fn random_constants(rng: &mut RandomStream) -> TheoryConstants<f64> {
    let smoothness = 10f64.powf(rng.uniform_range(-2.0, 2.0));
    let local_steps = 1 + rng.index(20);
    let num_workers = 1 + rng.index(100);
    let s = 1 + rng.index(num_workers);
    let eta = rng.uniform_range(1e-4, 0.05) / (smoothness * local_steps as f64);
    let initial_loss = rng.uniform_range(0.1, 10.0);
    TheoryConstants {
        smoothness,
        sigma_local: rng.uniform_range(0.0, 5.0),
        sigma_global: rng.uniform_range(0.0, 5.0),
        eta,
        local_steps,
        s,
        batch_size: 1 + rng.index(256),
        num_workers,
        traversal_rounds: num_workers.div_ceil(s) + rng.index(20),
        loss_floor: initial_loss * rng.uniform_range(0.0, 0.9),
        initial_loss,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
