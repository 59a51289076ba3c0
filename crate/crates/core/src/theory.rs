//! Closed-form convergence constants for local SGD with age-based selection.
//!
//! Given a smoothness constant `L`, variance bounds `σ_L` (minibatch noise)
//! and `σ_G` (local vs. global gradient spread), the optimiser settings and
//! the traversal window `R`, this module evaluates
//!
//! ```text
//! Z1      = (5 U² η³ L² / 2) (σ_L² + 6 U σ_G²)
//! Z2      = 15 U³ L² η² (σ_L² + 6 U σ_G²) + 3 U² σ_G²
//! c_upper = 1/2 − 15 U² η² L² − L η (90 U³ L² η² + 3 U)
//! V       = (1/c) [ η L σ_L² / (2 S B) + Z1 / (η U) + (3 η L − 2 L η M / (S R)) Z2 / U ]
//! bound J = (L(θ⁰) − L*) / (c η U J) + V
//! ```
//!
//! valid when `η ≤ 1 / (8 L U)` and `0 < c < c_upper`.

use serde::{Deserialize, Serialize};

use crate::data::DataShard;
use crate::engine::RoundRecord;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, Params, Sample};
use crate::scalar::Scalar;

/// Problem and optimiser constants feeding the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants<T> {
    /// Smoothness `L`.
    pub smoothness: T,
    /// `σ_L`, bound on the local gradient estimator's standard deviation.
    pub sigma_local: T,
    /// `σ_G`, bound on local-vs-global gradient deviation.
    pub sigma_global: T,
    pub eta: T,
    /// Local iterations `U`.
    pub local_steps: usize,
    /// Uploads per round `S`.
    pub s: usize,
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Worker count `M`.
    pub num_workers: usize,
    /// Traversal window `R`.
    pub traversal_rounds: usize,
    /// `L*`, lower bound of the objective.
    pub loss_floor: T,
    /// `L(θ⁰)`.
    pub initial_loss: T,
}

impl Default for TheoryConstants<f64> {
    /// Reference optimiser settings with unit problem constants and the
    /// `τ_max + ⌈M/S⌉ = 8` traversal window.
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            sigma_local: 1.0,
            sigma_global: 1.0,
            eta: 0.1,
            local_steps: 5,
            s: 5,
            batch_size: 100,
            num_workers: 20,
            traversal_rounds: 8,
            loss_floor: 0.0,
            initial_loss: 1.0,
        }
    }
}

impl<T: Scalar> TheoryConstants<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.smoothness, self.eta];
        if positive.iter().any(|v| !(v.is_finite() && *v > T::zero())) {
            return Err(Error::config("smoothness and eta must be positive"));
        }
        if [self.sigma_local, self.sigma_global]
            .iter()
            .any(|v| !(v.is_finite() && *v >= T::zero()))
        {
            return Err(Error::config("variance bounds must be non-negative"));
        }
        if [
            self.local_steps,
            self.s,
            self.batch_size,
            self.num_workers,
            self.traversal_rounds,
        ]
        .contains(&0)
        {
            return Err(Error::config("U, S, B, M and R must be at least 1"));
        }
        if !(self.initial_loss >= self.loss_floor) {
            return Err(Error::config("initial loss must not be below the loss floor"));
        }
        Ok(())
    }

    /// `1 / (8 L U)`.
    pub fn stepsize_limit(&self) -> T {
        T::one() / (T::of(8.0) * self.smoothness * T::of_usize(self.local_steps))
    }
}

/// `η ≤ 1 / (8 L U)`.
pub fn check_stepsize<T: Scalar>(k: &TheoryConstants<T>) -> bool {
    k.eta <= k.stepsize_limit()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaConstants<T> {
    pub z1: T,
    pub z2: T,
    /// Supremum of admissible `c`. Non-positive when the hypotheses fail.
    pub c_upper: T,
}

/// `(Z1, Z2, c_upper)`.
pub fn lemma_constants<T: Scalar>(k: &TheoryConstants<T>) -> LemmaConstants<T> {
    let u = T::of_usize(k.local_steps);
    let (eta, l) = (k.eta, k.smoothness);
    let noise = k.sigma_local.powi(2) + T::of(6.0) * u * k.sigma_global.powi(2);
    let z1 = T::of(2.5) * u.powi(2) * eta.powi(3) * l.powi(2) * noise;
    let z2 =
        T::of(15.0) * u.powi(3) * l.powi(2) * eta.powi(2) * noise + T::of(3.0) * u.powi(2) * k.sigma_global.powi(2);
    let c_upper = T::of(0.5)
        - T::of(15.0) * u.powi(2) * eta.powi(2) * l.powi(2)
        - l * eta * (T::of(90.0) * u.powi(3) * l.powi(2) * eta.powi(2) + T::of(3.0) * u);
    LemmaConstants { z1, z2, c_upper }
}

fn check_c<T: Scalar>(c: T, c_upper: T) -> Result<()> {
    if !(c > T::zero() && c < c_upper) {
        return Err(Error::InvalidC {
            c: c.as_f64(),
            upper: c_upper.as_f64(),
        });
    }
    Ok(())
}

fn check_traversal<T: Scalar>(k: &TheoryConstants<T>) -> Result<()> {
    let min_r = k.num_workers.div_ceil(k.s);
    if k.traversal_rounds < min_r {
        return Err(Error::config(format!(
            "traversal window R = {} is below ceil(M/S) = {min_r}",
            k.traversal_rounds
        )));
    }
    Ok(())
}

/// Asymptotic floor `V` of the bound for a given `c`.
pub fn bound_floor<T: Scalar>(k: &TheoryConstants<T>, c: T) -> Result<T> {
    k.validate()?;
    check_traversal(k)?;
    let lc = lemma_constants(k);
    check_c(c, lc.c_upper)?;
    let u = T::of_usize(k.local_steps);
    let s = T::of_usize(k.s);
    let b = T::of_usize(k.batch_size);
    let m = T::of_usize(k.num_workers);
    let r = T::of_usize(k.traversal_rounds);
    let (eta, l) = (k.eta, k.smoothness);
    let sampling = eta * l / (T::of(2.0) * s * b) * k.sigma_local.powi(2);
    let drift = lc.z1 / (eta * u);
    let participation = (T::of(3.0) * eta * l - T::of(2.0) * l * eta * m / (s * r)) * lc.z2 / u;
    Ok((sampling + drift + participation) / c)
}

/// Right-hand side of the average squared gradient norm bound after `rounds` rounds.
pub fn theorem_bound<T: Scalar>(k: &TheoryConstants<T>, c: T, rounds: usize) -> Result<T> {
    if rounds == 0 {
        return Err(Error::config("the bound needs at least one round"));
    }
    let v = bound_floor(k, c)?;
    let gap = k.initial_loss - k.loss_floor;
    Ok(gap / (c * k.eta * T::of_usize(k.local_steps) * T::of_usize(rounds)) + v)
}

/// All bound constants for one set of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport<T> {
    pub constants: TheoryConstants<T>,
    pub z1: T,
    pub z2: T,
    pub c_upper: T,
    pub c_used: T,
    /// `None` when no admissible `c` exists.
    pub v: Option<T>,
    pub stepsize_ok: bool,
    pub stepsize_limit: T,
}

/// Default `c` as a fraction of `c_upper`.
pub const DEFAULT_C_FRACTION: f64 = 0.9;

/// Evaluates everything; `c` defaults to `0.9 · c_upper`.
pub fn bound_report<T: Scalar>(k: &TheoryConstants<T>, c: Option<T>) -> Result<BoundReport<T>> {
    k.validate()?;
    let lc = lemma_constants(k);
    let c_used = c.unwrap_or(T::of(DEFAULT_C_FRACTION) * lc.c_upper);
    let v = bound_floor(k, c_used).ok();
    Ok(BoundReport {
        constants: *k,
        z1: lc.z1,
        z2: lc.z2,
        c_upper: lc.c_upper,
        c_used,
        v,
        stepsize_ok: check_stepsize(k),
        stepsize_limit: k.stepsize_limit(),
    })
}

impl<T: Scalar> BoundReport<T> {
    /// Bound after `rounds` rounds at `c_used`.
    pub fn bound_at(&self, rounds: usize) -> Result<T> {
        theorem_bound(&self.constants, self.c_used, rounds)
    }

    /// `rounds` rounded down to a multiple of `R` (the bound is stated for
    /// multiples of the traversal window). `None` below one window.
    pub fn aligned_rounds(&self, rounds: usize) -> Option<usize> {
        let r = self.constants.traversal_rounds;
        let aligned = rounds / r * r;
        (aligned > 0).then_some(aligned)
    }
}

/// Constants as read from a config file: every field optional, missing ones
/// take the [`TheoryConstants`] defaults. `c` defaults to `0.9 · c_upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryInput {
    pub smoothness: f64,
    pub sigma_local: f64,
    pub sigma_global: f64,
    pub eta: f64,
    pub local_steps: usize,
    pub s: usize,
    pub batch_size: usize,
    pub num_workers: usize,
    pub traversal_rounds: usize,
    pub loss_floor: f64,
    pub initial_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl Default for TheoryInput {
    fn default() -> Self {
        Self::from_constants(TheoryConstants::default(), None)
    }
}

impl TheoryInput {
    pub fn from_constants(k: TheoryConstants<f64>, c: Option<f64>) -> Self {
        Self {
            smoothness: k.smoothness,
            sigma_local: k.sigma_local,
            sigma_global: k.sigma_global,
            eta: k.eta,
            local_steps: k.local_steps,
            s: k.s,
            batch_size: k.batch_size,
            num_workers: k.num_workers,
            traversal_rounds: k.traversal_rounds,
            loss_floor: k.loss_floor,
            initial_loss: k.initial_loss,
            c,
        }
    }

    pub fn constants(&self) -> TheoryConstants<f64> {
        TheoryConstants {
            smoothness: self.smoothness,
            sigma_local: self.sigma_local,
            sigma_global: self.sigma_global,
            eta: self.eta,
            local_steps: self.local_steps,
            s: self.s,
            batch_size: self.batch_size,
            num_workers: self.num_workers,
            traversal_rounds: self.traversal_rounds,
            loss_floor: self.loss_floor,
            initial_loss: self.initial_loss,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let input: Self = toml::from_str(text)?;
        input.constants().validate()?;
        Ok(input)
    }
}

/// Traversal window measured from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Traversal {
    pub rounds: usize,
    /// `false` when no window starting at round 0 ever covers every
    /// worker; `rounds` is then the trace length.
    pub complete: bool,
}

/// Largest, over start rounds `j`, of the shortest window `[j, j + w)` whose
/// upload sets together cover all `num_workers` workers.
///
/// Start rounds too close to the end of the trace for any window to cover
/// everyone are skipped.
pub fn measure_traversal(upload_sets: &[&[usize]], num_workers: usize) -> Traversal {
    let n = upload_sets.len();
    if n == 0 || num_workers == 0 {
        return Traversal {
            rounds: n,
            complete: false,
        };
    }
    let mut counts = vec![0usize; num_workers];
    let mut covered = 0usize;
    let mut end = 0usize;
    let mut worst: Option<usize> = None;
    for start in 0..n {
        while covered < num_workers && end < n {
            for &w in upload_sets[end] {
                if w < num_workers {
                    if counts[w] == 0 {
                        covered += 1;
                    }
                    counts[w] += 1;
                }
            }
            end += 1;
        }
        if covered < num_workers {
            break;
        }
        let width = end - start;
        worst = Some(worst.map_or(width, |w: usize| w.max(width)));
        for &w in upload_sets[start] {
            if w < num_workers {
                counts[w] -= 1;
                if counts[w] == 0 {
                    covered -= 1;
                }
            }
        }
    }
    match worst {
        Some(rounds) => Traversal { rounds, complete: true },
        None => Traversal {
            rounds: n,
            complete: false,
        },
    }
}

/// [`measure_traversal`] over a training trace.
pub fn measure_r<T>(records: &[RoundRecord<T>], num_workers: usize) -> Traversal {
    let sets: Vec<&[usize]> = records.iter().map(|r| r.upload_set.as_slice()).collect();
    measure_traversal(&sets, num_workers)
}

/// Largest, over start rounds `j`, of the shortest `w` with
/// `A^j + … + A^{j+w−1} ≥ M` (the age-selected count variant).
pub fn measure_age_sum_window(age_selected: &[usize], num_workers: usize) -> Traversal {
    let n = age_selected.len();
    let mut worst: Option<usize> = None;
    let mut end = 0;
    let mut sum = 0usize;
    for start in 0..n {
        while sum < num_workers && end < n {
            sum += age_selected[end];
            end += 1;
        }
        if sum < num_workers {
            break;
        }
        let width = end - start;
        worst = Some(worst.map_or(width, |w: usize| w.max(width)));
        sum -= age_selected[start];
    }
    match worst {
        Some(rounds) => Traversal { rounds, complete: true },
        None => Traversal {
            rounds: n,
            complete: false,
        },
    }
}

/// Running average of squared gradient norms next to the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundComparison<T> {
    pub rounds: usize,
    pub average_sq_grad_norm: T,
    pub bound: T,
    pub multiple_of_r: bool,
}

/// Pairs `(1/J) Σ_{j<J} ‖∇L(θ^j)‖²` with the bound for every `J` in the
/// trace. A single run stands in for the expectation.
pub fn empirical_vs_bound<T: Scalar>(
    records: &[RoundRecord<T>],
    k: &TheoryConstants<T>,
    c: T,
) -> Result<Vec<BoundComparison<T>>> {
    let mut total = T::zero();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            total = total + r.sq_grad_norm;
            let rounds = i + 1;
            Ok(BoundComparison {
                rounds,
                average_sq_grad_norm: total / T::of_usize(rounds),
                bound: theorem_bound(k, c, rounds)?,
                multiple_of_r: rounds % k.traversal_rounds == 0,
            })
        })
        .collect()
}

/// Smoothness upper bound for softmax cross-entropy logistic regression:
/// each sample's Hessian is at most `½‖(x, 1)‖²`, so the mean loss is
/// `L`-smooth with `L = ½ max_i (‖x_i‖² + 1)`.
pub fn logistic_smoothness_bound<T: Scalar>(samples: &[Sample<T>]) -> T {
    samples
        .iter()
        .map(|s| s.features.iter().map(|&x| x * x).sum::<T>() + T::one())
        .fold(T::zero(), T::max)
        * T::of(0.5)
}

/// Heuristic variance proxies at `params`, returned as `(σ_L, σ_G)`.
///
/// `σ_L²` is the largest per-shard mean squared deviation of single-sample
/// gradients from the shard gradient; `σ_G²` the largest squared distance
/// between a shard gradient and the full gradient. Point estimates at one
/// model only: the assumptions want bounds over all models.
pub fn estimate_variance_proxies<T: Scalar>(
    params: &Params<T>,
    spec: &ModelSpec,
    shards: &[DataShard<T>],
) -> Result<(T, T)> {
    let full = crate::engine::full_gradient(params, spec, shards)?;
    let mut sigma_l_sq = T::zero();
    let mut sigma_g_sq = T::zero();
    for shard in shards {
        let local = model::minibatch_gradient(params, spec, &shard.samples)?;
        sigma_g_sq = sigma_g_sq.max(local.distance(&full).powi(2));
        let mut dev = T::zero();
        for s in &shard.samples {
            let g = model::minibatch_gradient(params, spec, std::slice::from_ref(s))?;
            dev = dev + g.distance(&local).powi(2);
        }
        sigma_l_sq = sigma_l_sq.max(dev / T::of_usize(shard.len()));
    }
    Ok((sigma_l_sq.sqrt(), sigma_g_sq.sqrt()))
}
