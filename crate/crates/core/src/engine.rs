//! The parameter-server round loop.
//!
//! Each round: select the download set, broadcast the global model, run `U`
//! local SGD steps on every downloading worker, pick the uploaders, average
//! their models, age the rest, record metrics. Training stops at the first
//! evaluated round whose accuracy reaches the target, or at the round budget.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, DataShard};
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, Params, Sample};
use crate::rng::{Purpose, RandomStream};
use crate::scalar::Scalar;
use crate::selection::{Selector, StrategyConfig, StrategyKind};

/// Optimisation settings shared by all strategies. Defaults are the
/// reference setup: `eta = 0.1`, `B = 100`, `U = 5`, stop at 80% accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stepsize.
    pub eta: f64,
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Local iterations per round `U`.
    pub local_steps: usize,
    /// Round budget `J_max`.
    pub max_rounds: usize,
    pub target_accuracy: f64,
    /// Evaluate accuracy every this many rounds (and on the last one).
    pub eval_period: usize,
    pub aggregation: AggregationRule,
}

/// How uploaded models are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Plain mean of the uploads; round robin alone weights by data share.
    #[default]
    Reference,
    /// Every strategy weights uploads by data share renormalised over the
    /// upload set.
    SizeWeighted,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            batch_size: 100,
            local_steps: 5,
            max_rounds: 2000,
            target_accuracy: 0.8,
            eval_period: 1,
            aggregation: AggregationRule::Reference,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if self.batch_size == 0 || self.local_steps == 0 || self.eval_period == 0 {
            return Err(Error::config(
                "batch_size, local_steps and eval_period must be at least 1",
            ));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(Error::config(format!(
                "target_accuracy must lie in (0, 1], got {}",
                self.target_accuracy
            )));
        }
        Ok(())
    }
}

/// Metrics for round `j`.
///
/// `sq_grad_norm` is measured at the broadcast model `θ^j`; `loss` and
/// `accuracy` at the aggregated model `θ^{j+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord<T> {
    pub round: usize,
    /// `|download_set| + S`.
    pub comm_cost: usize,
    pub cumulative_cost: usize,
    pub loss: T,
    /// `None` on rounds that were not evaluated.
    pub accuracy: Option<f64>,
    pub sq_grad_norm: T,
    /// Ages after this round's update.
    pub ages: Vec<u32>,
    pub num_infrequent: usize,
    pub num_age_selected: usize,
    pub download_set: Vec<usize>,
    pub upload_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateResult<T> {
    pub worker_id: usize,
    pub final_params: Params<T>,
    /// `‖θ_m^{j,U} − θ^j‖`.
    pub update_norm: T,
}

/// Runs `steps` SGD iterations from `global` on `shard`; iteration `u`
/// draws its minibatch from `stream_for(u)`.
pub fn local_sgd_with<T: Scalar>(
    shard: &DataShard<T>,
    global: &Params<T>,
    spec: &ModelSpec,
    eta: f64,
    batch_size: usize,
    steps: usize,
    mut stream_for: impl FnMut(usize) -> RandomStream,
) -> Result<LocalUpdateResult<T>> {
    let mut local = global.clone();
    let step = T::of(-eta);
    for u in 0..steps {
        let mut rng = stream_for(u);
        let batch = sample_minibatch(shard, batch_size, &mut rng)?;
        let grad = model::minibatch_gradient(&local, spec, &batch)?;
        local.add_scaled(step, &grad)?;
    }
    let update_norm = local.distance(global);
    if !update_norm.is_finite() {
        return Err(Error::NonFinite("update norm"));
    }
    Ok(LocalUpdateResult {
        worker_id: shard.worker_id,
        final_params: local,
        update_norm,
    })
}

/// Local SGD for one worker in round `round`. Minibatch draws come from
/// substreams keyed by `(seed, worker, round, iteration)`, so they do not
/// depend on which other workers were selected.
pub fn local_sgd<T: Scalar>(
    shard: &DataShard<T>,
    global: &Params<T>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<LocalUpdateResult<T>> {
    let worker = shard.worker_id;
    local_sgd_with(shard, global, spec, cfg.eta, cfg.batch_size, cfg.local_steps, |u| {
        RandomStream::derive(seed, Purpose::LocalSgd, &[worker as u64, round as u64, u as u64])
    })
    .map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { round, worker },
        other => other,
    })
}

/// Averages the uploaded models.
///
/// With `weights = None` this is the plain mean. With `Some(p)`, worker `m`
/// gets `p[m]` renormalised over the uploaders (round robin's weighted
/// aggregation). Each coordinate is clamped to the uploads' range so that
/// rounding cannot push the mean outside it.
pub fn aggregate<T: Scalar>(updates: &[LocalUpdateResult<T>], s: usize, weights: Option<&[f64]>) -> Result<Params<T>> {
    if updates.len() != s || s == 0 {
        return Err(Error::Cardinality {
            expected: s,
            actual: updates.len(),
        });
    }
    let d = updates[0].final_params.len();
    if let Some(u) = updates.iter().find(|u| u.final_params.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "aggregated update",
            expected: d,
            actual: u.final_params.len(),
        });
    }
    let coeffs: Vec<T> = match weights {
        None => vec![T::one() / T::of_usize(s); s],
        Some(p) => {
            let picked: Vec<f64> = updates
                .iter()
                .map(|u| p.get(u.worker_id).copied().ok_or(Error::MissingNorm(u.worker_id)))
                .collect::<Result<_>>()?;
            let total: f64 = picked.iter().sum();
            if !(total > 0.0) {
                return Err(Error::config("aggregation weights sum to zero"));
            }
            picked.iter().map(|w| T::of(w / total)).collect()
        }
    };
    let mut out = vec![T::zero(); d];
    for (i, o) in out.iter_mut().enumerate() {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        let mut acc = T::zero();
        for (u, &c) in updates.iter().zip(&coeffs) {
            let v = u.final_params.as_slice()[i];
            acc = acc + c * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        *o = acc.max(lo).min(hi);
    }
    Params::new(out).map_err(|_| Error::NonFinite("aggregate"))
}

/// Weighted training loss `Σ p_m L_m(θ)`.
pub fn weighted_loss<T: Scalar>(params: &Params<T>, spec: &ModelSpec, shards: &[DataShard<T>]) -> Result<T> {
    let mut total = T::zero();
    for shard in shards {
        if shard.is_empty() {
            return Err(Error::EmptyShard(shard.worker_id));
        }
        total = total + T::of(shard.weight) * model::loss(params, spec, &shard.samples)?;
    }
    Ok(total)
}

/// Full-batch training gradient `Σ p_m ∇L_m(θ)`.
pub fn full_gradient<T: Scalar>(params: &Params<T>, spec: &ModelSpec, shards: &[DataShard<T>]) -> Result<Params<T>> {
    let mut total = Params::zeros(params.len());
    for shard in shards {
        if shard.is_empty() {
            return Err(Error::EmptyShard(shard.worker_id));
        }
        let g = model::minibatch_gradient(params, spec, &shard.samples)?;
        total.add_scaled(T::of(shard.weight), &g)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalMetrics<T> {
    pub loss: T,
    pub accuracy: f64,
    pub sq_grad_norm: T,
}

/// Training loss and squared gradient norm over the shards, accuracy over
/// `eval_set`.
pub fn global_metrics<T: Scalar, S: std::borrow::Borrow<Sample<T>>>(
    params: &Params<T>,
    spec: &ModelSpec,
    shards: &[DataShard<T>],
    eval_set: &[S],
) -> Result<GlobalMetrics<T>> {
    Ok(GlobalMetrics {
        loss: weighted_loss(params, spec, shards)?,
        accuracy: model::accuracy(params, spec, eval_set)?,
        sq_grad_norm: full_gradient(params, spec, shards)?.norm_sq(),
    })
}

/// Everything a training run needs besides the strategy and optimiser settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSetup<'a, T> {
    pub spec: ModelSpec,
    pub shards: &'a [DataShard<T>],
    pub eval_set: &'a [Sample<T>],
}

#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub records: Vec<RoundRecord<T>>,
    pub initial_loss: T,
    pub final_params: Params<T>,
    /// Whether the last record reached the accuracy target.
    pub reached_target: bool,
}

/// Runs the round loop from `initial` until the target accuracy or the
/// round budget. Deterministic in `seed`.
pub fn run_training<T: Scalar>(
    setup: &TrainingSetup<'_, T>,
    strategy: &StrategyConfig,
    cfg: &TrainConfig,
    seed: u64,
    initial: Params<T>,
) -> Result<TrainingRun<T>> {
    cfg.validate()?;
    setup.spec.validate()?;
    let spec = &setup.spec;
    let shards = setup.shards;
    let m = shards.len();
    if shards.iter().enumerate().any(|(i, s)| s.worker_id != i) {
        return Err(Error::config("shard worker ids must be 0..M in order"));
    }
    let mut selector = Selector::new(*strategy, m)?;
    let weights: Vec<f64> = shards.iter().map(|s| s.weight).collect();
    let weighted = strategy.kind == StrategyKind::RoundRobin || cfg.aggregation == AggregationRule::SizeWeighted;
    let agg_weights = weighted.then_some(weights.as_slice());

    let mut params = initial;
    let initial_loss = weighted_loss(&params, spec, shards)?;
    let mut sq_grad = full_gradient(&params, spec, shards)?.norm_sq();
    let mut records = Vec::new();
    let mut cumulative = 0usize;
    let mut reached_target = false;

    for round in 0..cfg.max_rounds {
        let mut sel_rng = RandomStream::derive(seed, Purpose::Selection, &[round as u64]);
        let mut outcome = selector.download(&weights, round, &mut sel_rng)?;

        let updates: Vec<LocalUpdateResult<T>> = outcome
            .download_set
            .par_iter()
            .map(|&w| local_sgd(&shards[w], &params, spec, cfg, round, seed))
            .collect::<Result<_>>()?;

        let norms: BTreeMap<usize, f64> = updates.iter().map(|u| (u.worker_id, u.update_norm.as_f64())).collect();
        selector.upload(&mut outcome, &norms)?;

        let uploaded: Vec<LocalUpdateResult<T>> = updates
            .into_iter()
            .filter(|u| outcome.upload_set.binary_search(&u.worker_id).is_ok())
            .collect();
        params = aggregate(&uploaded, strategy.s, agg_weights).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                round,
                worker: outcome.upload_set[0],
            },
            other => other,
        })?;

        let comm_cost = outcome.download_set.len() + strategy.s;
        cumulative += comm_cost;
        let loss = weighted_loss(&params, spec, shards)?;
        let evaluate = (round + 1) % cfg.eval_period == 0 || round + 1 == cfg.max_rounds;
        let accuracy = if evaluate {
            Some(model::accuracy(&params, spec, setup.eval_set)?)
        } else {
            None
        };
        records.push(RoundRecord {
            round,
            comm_cost,
            cumulative_cost: cumulative,
            loss,
            accuracy,
            sq_grad_norm: sq_grad,
            ages: selector.ages().ages().to_vec(),
            num_infrequent: outcome.num_infrequent,
            num_age_selected: outcome.num_age_selected,
            download_set: outcome.download_set,
            upload_set: outcome.upload_set,
        });
        if accuracy.is_some_and(|a| a >= cfg.target_accuracy) {
            reached_target = true;
            break;
        }
        sq_grad = full_gradient(&params, spec, shards)?.norm_sq();
    }

    Ok(TrainingRun {
        records,
        initial_loss,
        final_params: params,
        reached_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_label_sorted, PartitionPlan};
    use crate::model::init_params;

    fn update(worker_id: usize, v: Vec<f64>) -> LocalUpdateResult<f64> {
        LocalUpdateResult {
            worker_id,
            final_params: Params::new(v).unwrap(),
            update_norm: 0.0,
        }
    }

    fn toy_shards() -> (ModelSpec, Vec<DataShard<f64>>) {
        let data = generate_synthetic::<f64>(3, 4, 20, 0.5, 2).unwrap();
        let plan = PartitionPlan::equal(60, 6).unwrap();
        (ModelSpec::logistic(4, 3), partition_label_sorted(&data, &plan).unwrap())
    }

    #[test]
    fn aggregate_mean_and_weights() {
        let ups = vec![update(0, vec![1.0, 2.0]), update(1, vec![3.0, 4.0])];
        assert_eq!(aggregate(&ups, 2, None).unwrap().as_slice(), &[2.0, 3.0]);
        let ups = vec![update(0, vec![0.0]), update(1, vec![2.0])];
        let p = [0.75, 0.25];
        assert_eq!(aggregate(&ups, 2, Some(&p)).unwrap().as_slice(), &[0.5]);
        // renormalised over the uploaders
        let p = [0.3, 0.1, 0.6];
        assert_eq!(aggregate(&ups, 2, Some(&p)).unwrap().as_slice(), &[0.5]);
        assert!(matches!(
            aggregate(&ups, 3, None),
            Err(Error::Cardinality { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn aggregate_identical_uploads_is_idempotent() {
        let v = vec![0.1, -0.7, 1e-300, 3.3];
        let ups: Vec<_> = (0..3).map(|w| update(w, v.clone())).collect();
        assert_eq!(aggregate(&ups, 3, None).unwrap().as_slice(), v.as_slice());
        assert_eq!(
            aggregate(&ups, 3, Some(&[0.2, 0.5, 0.3])).unwrap().as_slice(),
            v.as_slice()
        );
    }

    #[test]
    fn zero_stepsize_keeps_params() {
        let (spec, shards) = toy_shards();
        let global = init_params::<f64>(&spec, 1);
        let cfg = TrainConfig {
            eta: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = local_sgd(&shards[2], &global, &spec, &cfg, 0, 9).unwrap();
        assert_eq!(r.final_params, global);
        assert_eq!(r.update_norm, 0.0);
    }

    #[test]
    fn single_forced_step() {
        let spec = ModelSpec::logistic(2, 2);
        let z = Sample::new(vec![0.4, -1.2], 1);
        let shard = DataShard {
            worker_id: 0,
            samples: vec![z.clone()],
            weight: 1.0,
        };
        let global = Params::new(vec![0.1, 0.2, -0.3, 0.4, 0.05, -0.05]).unwrap();
        let cfg = TrainConfig {
            eta: 0.3,
            batch_size: 1,
            local_steps: 1,
            ..TrainConfig::default()
        };
        let r = local_sgd(&shard, &global, &spec, &cfg, 0, 0).unwrap();
        let g = model::minibatch_gradient(&global, &spec, &[z]).unwrap();
        let mut expected = global.clone();
        expected.add_scaled(-0.3, &g).unwrap();
        assert_eq!(r.final_params, expected);
    }

    #[test]
    fn two_steps_match_manual_composition() {
        let (spec, shards) = toy_shards();
        let global = init_params::<f64>(&spec, 4);
        let cfg = TrainConfig {
            eta: 0.2,
            batch_size: 5,
            local_steps: 2,
            ..TrainConfig::default()
        };
        let (seed, round, worker) = (17u64, 3usize, 1usize);
        let got = local_sgd(&shards[worker], &global, &spec, &cfg, round, seed).unwrap();

        let mut manual = global.clone();
        for u in 0..2u64 {
            let mut rng = RandomStream::derive(seed, Purpose::LocalSgd, &[worker as u64, round as u64, u]);
            let batch = sample_minibatch(&shards[worker], 5, &mut rng).unwrap();
            let g = model::minibatch_gradient(&manual, &spec, &batch).unwrap();
            manual.add_scaled(-0.2, &g).unwrap();
        }
        assert_eq!(got.final_params, manual);
        assert_eq!(got.update_norm, manual.distance(&global));
    }

    #[test]
    fn divergence_is_reported_with_round_and_worker() {
        let spec = ModelSpec::logistic(1, 2);
        let shard = DataShard {
            worker_id: 3,
            samples: vec![Sample::new(vec![1e300], 0)],
            weight: 1.0,
        };
        let global = Params::new(vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = TrainConfig {
            eta: 1e10,
            batch_size: 1,
            local_steps: 3,
            ..TrainConfig::default()
        };
        let err = local_sgd(&shard, &global, &spec, &cfg, 12, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { round: 12, worker: 3 }), "{err:?}");
    }

    #[test]
    fn weighted_loss_equals_full_mean() {
        let data = generate_synthetic::<f64>(3, 4, 20, 0.5, 2).unwrap();
        let spec = ModelSpec::logistic(4, 3);
        let plan = PartitionPlan::new(vec![7, 13, 25, 15]).unwrap();
        let shards = partition_label_sorted(&data, &plan).unwrap();
        let p = init_params::<f64>(&spec, 8);
        let direct = model::loss(&p, &spec, data.samples()).unwrap();
        assert!((weighted_loss(&p, &spec, &shards).unwrap() - direct).abs() < 1e-10);
        let g = full_gradient(&p, &spec, &shards).unwrap();
        let gd = model::minibatch_gradient(&p, &spec, data.samples()).unwrap();
        for (a, b) in g.as_slice().iter().zip(gd.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = partition_label_sorted(&data, &PartitionPlan::new(vec![60]).unwrap()).unwrap();
        assert_eq!(weighted_loss(&p, &spec, &single).unwrap(), direct);
    }

    #[test]
    fn zero_round_budget() {
        let (spec, shards) = toy_shards();
        let setup = TrainingSetup {
            spec,
            shards: &shards,
            eval_set: &shards[0].samples,
        };
        let init = init_params::<f64>(&spec, 1);
        let cfg = TrainConfig {
            max_rounds: 0,
            ..TrainConfig::default()
        };
        let run = run_training(
            &setup,
            &StrategyConfig::new(StrategyKind::AgeSel, 2, 4),
            &cfg,
            1,
            init.clone(),
        )
        .unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.final_params, init);
    }
}
