//! Monte Carlo experiments: configuration, orchestration across strategies
//! and seeds, comparison tables and file output.
//!
//! Run `r` of an experiment uses seed `base_seed + r` for everything that is
//! random (synthetic data, partition sizes, initial model, selection and
//! local SGD), so all strategies within a run index see the same data,
//! shards and starting point.
//!
//! Output files:
//!
//! * `trace_<strategy>_<run>.csv`, one row per round;
//! * `summary.csv`, one row per (strategy, run);
//! * `report.json`, config plus summaries plus comparison table;
//! * `plot_<kind>.csv`, long-format `strategy,run,round,metric,value` rows.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DataShard, GlobalDataset, PartitionPlan};
use crate::engine::{run_training, RoundRecord, TrainConfig, TrainingSetup};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelKind, ModelSpec, Sample};
use crate::rng::{Purpose, RandomStream};
use crate::selection::{StrategyConfig, StrategyKind};
use crate::theory;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Idx(IdxConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

/// Gaussian blobs, regenerated for every run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate noise standard deviation.
    pub spread: f64,
    /// Size of the held-out evaluation set relative to the training set.
    /// Zero evaluates on the training samples.
    pub eval_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 20,
            samples_per_class: 200,
            spread: 0.8,
            eval_fraction: 0.2,
        }
    }
}

/// IDX image/label files, loaded once and shared by all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// Evaluation pair; the training set is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
    /// Defaults to one more than the largest training label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

/// Shard sizes: explicit, or drawn from a Dirichlet vector per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    /// Smallest shard; defaults to the minibatch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_size: Option<usize>,
    /// Fixed sizes, one per worker, summing to the dataset size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            min_size: None,
            sizes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width for the two-layer model.
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            hidden_dim: 64,
        }
    }
}

/// A full experiment. Every field has a default, so an empty file is a
/// valid config: 20 workers, all four strategies at `S = 5`, `τ_max = 4`,
/// 10 runs of the default [`TrainConfig`] on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_workers: usize,
    pub num_runs: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub strategies: Vec<StrategyConfig>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_workers: 20,
            num_runs: 10,
            base_seed: 0,
            output_dir: PathBuf::from("results"),
            strategies: StrategyKind::ALL
                .iter()
                .map(|&k| StrategyConfig::new(k, 5, 4))
                .collect(),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, for callers that patch fields first.
    pub fn parse_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_runs == 0 {
            return Err(Error::config("num_runs must be at least 1"));
        }
        if self.num_workers == 0 {
            return Err(Error::config("num_workers must be at least 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("at least one strategy is required"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            s.validate(self.num_workers)?;
            if self.strategies[..i].iter().any(|t| t.kind == s.kind) {
                return Err(Error::config(format!("strategy {} listed twice", s.kind)));
            }
        }
        self.train.validate()?;
        if let Some(sizes) = &self.partition.sizes {
            if sizes.len() != self.num_workers {
                return Err(Error::config(format!(
                    "partition.sizes has {} entries for {} workers",
                    sizes.len(),
                    self.num_workers
                )));
            }
            if let DatasetConfig::Synthetic(s) = &self.dataset {
                let n = s.num_classes * s.samples_per_class;
                let total: usize = sizes.iter().sum();
                if total != n {
                    return Err(Error::PartitionMismatch {
                        expected: n,
                        actual: total,
                    });
                }
            }
        } else if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return Err(Error::config("partition.alpha must be positive"));
        }
        if self.model.kind == ModelKind::TwoLayerFc && self.model.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim must be positive"));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if !(s.eval_fraction >= 0.0 && s.eval_fraction.is_finite()) {
                return Err(Error::config("dataset.eval_fraction must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn seed_for_run(&self, run: usize) -> u64 {
        self.base_seed.wrapping_add(run as u64)
    }
}

/// Everything one run index shares across strategies.
#[derive(Debug, Clone)]
pub struct RunData {
    pub seed: u64,
    pub spec: ModelSpec,
    pub shards: Vec<DataShard<f64>>,
    pub eval_set: Vec<Sample<f64>>,
}

type Loaded = (GlobalDataset<f64>, Option<GlobalDataset<f64>>);

fn load_idx_data(idx: &IdxConfig) -> Result<Loaded> {
    let train = data::load_idx(&idx.train_images, &idx.train_labels, idx.num_classes)?;
    let eval = match (&idx.eval_images, &idx.eval_labels) {
        (Some(i), Some(l)) => Some(data::load_idx(i, l, Some(train.num_classes()))?),
        (None, None) => None,
        _ => return Err(Error::config("eval_images and eval_labels must be given together")),
    };
    Ok((train, eval))
}

fn dataset_for_run(cfg: &ExperimentConfig, seed: u64, cached: Option<&Loaded>) -> Result<Loaded> {
    match (&cfg.dataset, cached) {
        (DatasetConfig::Idx(_), Some(loaded)) => Ok(loaded.clone()),
        (DatasetConfig::Idx(idx), None) => load_idx_data(idx),
        (DatasetConfig::Synthetic(s), _) => {
            if s.eval_fraction == 0.0 {
                let d = data::generate_synthetic(s.num_classes, s.feature_dim, s.samples_per_class, s.spread, seed)?;
                Ok((d, None))
            } else {
                let (train, eval) = data::generate_synthetic_split(
                    s.num_classes,
                    s.feature_dim,
                    s.samples_per_class,
                    s.spread,
                    s.eval_fraction,
                    seed,
                )?;
                Ok((train, Some(eval)))
            }
        }
    }
}

fn build_from(cfg: &ExperimentConfig, run: usize, loaded: Loaded) -> Result<RunData> {
    let seed = cfg.seed_for_run(run);
    let (train, eval) = loaded;
    let n = train.len();
    let plan = match &cfg.partition.sizes {
        Some(sizes) => PartitionPlan::new(sizes.clone())?,
        None => {
            let mut rng = RandomStream::derive(seed, Purpose::Partition, &[]);
            let min_size = cfg.partition.min_size.unwrap_or(cfg.train.batch_size);
            PartitionPlan::dirichlet(n, cfg.num_workers, cfg.partition.alpha, min_size, &mut rng)?
        }
    };
    let shards = data::partition_label_sorted(&train, &plan)?;
    let spec = match cfg.model.kind {
        ModelKind::LogisticRegression => ModelSpec::logistic(train.feature_dim(), train.num_classes()),
        ModelKind::TwoLayerFc => ModelSpec::two_layer(train.feature_dim(), cfg.model.hidden_dim, train.num_classes()),
    };
    let eval_set = eval.map_or_else(|| train.samples().to_vec(), |e| e.samples().to_vec());
    Ok(RunData {
        seed,
        spec,
        shards,
        eval_set,
    })
}

/// Dataset, shards and model shape for run index `run`.
pub fn build_run_data(cfg: &ExperimentConfig, run: usize) -> Result<RunData> {
    cfg.validate()?;
    let loaded = dataset_for_run(cfg, cfg.seed_for_run(run), None)?;
    build_from(cfg, run, loaded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    Diverged,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::BudgetExhausted => "budget_exhausted",
            RunStatus::Diverged => "diverged",
        }
    }
}

/// Outcome of one (strategy, run) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: StrategyKind,
    pub s: usize,
    pub tau_max: u32,
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// Recorded rounds.
    pub rounds: usize,
    /// `Some(rounds)` when the target was reached.
    pub rounds_to_target: Option<usize>,
    /// Sum of the per-round costs over the recorded rounds.
    pub total_comm_cost: usize,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    /// Traversal window measured by worker coverage.
    pub measured_r: Option<usize>,
    /// Traversal window measured by summing age-selected counts.
    pub age_sum_r: Option<usize>,
    pub trace_file: String,
}

pub fn trace_file_name(strategy: StrategyKind, run: usize) -> String {
    format!("trace_{}_{}.csv", strategy.name(), run)
}

fn summarize(
    strategy: &StrategyConfig,
    run: usize,
    seed: u64,
    num_workers: usize,
    outcome: &Result<crate::engine::TrainingRun<f64>>,
) -> RunSummary {
    let trace_file = trace_file_name(strategy.kind, run);
    let mut summary = RunSummary {
        strategy: strategy.kind,
        s: strategy.s,
        tau_max: strategy.tau_max,
        run,
        seed,
        status: RunStatus::Diverged,
        rounds: 0,
        rounds_to_target: None,
        total_comm_cost: 0,
        final_accuracy: None,
        final_loss: None,
        measured_r: None,
        age_sum_r: None,
        trace_file,
    };
    if let Ok(tr) = outcome {
        let records = &tr.records;
        summary.rounds = records.len();
        summary.status = if tr.reached_target {
            RunStatus::Converged
        } else {
            RunStatus::BudgetExhausted
        };
        summary.rounds_to_target = tr.reached_target.then_some(records.len());
        summary.total_comm_cost = records.iter().map(|r| r.comm_cost).sum();
        summary.final_accuracy = records.iter().rev().find_map(|r| r.accuracy);
        summary.final_loss = records.last().map(|r| r.loss);
        let cover = theory::measure_r(records, num_workers);
        summary.measured_r = cover.complete.then_some(cover.rounds);
        let a: Vec<usize> = records.iter().map(|r| r.num_age_selected).collect();
        let age_sum = theory::measure_age_sum_window(&a, num_workers);
        summary.age_sum_r = age_sum.complete.then_some(age_sum.rounds);
    }
    summary
}

/// Summaries plus the matching round traces (empty for diverged runs).
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summaries: Vec<RunSummary>,
    pub traces: Vec<Vec<RoundRecord<f64>>>,
}

impl ExperimentOutput {
    pub fn all_diverged(&self) -> bool {
        !self.summaries.is_empty() && self.summaries.iter().all(|s| s.status == RunStatus::Diverged)
    }
}

/// Runs every (strategy, run) pair in memory. Runs execute in parallel;
/// results come back ordered by strategy, then run.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cached = match &cfg.dataset {
        DatasetConfig::Idx(idx) => Some(load_idx_data(idx)?),
        DatasetConfig::Synthetic(_) => None,
    };
    let per_run: Vec<Vec<(RunSummary, Vec<RoundRecord<f64>>)>> = (0..cfg.num_runs)
        .into_par_iter()
        .map(|run| {
            let seed = cfg.seed_for_run(run);
            let rd = build_from(cfg, run, dataset_for_run(cfg, seed, cached.as_ref())?)?;
            let setup = TrainingSetup {
                spec: rd.spec,
                shards: &rd.shards,
                eval_set: &rd.eval_set,
            };
            let init = init_params(&rd.spec, seed);
            cfg.strategies
                .iter()
                .map(|strategy| {
                    let outcome = run_training(&setup, strategy, &cfg.train, seed, init.clone());
                    if let Err(e) = &outcome {
                        if !matches!(e, Error::Divergence { .. }) {
                            return Err(outcome.unwrap_err());
                        }
                    }
                    let summary = summarize(strategy, run, seed, cfg.num_workers, &outcome);
                    Ok((summary, outcome.map(|t| t.records).unwrap_or_default()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut summaries = Vec::new();
    let mut traces = Vec::new();
    for si in 0..cfg.strategies.len() {
        for run in &per_run {
            let (s, t) = run[si].clone();
            summaries.push(s);
            traces.push(t);
        }
    }
    Ok(ExperimentOutput { summaries, traces })
}

/// [`execute`] followed by [`write_outputs`] into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let out = execute(cfg)?;
    write_outputs(cfg, &out, &cfg.output_dir)?;
    Ok(out)
}

/// Writes traces, `summary.csv`, `report.json` and the per-run plot files.
pub fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.summaries
        .par_iter()
        .zip(out.traces.par_iter())
        .try_for_each(|(s, t)| write_atomic(&dir.join(&s.trace_file), &trace_csv(t)?))?;
    write_atomic(&dir.join("summary.csv"), &summary_csv(&out.summaries)?)?;
    let report = Report {
        config: cfg,
        summaries: &out.summaries,
        comparison: compare_report(&out.summaries)?,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;
    for kind in [PlotKind::RoundsCurve, PlotKind::CostCurve, PlotKind::AgeHistogram] {
        emit_plot_data(dir, kind, &[out])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    config: &'a ExperimentConfig,
    summaries: &'a [RunSummary],
    comparison: Comparison,
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join_ids<T: ToString>(ids: &[T]) -> String {
    ids.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

pub const TRACE_HEADER: [&str; 11] = [
    "round",
    "comm_cost",
    "cumulative_cost",
    "loss",
    "accuracy",
    "sq_grad_norm",
    "num_infrequent",
    "num_age_selected",
    "ages",
    "download_set",
    "upload_set",
];

/// One CSV row per round. Floats use the shortest representation that
/// parses back to the same value; id lists are space separated.
pub fn trace_csv(records: &[RoundRecord<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.comm_cost.to_string(),
            r.cumulative_cost.to_string(),
            r.loss.to_string(),
            fmt_opt(r.accuracy),
            r.sq_grad_norm.to_string(),
            r.num_infrequent.to_string(),
            r.num_age_selected.to_string(),
            join_ids(&r.ages),
            join_ids(&r.download_set),
            join_ids(&r.upload_set),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Trace(e.to_string()))
}

fn parse_field<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Trace(format!("bad {what} value {field:?}")))
}

fn parse_ids<T: std::str::FromStr>(field: &str, what: &str) -> Result<Vec<T>> {
    field.split_whitespace().map(|t| parse_field(t, what)).collect()
}

/// Parses a trace written by [`trace_csv`].
pub fn parse_trace_csv(bytes: &[u8]) -> Result<Vec<RoundRecord<f64>>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    if rdr.headers()?.iter().ne(TRACE_HEADER) {
        return Err(Error::Trace("unexpected trace header".into()));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            Ok(RoundRecord {
                round: parse_field(f(0), "round")?,
                comm_cost: parse_field(f(1), "comm_cost")?,
                cumulative_cost: parse_field(f(2), "cumulative_cost")?,
                loss: parse_field(f(3), "loss")?,
                accuracy: match f(4) {
                    "" => None,
                    a => Some(parse_field(a, "accuracy")?),
                },
                sq_grad_norm: parse_field(f(5), "sq_grad_norm")?,
                num_infrequent: parse_field(f(6), "num_infrequent")?,
                num_age_selected: parse_field(f(7), "num_age_selected")?,
                ages: parse_ids(f(8), "ages")?,
                download_set: parse_ids(f(9), "download_set")?,
                upload_set: parse_ids(f(10), "upload_set")?,
            })
        })
        .collect()
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<RoundRecord<f64>>> {
    parse_trace_csv(&fs::read(path)?)
}

/// `(rounds_to_target, total_comm_cost)` recomputed from a trace.
pub fn recompute_from_trace(records: &[RoundRecord<f64>], target_accuracy: f64) -> (Option<usize>, usize) {
    let reached = records
        .last()
        .and_then(|r| r.accuracy)
        .is_some_and(|a| a >= target_accuracy);
    (
        reached.then_some(records.len()),
        records.iter().map(|r| r.comm_cost).sum(),
    )
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "strategy",
    "s",
    "tau_max",
    "run",
    "seed",
    "status",
    "rounds",
    "rounds_to_target",
    "total_comm_cost",
    "final_accuracy",
    "final_loss",
    "measured_r",
    "age_sum_r",
    "trace_file",
];

pub fn summary_csv(summaries: &[RunSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.strategy.name().to_string(),
            s.s.to_string(),
            s.tau_max.to_string(),
            s.run.to_string(),
            s.seed.to_string(),
            s.status.name().to_string(),
            s.rounds.to_string(),
            fmt_opt(s.rounds_to_target),
            s.total_comm_cost.to_string(),
            fmt_opt(s.final_accuracy),
            fmt_opt(s.final_loss),
            fmt_opt(s.measured_r),
            fmt_opt(s.age_sum_r),
            s.trace_file.clone(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Trace(e.to_string()))
}

/// Per-strategy statistics over the runs that reached the target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyStats {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub converged_runs: usize,
    pub diverged_runs: usize,
    pub median_rounds: Option<f64>,
    pub mean_rounds: Option<f64>,
    pub median_cost: Option<f64>,
    pub mean_cost: Option<f64>,
    /// No run reached the target; left out of the orderings.
    pub did_not_converge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub stats: Vec<StrategyStats>,
    /// Strategies attaining the smallest median rounds (several on a tie).
    pub fewest_rounds: Vec<StrategyKind>,
    pub lowest_cost: Vec<StrategyKind>,
    pub rounds_tie: bool,
    pub cost_tie: bool,
    /// Strategies excluded from the orderings, with a note.
    pub excluded: Vec<StrategyKind>,
    pub footnote: Option<String>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn minimizers(stats: &[StrategyStats], key: impl Fn(&StrategyStats) -> Option<f64>) -> Vec<StrategyKind> {
    let best = stats.iter().filter_map(&key).min_by(f64::total_cmp);
    match best {
        Some(b) => stats.iter().filter(|s| key(s) == Some(b)).map(|s| s.strategy).collect(),
        None => Vec::new(),
    }
}

/// Medians and means of rounds-to-target and total cost per strategy,
/// plus which strategies minimise each. Only runs that reached the target
/// enter the statistics.
pub fn compare_report(summaries: &[RunSummary]) -> Result<Comparison> {
    if summaries.is_empty() {
        return Err(Error::config("nothing to compare"));
    }
    let mut kinds: Vec<StrategyKind> = Vec::new();
    for s in summaries {
        if !kinds.contains(&s.strategy) {
            kinds.push(s.strategy);
        }
    }
    let stats: Vec<StrategyStats> = kinds
        .iter()
        .map(|&k| {
            let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.strategy == k).collect();
            let done: Vec<&&RunSummary> = runs.iter().filter(|s| s.rounds_to_target.is_some()).collect();
            let rounds: Vec<f64> = done
                .iter()
                .filter_map(|s| s.rounds_to_target)
                .map(|r| r as f64)
                .collect();
            let costs: Vec<f64> = done.iter().map(|s| s.total_comm_cost as f64).collect();
            StrategyStats {
                strategy: k,
                runs: runs.len(),
                converged_runs: done.len(),
                diverged_runs: runs.iter().filter(|s| s.status == RunStatus::Diverged).count(),
                median_rounds: median(&rounds),
                mean_rounds: mean(&rounds),
                median_cost: median(&costs),
                mean_cost: mean(&costs),
                did_not_converge: done.is_empty(),
            }
        })
        .collect();
    let fewest_rounds = minimizers(&stats, |s| s.median_rounds);
    let lowest_cost = minimizers(&stats, |s| s.median_cost);
    let excluded: Vec<StrategyKind> = stats
        .iter()
        .filter(|s| s.did_not_converge)
        .map(|s| s.strategy)
        .collect();
    let footnote = (!excluded.is_empty()).then(|| {
        format!(
            "{} strateg{} did not converge in any run and {} excluded from the ordering",
            excluded.len(),
            if excluded.len() == 1 { "y" } else { "ies" },
            if excluded.len() == 1 { "is" } else { "are" },
        )
    });
    Ok(Comparison {
        rounds_tie: fewest_rounds.len() > 1,
        cost_tie: lowest_cost.len() > 1,
        stats,
        fewest_rounds,
        lowest_cost,
        excluded,
        footnote,
    })
}

impl Comparison {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        let mut out = format!(
            "{:<8} {:>5} {:>9} {:>13} {:>11} {:>12} {:>10}\n",
            "strategy", "runs", "converged", "median_rounds", "mean_rounds", "median_cost", "mean_cost"
        );
        for s in &self.stats {
            out += &format!(
                "{:<8} {:>5} {:>9} {:>13} {:>11} {:>12} {:>10}{}\n",
                s.strategy.name(),
                s.runs,
                s.converged_runs,
                cell(s.median_rounds),
                cell(s.mean_rounds),
                cell(s.median_cost),
                cell(s.mean_cost),
                if s.did_not_converge { "  did not converge*" } else { "" },
            );
        }
        let names = |v: &[StrategyKind]| v.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ");
        out += &format!(
            "fewest rounds: {}{}\n",
            names(&self.fewest_rounds),
            if self.rounds_tie { " (tie)" } else { "" }
        );
        out += &format!(
            "lowest cost: {}{}\n",
            names(&self.lowest_cost),
            if self.cost_tie { " (tie)" } else { "" }
        );
        if let Some(f) = &self.footnote {
            out += &format!("* {f}\n");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Loss, accuracy and squared gradient norm per round.
    RoundsCurve,
    /// Per-round and cumulative communication cost.
    CostCurve,
    /// Number of workers at each age, per round.
    AgeHistogram,
    /// Cost and accuracy per round across experiments differing in `S`,
    /// with a leading `s` column.
    SSweep,
}

impl PlotKind {
    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::RoundsCurve => "plot_rounds_curve.csv",
            PlotKind::CostCurve => "plot_cost_curve.csv",
            PlotKind::AgeHistogram => "plot_age_histogram.csv",
            PlotKind::SSweep => "plot_s_sweep.csv",
        }
    }
}

/// Long-format plot rows for `kind` as CSV bytes.
pub fn plot_data_csv(kind: PlotKind, outputs: &[&ExperimentOutput]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if kind == PlotKind::SSweep {
        w.write_record(["s", "strategy", "run", "round", "metric", "value"])?;
    } else {
        w.write_record(["strategy", "run", "round", "metric", "value"])?;
    }
    for out in outputs {
        for (s, trace) in out.summaries.iter().zip(&out.traces) {
            let max_age = trace.iter().flat_map(|r| r.ages.iter().copied()).max().unwrap_or(0);
            for r in trace {
                let mut rows: Vec<(String, String)> = Vec::new();
                match kind {
                    PlotKind::RoundsCurve => {
                        rows.push(("loss".into(), r.loss.to_string()));
                        if let Some(a) = r.accuracy {
                            rows.push(("accuracy".into(), a.to_string()));
                        }
                        rows.push(("sq_grad_norm".into(), r.sq_grad_norm.to_string()));
                    }
                    PlotKind::CostCurve => {
                        rows.push(("comm_cost".into(), r.comm_cost.to_string()));
                        rows.push(("cumulative_cost".into(), r.cumulative_cost.to_string()));
                    }
                    PlotKind::AgeHistogram => {
                        for age in 0..=max_age {
                            let n = r.ages.iter().filter(|&&a| a == age).count();
                            rows.push((format!("age_{age}"), n.to_string()));
                        }
                    }
                    PlotKind::SSweep => {
                        rows.push(("comm_cost".into(), r.comm_cost.to_string()));
                        rows.push(("cumulative_cost".into(), r.cumulative_cost.to_string()));
                        if let Some(a) = r.accuracy {
                            rows.push(("accuracy".into(), a.to_string()));
                        }
                    }
                }
                for (metric, value) in rows {
                    let mut rec = Vec::with_capacity(6);
                    if kind == PlotKind::SSweep {
                        rec.push(s.s.to_string());
                    }
                    rec.extend([
                        s.strategy.name().to_string(),
                        s.run.to_string(),
                        r.round.to_string(),
                        metric,
                        value,
                    ]);
                    w.write_record(&rec)?;
                }
            }
        }
    }
    w.into_inner().map_err(|e| Error::Trace(e.to_string()))
}

/// Writes `plot_<kind>.csv` into `dir` and returns its path.
pub fn emit_plot_data(dir: &Path, kind: PlotKind, outputs: &[&ExperimentOutput]) -> Result<PathBuf> {
    let path = dir.join(kind.file_name());
    write_atomic(&path, &plot_data_csv(kind, outputs)?)?;
    Ok(path)
}

/// Parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    S,
    TauMax,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(SweepParam::S),
            "tau_max" | "tau" => Ok(SweepParam::TauMax),
            other => Err(Error::config(format!("cannot sweep over {other:?}; use S or tau_max"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::S => "s",
            SweepParam::TauMax => "tau_max",
        }
    }

    /// `cfg` with the parameter set to `value` in every strategy.
    pub fn apply(self, cfg: &ExperimentConfig, value: usize) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        for s in &mut out.strategies {
            match self {
                SweepParam::S => s.s = value,
                SweepParam::TauMax => {
                    s.tau_max = u32::try_from(value).map_err(|_| Error::config("tau_max out of range"))?
                }
            }
        }
        out.output_dir = cfg.output_dir.join(format!("{}_{value}", self.name()));
        out.validate()?;
        Ok(out)
    }
}

/// Default sweep values for `S`.
pub const DEFAULT_S_SWEEP: [usize; 4] = [2, 5, 10, 20];

/// One experiment per value, each written to `<output_dir>/<param>_<value>`;
/// for `S` sweeps the combined `plot_s_sweep.csv` goes to `output_dir`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[usize]) -> Result<Vec<(usize, ExperimentOutput)>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let cfgs: Vec<ExperimentConfig> = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(values.len());
    for (c, &v) in cfgs.iter().zip(values) {
        results.push((v, run_experiment(c)?));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    if param == SweepParam::S {
        let outs: Vec<&ExperimentOutput> = results.iter().map(|(_, o)| o).collect();
        emit_plot_data(&cfg.output_dir, PlotKind::SSweep, &outs)?;
    }
    Ok(results)
}

/// Shard sizes and label counts, one CSV row per worker.
pub fn partition_histogram_csv(shards: &[DataShard<f64>], num_classes: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["worker".to_string(), "size".into(), "weight".into()];
    header.extend((0..num_classes).map(|k| format!("label_{k}")));
    w.write_record(&header)?;
    for s in shards {
        let mut rec = vec![s.worker_id.to_string(), s.len().to_string(), s.weight.to_string()];
        rec.extend(s.label_histogram(num_classes).iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Trace(e.to_string()))
}
