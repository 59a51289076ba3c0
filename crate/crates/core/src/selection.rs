//! Worker selection strategies and the server-side age bookkeeping.
//!
//! Every round the server picks a download set (workers that receive the
//! global model and train) and an upload set (workers whose models get
//! averaged). Ages count consecutive rounds a worker has not uploaded.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Age-threshold forcing plus size-weighted sampling for the rest.
    #[serde(alias = "agesel")]
    AgeSel,
    /// Size-weighted sampling without replacement.
    #[serde(alias = "fedavg")]
    FedAvg,
    /// Everyone trains, the `S` largest updates are uploaded.
    Ocs,
    /// Fixed circular order.
    #[serde(alias = "rr")]
    RoundRobin,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::AgeSel,
        StrategyKind::FedAvg,
        StrategyKind::Ocs,
        StrategyKind::RoundRobin,
    ];

    /// Short lowercase name used in file names and tables.
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::AgeSel => "agesel",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::Ocs => "ocs",
            StrategyKind::RoundRobin => "rr",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agesel" | "age_sel" => Ok(StrategyKind::AgeSel),
            "fedavg" | "fed_avg" => Ok(StrategyKind::FedAvg),
            "ocs" => Ok(StrategyKind::Ocs),
            "rr" | "round_robin" | "roundrobin" => Ok(StrategyKind::RoundRobin),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Workers uploading per round.
    pub s: usize,
    /// Age threshold; only AgeSel reads it.
    pub tau_max: u32,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, s: usize, tau_max: u32) -> Self {
        Self { kind, s, tau_max }
    }

    pub fn validate(&self, num_workers: usize) -> Result<()> {
        if self.s == 0 || self.s > num_workers {
            return Err(Error::Selection {
                requested: self.s,
                available: num_workers,
            });
        }
        if self.tau_max == 0 {
            return Err(Error::config("tau_max must be at least 1"));
        }
        Ok(())
    }
}

/// Per-worker ages plus the forcing threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeVector {
    ages: Vec<u32>,
    tau_max: u32,
}

impl AgeVector {
    /// All ages start at zero.
    pub fn new(num_workers: usize, tau_max: u32) -> Self {
        Self {
            ages: vec![0; num_workers],
            tau_max,
        }
    }

    pub fn from_ages(ages: Vec<u32>, tau_max: u32) -> Self {
        Self { ages, tau_max }
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn tau_max(&self) -> u32 {
        self.tau_max
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    pub fn max_age(&self) -> u32 {
        self.ages.iter().copied().max().unwrap_or(0)
    }

    /// Workers with `age >= tau_max`, ascending id.
    pub fn infrequent(&self) -> Vec<usize> {
        (0..self.ages.len()).filter(|&m| self.ages[m] >= self.tau_max).collect()
    }
}

/// What happened in one round's selection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SelectionOutcome {
    /// Sorted ascending.
    pub download_set: Vec<usize>,
    /// Sorted ascending; a subset of `download_set`.
    pub upload_set: Vec<usize>,
    /// Workers at or past the age threshold before selection (`S^j`).
    pub num_infrequent: usize,
    /// Workers picked because of their age (`A^j = min(S, S^j)`).
    pub num_age_selected: usize,
}

/// Draws `k` distinct workers from `candidates`, one at a time, each draw
/// proportional to `weights[m]` among the workers not yet drawn.
///
/// Returns workers in draw order. If every remaining weight is zero the
/// draw falls back to uniform.
pub fn weighted_sample_without_replacement(
    candidates: &[usize],
    weights: &[f64],
    k: usize,
    rng: &mut RandomStream,
) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(Error::Selection {
            requested: k,
            available: candidates.len(),
        });
    }
    let mut pool: Vec<usize> = candidates.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|&m| weights[m]).sum();
        let pos = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &m) in pool.iter().enumerate() {
                acc += weights[m];
                if target < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave target == acc at the end; take the last
            // positive-weight worker.
            chosen.unwrap_or_else(|| {
                pool.iter()
                    .rposition(|&m| weights[m] > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            rng.index(pool.len())
        };
        picked.push(pool.remove(pos));
    }
    Ok(picked)
}

fn check_weights(weights: &[f64], s: usize) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::config("weight vector is empty"));
    }
    if s == 0 || s > weights.len() {
        return Err(Error::Selection {
            requested: s,
            available: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("weights must be finite and non-negative"));
    }
    Ok(())
}

/// Workers receiving the global model in round `round`, sorted ascending.
///
/// `weights[m]` is worker `m`'s data share `p_m`; AgeSel also uses it to
/// break age ties (larger share first, then lower id).
pub fn select_download(
    strategy: &StrategyConfig,
    ages: &AgeVector,
    weights: &[f64],
    round: usize,
    rng: &mut RandomStream,
) -> Result<Vec<usize>> {
    check_weights(weights, strategy.s)?;
    let m = weights.len();
    if ages.len() != m {
        return Err(Error::DimensionMismatch {
            what: "age vector",
            expected: m,
            actual: ages.len(),
        });
    }
    let s = strategy.s;
    let all: Vec<usize> = (0..m).collect();
    let mut chosen = match strategy.kind {
        StrategyKind::AgeSel => {
            let mut infrequent = ages.infrequent();
            if infrequent.len() >= s {
                infrequent.sort_by(|&a, &b| {
                    ages.ages[b]
                        .cmp(&ages.ages[a])
                        .then(weights[b].total_cmp(&weights[a]))
                        .then(a.cmp(&b))
                });
                infrequent.truncate(s);
                infrequent
            } else {
                let fresh: Vec<usize> = all.iter().copied().filter(|&w| ages.ages[w] < ages.tau_max).collect();
                let rest = weighted_sample_without_replacement(&fresh, weights, s - infrequent.len(), rng)?;
                infrequent.extend(rest);
                infrequent
            }
        }
        StrategyKind::FedAvg => weighted_sample_without_replacement(&all, weights, s, rng)?,
        StrategyKind::Ocs => all,
        StrategyKind::RoundRobin => (0..s).map(|i| (round * s + i) % m).collect(),
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Workers whose models are aggregated, sorted ascending.
///
/// OCS keeps the `S` largest update norms (ties to the lower id); every
/// other strategy uploads its whole download set.
pub fn select_upload(
    strategy: &StrategyConfig,
    download_set: &[usize],
    update_norms: &BTreeMap<usize, f64>,
) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(download_set.len());
    for &w in download_set {
        let norm = *update_norms.get(&w).ok_or(Error::MissingNorm(w))?;
        scored.push((w, norm));
    }
    if strategy.kind != StrategyKind::Ocs {
        let mut up = download_set.to_vec();
        up.sort_unstable();
        return Ok(up);
    }
    if strategy.s > scored.len() {
        return Err(Error::Selection {
            requested: strategy.s,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut up: Vec<usize> = scored.into_iter().take(strategy.s).map(|(w, _)| w).collect();
    up.sort_unstable();
    Ok(up)
}

/// Uploaders reset to age 0, everyone else ages by one round.
pub fn update_ages(ages: &AgeVector, upload_set: &[usize]) -> Result<AgeVector> {
    let mut next: Vec<u32> = ages.ages.iter().map(|a| a + 1).collect();
    for &w in upload_set {
        let slot = next.get_mut(w).ok_or(Error::Selection {
            requested: w + 1,
            available: ages.len(),
        })?;
        *slot = 0;
    }
    Ok(AgeVector {
        ages: next,
        tau_max: ages.tau_max,
    })
}

/// `(S^j, A^j)`: infrequent-worker count and how many of them fit in `s` slots.
pub fn count_age_selected(ages: &AgeVector, s: usize) -> (usize, usize) {
    let infrequent = ages.ages.iter().filter(|&&a| a >= ages.tau_max).count();
    (infrequent, infrequent.min(s))
}

/// Drives one strategy across rounds: owns the age vector and produces a
/// [`SelectionOutcome`] per round.
#[derive(Debug, Clone)]
pub struct Selector {
    config: StrategyConfig,
    ages: AgeVector,
}

impl Selector {
    pub fn new(config: StrategyConfig, num_workers: usize) -> Result<Self> {
        config.validate(num_workers)?;
        Ok(Self {
            config,
            ages: AgeVector::new(num_workers, config.tau_max),
        })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn ages(&self) -> &AgeVector {
        &self.ages
    }

    /// Download set for `round`, with `S^j` and `A^j` filled in for AgeSel.
    pub fn download(&self, weights: &[f64], round: usize, rng: &mut RandomStream) -> Result<SelectionOutcome> {
        let download_set = select_download(&self.config, &self.ages, weights, round, rng)?;
        let (num_infrequent, num_age_selected) = match self.config.kind {
            StrategyKind::AgeSel => count_age_selected(&self.ages, self.config.s),
            _ => (0, 0),
        };
        Ok(SelectionOutcome {
            download_set,
            upload_set: Vec::new(),
            num_infrequent,
            num_age_selected,
        })
    }

    /// Fills in the upload set and advances the ages.
    pub fn upload(&mut self, outcome: &mut SelectionOutcome, update_norms: &BTreeMap<usize, f64>) -> Result<()> {
        outcome.upload_set = select_upload(&self.config, &outcome.download_set, update_norms)?;
        self.ages = update_ages(&self.ages, &outcome.upload_set)?;
        Ok(())
    }
}

/// One round of a selection-only simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedRound {
    pub outcome: SelectionOutcome,
    /// Ages after the round's update.
    pub ages: Vec<u32>,
}

/// Runs the selection process alone for `rounds` rounds, drawing round `j`
/// from the same `(seed, Selection, j)` substream the training engine uses.
///
/// No models are trained, so OCS sees equal update norms and uploads the
/// lowest ids.
pub fn simulate_selection(
    config: &StrategyConfig,
    weights: &[f64],
    rounds: usize,
    seed: u64,
) -> Result<Vec<SimulatedRound>> {
    let mut selector = Selector::new(*config, weights.len())?;
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut rng = RandomStream::derive(seed, crate::rng::Purpose::Selection, &[round as u64]);
        let mut outcome = selector.download(weights, round, &mut rng)?;
        let norms = outcome.download_set.iter().map(|&w| (w, 0.0)).collect();
        selector.upload(&mut outcome, &norms)?;
        out.push(SimulatedRound {
            outcome,
            ages: selector.ages().ages().to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes_to_weights(sizes: &[usize]) -> Vec<f64> {
        let n: usize = sizes.iter().sum();
        sizes.iter().map(|&s| s as f64 / n as f64).collect()
    }

    #[test]
    fn agesel_tie_breaks_by_size() {
        let cfg = StrategyConfig::new(StrategyKind::AgeSel, 1, 4);
        let ages = AgeVector::from_ages(vec![5, 5, 3, 0], 4);
        let w = sizes_to_weights(&[10, 20, 5, 5]);
        let got = select_download(&cfg, &ages, &w, 7, &mut RandomStream::new(0)).unwrap();
        assert_eq!(got, vec![1]);
    }

    #[test]
    fn agesel_orders_by_age_then_size_then_id() {
        let cfg = StrategyConfig::new(StrategyKind::AgeSel, 3, 2);
        let ages = AgeVector::from_ages(vec![4, 6, 4, 4, 1], 2);
        let w = sizes_to_weights(&[10, 10, 10, 30, 40]);
        // 1 (age 6), 3 (age 4, biggest), then 0 over 2 by id
        let got = select_download(&cfg, &ages, &w, 0, &mut RandomStream::new(0)).unwrap();
        assert_eq!(got, vec![0, 1, 3]);
    }

    #[test]
    fn agesel_fills_with_fresh_workers() {
        let cfg = StrategyConfig::new(StrategyKind::AgeSel, 3, 4);
        let ages = AgeVector::from_ages(vec![4, 0, 1, 2, 0], 4);
        let w = sizes_to_weights(&[1, 1, 1, 1, 1]);
        for seed in 0..20 {
            let got = select_download(&cfg, &ages, &w, 3, &mut RandomStream::new(seed)).unwrap();
            assert_eq!(got.len(), 3);
            assert!(got.contains(&0));
        }
    }

    #[test]
    fn agesel_without_infrequent_matches_fedavg() {
        let age = StrategyConfig::new(StrategyKind::AgeSel, 3, 100);
        let fed = StrategyConfig::new(StrategyKind::FedAvg, 3, 100);
        let ages = AgeVector::from_ages(vec![3, 0, 7, 2, 1, 9], 100);
        let w = sizes_to_weights(&[5, 9, 2, 30, 4, 11]);
        for seed in 0..50 {
            let a = select_download(&age, &ages, &w, 0, &mut RandomStream::new(seed)).unwrap();
            let f = select_download(&fed, &ages, &w, 0, &mut RandomStream::new(seed)).unwrap();
            assert_eq!(a, f);
        }
    }

    #[test]
    fn round_robin_and_ocs_download() {
        let rr = StrategyConfig::new(StrategyKind::RoundRobin, 5, 1);
        let ages = AgeVector::new(20, 1);
        let w = vec![0.05; 20];
        let mut rng = RandomStream::new(0);
        assert_eq!(
            select_download(&rr, &ages, &w, 1, &mut rng).unwrap(),
            vec![5, 6, 7, 8, 9]
        );
        assert_eq!(
            select_download(&rr, &ages, &w, 3, &mut rng).unwrap(),
            vec![15, 16, 17, 18, 19]
        );
        let rr3 = StrategyConfig::new(StrategyKind::RoundRobin, 3, 1);
        let ages7 = AgeVector::new(7, 1);
        // wraps around: 6, 7, 8 mod 7
        assert_eq!(
            select_download(&rr3, &ages7, &[1.0; 7], 2, &mut rng).unwrap(),
            vec![0, 1, 6]
        );
        let ocs = StrategyConfig::new(StrategyKind::Ocs, 5, 1);
        assert_eq!(
            select_download(&ocs, &ages, &w, 0, &mut rng).unwrap(),
            (0..20).collect::<Vec<_>>()
        );
    }

    #[test]
    fn download_errors() {
        let cfg = StrategyConfig::new(StrategyKind::FedAvg, 5, 1);
        let ages = AgeVector::new(3, 1);
        let mut rng = RandomStream::new(0);
        assert!(matches!(
            select_download(&cfg, &ages, &[0.2, 0.3, 0.5], 0, &mut rng),
            Err(Error::Selection {
                requested: 5,
                available: 3
            })
        ));
        assert!(select_download(&cfg, &AgeVector::new(0, 1), &[], 0, &mut rng).is_err());
    }

    #[test]
    fn ocs_upload_top_norms() {
        let cfg = StrategyConfig::new(StrategyKind::Ocs, 2, 1);
        let norms = BTreeMap::from([(0, 1.0), (1, 3.0), (2, 2.0)]);
        assert_eq!(select_upload(&cfg, &[0, 1, 2], &norms).unwrap(), vec![1, 2]);
        let norms = BTreeMap::from([(4, 1.0), (7, 1.0), (9, 1.0)]);
        assert_eq!(select_upload(&cfg, &[4, 7, 9], &norms).unwrap(), vec![4, 7]);
    }

    #[test]
    fn other_strategies_upload_download_set() {
        let cfg = StrategyConfig::new(StrategyKind::AgeSel, 2, 4);
        let norms = BTreeMap::from([(3, 0.1), (8, 5.0)]);
        assert_eq!(select_upload(&cfg, &[3, 8], &norms).unwrap(), vec![3, 8]);
        let missing = BTreeMap::from([(3, 0.1)]);
        assert!(matches!(
            select_upload(&cfg, &[3, 8], &missing),
            Err(Error::MissingNorm(8))
        ));
    }

    #[test]
    fn age_update_rule() {
        let ages = AgeVector::from_ages(vec![3, 0, 2], 4);
        assert_eq!(update_ages(&ages, &[0]).unwrap().ages(), &[0, 1, 3]);
        assert_eq!(update_ages(&ages, &[0, 1, 2]).unwrap().ages(), &[0, 0, 0]);
        assert_eq!(update_ages(&ages, &[]).unwrap().ages(), &[4, 1, 3]);
        assert!(update_ages(&ages, &[3]).is_err());
    }

    #[test]
    fn age_selected_counts() {
        assert_eq!(
            count_age_selected(&AgeVector::from_ages(vec![5, 5, 3, 0], 4), 1),
            (2, 1)
        );
        assert_eq!(count_age_selected(&AgeVector::new(6, 1), 2), (0, 0));
        assert_eq!(count_age_selected(&AgeVector::from_ages(vec![7; 20], 4), 5), (20, 5));
    }

    #[test]
    fn weighted_first_draw_frequencies() {
        // Single-draw frequency of worker m is p_m; 3 standard errors.
        let w = [0.1, 0.2, 0.3, 0.4];
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = RandomStream::new(99);
        for _ in 0..n {
            let pick = weighted_sample_without_replacement(&[0, 1, 2, 3], &w, 1, &mut rng).unwrap();
            counts[pick[0]] += 1;
        }
        for (m, &c) in counts.iter().enumerate() {
            let se = (n as f64 * w[m] * (1.0 - w[m])).sqrt();
            assert!((c as f64 - n as f64 * w[m]).abs() < 3.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn weighted_draws_are_distinct() {
        let mut rng = RandomStream::new(4);
        let w = [0.7, 0.1, 0.1, 0.05, 0.05];
        for _ in 0..200 {
            let mut got = weighted_sample_without_replacement(&[0, 1, 2, 3, 4], &w, 4, &mut rng).unwrap();
            got.sort_unstable();
            got.dedup();
            assert_eq!(got.len(), 4);
        }
        assert!(weighted_sample_without_replacement(&[0, 1], &w, 3, &mut rng).is_err());
        let zero = [0.0; 3];
        assert_eq!(
            weighted_sample_without_replacement(&[0, 1, 2], &zero, 3, &mut rng)
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("nope".parse::<StrategyKind>().is_err());
    }
}
