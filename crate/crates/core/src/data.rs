//! Datasets, label-sorted partitioning and minibatch sampling.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng::{Purpose, RandomStream};
use crate::scalar::Scalar;

/// The full training (or evaluation) set.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDataset<T> {
    samples: Vec<Sample<T>>,
    num_classes: usize,
    feature_dim: usize,
}

impl<T: Scalar> GlobalDataset<T> {
    pub fn new(samples: Vec<Sample<T>>, num_classes: usize) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::config("dataset must contain at least one sample"));
        };
        let feature_dim = first.features.len();
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "dataset features",
                    expected: feature_dim,
                    actual: s.features.len(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::InvalidLabel {
                    label: s.label,
                    classes: num_classes,
                });
            }
        }
        Ok(Self {
            samples,
            num_classes,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

/// One worker's local data and its weight `p_m = N_m / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataShard<T> {
    pub worker_id: usize,
    pub samples: Vec<Sample<T>>,
    pub weight: f64,
}

impl<T> DataShard<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples per class label.
    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in &self.samples {
            if s.label < num_classes {
                counts[s.label] += 1;
            }
        }
        counts
    }
}

/// Shard sizes, one per worker, in worker order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    sizes: Vec<usize>,
}

impl PartitionPlan {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::config("partition plan needs at least one worker"));
        }
        if let Some(w) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyShard(w));
        }
        Ok(Self { sizes })
    }

    /// As equal as possible; the first `n % m` workers get one extra sample.
    pub fn equal(n: usize, m: usize) -> Result<Self> {
        if m == 0 || n < m {
            return Err(Error::config(format!("cannot split {n} samples over {m} workers")));
        }
        Self::new((0..m).map(|i| n / m + usize::from(i < n % m)).collect())
    }

    /// Sizes proportional to a Dirichlet(`alpha`) draw, each at least
    /// `min_size`, summing to `n`.
    ///
    /// Every worker first receives `min_size`; the remaining
    /// `n - m * min_size` samples are split by largest remainder over the
    /// Dirichlet proportions (remainder ties go to the lower worker id).
    pub fn dirichlet(n: usize, m: usize, alpha: f64, min_size: usize, rng: &mut RandomStream) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("partition plan needs at least one worker"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("Dirichlet alpha must be positive, got {alpha}")));
        }
        let floor = min_size.max(1);
        if n < m * floor {
            return Err(Error::config(format!(
                "{n} samples cannot give {m} workers at least {floor} each"
            )));
        }
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
        let mut draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            draws.iter_mut().for_each(|d| *d /= total);
        } else {
            draws.iter_mut().for_each(|d| *d = 1.0 / m as f64);
        }

        let spare = n - m * floor;
        let quotas: Vec<f64> = draws.iter().map(|w| w * spare as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| floor + q.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &w in order.iter().cycle().take(n - assigned) {
            sizes[w] += 1;
        }
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_workers(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Draws `K` class means uniformly from `[-1, 1]^f`.
pub fn class_means(num_classes: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RandomStream::derive(seed, Purpose::DataMeans, &[]);
    (0..num_classes)
        .map(|_| (0..feature_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .collect()
}

fn gaussian_blobs<T: Scalar>(
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    rng: &mut RandomStream,
) -> Result<GlobalDataset<T>> {
    let mut samples = Vec::with_capacity(means.len() * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(mu + spread * z)
                })
                .collect();
            samples.push(Sample::new(features, label));
        }
    }
    GlobalDataset::new(samples, means.len())
}

fn check_synthetic_args(num_classes: usize, feature_dim: usize, per_class: usize, spread: f64) -> Result<()> {
    if num_classes == 0 || feature_dim == 0 || per_class == 0 {
        return Err(Error::config(
            "synthetic data needs positive class count, dimension and size",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("spread must be non-negative, got {spread}")));
    }
    Ok(())
}

/// One Gaussian blob per class, `per_class` samples each, sorted by label.
pub fn generate_synthetic<T: Scalar>(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<GlobalDataset<T>> {
    check_synthetic_args(num_classes, feature_dim, per_class, spread)?;
    let means = class_means(num_classes, feature_dim, seed);
    let mut rng = RandomStream::derive(seed, Purpose::TrainNoise, &[]);
    gaussian_blobs(&means, per_class, spread, &mut rng)
}

/// Training set as in [`generate_synthetic`] plus a disjoint evaluation set
/// drawn around the same class means with fresh noise. The evaluation set
/// has `round(per_class * eval_fraction)` samples per class (at least one).
pub fn generate_synthetic_split<T: Scalar>(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    spread: f64,
    eval_fraction: f64,
    seed: u64,
) -> Result<(GlobalDataset<T>, GlobalDataset<T>)> {
    if !(eval_fraction > 0.0 && eval_fraction.is_finite()) {
        return Err(Error::config(format!(
            "eval_fraction must be positive, got {eval_fraction}"
        )));
    }
    let train = generate_synthetic(num_classes, feature_dim, per_class, spread, seed)?;
    let means = class_means(num_classes, feature_dim, seed);
    let eval_per_class = ((per_class as f64 * eval_fraction).round() as usize).max(1);
    let mut rng = RandomStream::derive(seed, Purpose::EvalNoise, &[]);
    let eval = gaussian_blobs(&means, eval_per_class, spread, &mut rng)?;
    Ok((train, eval))
}

/// Sorts samples by label (stable, so ties keep dataset order) and hands out
/// contiguous runs of `plan.sizes()[m]` samples to worker `m`.
pub fn partition_label_sorted<T: Scalar>(
    dataset: &GlobalDataset<T>,
    plan: &PartitionPlan,
) -> Result<Vec<DataShard<T>>> {
    let n = dataset.len();
    if plan.total() != n {
        return Err(Error::PartitionMismatch {
            expected: n,
            actual: plan.total(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| dataset.samples[i].label);

    let mut cursor = 0;
    let shards = plan
        .sizes()
        .iter()
        .enumerate()
        .map(|(worker_id, &size)| {
            let samples = order[cursor..cursor + size]
                .iter()
                .map(|&i| dataset.samples[i].clone())
                .collect();
            cursor += size;
            DataShard {
                worker_id,
                samples,
                weight: size as f64 / n as f64,
            }
        })
        .collect();
    Ok(shards)
}

/// `batch_size` independent uniform draws with replacement from the shard.
pub fn sample_minibatch<'a, T>(
    shard: &'a DataShard<T>,
    batch_size: usize,
    rng: &mut RandomStream,
) -> Result<Vec<&'a Sample<T>>> {
    if shard.samples.is_empty() {
        return Err(Error::EmptyShard(shard.worker_id));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok((0..batch_size)
        .map(|_| &shard.samples[rng.index(shard.samples.len())])
        .collect())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses an IDX3 unsigned-byte image file into rows of pixels scaled to `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Vec<Vec<T>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * pixels {
        return Err(Error::Idx(format!(
            "truncated image payload: {} bytes for {count} images of {pixels} pixels",
            payload.len()
        )));
    }
    let scale = T::of(255.0);
    Ok(payload[..count * pixels]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| T::of(f64::from(p)) / scale).collect())
        .collect())
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!(
            "label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Idx(format!(
            "truncated label payload: {} bytes for {count} labels",
            payload.len()
        )));
    }
    Ok(payload[..count].iter().map(|&l| usize::from(l)).collect())
}

/// Loads an IDX image/label pair, raw or gzip-compressed.
///
/// The class count is `num_classes` when given, otherwise one more than the
/// largest label seen.
pub fn load_idx<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
) -> Result<GlobalDataset<T>> {
    let images = parse_idx_images::<T>(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(features, label)| Sample::new(features, label))
        .collect();
    GlobalDataset::new(samples, classes)
}
