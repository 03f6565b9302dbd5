//! Datasets: a seeded Gaussian-cluster generator, an IDX (MNIST) loader and
//! equal IID sharding across simulated nodes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::model::Batch;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Source,
    Train,
    LocalVal,
    GlobalVal,
}

/// A set of labelled samples stored row-major. `ids` records each sample's
/// index in the source dataset it was carved from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    dim: usize,
    class_count: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<usize>,
    origin: Origin,
}

impl DatasetShard {
    pub fn new(
        dim: usize,
        class_count: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DatasetError> {
        if dim == 0 {
            return Err(DatasetError::Invalid(
                "feature dimension must be positive".into(),
            ));
        }
        if class_count < 2 {
            return Err(DatasetError::Invalid("need at least two classes".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(DatasetError::Invalid(format!(
                "{} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        let ids = (0..labels.len()).collect();
        Ok(DatasetShard {
            dim,
            class_count,
            inputs,
            labels,
            ids,
            origin: Origin::Source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Samples at `indices`, in that order, tagged with `origin`.
    pub fn subset(&self, indices: &[usize], origin: Origin) -> DatasetShard {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        DatasetShard {
            dim: self.dim,
            class_count: self.class_count,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            origin,
        }
    }

    /// Concatenates shards in order. All shards must agree on dimension and
    /// class count.
    pub fn concat(shards: &[DatasetShard]) -> Result<DatasetShard, DatasetError> {
        let first = shards
            .first()
            .ok_or_else(|| DatasetError::Invalid("nothing to concatenate".into()))?;
        let mut out = DatasetShard {
            dim: first.dim,
            class_count: first.class_count,
            inputs: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            origin: first.origin,
        };
        for s in shards {
            if s.dim != out.dim || s.class_count != out.class_count {
                return Err(DatasetError::Invalid(format!(
                    "shard shape ({}, {}) does not match ({}, {})",
                    s.dim, s.class_count, out.dim, out.class_count
                )));
            }
            out.inputs.extend_from_slice(&s.inputs);
            out.labels.extend_from_slice(&s.labels);
            out.ids.extend_from_slice(&s.ids);
        }
        Ok(out)
    }

    /// Borrowed batch over the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Batch<'_> {
        Batch::from_parts(
            indices.iter().map(|&i| self.input(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn as_batch(&self) -> Batch<'_> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Parameters for [`synth_classification`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Isotropic noise standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

const MEAN_RANGE: (f64, f64) = (0.2, 0.8);
const MEAN_PLACEMENT_TRIES: usize = 10_000;

/// Gaussian clusters, one per class, with means at least `4 * sigma` apart.
/// Features are clamped to `[0, 1]`. Samples are interleaved by class.
pub fn synth_classification(spec: &SynthSpec) -> Result<DatasetShard, DatasetError> {
    if spec.classes < 2 || spec.per_class == 0 || spec.dim == 0 {
        return Err(DatasetError::Invalid(format!(
            "need classes >= 2, per_class >= 1, dim >= 1 (got {}, {}, {})",
            spec.classes, spec.per_class, spec.dim
        )));
    }
    if !(spec.sigma.is_finite() && spec.sigma > 0.0) {
        return Err(DatasetError::Invalid("sigma must be positive".into()));
    }
    let mut rng = rng::stream(spec.seed, &[rng::TAG_SYNTH]);
    let min_dist = 4.0 * spec.sigma;

    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut tries = 0;
    while means.len() < spec.classes {
        tries += 1;
        if tries > MEAN_PLACEMENT_TRIES {
            return Err(DatasetError::SeparationInfeasible {
                classes: spec.classes,
                separation: min_dist,
            });
        }
        let candidate: Vec<f64> = (0..spec.dim)
            .map(|_| rng.random_range(MEAN_RANGE.0..MEAN_RANGE.1))
            .collect();
        let far_enough = means.iter().all(|m| {
            m.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= min_dist
        });
        if far_enough {
            means.push(candidate);
        }
    }

    let n = spec.classes * spec.per_class;
    let mut inputs = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (class, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                inputs.push((m + spec.sigma * z).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    DatasetShard::new(spec.dim, spec.classes, inputs, labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl IdxReader<'_> {
    fn need(&self, needed: usize) -> Result<(), DatasetError> {
        if self.bytes.len() < needed {
            Err(DatasetError::Truncated {
                path: self.path.to_path_buf(),
                needed,
                have: self.bytes.len(),
            })
        } else {
            Ok(())
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32, DatasetError> {
        self.need(offset + 4)?;
        let b = &self.bytes[offset..offset + 4];
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&self, expected: u32) -> Result<(), DatasetError> {
        let found = self.u32_at(0)?;
        if found != expected {
            return Err(DatasetError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; with
/// `downsample > 1` each `downsample x downsample` block is mean-pooled.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    downsample: usize,
) -> Result<DatasetShard, DatasetError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let images = IdxReader {
        path: images_path,
        bytes: &image_bytes,
    };
    images.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = images.u32_at(4)? as usize;
    let rows = images.u32_at(8)? as usize;
    let cols = images.u32_at(12)? as usize;
    images.need(16 + count * rows * cols)?;

    let labels = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
    };
    labels.expect_magic(IDX_LABELS_MAGIC)?;
    let label_count = labels.u32_at(4)? as usize;
    labels.need(8 + label_count)?;
    if label_count != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let factor = downsample.max(1);
    if !rows.is_multiple_of(factor) || !cols.is_multiple_of(factor) {
        return Err(DatasetError::Invalid(format!(
            "downsample factor {factor} does not divide {rows}x{cols}"
        )));
    }
    let (out_rows, out_cols) = (rows / factor, cols / factor);
    let dim = out_rows * out_cols;
    let norm = 255.0 * (factor * factor) as f64;

    let pixels = &image_bytes[16..16 + count * rows * cols];
    let mut inputs = Vec::with_capacity(count * dim);
    for image in pixels.chunks_exact(rows * cols) {
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut sum = 0u32;
                for dr in 0..factor {
                    let row = &image[(r * factor + dr) * cols..];
                    for dc in 0..factor {
                        sum += u32::from(row[c * factor + dc]);
                    }
                }
                inputs.push(f64::from(sum) / norm);
            }
        }
    }
    let label_vec: Vec<usize> = label_bytes[8..8 + count]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = label_vec
        .iter()
        .copied()
        .max()
        .map_or(2, |m| (m + 1).max(2));
    DatasetShard::new(dim, classes, inputs, label_vec)
}

/// How to split a dataset across simulated nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub node_count: usize,
    /// Fraction of each node's share used for training; the rest is the
    /// node's local validation set.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
    /// Fraction held out as the shared global validation set when no
    /// separate validation source is supplied.
    #[serde(default = "default_global_holdout")]
    pub global_holdout: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_global_holdout() -> f64 {
    0.1
}

impl ShardPlan {
    pub fn new(node_count: usize, seed: u64) -> Self {
        ShardPlan {
            node_count,
            train_fraction: default_train_fraction(),
            seed,
            global_holdout: default_global_holdout(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeData {
    pub train: DatasetShard,
    pub local_val: DatasetShard,
}

#[derive(Debug, Clone)]
pub struct ShardedDataset {
    pub nodes: Vec<NodeData>,
    pub global_val: DatasetShard,
}

fn check_plan(plan: &ShardPlan) -> Result<(), DatasetError> {
    if plan.node_count == 0 {
        return Err(DatasetError::Invalid(
            "node_count must be at least 1".into(),
        ));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(DatasetError::Invalid(
            "train_fraction must lie in (0, 1)".into(),
        ));
    }
    if !(0.0..1.0).contains(&plan.global_holdout) {
        return Err(DatasetError::Invalid(
            "global_holdout must lie in [0, 1)".into(),
        ));
    }
    Ok(())
}

fn split_nodes(
    dataset: &DatasetShard,
    order: &[usize],
    plan: &ShardPlan,
) -> Result<Vec<NodeData>, DatasetError> {
    let n = order.len();
    if n < plan.node_count {
        return Err(DatasetError::TooManyNodes {
            nodes: plan.node_count,
            samples: n,
        });
    }
    let base = n / plan.node_count;
    let extra = n % plan.node_count;
    let mut start = 0;
    let mut nodes = Vec::with_capacity(plan.node_count);
    for node in 0..plan.node_count {
        let size = base + usize::from(node < extra);
        let share = &order[start..start + size];
        start += size;
        let train_len = if size >= 2 {
            ((size as f64 * plan.train_fraction).round() as usize).clamp(1, size - 1)
        } else {
            size
        };
        nodes.push(NodeData {
            train: dataset.subset(&share[..train_len], Origin::Train),
            local_val: dataset.subset(&share[train_len..], Origin::LocalVal),
        });
    }
    Ok(nodes)
}

fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_SHARD]));
    order
}

/// Holds out `plan.global_holdout` of `dataset` as the global validation set,
/// then splits the remainder into equal per-node shares.
pub fn shard_equal(
    dataset: &DatasetShard,
    plan: &ShardPlan,
) -> Result<ShardedDataset, DatasetError> {
    check_plan(plan)?;
    let order = permutation(dataset.len(), plan.seed);
    let held = (dataset.len() as f64 * plan.global_holdout).round() as usize;
    let (global, rest) = order.split_at(held.min(dataset.len()));
    let nodes = split_nodes(dataset, rest, plan)?;
    Ok(ShardedDataset {
        nodes,
        global_val: dataset.subset(global, Origin::GlobalVal),
    })
}

/// Splits all of `dataset` across nodes; `global_val` comes from a separate
/// source such as the MNIST test split.
pub fn shard_with_global(
    dataset: &DatasetShard,
    global_val: &DatasetShard,
    plan: &ShardPlan,
) -> Result<ShardedDataset, DatasetError> {
    check_plan(plan)?;
    if global_val.dim() != dataset.dim() {
        return Err(DatasetError::Invalid(format!(
            "global validation dimension {} differs from training dimension {}",
            global_val.dim(),
            dataset.dim()
        )));
    }
    let order = permutation(dataset.len(), plan.seed);
    let nodes = split_nodes(dataset, &order, plan)?;
    let all: Vec<usize> = (0..global_val.len()).collect();
    Ok(ShardedDataset {
        nodes,
        global_val: global_val.subset(&all, Origin::GlobalVal),
    })
}

/// Writes an IDX image file. Used by tests and fixtures.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    rows: u32,
    cols: u32,
    pixels: &[u8],
) -> Result<(), DatasetError> {
    let count = pixels.len() / (rows * cols) as usize;
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGES_MAGIC, count as u32, rows, cols] {
        bytes.extend_from_slice(&word.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    write_bytes(path.as_ref(), &bytes)
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_bytes(path.as_ref(), &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: PathBuf::from(path),
        source,
    })
}
