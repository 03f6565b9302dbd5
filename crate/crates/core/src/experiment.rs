//! Experiment files: one JSON document describing a dataset, one or more
//! topologies and a list of strategies. Running it writes one aggregated
//! accuracy CSV per (topology size, strategy) plus `summary.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{IntegrationStrategy, LambdaSchedule, StrategyKind};
use crate::dataset::{
    load_idx, shard_equal, shard_with_global, synth_classification, DatasetShard, ShardPlan,
    ShardedDataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::gossipsim::{run_simulation, Forwarding, SimConfig, SimSchedule};
use crate::metrics::{accuracy_drop_ratio, aggregate_across_nodes, format_csv, AggregateRow};
use crate::model::ModelConfig;
use crate::rng;
use crate::topology::{
    generate_semi_random, load_topology, stats, validate, TopologyConstraints, TopologyGraph,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub sigma: f64,
    /// Defaults to a stream derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Separate global validation split. Without it a fraction of the
    /// training file is held out instead.
    #[serde(default)]
    pub val_images: Option<PathBuf>,
    #[serde(default)]
    pub val_labels: Option<PathBuf>,
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySource {
    Generated {
        nodes: usize,
        target_avg_degree: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Descriptor JSON written by `save_topology`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardSection {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_holdout")]
    pub global_holdout: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for ShardSection {
    fn default() -> Self {
        ShardSection {
            train_fraction: default_train_fraction(),
            global_holdout: default_holdout(),
        }
    }
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![
        StrategyKind::StandardAveraging,
        StrategyKind::VarianceCorrected,
        StrategyKind::DeltaSum,
    ]
}

fn default_key() -> String {
    "deltagossip".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub lambda: LambdaSchedule,
    #[serde(default)]
    pub schedule: SimSchedule,
    pub model: ModelSection,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub shards: ShardSection,
    pub topologies: Vec<TopologySource>,
    #[serde(default)]
    pub forwarding: Forwarding,
    #[serde(default = "default_key")]
    pub key: String,
    /// Also write 5th/95th percentile columns.
    #[serde(default)]
    pub percentiles: bool,
    /// Training threads; 0 lets the runtime decide. Never affects results.
    #[serde(default)]
    pub threads: usize,
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Idx(idx) = &mut self.dataset {
            fix(&mut idx.images);
            fix(&mut idx.labels);
            idx.val_images.as_mut().map(fix);
            idx.val_labels.as_mut().map(fix);
        }
        for t in &mut self.topologies {
            if let TopologySource::File { path } = t {
                fix(path);
            }
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Experiment("strategy list is empty".into()));
        }
        if self.topologies.is_empty() {
            return Err(Error::Experiment("topology list is empty".into()));
        }
        self.lambda.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn strategy(&self, kind: StrategyKind) -> IntegrationStrategy {
        match kind {
            StrategyKind::DeltaSum => IntegrationStrategy::delta_sum(self.lambda),
            other => IntegrationStrategy::simple(other),
        }
    }
}

/// Builds the full dataset described by `source`, plus a separate global
/// validation set when one is configured.
pub fn load_dataset(
    source: &DatasetSource,
    seed: u64,
) -> Result<(DatasetShard, Option<DatasetShard>)> {
    match source {
        DatasetSource::Synthetic(s) => {
            let spec = SynthSpec {
                classes: s.classes,
                dim: s.dim,
                per_class: s.per_class,
                sigma: s.sigma,
                seed: s
                    .seed
                    .unwrap_or_else(|| rng::derive_seed(seed, &[rng::TAG_SYNTH])),
            };
            Ok((synth_classification(&spec)?, None))
        }
        DatasetSource::Idx(idx) => {
            let train = load_idx(&idx.images, &idx.labels, idx.downsample)?;
            let val = match (&idx.val_images, &idx.val_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l, idx.downsample)?),
                (None, None) => None,
                _ => {
                    return Err(Error::Experiment(
                        "val_images and val_labels must be given together".into(),
                    ))
                }
            };
            Ok((train, val))
        }
    }
}

/// Generates or loads a topology and checks it against the generator's
/// constraints.
pub fn resolve_topology(source: &TopologySource, seed: u64) -> Result<TopologyGraph> {
    let (graph, constraints) = match source {
        TopologySource::Generated {
            nodes,
            target_avg_degree,
            seed: own,
        } => {
            let c = TopologyConstraints::with_target(*target_avg_degree);
            let s =
                own.unwrap_or_else(|| rng::derive_seed(seed, &[rng::TAG_TOPOLOGY, *nodes as u64]));
            (generate_semi_random(*nodes, &c, s)?, c)
        }
        TopologySource::File { path } => {
            let (g, d) = load_topology(path)?;
            (g, d.constraints)
        }
    };
    let report = validate(&graph, &constraints)?;
    if !report.passes(&constraints) {
        return Err(Error::Experiment(format!(
            "topology with {} nodes violates its constraints: {report:?}",
            graph.node_count()
        )));
    }
    Ok(graph)
}

pub fn csv_name(nodes: usize, kind: StrategyKind) -> String {
    format!("{nodes}nodes_{}.csv", kind.name())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub nodes: usize,
    pub avg_degree: f64,
    pub diameter: usize,
    pub strategy: StrategyKind,
    pub csv: String,
    pub final_index: u64,
    pub final_median: f64,
    pub final_min: f64,
    pub final_max: f64,
    /// Max pairwise L-infinity weight distance at the start of convergence
    /// and after each convergence round.
    pub convergence_spread: Vec<f64>,
    pub mean_delta_alignment: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub runs: Vec<RunSummary>,
    /// Relative reduction of the accuracy drop from the smallest to the
    /// largest topology, against standard averaging. Present when at least
    /// two sizes ran and standard averaging is in the strategy list.
    pub accuracy_drop_ratio: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn run(&self, nodes: usize, kind: StrategyKind) -> Option<&RunSummary> {
        self.runs
            .iter()
            .find(|r| r.nodes == nodes && r.strategy == kind)
    }

    /// `(nodes, final median)` for one strategy, in topology order.
    pub fn final_medians(&self, kind: StrategyKind) -> Vec<(usize, f64)> {
        self.runs
            .iter()
            .filter(|r| r.strategy == kind)
            .map(|r| (r.nodes, r.final_median))
            .collect()
    }
}

fn shard(
    config: &ExperimentConfig,
    data: &DatasetShard,
    global: Option<&DatasetShard>,
    nodes: usize,
) -> Result<ShardedDataset> {
    let plan = ShardPlan {
        node_count: nodes,
        train_fraction: config.shards.train_fraction,
        seed: rng::derive_seed(config.seed, &[rng::TAG_SHARD]),
        global_holdout: config.shards.global_holdout,
    };
    Ok(match global {
        Some(g) => shard_with_global(data, g, &plan)?,
        None => shard_equal(data, &plan)?,
    })
}

/// Runs every (topology, strategy) pair without touching the filesystem
/// beyond reading inputs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let (data, global) = load_dataset(&config.dataset, config.seed)?;
    let graphs = config
        .topologies
        .iter()
        .map(|t| resolve_topology(t, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut sizes: Vec<usize> = graphs.iter().map(TopologyGraph::node_count).collect();
    sizes.sort_unstable();
    if sizes.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Experiment(
            "two topologies share a node count, so their CSV names would collide".into(),
        ));
    }
    let model = ModelConfig {
        input_dim: data.dim(),
        hidden_dim: config.model.hidden_dim,
        class_count: data
            .class_count()
            .max(global.as_ref().map_or(0, |g| g.class_count())),
        learning_rate: config.model.learning_rate,
        seed: config
            .model
            .init_seed
            .unwrap_or_else(|| rng::derive_seed(config.seed, &[rng::TAG_INIT])),
    };

    let mut runs = Vec::new();
    for graph in &graphs {
        let n = graph.node_count();
        let sharded = shard(config, &data, global.as_ref(), n)?;
        let graph_stats = stats(graph)?;
        for &kind in &config.strategies {
            let sim = SimConfig {
                topology: graph.clone(),
                strategy: config.strategy(kind),
                schedule: config.schedule,
                model: model.clone(),
                seed: config.seed,
                forwarding: config.forwarding,
                key: config.key.clone(),
                threads: config.threads,
            };
            let outcome = run_simulation(&sim, &sharded)?;
            let rows = aggregate_across_nodes(&outcome.records)?;
            let last = *rows
                .last()
                .ok_or_else(|| Error::Experiment("simulation produced no metrics".into()))?;
            let mean_delta_alignment = (!outcome.alignment.is_empty()).then(|| {
                outcome.alignment.iter().map(|a| a.cosine).sum::<f64>()
                    / outcome.alignment.len() as f64
            });
            runs.push(RunSummary {
                nodes: n,
                avg_degree: graph_stats.avg_degree,
                diameter: graph_stats.diameter,
                strategy: kind,
                csv: csv_name(n, kind),
                final_index: last.index,
                final_median: last.test_acc_median,
                final_min: last.test_acc_min,
                final_max: last.test_acc_max,
                convergence_spread: outcome.convergence_spread,
                mean_delta_alignment,
                rows,
            });
        }
    }

    let mut report = ExperimentReport {
        seed: config.seed,
        runs,
        accuracy_drop_ratio: BTreeMap::new(),
    };
    if sizes.len() >= 2 && config.strategies.contains(&StrategyKind::StandardAveraging) {
        let reference = report.final_medians(StrategyKind::StandardAveraging);
        for &kind in &config.strategies {
            if kind == StrategyKind::StandardAveraging {
                continue;
            }
            // A flat reference drop leaves the ratio undefined; omit it.
            if let Ok(r) = accuracy_drop_ratio(&reference, &report.final_medians(kind)) {
                report
                    .accuracy_drop_ratio
                    .insert(kind.name().to_string(), r);
            }
        }
    }
    Ok(report)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

/// Writes the per-run CSVs and `summary.json` into `out_dir`. Returns the
/// paths written.
pub fn write_outputs(
    report: &ExperimentReport,
    out_dir: &Path,
    percentiles: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for run in &report.runs {
        let path = out_dir.join(&run.csv);
        write(path.clone(), &format_csv(&run.rows, percentiles))?;
        written.push(path);
    }
    let summary = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(report).map_err(|source| Error::Json {
        path: summary.clone(),
        source,
    })?;
    write(summary.clone(), &(json + "\n"))?;
    written.push(summary);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        serde_json::from_str(
            r#"{
                "seed": 3,
                "strategies": ["standard_averaging", "delta_sum"],
                "schedule": {"train_epochs": 4, "integrate_every": 2,
                             "convergence_until_round": 6, "batch_size": 8},
                "model": {"hidden_dim": 0, "learning_rate": 0.2},
                "dataset": {"synthetic": {"classes": 3, "dim": 4, "per_class": 40, "sigma": 0.05}},
                "topologies": [
                    {"generated": {"nodes": 4, "target_avg_degree": 2.0}},
                    {"generated": {"nodes": 6, "target_avg_degree": 2.0}}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = tiny();
        assert_eq!(c.lambda, LambdaSchedule::MNIST);
        assert_eq!(c.forwarding, Forwarding::FirstHopOnly);
        assert_eq!(c.shards, ShardSection::default());
        let mut d = c.clone();
        d.strategies.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn runs_and_writes() {
        let report = run_experiment(&tiny()).unwrap();
        assert_eq!(report.runs.len(), 4);
        let run = report.run(6, StrategyKind::DeltaSum).unwrap();
        assert_eq!(run.csv, "6nodes_delta_sum.csv");
        assert_eq!(run.final_index, 6);
        assert_eq!(run.rows.len(), 6);
        assert_eq!(run.convergence_spread.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let written = write_outputs(&report, dir.path(), false).unwrap();
        assert_eq!(written.len(), 5);
        let again = run_experiment(&tiny()).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn relative_paths_resolve_against_config() {
        let mut c = tiny();
        c.topologies = vec![TopologySource::File {
            path: "topo/ten.json".into(),
        }];
        c.resolve_paths(Path::new("/configs"));
        assert_eq!(
            c.topologies[0],
            TopologySource::File {
                path: "/configs/topo/ten.json".into()
            }
        );
    }

    #[test]
    fn missing_idx_file_is_an_io_error() {
        let mut c = tiny();
        c.dataset = DatasetSource::Idx(IdxSource {
            images: "/nonexistent/images.idx".into(),
            labels: "/nonexistent/labels.idx".into(),
            val_images: None,
            val_labels: None,
            downsample: 1,
        });
        let err = run_experiment(&c).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/images.idx"), "{err}");
    }
}
