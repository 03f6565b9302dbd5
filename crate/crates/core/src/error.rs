//! Error types, one enum per module plus a crate-level wrapper that keeps
//! track of which module failed.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("non-finite value at index {index} during {context}")]
    NonFinite { context: &'static str, index: usize },
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("epoch count must be at least 1")]
    ZeroEpochs,
}

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("no models to aggregate")]
    Empty,
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("duplicate update for node {node_id} round {round}")]
    DuplicateUpdate { node_id: usize, round: u64 },
    #[error("local delta is zero or empty")]
    ZeroLocalDelta,
    #[error("invalid lambda schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file (need {needed} bytes, have {have})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        have: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("node count {nodes} exceeds available samples {samples}")]
    TooManyNodes { nodes: usize, samples: usize },
    #[error("could not place {classes} cluster means {separation} apart")]
    SeparationInfeasible { classes: usize, separation: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("unsatisfiable constraints: {0}")]
    Unsatisfiable(String),
    #[error("gave up after {attempts} generation attempts")]
    AttemptBudgetExhausted { attempts: usize },
    #[error("malformed adjacency: {0}")]
    Malformed(String),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("topology descriptor: {0}")]
    Descriptor(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("node {node_id} has no record at index {index}")]
    MissingNode { node_id: usize, index: u64 },
    #[error("series has no entry for {nodes} nodes")]
    MissingSize { nodes: usize },
    #[error("series needs at least two topology sizes")]
    TooFewSizes,
    #[error("reference series has zero accuracy drop")]
    ZeroDrop,
    #[error("csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum NetModelError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("node {node_id} at index {index}: {source}")]
    Node {
        node_id: usize,
        index: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Crate-level error; the variant names the module the failure came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("gossipsim: {0}")]
    Sim(#[from] SimError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("netmodel: {0}")]
    NetModel(#[from] NetModelError),
    #[error("experiment: {0}")]
    Experiment(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
