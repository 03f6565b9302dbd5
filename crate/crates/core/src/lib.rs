//! Deterministic gossip learning simulator.
//!
//! Nodes train small neural networks on private shards, exchange model
//! updates with their neighbours over a static topology and merge what they
//! receive with one of several integration rules. The crate also contains
//! the topology generator, dataset sharding, metric aggregation and an
//! analytical traffic model used to compare gossip with centralised
//! federated averaging.

pub mod aggregation;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gossipsim;
pub mod metrics;
pub mod model;
pub mod netmodel;
pub mod params;
pub mod rng;
pub mod topology;

pub use aggregation::{IntegrationStrategy, LambdaSchedule, ModelUpdate, StrategyKind};
pub use dataset::{DatasetShard, NodeData, ShardPlan, ShardedDataset};
pub use error::{Error, Result};
pub use gossipsim::{run_simulation, Forwarding, SimConfig, SimOutcome, SimSchedule};
pub use metrics::{AggregateRow, MetricsRecord};
pub use model::{Mlp, ModelConfig, TrainableModel};
pub use params::{Layout, ParameterVector};
pub use topology::{TopologyConstraints, TopologyGraph};
