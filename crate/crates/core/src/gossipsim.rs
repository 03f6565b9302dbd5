//! Synchronous-round gossip learning simulator.
//!
//! Each training epoch every node trains once on its own shard. Every
//! `integrate_every` epochs all nodes package a [`ModelUpdate`], gossip it
//! over the topology and then integrate their inboxes, in ascending node
//! order. After training, convergence rounds average full models with direct
//! neighbours until `convergence_until_round`.
//!
//! Node training inside an epoch may run on several threads; everything else
//! happens at the round barrier on one thread, so results do not depend on
//! the thread count.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    average_full_models, delta_alignment, delta_sum_integrate, fedavg_integrate,
    sample_weighted_integrate, variance_corrected_average, IntegrationStrategy, ModelUpdate,
    StrategyKind,
};
use crate::dataset::{NodeData, ShardedDataset};
use crate::error::{Error, ModelError, SimError};
use crate::metrics::{MetricsRecord, Phase};
use crate::model::{
    evaluate, init_weights, train_epochs, EpochPlan, Mlp, ModelConfig, TrainableModel,
};
use crate::params::ParameterVector;
use crate::rng;
use crate::topology::TopologyGraph;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forwarding {
    /// Deliver only to the sender's direct neighbours.
    #[default]
    FirstHopOnly,
    /// Flood up to `max_hops` hops; nodes drop copies they have already seen.
    MultiHop { max_hops: u32 },
}

impl Forwarding {
    fn max_hops(self) -> u32 {
        match self {
            Forwarding::FirstHopOnly => 1,
            Forwarding::MultiHop { max_hops } => max_hops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSchedule {
    pub train_epochs: u64,
    pub integrate_every: u64,
    pub convergence_until_round: u64,
    pub batch_size: usize,
}

impl Default for SimSchedule {
    fn default() -> Self {
        SimSchedule {
            train_epochs: 200,
            integrate_every: 20,
            convergence_until_round: 235,
            batch_size: 32,
        }
    }
}

impl SimSchedule {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.train_epochs == 0 || self.integrate_every == 0 || self.batch_size == 0 {
            return bad("train_epochs, integrate_every and batch_size must be positive".into());
        }
        if !self.train_epochs.is_multiple_of(self.integrate_every) {
            return bad(format!(
                "integrate_every {} does not divide train_epochs {}",
                self.integrate_every, self.train_epochs
            ));
        }
        if self.convergence_until_round < self.train_epochs {
            return bad(format!(
                "convergence_until_round {} precedes the end of training at {}",
                self.convergence_until_round, self.train_epochs
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GossipMessage {
    pub key: String,
    pub update: ModelUpdate,
    pub hop_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub node: usize,
    pub hops: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisseminationReport {
    /// Receivers in ascending node order; never includes the sender.
    pub deliveries: Vec<Delivery>,
    /// Point-to-point sends, including ones dropped as duplicates.
    pub transmissions: usize,
    pub duplicates_dropped: usize,
}

impl DisseminationReport {
    pub fn receivers(&self) -> Vec<usize> {
        self.deliveries.iter().map(|d| d.node).collect()
    }
}

/// Floods one message from `sender`. Every node forwards a message to all its
/// neighbours the first time it sees it, while the hop budget lasts.
pub fn disseminate(
    graph: &TopologyGraph,
    sender: usize,
    forwarding: Forwarding,
) -> Result<DisseminationReport, SimError> {
    if sender >= graph.node_count() {
        return Err(SimError::UnknownNode(sender));
    }
    let max_hops = forwarding.max_hops();
    let mut seen = vec![false; graph.node_count()];
    seen[sender] = true;
    let mut deliveries = Vec::new();
    let mut transmissions = 0;
    let mut duplicates_dropped = 0;
    let mut queue = VecDeque::from([(sender, 0u32)]);
    while let Some((node, hops)) = queue.pop_front() {
        if hops >= max_hops {
            continue;
        }
        for &next in graph.neighbors(node) {
            transmissions += 1;
            if seen[next] {
                duplicates_dropped += 1;
                continue;
            }
            seen[next] = true;
            deliveries.push(Delivery {
                node: next,
                hops: hops + 1,
            });
            queue.push_back((next, hops + 1));
        }
    }
    deliveries.sort_by_key(|d| d.node);
    Ok(DisseminationReport {
        deliveries,
        transmissions,
        duplicates_dropped,
    })
}

/// One simulated node.
#[derive(Debug, Clone)]
pub struct NodeState<'d> {
    pub node_id: usize,
    pub model: Mlp,
    pub data: &'d NodeData,
    /// Completed training epochs.
    pub epoch_counter: u64,
    /// Weights at the last integration; the base of the next update.
    pub base_snapshot: ParameterVector,
    pub inbox: BTreeMap<(usize, u64), ModelUpdate>,
    pub seen: BTreeSet<(usize, u64)>,
    /// This node's own update for the current integration, once packaged.
    pub outbox: Option<ModelUpdate>,
    epochs_since_base: u64,
    train_seed: u64,
    batch_size: usize,
}

impl<'d> NodeState<'d> {
    pub fn new(
        node_id: usize,
        model: Mlp,
        data: &'d NodeData,
        train_seed: u64,
        batch_size: usize,
    ) -> Self {
        let base_snapshot = model.weights().clone();
        NodeState {
            node_id,
            model,
            data,
            epoch_counter: 0,
            base_snapshot,
            inbox: BTreeMap::new(),
            seen: BTreeSet::new(),
            outbox: None,
            epochs_since_base: 0,
            train_seed,
            batch_size,
        }
    }

    pub fn train_epoch(&mut self) -> Result<(), ModelError> {
        let plan = EpochPlan {
            epochs: 1,
            batch_size: self.batch_size,
            seed: self.train_seed,
            start_epoch: self.epoch_counter,
        };
        train_epochs(&mut self.model, &self.data.train, &plan)?;
        self.epoch_counter += 1;
        self.epochs_since_base += 1;
        Ok(())
    }

    /// Packages `current - base_snapshot` as this node's update for `round`.
    /// Afterwards the model holds exactly `base + delta`.
    pub fn package_update(&mut self, round: u64) -> Result<ModelUpdate, Error> {
        let delta = self.model.weights().sub(&self.base_snapshot)?;
        self.model.set_weights(self.base_snapshot.add(&delta)?)?;
        let update = ModelUpdate::new(
            self.node_id,
            round,
            self.base_snapshot.clone(),
            delta,
            self.data.train.len() as u64 * self.epochs_since_base,
            self.epochs_since_base,
        )?;
        self.outbox = Some(update.clone());
        Ok(update)
    }

    /// Queues a remote update. Returns `false` for copies already seen and for
    /// the node's own messages.
    pub fn receive(&mut self, message: GossipMessage) -> bool {
        let key = (message.update.node_id, message.update.round);
        if key.0 == self.node_id || !self.seen.insert(key) {
            return false;
        }
        self.inbox.insert(key, message.update);
        true
    }

    fn local_update(&self) -> Result<ModelUpdate, Error> {
        match &self.outbox {
            Some(u) => Ok(u.clone()),
            None => {
                let zero = ParameterVector::zeros(self.base_snapshot.layout().clone());
                Ok(ModelUpdate::new(
                    self.node_id,
                    0,
                    self.base_snapshot.clone(),
                    zero,
                    0,
                    0,
                )?)
            }
        }
    }

    fn rebase(&mut self, weights: ParameterVector) -> Result<(), ModelError> {
        self.model.set_weights(weights.clone())?;
        self.base_snapshot = weights;
        self.inbox.clear();
        self.outbox = None;
        self.epochs_since_base = 0;
        Ok(())
    }
}

/// Trains `epochs` epochs and packages the resulting update.
pub fn node_train_phase(
    state: &mut NodeState<'_>,
    epochs: u64,
    round: u64,
) -> Result<ModelUpdate, Error> {
    if epochs == 0 {
        return Err(ModelError::ZeroEpochs.into());
    }
    for _ in 0..epochs {
        state.train_epoch()?;
    }
    state.package_update(round)
}

/// Merges the node's own update with its inbox using `strategy`, with `t`
/// the node's completed-epoch count. The result becomes both the model and
/// the new base snapshot; the inbox is cleared.
pub fn integration_step(
    state: &mut NodeState<'_>,
    strategy: &IntegrationStrategy,
    t: u64,
) -> Result<ParameterVector, Error> {
    let local = state.local_update()?;
    let remote: Vec<ModelUpdate> = state.inbox.values().cloned().collect();
    let merged = match strategy.kind {
        StrategyKind::StandardAveraging | StrategyKind::VarianceCorrected => {
            let mut all: Vec<&ModelUpdate> = std::iter::once(&local).chain(&remote).collect();
            all.sort_by_key(|u| u.node_id);
            let fulls = all
                .iter()
                .map(|u| u.full_model())
                .collect::<Result<Vec<_>, _>>()?;
            if strategy.kind == StrategyKind::StandardAveraging {
                average_full_models(&fulls)?
            } else {
                variance_corrected_average(&fulls)?
            }
        }
        StrategyKind::Fedavg | StrategyKind::SampleWeighted => {
            let all: Vec<ModelUpdate> = std::iter::once(local.clone()).chain(remote).collect();
            if strategy.kind == StrategyKind::Fedavg {
                fedavg_integrate(&local.base, &all)?
            } else {
                sample_weighted_integrate(&local.base, &all)?
            }
        }
        StrategyKind::DeltaSum => {
            let schedule = strategy
                .schedule
                .ok_or_else(|| SimError::Config("delta_sum requires a lambda schedule".into()))?;
            delta_sum_integrate(&local, &remote, &schedule, t)?
        }
    };
    state.rebase(merged.clone())?;
    Ok(merged)
}

/// Every node replaces its model with the plain average of its own and its
/// neighbours' models, all taken from the state before the round.
pub fn convergence_round(states: &mut [NodeState<'_>], graph: &TopologyGraph) -> Result<(), Error> {
    let snapshot: Vec<ParameterVector> = states.iter().map(|s| s.model.weights().clone()).collect();
    for state in states.iter_mut() {
        let id = state.node_id;
        let mut members: Vec<usize> = graph.neighbors(id).to_vec();
        members.push(id);
        members.sort_unstable();
        let models: Vec<ParameterVector> = members.iter().map(|&m| snapshot[m].clone()).collect();
        state.rebase(average_full_models(&models)?)?;
    }
    Ok(())
}

/// Largest coordinate-wise range across all node models, which equals the
/// maximum pairwise L-infinity distance.
pub fn max_pairwise_linf(models: &[&ParameterVector]) -> f64 {
    let Some(first) = models.first() else {
        return 0.0;
    };
    (0..first.len())
        .map(|c| {
            let (lo, hi) = models
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                    let v = m.values()[c];
                    (lo.min(v), hi.max(v))
                });
            hi - lo
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub topology: TopologyGraph,
    pub strategy: IntegrationStrategy,
    pub schedule: SimSchedule,
    pub model: ModelConfig,
    /// Seeds per-node shuffling. Initial weights come from `model.seed`.
    pub seed: u64,
    pub forwarding: Forwarding,
    pub key: String,
    /// Worker threads for per-epoch training; 0 lets rayon decide.
    pub threads: usize,
}

/// Cosine between a node's delta and the sum of the deltas it received.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentSample {
    pub round: u64,
    pub node_id: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    /// Sorted by `(index, node_id)`.
    pub records: Vec<MetricsRecord>,
    /// Max pairwise L-infinity weight distance at the start of convergence
    /// and after each convergence round.
    pub convergence_spread: Vec<f64>,
    pub alignment: Vec<AlignmentSample>,
    pub final_weights: Vec<ParameterVector>,
    pub messages_delivered: usize,
}

fn node_err(node_id: usize, index: u64) -> impl FnOnce(Error) -> SimError {
    move |e| SimError::Node {
        node_id,
        index,
        source: Box::new(e),
    }
}

fn check_config(config: &SimConfig, data: &ShardedDataset) -> Result<(), Error> {
    let n = config.topology.node_count();
    if n < 2 {
        return Err(SimError::Config(format!("need at least 2 nodes, got {n}")).into());
    }
    if !config.topology.is_connected() {
        return Err(SimError::Config("topology is disconnected".into()).into());
    }
    for i in 0..n {
        for &j in config.topology.neighbors(i) {
            if j >= n || j == i || !config.topology.neighbors(j).contains(&i) {
                return Err(SimError::Config(format!("malformed adjacency at node {i}")).into());
            }
        }
    }
    if data.nodes.len() != n {
        return Err(
            SimError::Config(format!("{} data shards for {n} nodes", data.nodes.len())).into(),
        );
    }
    if let Some(i) = data
        .nodes
        .iter()
        .position(|d| d.train.is_empty() || d.local_val.is_empty())
    {
        return Err(SimError::Config(format!(
            "node {i} has an empty training or local validation shard"
        ))
        .into());
    }
    if data.global_val.is_empty() {
        return Err(SimError::Config("global validation set is empty".into()).into());
    }
    if data.global_val.dim() != config.model.input_dim {
        return Err(SimError::Config(format!(
            "data dimension {} does not match model input {}",
            data.global_val.dim(),
            config.model.input_dim
        ))
        .into());
    }
    if let Forwarding::MultiHop { max_hops: 0 } = config.forwarding {
        return Err(SimError::Config("multi_hop needs max_hops >= 1".into()).into());
    }
    config.schedule.validate()?;
    config.strategy.validate()?;
    config.model.validate()?;
    Ok(())
}

fn record_metrics(
    pool: &rayon::ThreadPool,
    states: &[NodeState<'_>],
    data: &ShardedDataset,
    index: u64,
    phase: Phase,
    out: &mut Vec<MetricsRecord>,
) -> Result<(), Error> {
    let results: Vec<Result<MetricsRecord, SimError>> = pool.install(|| {
        states
            .par_iter()
            .map(|s| {
                let local = evaluate(&s.model, &s.data.local_val)
                    .map_err(|e| node_err(s.node_id, index)(e.into()))?;
                let global = evaluate(&s.model, &data.global_val)
                    .map_err(|e| node_err(s.node_id, index)(e.into()))?;
                Ok(MetricsRecord {
                    node_id: s.node_id,
                    index,
                    local_acc: local.accuracy,
                    local_loss: local.loss,
                    global_acc: global.accuracy,
                    global_loss: global.loss,
                    phase,
                })
            })
            .collect()
    });
    for r in results {
        out.push(r?);
    }
    Ok(())
}

/// Runs the full train / integrate / converge schedule.
pub fn run_simulation(config: &SimConfig, data: &ShardedDataset) -> Result<SimOutcome, Error> {
    check_config(config, data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;

    let init = init_weights(&config.model)?;
    let mut states: Vec<NodeState<'_>> = data
        .nodes
        .iter()
        .enumerate()
        .map(|(id, node_data)| {
            let model = Mlp::with_weights(config.model.clone(), init.clone())?;
            let seed = rng::derive_seed(config.seed, &[rng::TAG_NODE, id as u64]);
            Ok(NodeState::new(
                id,
                model,
                node_data,
                seed,
                config.schedule.batch_size,
            ))
        })
        .collect::<Result<_, ModelError>>()?;

    let schedule = config.schedule;
    let mut records = Vec::new();
    let mut alignment = Vec::new();
    let mut messages_delivered = 0;

    for epoch in 1..=schedule.train_epochs {
        let trained: Vec<Result<(), SimError>> = pool.install(|| {
            states
                .par_iter_mut()
                .map(|s| {
                    let id = s.node_id;
                    s.train_epoch().map_err(|e| node_err(id, epoch)(e.into()))
                })
                .collect()
        });
        for r in trained {
            r?;
        }

        if epoch % schedule.integrate_every == 0 {
            let round = epoch / schedule.integrate_every;
            let mut outgoing = Vec::with_capacity(states.len());
            for s in states.iter_mut() {
                let id = s.node_id;
                outgoing.push(s.package_update(round).map_err(node_err(id, epoch))?);
            }
            for update in &outgoing {
                let report = disseminate(&config.topology, update.node_id, config.forwarding)?;
                for d in &report.deliveries {
                    let message = GossipMessage {
                        key: config.key.clone(),
                        update: update.clone(),
                        hop_count: d.hops,
                    };
                    if states[d.node].receive(message) {
                        messages_delivered += 1;
                    }
                }
            }
            for s in states.iter_mut() {
                let id = s.node_id;
                if !outgoing[id].delta.is_zero() {
                    let remote: Vec<ParameterVector> =
                        s.inbox.values().map(|u| u.delta.clone()).collect();
                    let cosine = delta_alignment(&outgoing[id].delta, &remote)
                        .map_err(|e| node_err(id, epoch)(e.into()))?;
                    alignment.push(AlignmentSample {
                        round,
                        node_id: id,
                        cosine,
                    });
                }
                let t = s.epoch_counter;
                integration_step(s, &config.strategy, t).map_err(node_err(id, epoch))?;
            }
        }
        record_metrics(&pool, &states, data, epoch, Phase::Train, &mut records)?;
    }

    let spread = |states: &[NodeState<'_>]| {
        let models: Vec<&ParameterVector> = states.iter().map(|s| s.model.weights()).collect();
        max_pairwise_linf(&models)
    };
    let mut convergence_spread = vec![spread(&states)];
    for round in schedule.train_epochs + 1..=schedule.convergence_until_round {
        convergence_round(&mut states, &config.topology).map_err(|e| SimError::Node {
            node_id: 0,
            index: round,
            source: Box::new(e),
        })?;
        convergence_spread.push(spread(&states));
        record_metrics(
            &pool,
            &states,
            data,
            round,
            Phase::Convergence,
            &mut records,
        )?;
    }

    Ok(SimOutcome {
        records,
        convergence_spread,
        alignment,
        final_weights: states.iter().map(|s| s.model.weights().clone()).collect(),
        messages_delivered,
    })
}
