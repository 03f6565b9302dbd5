//! Model integration strategies.
//!
//! Plain full-model averaging divides the combined learning progress of the
//! `N + 1` participating models by `N + 1`. Delta-sum integration avoids this
//! by transmitting each node's base snapshot and its training delta
//! separately: bases are averaged, deltas are summed and damped by a
//! time-ramped factor `lambda(t) = min(A + t / B, C)`.
//!
//! All functions accumulate in ascending `(node_id, round)` order so results
//! do not depend on the order updates arrived in.

use serde::{Deserialize, Serialize};

use crate::error::AggregationError;
use crate::params::ParameterVector;

/// One node's gossip payload: the weights it started its training window
/// from and the change that window produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub node_id: usize,
    pub round: u64,
    pub base: ParameterVector,
    pub delta: ParameterVector,
    pub sample_count: u64,
    pub epochs: u64,
}

impl ModelUpdate {
    pub fn new(
        node_id: usize,
        round: u64,
        base: ParameterVector,
        delta: ParameterVector,
        sample_count: u64,
        epochs: u64,
    ) -> Result<Self, AggregationError> {
        base.check_compatible(&delta)?;
        Ok(ModelUpdate {
            node_id,
            round,
            base,
            delta,
            sample_count,
            epochs,
        })
    }

    /// `base + delta`
    pub fn full_model(&self) -> Result<ParameterVector, AggregationError> {
        Ok(self.base.add(&self.delta)?)
    }
}

/// `lambda(t) = min(a + t / b, c)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LambdaSchedule {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        LambdaSchedule { a, b, c }
    }

    /// Constants used for the 200-epoch MNIST scenario.
    pub const MNIST: LambdaSchedule = LambdaSchedule::new(0.15, 1000.0, 0.35);

    /// A schedule whose factor is 1 at every epoch.
    pub const UNIT: LambdaSchedule = LambdaSchedule::new(1.0, 1.0, 1.0);

    pub fn validate(&self) -> Result<(), AggregationError> {
        let ok = self.b.is_finite()
            && self.b > 0.0
            && self.a.is_finite()
            && self.c.is_finite()
            && self.a <= self.c
            && self.c > 0.0
            && self.c <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(AggregationError::InvalidSchedule(format!(
                "need B > 0, A <= C, 0 < C <= 1 (got A={}, B={}, C={})",
                self.a, self.b, self.c
            )))
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        lambda_value(self, t)
    }
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self::MNIST
    }
}

pub fn lambda_value(schedule: &LambdaSchedule, t: u64) -> f64 {
    (schedule.a + t as f64 / schedule.b).min(schedule.c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    StandardAveraging,
    VarianceCorrected,
    Fedavg,
    SampleWeighted,
    DeltaSum,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::StandardAveraging,
        StrategyKind::VarianceCorrected,
        StrategyKind::Fedavg,
        StrategyKind::SampleWeighted,
        StrategyKind::DeltaSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::StandardAveraging => "standard_averaging",
            StrategyKind::VarianceCorrected => "variance_corrected",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::SampleWeighted => "sample_weighted",
            StrategyKind::DeltaSum => "delta_sum",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A strategy and, for delta-sum, its damping schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationStrategy {
    pub kind: StrategyKind,
    pub schedule: Option<LambdaSchedule>,
}

impl IntegrationStrategy {
    pub fn simple(kind: StrategyKind) -> Self {
        IntegrationStrategy {
            kind,
            schedule: None,
        }
    }

    pub fn delta_sum(schedule: LambdaSchedule) -> Self {
        IntegrationStrategy {
            kind: StrategyKind::DeltaSum,
            schedule: Some(schedule),
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        match (self.kind, self.schedule) {
            (StrategyKind::DeltaSum, None) => Err(AggregationError::InvalidSchedule(
                "delta_sum requires a lambda schedule".into(),
            )),
            (StrategyKind::DeltaSum, Some(s)) => s.validate(),
            _ => Ok(()),
        }
    }
}

fn first_of(models: &[ParameterVector]) -> Result<&ParameterVector, AggregationError> {
    let first = models.first().ok_or(AggregationError::Empty)?;
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    Ok(first)
}

fn sorted_updates<'a>(
    updates: impl IntoIterator<Item = &'a ModelUpdate>,
) -> Result<Vec<&'a ModelUpdate>, AggregationError> {
    let mut sorted: Vec<&ModelUpdate> = updates.into_iter().collect();
    sorted.sort_by_key(|u| (u.node_id, u.round));
    for pair in sorted.windows(2) {
        if (pair[0].node_id, pair[0].round) == (pair[1].node_id, pair[1].round) {
            return Err(AggregationError::DuplicateUpdate {
                node_id: pair[0].node_id,
                round: pair[0].round,
            });
        }
    }
    Ok(sorted)
}

/// Elementwise mean of full models.
pub fn average_full_models(
    models: &[ParameterVector],
) -> Result<ParameterVector, AggregationError> {
    let first = first_of(models)?;
    let mut sum = ParameterVector::zeros(first.layout().clone());
    for m in models {
        sum.add_scaled(m, 1.0)?;
    }
    Ok(sum.scale(1.0 / models.len() as f64)?)
}

/// Plain average with each layer segment's spread restored.
///
/// Averaging independently drifted models shrinks the variance of their
/// weights. Per segment, deviations of the average from its mean are scaled
/// by `sigma_target / sigma_avg`, where `sigma_target` is the root of the
/// mean per-input segment variance. Segment means are unchanged. A segment
/// whose average has zero spread is left as is.
pub fn variance_corrected_average(
    models: &[ParameterVector],
) -> Result<ParameterVector, AggregationError> {
    let mut avg = average_full_models(models)?;
    let layout = avg.layout().clone();
    for (index, seg) in layout.segments().iter().enumerate() {
        if seg.len == 0 {
            continue;
        }
        let target_var = models
            .iter()
            .map(|m| variance(m.segment(index)).1)
            .sum::<f64>()
            / models.len() as f64;
        let (mean, avg_var) = variance(avg.segment(index));
        if avg_var <= 0.0 {
            continue;
        }
        let factor = (target_var / avg_var).sqrt();
        for v in &mut avg.values_mut()[seg.offset..seg.offset + seg.len] {
            *v = mean + (*v - mean) * factor;
        }
    }
    avg.ensure_finite("variance_corrected_average")?;
    Ok(avg)
}

/// Population mean and variance.
fn variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn weighted_delta_sum(
    w: &ParameterVector,
    updates: &[&ModelUpdate],
) -> Result<(ParameterVector, f64), AggregationError> {
    let mut acc = ParameterVector::zeros(w.layout().clone());
    let mut total = 0u64;
    for u in updates {
        w.check_compatible(&u.delta)?;
        acc.add_scaled(&u.delta, u.sample_count as f64)?;
        total += u.sample_count;
    }
    if total == 0 {
        return Err(AggregationError::ZeroSamples);
    }
    Ok((acc, total as f64))
}

/// Federated averaging: `w + sum(k_n * delta_n) / sum(k_n)`. Bases are ignored.
pub fn fedavg_integrate(
    w: &ParameterVector,
    updates: &[ModelUpdate],
) -> Result<ParameterVector, AggregationError> {
    let sorted = sorted_updates(updates)?;
    let (acc, total) = weighted_delta_sum(w, &sorted)?;
    let mut out = w.clone();
    out.add_scaled(&acc, 1.0 / total)?;
    Ok(out)
}

/// Sample-weighted integration: `w + sum(k_n * delta_n) / mean(k_n)`.
/// Equivalent to FedAvg with the step multiplied by the update count.
pub fn sample_weighted_integrate(
    w: &ParameterVector,
    updates: &[ModelUpdate],
) -> Result<ParameterVector, AggregationError> {
    let sorted = sorted_updates(updates)?;
    let (acc, total) = weighted_delta_sum(w, &sorted)?;
    let mean_k = total / sorted.len() as f64;
    let mut out = w.clone();
    out.add_scaled(&acc, 1.0 / mean_k)?;
    Ok(out)
}

/// Delta-sum integration of the local update with remote ones:
/// `mean(bases) + lambda(t) * sum(deltas)` over all `N + 1` updates.
pub fn delta_sum_integrate(
    local: &ModelUpdate,
    remote: &[ModelUpdate],
    schedule: &LambdaSchedule,
    t: u64,
) -> Result<ParameterVector, AggregationError> {
    let sorted = sorted_updates(std::iter::once(local).chain(remote))?;
    let layout = local.base.layout().clone();
    let mut base_sum = ParameterVector::zeros(layout.clone());
    let mut delta_sum = ParameterVector::zeros(layout);
    for u in &sorted {
        base_sum.add_scaled(&u.base, 1.0)?;
        delta_sum.add_scaled(&u.delta, 1.0)?;
    }
    let mut out = base_sum.scale(1.0 / sorted.len() as f64)?;
    out.add_scaled(&delta_sum, lambda_value(schedule, t))?;
    Ok(out)
}

/// Cosine between the local delta and the sum of remote deltas. Values near
/// -1 mean local training is cancelling what the neighbours learned.
pub fn delta_alignment(
    local_delta: &ParameterVector,
    remote_deltas: &[ParameterVector],
) -> Result<f64, AggregationError> {
    if local_delta.is_empty() || local_delta.is_zero() {
        return Err(AggregationError::ZeroLocalDelta);
    }
    let mut remote = ParameterVector::zeros(local_delta.layout().clone());
    for d in remote_deltas {
        remote.add_scaled(d, 1.0)?;
    }
    if remote.is_zero() {
        return Ok(0.0);
    }
    // Rescale first so very large deltas cannot overflow the norms.
    let unit = |v: &ParameterVector| {
        let peak = v.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.scale(1.0 / peak)
    };
    let (a, b) = (unit(local_delta)?, unit(&remote)?);
    let cos = a.dot(&b)? / (a.norm() * b.norm());
    Ok(cos.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> ParameterVector {
        ParameterVector::flat(values.to_vec()).unwrap()
    }

    fn upd(node: usize, base: &[f64], delta: &[f64], k: u64) -> ModelUpdate {
        ModelUpdate::new(node, 1, v(base), v(delta), k, 1).unwrap()
    }

    #[test]
    fn lambda_examples() {
        let s = LambdaSchedule::MNIST;
        assert_eq!(lambda_value(&s, 0), 0.15);
        assert_eq!(lambda_value(&s, 200), 0.35);
        assert_eq!(lambda_value(&s, 1_000_000_000), 0.35);
        assert!(LambdaSchedule::new(0.5, 0.0, 0.6).validate().is_err());
        assert!(LambdaSchedule::new(0.7, 10.0, 0.6).validate().is_err());
        assert!(LambdaSchedule::new(0.1, 10.0, 1.5).validate().is_err());
        assert!(s.validate().is_ok());
    }

    #[test]
    fn full_average_examples() {
        let a = v(&[1.5, -2.0]);
        assert_eq!(average_full_models(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(
            average_full_models(&[v(&[0.0]), v(&[2.0])]).unwrap(),
            v(&[1.0])
        );
        assert!(matches!(
            average_full_models(&[]),
            Err(AggregationError::Empty)
        ));
    }

    #[test]
    fn variance_corrected_examples() {
        let a = v(&[0.3, -1.0, 2.0]);
        let same = variance_corrected_average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(same.linf_distance(&a).unwrap() < 1e-15);
        assert_eq!(
            variance_corrected_average(std::slice::from_ref(&a)).unwrap(),
            a
        );
        let out = variance_corrected_average(&[v(&[-1.0, 1.0]), v(&[1.0, -1.0])]).unwrap();
        assert_eq!(out, v(&[0.0, 0.0]));
    }

    #[test]
    fn variance_corrected_restores_spread() {
        let models = [v(&[1.0, 0.0, -1.0]), v(&[0.0, 1.0, -1.0])];
        let out = variance_corrected_average(&models).unwrap();
        let target = (variance(models[0].values()).1 + variance(models[1].values()).1) / 2.0;
        let (mean, var) = variance(out.values());
        assert!((var - target).abs() < 1e-12);
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn fedavg_examples() {
        let w = v(&[10.0]);
        let out = fedavg_integrate(&w, &[upd(0, &[0.0], &[2.0], 5), upd(1, &[0.0], &[4.0], 5)]);
        assert_eq!(out.unwrap(), v(&[13.0]));
        let out = fedavg_integrate(&w, &[upd(0, &[9.0], &[4.0], 3), upd(1, &[0.0], &[0.0], 1)]);
        assert_eq!(out.unwrap(), v(&[13.0]));
        let out = fedavg_integrate(&w, &[upd(0, &[0.0], &[0.0], 3), upd(1, &[0.0], &[0.0], 1)]);
        assert_eq!(out.unwrap(), w);
        let zero = fedavg_integrate(&w, &[upd(0, &[0.0], &[1.0], 0)]);
        assert!(matches!(zero, Err(AggregationError::ZeroSamples)));
    }

    #[test]
    fn sample_weighted_examples() {
        let w = v(&[10.0]);
        let out =
            sample_weighted_integrate(&w, &[upd(0, &[0.0], &[2.0], 5), upd(1, &[0.0], &[4.0], 5)]);
        assert_eq!(out.unwrap(), v(&[16.0]));
        let out = sample_weighted_integrate(&w, &[upd(0, &[0.0], &[2.5], 17)]);
        assert_eq!(out.unwrap(), v(&[12.5]));
        let out =
            sample_weighted_integrate(&w, &[upd(0, &[0.0], &[4.0], 3), upd(1, &[0.0], &[0.0], 1)]);
        assert_eq!(out.unwrap(), v(&[16.0]));
    }

    #[test]
    fn delta_sum_examples() {
        let local = upd(0, &[0.0], &[1.0], 1);
        let remote = [upd(1, &[2.0], &[1.0], 1)];
        let quarter = LambdaSchedule::new(0.25, 1.0, 0.25);
        let out = delta_sum_integrate(&local, &remote, &quarter, 7).unwrap();
        assert_eq!(out, v(&[1.5]));

        let lone = upd(0, &[3.0, -1.0], &[0.5, 0.25], 1);
        let out = delta_sum_integrate(&lone, &[], &LambdaSchedule::UNIT, 0).unwrap();
        assert_eq!(out, v(&[3.5, -0.75]));

        let w = [2.0, 4.0];
        let out = delta_sum_integrate(
            &upd(0, &w, &[0.0, 0.0], 1),
            &[upd(1, &w, &[0.0, 0.0], 1), upd(2, &w, &[0.0, 0.0], 1)],
            &LambdaSchedule::MNIST,
            50,
        )
        .unwrap();
        assert_eq!(out, v(&w));
    }

    #[test]
    fn duplicate_updates_rejected() {
        let local = upd(0, &[0.0], &[1.0], 1);
        let dup = [upd(1, &[0.0], &[1.0], 1), upd(1, &[0.0], &[1.0], 1)];
        assert!(matches!(
            delta_sum_integrate(&local, &dup, &LambdaSchedule::UNIT, 0),
            Err(AggregationError::DuplicateUpdate { node_id: 1, .. })
        ));
    }

    #[test]
    fn layout_mismatch_propagates() {
        let local = upd(0, &[0.0], &[1.0], 1);
        let remote = [upd(1, &[0.0, 1.0], &[1.0, 0.0], 1)];
        assert!(matches!(
            delta_sum_integrate(&local, &remote, &LambdaSchedule::UNIT, 0),
            Err(AggregationError::Model(_))
        ));
        assert!(average_full_models(&[v(&[1.0]), v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let d = v(&[1.0, 2.0]);
        assert!((delta_alignment(&d, std::slice::from_ref(&d)).unwrap() - 1.0).abs() < 1e-15);
        let neg = d.scale(-1.0).unwrap();
        assert!((delta_alignment(&d, &[neg]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(
            delta_alignment(&v(&[1.0, 0.0]), &[v(&[0.0, 1.0])]).unwrap(),
            0.0
        );
        assert_eq!(delta_alignment(&d, &[]).unwrap(), 0.0);
        assert!(delta_alignment(&v(&[0.0, 0.0]), std::slice::from_ref(&d)).is_err());
        let huge = v(&[1e300, -1e300]);
        assert!(
            (delta_alignment(&huge, &[huge.clone(), huge.clone()]).unwrap() - 1.0).abs() < 1e-15
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyKind::parse(k.name()), Some(k));
        }
        assert!(IntegrationStrategy::simple(StrategyKind::DeltaSum)
            .validate()
            .is_err());
    }
}
