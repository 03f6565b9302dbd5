//! Analytical gossip traffic model in model updates per second.
//!
//! Rates are extrapolated from a baseline measured on a reference topology.
//! Gossip traffic per node scales with the number of direct neighbours, so
//! each scenario is a different assumption about how connectivity evolves
//! as the topology grows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::NetModelError;

/// Per-node rate measured on the 10-node reference topology.
pub const REFERENCE_BASELINE: f64 = 1.770_658_822_055_98;
pub const REFERENCE_CONNECTIVITY: f64 = 3.3;
pub const REFERENCE_NODES: usize = 10;

fn positive(name: &str, v: f64) -> Result<f64, NetModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(NetModelError::Invalid(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

/// Centralised baseline: one update every `update_interval_s` plus one
/// synchronisation every `sync_every_updates` updates.
pub fn fedavg_rate(update_interval_s: f64, sync_every_updates: f64) -> Result<f64, NetModelError> {
    positive("update interval", update_interval_s)?;
    positive("sync period", sync_every_updates)?;
    Ok((sync_every_updates + 1.0) / (update_interval_s * sync_every_updates))
}

/// Baseline rescaled by the topology's average connectivity.
pub fn expected_rate(baseline: f64, ref_conn: f64, conn_at_n: f64) -> Result<f64, NetModelError> {
    Ok(
        positive("baseline", baseline)? * positive("connectivity", conn_at_n)?
            / positive("reference connectivity", ref_conn)?,
    )
}

/// Connectivity held fixed as the topology grows physically.
pub fn constant_connectivity_rate(baseline: f64) -> Result<f64, NetModelError> {
    positive("baseline", baseline)
}

/// Node density rising in a fixed physical area: the rate grows as
/// `(n / ref_n) ^ density_exponent`.
pub fn connectivity_increase_rate(
    baseline: f64,
    ref_n: usize,
    n: usize,
    density_exponent: f64,
) -> Result<f64, NetModelError> {
    positive("baseline", baseline)?;
    if ref_n == 0 || n < ref_n {
        return Err(NetModelError::Invalid(format!(
            "node count {n} must be at least the reference {ref_n} (> 0)"
        )));
    }
    if !(density_exponent.is_finite() && density_exponent >= 0.0) {
        return Err(NetModelError::Invalid(format!(
            "density exponent must be finite and non-negative, got {density_exponent}"
        )));
    }
    Ok(baseline * (n as f64 / ref_n as f64).powf(density_exponent))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Expected,
    ConstantConnectivity,
    ConnectivityIncrease,
    Fedavg,
}

/// Inputs shared by all scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputScenario {
    pub baseline_rate: f64,
    pub reference_n: usize,
    pub reference_avg_conn: f64,
    pub density_exponent: f64,
    pub update_interval_s: f64,
    pub sync_every_updates: f64,
}

impl Default for ThroughputScenario {
    fn default() -> Self {
        ThroughputScenario {
            baseline_rate: REFERENCE_BASELINE,
            reference_n: REFERENCE_NODES,
            reference_avg_conn: REFERENCE_CONNECTIVITY,
            density_exponent: 1.0,
            update_interval_s: 5.0,
            sync_every_updates: 20.0,
        }
    }
}

impl ThroughputScenario {
    pub fn rate(&self, kind: ScenarioKind, n: usize, conn: f64) -> Result<f64, NetModelError> {
        match kind {
            ScenarioKind::Expected => {
                expected_rate(self.baseline_rate, self.reference_avg_conn, conn)
            }
            ScenarioKind::ConstantConnectivity => constant_connectivity_rate(self.baseline_rate),
            ScenarioKind::ConnectivityIncrease => connectivity_increase_rate(
                self.baseline_rate,
                self.reference_n,
                n,
                self.density_exponent,
            ),
            ScenarioKind::Fedavg => fedavg_rate(self.update_interval_s, self.sync_every_updates),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub nodes: usize,
    pub avg_conn: f64,
    pub expected: f64,
    pub constant_connectivity: f64,
    pub connectivity_increase: f64,
    pub fedavg: f64,
}

impl ThroughputRow {
    /// Gossip traffic relative to the FedAvg baseline, using the expected rate.
    pub fn gossip_to_fedavg(&self) -> f64 {
        self.expected / self.fedavg
    }
}

/// One row per `(n, connectivity)` pair.
pub fn scenario_table(
    scenario: &ThroughputScenario,
    sizes: &[(usize, f64)],
) -> Result<Vec<ThroughputRow>, NetModelError> {
    sizes
        .iter()
        .map(|&(n, conn)| {
            Ok(ThroughputRow {
                nodes: n,
                avg_conn: conn,
                expected: scenario.rate(ScenarioKind::Expected, n, conn)?,
                constant_connectivity: scenario.rate(
                    ScenarioKind::ConstantConnectivity,
                    n,
                    conn,
                )?,
                connectivity_increase: scenario.rate(
                    ScenarioKind::ConnectivityIncrease,
                    n,
                    conn,
                )?,
                fedavg: scenario.rate(ScenarioKind::Fedavg, n, conn)?,
            })
        })
        .collect()
}

pub const TABLE_CSV_HEADER: &str =
    "nodes,avg_conn,expected,constant_connectivity,connectivity_increase,fedavg";

pub fn table_csv(rows: &[ThroughputRow]) -> String {
    let mut out = format!("{TABLE_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.3},{:.6},{:.6},{:.6},{:.6}",
            r.nodes,
            r.avg_conn,
            r.expected,
            r.constant_connectivity,
            r.connectivity_increase,
            r.fedavg
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg_rate(5.0, 20.0).unwrap(), 0.21);
        assert!((fedavg_rate(1.0, 1e12).unwrap() - 1.0).abs() < 1e-9);
        assert!((fedavg_rate(10.0, 20.0).unwrap() - 0.105).abs() < 1e-15);
        assert!(fedavg_rate(0.0, 20.0).is_err());
    }

    #[test]
    fn expected_examples() {
        let b = 1.770_658_82;
        assert!((expected_rate(b, 3.3, 3.2).unwrap() - 1.717_00).abs() < 1e-3);
        assert!((expected_rate(b, 3.3, 4.2).unwrap() - 2.253_57).abs() < 1e-3);
        assert_eq!(expected_rate(b, 3.3, 3.3).unwrap(), b);
    }

    #[test]
    fn constant_examples() {
        assert_eq!(constant_connectivity_rate(1.0).unwrap(), 1.0);
        let s = ThroughputScenario::default();
        for n in [10, 25, 50, 1000] {
            assert_eq!(
                s.rate(ScenarioKind::ConstantConnectivity, n, 3.3).unwrap(),
                REFERENCE_BASELINE
            );
        }
    }

    #[test]
    fn connectivity_increase_examples() {
        let b = 1.770_66;
        assert!((connectivity_increase_rate(b, 10, 25, 1.0).unwrap() - 4.426_65).abs() < 1e-4);
        assert_eq!(connectivity_increase_rate(b, 10, 10, 1.0).unwrap(), b);
        assert!((connectivity_increase_rate(b, 10, 50, 1.0).unwrap() - 8.8533).abs() < 1e-3);
        assert!(connectivity_increase_rate(b, 10, 50, f64::NAN).is_err());
        assert!(connectivity_increase_rate(b, 10, 5, 1.0).is_err());
    }

    #[test]
    fn table_has_constant_fedavg_column() {
        let rows = scenario_table(
            &ThroughputScenario::default(),
            &[(10, 3.3), (25, 3.2), (50, 4.2)],
        )
        .unwrap();
        assert!(rows.iter().all(|r| r.fedavg == 0.21));
        let csv = table_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!((rows[0].gossip_to_fedavg() - 8.4317).abs() < 1e-3);
    }
}
