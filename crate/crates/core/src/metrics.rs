//! Per-node metric records, cross-node aggregation and CSV export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Convergence,
}

/// Accuracy and loss of one node's model after one epoch or gossip round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub node_id: usize,
    pub index: u64,
    pub local_acc: f64,
    pub local_loss: f64,
    pub global_acc: f64,
    pub global_loss: f64,
    pub phase: Phase,
}

/// Spread of global accuracy across nodes at one index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub index: u64,
    pub test_acc_min: f64,
    pub test_acc_median: f64,
    pub test_acc_max: f64,
    pub test_acc_p05: f64,
    pub test_acc_p95: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Median for odd counts; the lower of the two middle values for even counts.
pub fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Min / median / max of `global_acc` per index, over all nodes seen.
pub fn aggregate_across_nodes(
    records: &[MetricsRecord],
) -> Result<Vec<AggregateRow>, MetricsError> {
    let nodes: BTreeSet<usize> = records.iter().map(|r| r.node_id).collect();
    let mut by_index: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in records {
        by_index
            .entry(r.index)
            .or_default()
            .insert(r.node_id, r.global_acc);
    }
    by_index
        .into_iter()
        .map(|(index, accs)| {
            if let Some(&missing) = nodes.iter().find(|n| !accs.contains_key(n)) {
                return Err(MetricsError::MissingNode {
                    node_id: missing,
                    index,
                });
            }
            let mut values: Vec<f64> = accs.into_values().collect();
            values.sort_by(f64::total_cmp);
            Ok(AggregateRow {
                index,
                test_acc_min: values[0],
                test_acc_median: lower_median(&values),
                test_acc_max: values[values.len() - 1],
                test_acc_p05: percentile(&values, 5.0),
                test_acc_p95: percentile(&values, 95.0),
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "index,test_acc_min,test_acc_median,test_acc_max";
pub const CSV_HEADER_PERCENTILES: &str =
    "index,test_acc_min,test_acc_median,test_acc_max,test_acc_p05,test_acc_p95";

pub fn format_csv(rows: &[AggregateRow], percentiles: bool) -> String {
    let mut out = String::new();
    out.push_str(if percentiles {
        CSV_HEADER_PERCENTILES
    } else {
        CSV_HEADER
    });
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.index, r.test_acc_min, r.test_acc_median, r.test_acc_max
        );
        if percentiles {
            let _ = write!(out, ",{:.6},{:.6}", r.test_acc_p05, r.test_acc_p95);
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<(), MetricsError> {
    fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn export_csv(rows: &[AggregateRow], path: impl AsRef<Path>) -> Result<(), MetricsError> {
    write_file(path.as_ref(), &format_csv(rows, false))
}

/// As [`export_csv`] with trailing 5th/95th percentile columns.
pub fn export_csv_with_percentiles(
    rows: &[AggregateRow],
    path: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    write_file(path.as_ref(), &format_csv(rows, true))
}

/// Parses either CSV layout written by this module. Percentile columns
/// default to the min/max columns when absent.
pub fn parse_csv(text: &str) -> Result<Vec<AggregateRow>, MetricsError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    if header != CSV_HEADER && header != CSV_HEADER_PERCENTILES {
        return Err(MetricsError::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let columns = header.split(',').count();
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| MetricsError::Parse {
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(bad(format!(
                "expected {columns} fields, got {}",
                fields.len()
            )));
        }
        let index = fields[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("index: {e}")))?;
        let num = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {i}: {e}")))
        };
        let (min, median, max) = (num(1)?, num(2)?, num(3)?);
        let (p05, p95) = if columns == 6 {
            (num(4)?, num(5)?)
        } else {
            (min, max)
        };
        rows.push(AggregateRow {
            index,
            test_acc_min: min,
            test_acc_median: median,
            test_acc_max: max,
            test_acc_p05: p05,
            test_acc_p95: p95,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text)
}

/// `1 - drop_b / drop_a`, where a drop is the final accuracy at the smallest
/// topology minus that at the largest. Series are `(node_count, accuracy)`
/// pairs; the sizes are taken from series `a`.
pub fn accuracy_drop_ratio(a: &[(usize, f64)], b: &[(usize, f64)]) -> Result<f64, MetricsError> {
    let lookup = |series: &[(usize, f64)], n: usize| {
        series
            .iter()
            .find(|(size, _)| *size == n)
            .map(|(_, acc)| *acc)
            .ok_or(MetricsError::MissingSize { nodes: n })
    };
    let smallest = a
        .iter()
        .map(|(n, _)| *n)
        .min()
        .ok_or(MetricsError::TooFewSizes)?;
    let largest = a
        .iter()
        .map(|(n, _)| *n)
        .max()
        .ok_or(MetricsError::TooFewSizes)?;
    if smallest == largest {
        return Err(MetricsError::TooFewSizes);
    }
    let drop_a = lookup(a, smallest)? - lookup(a, largest)?;
    let drop_b = lookup(b, smallest)? - lookup(b, largest)?;
    if drop_a == 0.0 {
        return Err(MetricsError::ZeroDrop);
    }
    Ok(1.0 - drop_b / drop_a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(node_id: usize, index: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            node_id,
            index,
            local_acc: acc,
            local_loss: 0.0,
            global_acc: acc,
            global_loss: 0.0,
            phase: Phase::Train,
        }
    }

    fn medians(accs: &[f64]) -> AggregateRow {
        let records: Vec<_> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| rec(i, 1, a))
            .collect();
        aggregate_across_nodes(&records).unwrap()[0]
    }

    #[test]
    fn aggregate_examples() {
        let r = medians(&[0.95, 1.0, 0.9]);
        assert_eq!(
            (r.test_acc_min, r.test_acc_median, r.test_acc_max),
            (0.9, 0.95, 1.0)
        );
        let r = medians(&[0.97; 4]);
        assert_eq!(
            (r.test_acc_min, r.test_acc_median, r.test_acc_max),
            (0.97, 0.97, 0.97)
        );
        let r = medians(&[0.4, 0.1, 0.3, 0.2]);
        assert_eq!(r.test_acc_median, 0.2);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let accs: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let r = medians(&accs);
        assert_eq!(r.test_acc_p05, 0.05);
        assert_eq!(r.test_acc_p95, 0.95);
    }

    #[test]
    fn missing_node_is_reported() {
        let records = vec![rec(0, 1, 0.5), rec(1, 1, 0.5), rec(0, 2, 0.6)];
        assert!(matches!(
            aggregate_across_nodes(&records),
            Err(MetricsError::MissingNode {
                node_id: 1,
                index: 2
            })
        ));
    }

    #[test]
    fn csv_formatting() {
        assert_eq!(format_csv(&[], false), format!("{CSV_HEADER}\n"));
        let row = AggregateRow {
            index: 1,
            test_acc_min: 0.9,
            test_acc_median: 0.95,
            test_acc_max: 1.0,
            test_acc_p05: 0.9,
            test_acc_p95: 1.0,
        };
        let text = format_csv(&[row], false);
        assert_eq!(text.lines().nth(1), Some("1,0.900000,0.950000,1.000000"));
        assert_eq!(parse_csv(&text).unwrap(), vec![row]);
        let wide = format_csv(&[row], true);
        assert_eq!(parse_csv(&wide).unwrap(), vec![row]);
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("10nodes_delta_sum.csv");
        export_csv(&[], &path).unwrap();
        assert!(read_csv(&path).unwrap().is_empty());
        assert!(parse_csv("bad,header\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\n1,0.5\n")).is_err());
    }

    #[test]
    fn drop_ratio_examples() {
        let avg = [(10, 0.9911), (25, 0.9865), (50, 0.9789)];
        let delta = [(10, 0.9914), (25, 0.9885), (50, 0.98615)];
        let r = accuracy_drop_ratio(&avg, &delta).unwrap();
        assert!((r - 0.569_672_131).abs() < 1e-6, "{r}");
        assert_eq!(accuracy_drop_ratio(&avg, &avg).unwrap(), 0.0);
        let flat = [(10, 0.9), (50, 0.9)];
        assert_eq!(accuracy_drop_ratio(&avg, &flat).unwrap(), 1.0);
        assert!(matches!(
            accuracy_drop_ratio(&flat, &avg),
            Err(MetricsError::ZeroDrop)
        ));
        assert!(matches!(
            accuracy_drop_ratio(&avg, &[(10, 0.9)]),
            Err(MetricsError::MissingSize { nodes: 50 })
        ));
    }
}
