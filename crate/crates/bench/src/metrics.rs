//! Metrics CSV files.
//!
//! `metrics_<METHOD>.csv`, one row per (seed, round):
//! `method,seed,round,train_loss,test_accuracy,test_loss,epsilon_hat,delta,batch_sizes,empty_batches,audit_deviation`.
//! `epsilon_hat` and `delta` are empty for non-private methods,
//! `audit_deviation` outside plaintext-audit mode, and `batch_sizes` joins
//! the realized Poisson batch sizes with `;`.
//!
//! `summary.csv`, one row per (method, round):
//! `method,round,seeds,accuracy_mean,accuracy_std,train_loss_mean,train_loss_std,epsilon_mean,epsilon_std`.
//! Means and sample standard deviations over the seeds that reached the
//! round; std is 0 for a single seed.
//!
//! `final.csv`, one row per (method, seed):
//! `method,seed,rounds,stopped_at,final_accuracy,final_train_loss,epsilon_hat`.
//!
//! `timing.csv`, one row per (method, seed, round): `method,seed,round,wall_ms`.
//! Wall-clock times live apart so that the other files are reproducible
//! byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use dpfed_core::orchestrator::{Method, RoundMetrics};
use serde::{Deserialize, Serialize};

use crate::error::{csv_err, io_err, BenchError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub epsilon_hat: Option<f64>,
    pub delta: Option<f64>,
    pub batch_sizes: String,
    pub empty_batches: usize,
    pub audit_deviation: Option<f64>,
}

impl MetricsRecord {
    pub fn new(method: Method, seed: u64, delta: f64, m: &RoundMetrics) -> Self {
        Self {
            method: method.label().to_string(),
            seed,
            round: m.round,
            train_loss: m.train_loss,
            test_accuracy: m.test_accuracy,
            test_loss: m.test_loss,
            epsilon_hat: m.epsilon_hat,
            delta: m.epsilon_hat.map(|_| delta),
            batch_sizes: m.batch_sizes.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";"),
            empty_batches: m.empty_batches,
            audit_deviation: m.audit_deviation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub round: usize,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub train_loss_mean: f64,
    pub train_loss_std: f64,
    pub epsilon_mean: Option<f64>,
    pub epsilon_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub method: String,
    pub seed: u64,
    pub rounds: usize,
    pub stopped_at: Option<usize>,
    pub final_accuracy: f64,
    pub final_train_loss: f64,
    pub epsilon_hat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub wall_ms: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(method, round) statistics, methods in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(&str, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
        groups.entry((&r.method, r.round)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for method in order {
        for ((_, round), rs) in groups.range((method, 0)..=(method, usize::MAX)) {
            let acc: Vec<f64> = rs.iter().map(|r| r.test_accuracy).collect();
            let loss: Vec<f64> = rs.iter().map(|r| r.train_loss).collect();
            let eps: Vec<f64> = rs.iter().filter_map(|r| r.epsilon_hat).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (train_loss_mean, train_loss_std) = mean_std(&loss);
            let (epsilon_mean, epsilon_std) = if eps.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&eps);
                (Some(m), Some(s))
            };
            rows.push(SummaryRow {
                method: method.to_string(),
                round: *round,
                seeds: rs.len(),
                accuracy_mean,
                accuracy_std,
                train_loss_mean,
                train_loss_std,
                epsilon_mean,
                epsilon_std,
            });
        }
    }
    rows
}

pub fn metrics_file(dir: &Path, method: &str) -> PathBuf {
    dir.join(format!("metrics_{method}.csv"))
}

/// Serializes `rows` to `path` through a temporary file in the same
/// directory, renamed into place.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    {
        let mut w = csv::Writer::from_writer(&mut tmp);
        for r in rows {
            w.serialize(r).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file_mut().flush().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Same as [`write_csv`], but writes the header even for zero rows.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    writeln!(tmp, "{}", header.join(",")).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 11] = [
    "method",
    "seed",
    "round",
    "train_loss",
    "test_accuracy",
    "test_loss",
    "epsilon_hat",
    "delta",
    "batch_sizes",
    "empty_batches",
    "audit_deviation",
];

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err(path))
}

/// Every `metrics_*.csv` in `dir`, files in name order.
pub fn read_metrics_dir(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_csv::<MetricsRecord>(&f)?);
    }
    if out.is_empty() {
        return Err(BenchError::NoMetrics(dir.to_path_buf()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, round: usize, acc: f64, eps: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            method: method.into(),
            seed,
            round,
            train_loss: 1.0 - acc,
            test_accuracy: acc,
            test_loss: 0.5,
            epsilon_hat: eps,
            delta: eps.map(|_| 1e-4),
            batch_sizes: "3;0;4".into(),
            empty_batches: 1,
            audit_deviation: None,
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn summary_groups_by_method_and_round() {
        let rs = vec![
            rec("DOPAMINE", 1, 1, 0.5, Some(0.1)),
            rec("DOPAMINE", 2, 1, 0.7, Some(0.1)),
            rec("DOPAMINE", 1, 2, 0.6, Some(0.2)),
            rec("C", 1, 1, 0.9, None),
        ];
        let s = summarize(&rs);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].method.as_str(), s[0].round, s[0].seeds), ("DOPAMINE", 1, 2));
        assert!((s[0].accuracy_mean - 0.6).abs() < 1e-15);
        assert_eq!(s[1].seeds, 1);
        assert_eq!(s[2].method, "C");
        assert_eq!(s[2].epsilon_mean, None);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rs = vec![rec("CDP", 4, 1, 0.1 + 0.2, Some(1.0 / 3.0)), rec("CDP", 4, 2, 0.123456789012345, Some(2.5))];
        let p = metrics_file(dir.path(), "CDP");
        write_csv(&p, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        assert_eq!(read_csv::<MetricsRecord>(&p).unwrap(), rs);
        assert_eq!(read_metrics_dir(dir.path()).unwrap(), rs);
    }

    #[test]
    fn empty_dir_has_no_metrics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_metrics_dir(dir.path()), Err(BenchError::NoMetrics(_))));
    }
}
