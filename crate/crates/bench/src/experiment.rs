//! Runs every configured (method, seed) and writes the metrics files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dpfed_core::model::{evaluate, mean_loss, Dataset};
use dpfed_core::orchestrator::{run_observed, Method, RunOutcome};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{io_err, BenchError, Result};
use crate::metrics::{
    metrics_file, summarize, write_csv, write_csv_with_header, FinalRow, MetricsRecord, TimingRow, METRICS_HEADER,
};

pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub timing: Vec<TimingRow>,
    pub outcome: std::result::Result<Finished, String>,
}

/// A completed run and the returned model's scores.
pub struct Finished {
    pub outcome: RunOutcome,
    pub test_accuracy: f64,
    pub train_loss: f64,
}

pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn final_rows(&self) -> Vec<FinalRow> {
        self.runs
            .iter()
            .filter_map(|r| {
                let f = r.outcome.as_ref().ok()?;
                Some(FinalRow {
                    method: r.method.label().to_string(),
                    seed: r.seed,
                    rounds: r.records.len(),
                    stopped_at: f.outcome.stopped_at,
                    final_accuracy: f.test_accuracy,
                    final_train_loss: f.train_loss,
                    epsilon_hat: f.outcome.spend.map(|s| s.epsilon_hat),
                })
            })
            .collect()
    }

    /// Mean final test accuracy of `method` over its successful seeds.
    pub fn mean_final_accuracy(&self, method: Method) -> Option<f64> {
        let label = method.label();
        let accs: Vec<f64> = self
            .final_rows()
            .into_iter()
            .filter(|r| r.method == label)
            .map(|r| r.final_accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

fn run_one(cfg: &ExperimentConfig, method: Method, seed: u64, train: &Dataset, test: &Dataset) -> RunRecord {
    let mut records = Vec::new();
    let mut timing = Vec::new();
    let outcome = (|| -> Result<Finished> {
        let rc = cfg.run_config_for(method, seed, train.num_features(), train.num_classes().max(test.num_classes()))?;
        let delta = rc.dp.delta;
        let start = Instant::now();
        let mut last = start;
        let outcome = run_observed(&rc, train, test, &mut |m| {
            let now = Instant::now();
            timing.push(TimingRow {
                method: method.label().to_string(),
                seed,
                round: m.round,
                wall_ms: (now - last).as_secs_f64() * 1e3,
            });
            last = now;
            records.push(MetricsRecord::new(method, seed, delta, m));
        })?;
        let eval = evaluate(&outcome.model, test)?;
        log::info!(
            "{method} seed {seed}: {} rounds in {:.1}s, final accuracy {:.4}",
            outcome.metrics.len(),
            start.elapsed().as_secs_f64(),
            eval.accuracy
        );
        let train_loss = mean_loss(&outcome.model, train.samples())?;
        Ok(Finished {
            outcome,
            test_accuracy: eval.accuracy,
            train_loss,
        })
    })()
    .map_err(|e| {
        log::error!("{method} seed {seed}: {e}");
        e.to_string()
    });
    RunRecord {
        method,
        seed,
        records,
        timing,
        outcome,
    }
}

/// Runs all (method, seed) pairs in parallel, then writes the metrics files
/// (partial series included for failed runs). Fails if any run failed.
pub fn run_experiment(cfg: &ExperimentConfig, config_dir: &Path) -> Result<ExperimentReport> {
    let methods = cfg.parsed_methods()?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
    let out_dir = if out_dir.is_absolute() { out_dir } else { config_dir.join(out_dir) };
    let (train, test) = cfg.load_data(config_dir)?;
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(m, s)| run_one(cfg, m, s, &train, &test))
        .collect();
    let report = ExperimentReport { out_dir, runs };
    write_report(&report, &methods)?;
    let failed: Vec<&RunRecord> = report.runs.iter().filter(|r| r.outcome.is_err()).collect();
    if let Some(first) = failed.first() {
        return Err(BenchError::RunsFailed {
            failed: failed.len(),
            total: report.runs.len(),
            first: format!(
                "{} seed {}: {}",
                first.method,
                first.seed,
                first.outcome.as_ref().err().expect("failed run")
            ),
        });
    }
    Ok(report)
}

fn write_report(report: &ExperimentReport, methods: &[Method]) -> Result<()> {
    let dir = &report.out_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut all = Vec::new();
    for &m in methods {
        let rows: Vec<MetricsRecord> = report
            .runs
            .iter()
            .filter(|r| r.method == m)
            .flat_map(|r| r.records.iter().cloned())
            .collect();
        write_csv_with_header(&metrics_file(dir, m.label()), &METRICS_HEADER, &rows)?;
        all.extend(rows);
    }
    write_csv(&dir.join("summary.csv"), &summarize(&all))?;
    write_csv(&dir.join("final.csv"), &report.final_rows())?;
    let timing: Vec<TimingRow> = report.runs.iter().flat_map(|r| r.timing.iter().cloned()).collect();
    write_csv(&dir.join("timing.csv"), &timing)?;
    Ok(())
}
