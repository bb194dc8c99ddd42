use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpfed_bench::config::{ExperimentConfig, Overrides, SecureMode, TransportChoice};
use dpfed_bench::metrics::write_csv;
use dpfed_bench::{chart, demo, experiment, BenchError, Result};
use dpfed_core::accountant::epsilon_curve;
use dpfed_core::secure_agg::TransportKind;
use dpfed_he::EncryptionParams;
use serde::Serialize;

/// Federated DP-SGD experiments with encrypted aggregation.
///
/// Log level comes from DPFED_LOG (default "info").
#[derive(Parser)]
#[command(name = "dpfed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (method, seed) and write metrics CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed list; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
        /// Replaces the method list; repeatable.
        #[arg(long)]
        method: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        transport: Option<TransportChoice>,
        #[arg(long, value_enum)]
        secure: Option<SecureMode>,
    },
    /// Draw accuracy and ε̂ charts from a metrics directory.
    Chart {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the metrics directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print ε̂ after each of T rounds as CSV.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        #[arg(long = "rounds", short = 'T')]
        rounds: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate BFV keys and round-trip one random batch.
    KeygenDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use a toy ring of this degree (8 or 16) instead of d = 4096.
        #[arg(long)]
        toy_degree: Option<usize>,
    },
    /// One encrypted aggregation round compared with the plaintext average.
    SecureAggDemo {
        #[arg(long, default_value_t = 10)]
        hospitals: usize,
        #[arg(long, default_value_t = 10_000)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = TransportChoice::Loopback)]
        transport: TransportChoice,
    },
}

#[derive(Serialize)]
struct CurveRow {
    round: usize,
    epsilon_hat: f64,
}

fn transport_kind(t: TransportChoice) -> TransportKind {
    match t {
        TransportChoice::Loopback => TransportKind::Loopback,
        TransportChoice::Tcp => TransportKind::Tcp,
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
            transport,
            secure,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                seeds: seed,
                methods: method,
                out_dir: out.map(|o| std::env::current_dir().map(|d| d.join(&o)).unwrap_or(o)),
                transport,
                secure,
            })?;
            let base = config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let report = experiment::run_experiment(&cfg, base)?;
            for m in cfg.parsed_methods()? {
                if let Some(acc) = report.mean_final_accuracy(m) {
                    println!("{:<9} mean final accuracy {acc:.4}", m.label());
                }
            }
            println!("metrics written to {}", report.out_dir.display());
        }
        Command::Chart { metrics, out } => {
            let out = out.unwrap_or_else(|| metrics.clone());
            let files = chart::render_charts(&metrics, &out)?;
            println!("{}", files.accuracy.display());
            println!("{}", files.epsilon.display());
        }
        Command::Accountant {
            q,
            sigma,
            delta,
            rounds,
            out,
        } => {
            let rows: Vec<CurveRow> = epsilon_curve(q, sigma, delta, rounds)?
                .into_iter()
                .map(|s| CurveRow {
                    round: s.rounds,
                    epsilon_hat: s.epsilon_hat,
                })
                .collect();
            match out {
                Some(path) => write_csv(&path, &rows)?,
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
                    for r in &rows {
                        w.serialize(r).map_err(|source| BenchError::Csv {
                            path: "<stdout>".into(),
                            source,
                        })?;
                    }
                    w.flush().map_err(|source| BenchError::Io {
                        path: "<stdout>".into(),
                        source,
                    })?;
                }
            }
        }
        Command::KeygenDemo { seed, toy_degree } => {
            let params = match toy_degree {
                Some(d) => EncryptionParams::toy(d)?,
                None => EncryptionParams::default(),
            };
            print!("{}", demo::keygen_demo(params, seed)?);
        }
        Command::SecureAggDemo {
            hospitals,
            len,
            seed,
            transport,
        } => {
            print!("{}", demo::secure_agg_demo(hospitals, len, transport_kind(transport), seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPFED_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
