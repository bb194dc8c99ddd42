//! Experiment configuration file (TOML).
//!
//! ```toml
//! seeds = [1, 2, 3, 4, 5]
//! methods = ["C", "CDP", "F", "FPDP", "DOPAMINE"]
//! out_dir = "results"
//!
//! [dataset]
//! source = "synthetic"
//! samples_per_hospital = 293
//! test_samples = 2000
//! features = 10
//! classes = 2
//! separation = 2.0
//! seed = 0
//!
//! [model]
//! kind = "logistic"
//!
//! [training]
//! q = 0.3
//! epsilon = 1.0
//!
//! [secure]
//! mode = "off"
//!
//! [method.DOPAMINE]
//! learning_rate = 0.2
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Duration;

use dpfed_core::dp::{Calibration, DpConfig};
use dpfed_core::model::{synth_dataset, Architecture, Dataset, DatasetId};
use dpfed_core::orchestrator::{Aggregation, Method, RunConfig};
use dpfed_core::secure_agg::{SecureAggConfig, TransportKind};
use serde::Deserialize;

use crate::error::{io_err, BenchError, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub secure: SecureSpec,
    /// Per-method overrides of `[training]`, keyed by method label.
    #[serde(default)]
    pub method: BTreeMap<String, TrainingSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.label().to_string()).collect()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        samples_per_hospital: usize,
        #[serde(default = "default_test_samples")]
        test_samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Header row, float feature columns, integer label in the last column.
    Csv {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        classes: Option<usize>,
    },
}

fn default_test_samples() -> usize {
    2000
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Logistic,
    Mlp,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub kind: ModelKind,
    pub hidden: Option<usize>,
}

/// Every field optional so that the same table serves as the shared
/// `[training]` section and as a `[method.<LABEL>]` override.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub clip_norm: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub max_rounds: Option<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub hospitals: Option<usize>,
    pub local_epochs: Option<usize>,
    pub participation: Option<f64>,
    /// Switches DOPAMINE to per-round calibration with this ε per round.
    pub epsilon_per_round: Option<f64>,
}

impl TrainingSpec {
    fn overlay(&self, top: &TrainingSpec) -> TrainingSpec {
        macro_rules! pick {
            ($($f:ident),*) => { TrainingSpec { $($f: top.$f.or(self.$f)),* } };
        }
        pick!(q, sigma, clip_norm, learning_rate, momentum, max_rounds, epsilon, delta, hospitals, local_epochs, participation, epsilon_per_round)
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SecureMode {
    On,
    #[default]
    Off,
    PlaintextAudit,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportChoice {
    #[default]
    Loopback,
    Tcp,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecureSpec {
    #[serde(default)]
    pub mode: SecureMode,
    #[serde(default)]
    pub transport: TransportChoice,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

impl Default for SecureSpec {
    fn default() -> Self {
        Self {
            mode: SecureMode::Off,
            transport: TransportChoice::Loopback,
            timeout_secs: default_timeout(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub transport: Option<TransportChoice>,
    pub secure: Option<SecureMode>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|message| BenchError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parses and validates; the error text carries line, column and field.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.check().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if !o.methods.is_empty() {
            self.methods = o.methods.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        if let Some(t) = o.transport {
            self.secure.transport = t;
        }
        if let Some(s) = o.secure {
            self.secure.mode = s;
        }
        self.check()
    }

    fn check(&self) -> Result<()> {
        let usage = |m: String| Err(BenchError::Usage(m));
        if self.seeds.is_empty() {
            return usage("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return usage("methods must not be empty".into());
        }
        for key in self.method.keys() {
            if key.parse::<Method>().is_err() {
                return usage(format!("[method.{key}]: unknown method"));
            }
        }
        for m in self.parsed_methods()? {
            for &seed in &self.seeds {
                self.run_config(m, seed)?.validate()?;
            }
        }
        Ok(())
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for s in &self.methods {
            let m: Method = s.parse()?;
            if out.contains(&m) {
                return Err(BenchError::Usage(format!("method {m} listed twice")));
            }
            out.push(m);
        }
        Ok(out)
    }

    fn training_for(&self, method: Method) -> TrainingSpec {
        let over = self
            .method
            .iter()
            .find(|(k, _)| k.parse::<Method>().ok() == Some(method))
            .map(|(_, v)| v.clone())
            .unwrap_or_default();
        self.training.overlay(&over)
    }

    fn architecture(&self, features: usize, classes: usize) -> Architecture {
        match self.model.kind {
            ModelKind::Logistic => Architecture::Logistic { features, classes },
            ModelKind::Mlp => Architecture::Mlp {
                features,
                hidden: self.model.hidden.unwrap_or(16),
                classes,
            },
        }
    }

    fn shape(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetSpec::Synthetic { features, classes, .. } => (*features, *classes),
            // filled in from the file by `run_config_for`
            DatasetSpec::Csv { classes, .. } => (0, classes.unwrap_or(2)),
        }
    }

    /// Core run configuration for one (method, seed).
    pub fn run_config(&self, method: Method, seed: u64) -> Result<RunConfig> {
        let (features, classes) = self.shape();
        self.run_config_for(method, seed, features.max(1), classes)
    }

    pub fn run_config_for(&self, method: Method, seed: u64, features: usize, classes: usize) -> Result<RunConfig> {
        let t = self.training_for(method);
        let d = DpConfig::default();
        let dp = DpConfig {
            q: t.q.unwrap_or(d.q),
            sigma: t.sigma.unwrap_or(d.sigma),
            clip_norm: t.clip_norm.unwrap_or(d.clip_norm),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            momentum: t.momentum.unwrap_or(d.momentum),
            max_rounds: t.max_rounds.unwrap_or(d.max_rounds),
            epsilon: t.epsilon.unwrap_or(d.epsilon),
            delta: t.delta.unwrap_or(d.delta),
            hospitals: t.hospitals.unwrap_or(d.hospitals),
        };
        let mut rc = RunConfig::new(method, dp, self.architecture(features, classes), seed);
        if let Some(e) = t.local_epochs {
            rc.fedavg_local_epochs = e;
        }
        if let Some(p) = t.participation {
            rc.participation_fraction = p;
        }
        if method == Method::Dopamine {
            if let Some(e) = t.epsilon_per_round {
                rc.calibration = Calibration::PerRound { epsilon_per_round: e };
            }
            let secure = SecureAggConfig {
                transport: match self.secure.transport {
                    TransportChoice::Loopback => TransportKind::Loopback,
                    TransportChoice::Tcp => TransportKind::Tcp,
                },
                timeout: Duration::from_secs(self.secure.timeout_secs),
                ..SecureAggConfig::default()
            };
            rc.aggregation = match self.secure.mode {
                SecureMode::Off => Aggregation::Plain,
                SecureMode::On => Aggregation::Secure(secure),
                SecureMode::PlaintextAudit => Aggregation::PlaintextAudit(secure),
            };
        }
        Ok(rc)
    }

    /// Training and test sets. Synthetic data holds
    /// `hospitals · samples_per_hospital` training samples, using the
    /// largest hospital count among the configured methods.
    pub fn load_data(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                samples_per_hospital,
                test_samples,
                features,
                classes,
                separation,
                seed,
            } => {
                let k = self
                    .parsed_methods()?
                    .iter()
                    .map(|&m| self.training_for(m).hospitals.unwrap_or(DpConfig::default().hospitals))
                    .max()
                    .unwrap_or(1);
                let n_train = k * samples_per_hospital;
                let all = synth_dataset(n_train + test_samples, *features, *classes, *separation, *seed)?;
                Ok(all.split_at(n_train)?)
            }
            DatasetSpec::Csv {
                path,
                test_fraction,
                classes,
            } => {
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                let file = File::open(&path).map_err(io_err(&path))?;
                let all = Dataset::from_csv(file, *classes, DatasetId::Global)?;
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(BenchError::Usage(format!("test_fraction {test_fraction} must lie in (0, 1)")));
                }
                let n_test = ((all.len() as f64) * test_fraction).round() as usize;
                Ok(all.split_at(all.len() - n_test)?)
            }
        }
    }
}
