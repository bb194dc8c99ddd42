//! Training loops: federated DP-SGD with secure aggregation, plus the
//! centralized (C), centralized DP (CDP), FedAvg (F) and FedAvg with
//! per-hospital DP (FPDP) baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::accountant::{budget_exceeded, AccountantState, PrivacySpend};
use crate::dp::{
    clip_gradient, empty_batch_noise, lemma1_noise_variance, momentum_step, noisy_average,
    per_round_noisy_average, sgd_update, Calibration, DpConfig, MomentumState, NoiseSource,
};
use crate::error::{invalid, Error, Result};
use crate::model::{
    evaluate, loss_and_per_sample_grads, mean_loss, Architecture, Dataset, LabeledSample,
    ModelParams,
};
use crate::rng::{stream, Stream};
use crate::secure_agg::{SecureAggConfig, SecureAggregator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    C,
    Cdp,
    F,
    Fpdp,
    Dopamine,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::C,
        Method::Cdp,
        Method::F,
        Method::Fpdp,
        Method::Dopamine,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::C => "C",
            Method::Cdp => "CDP",
            Method::F => "F",
            Method::Fpdp => "FPDP",
            Method::Dopamine => "DOPAMINE",
        }
    }

    pub fn is_private(self) -> bool {
        matches!(self, Method::Cdp | Method::Fpdp | Method::Dopamine)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// How DOPAMINE rounds combine the hospitals' local models.
#[derive(Clone, Debug, Default)]
pub enum Aggregation {
    #[default]
    Plain,
    Secure(SecureAggConfig),
    /// Secure path, checked every round against the plaintext average of the
    /// same local models.
    PlaintextAudit(SecureAggConfig),
}

/// Largest per-coordinate gap tolerated between the secure and plaintext
/// averages in audit mode (fixed-point rounding at scale 10³).
pub const AUDIT_TOLERANCE: f64 = 5e-4 + 1e-12;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub method: Method,
    pub dp: DpConfig,
    pub architecture: Architecture,
    pub fedavg_local_epochs: usize,
    pub participation_fraction: f64,
    pub calibration: Calibration,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl RunConfig {
    /// Defaults: 5 local epochs; participation 1.0 for DOPAMINE and 0.5 for
    /// the FedAvg baselines.
    pub fn new(method: Method, dp: DpConfig, architecture: Architecture, seed: u64) -> Self {
        let participation_fraction = match method {
            Method::F | Method::Fpdp => 0.5,
            _ => 1.0,
        };
        Self {
            method,
            dp,
            architecture,
            fedavg_local_epochs: 5,
            participation_fraction,
            calibration: Calibration::Multiplier,
            aggregation: Aggregation::Plain,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dp.validate()?;
        if self.fedavg_local_epochs == 0 {
            return invalid("fedavg_local_epochs must be ≥ 1");
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return invalid(format!(
                "participation fraction {} must lie in (0, 1]",
                self.participation_fraction
            ));
        }
        if let Calibration::PerRound { epsilon_per_round } = self.calibration {
            if !(epsilon_per_round > 0.0 && epsilon_per_round.is_finite()) {
                return invalid("per-round ε must be positive");
            }
            if self.method != Method::Dopamine {
                return invalid("per-round calibration applies to DOPAMINE only");
            }
        }
        if !matches!(self.aggregation, Aggregation::Plain) && self.method != Method::Dopamine {
            return invalid("secure aggregation applies to DOPAMINE only");
        }
        Ok(())
    }

    /// Steps that make up one pass over a shard at sampling rate `q`.
    pub fn steps_per_epoch(&self) -> usize {
        (1.0 / self.dp.q).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round (or epoch for the centralized baselines).
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    /// `None` for non-private methods.
    pub epsilon_hat: Option<f64>,
    /// Realized Poisson batch size per hospital (or per step).
    pub batch_sizes: Vec<usize>,
    pub empty_batches: usize,
    /// Audit mode only: max |secure − plaintext| over coordinates.
    pub audit_deviation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    /// Returned model: the last global model whose rounds fit the budget.
    pub model: ModelParams,
    /// Digest of the global model after each committed round; index 0 is the
    /// initial model.
    pub snapshots: Vec<[u8; 32]>,
    /// Round whose charge would have pushed ε̂ past the target.
    pub stopped_at: Option<usize>,
    pub spend: Option<PrivacySpend>,
}

/// Includes each record independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(shard: &Dataset, q: f64, rng: &mut R) -> Vec<LabeledSample> {
    shard
        .samples()
        .iter()
        .filter(|_| rng.random::<f64>() < q)
        .cloned()
        .collect()
}

/// Per-hospital training state.
pub struct HospitalState {
    /// 0-based index; the protocol node id is `id + 1`.
    pub id: usize,
    pub shard: Dataset,
    pub momentum: MomentumState,
    pub sampler: ChaCha20Rng,
    pub noise: NoiseSource<ChaCha20Rng>,
}

impl HospitalState {
    pub fn new(id: usize, shard: Dataset, model_len: usize, seed: u64) -> Self {
        Self {
            id,
            shard,
            momentum: MomentumState::new(model_len),
            sampler: stream(seed, Stream::Sampling(id)),
            noise: NoiseSource::new(stream(seed, Stream::Noise(id))),
        }
    }
}

pub fn make_hospitals(
    train: &Dataset,
    k: usize,
    model_len: usize,
    seed: u64,
) -> Result<Vec<HospitalState>> {
    Ok(train
        .partition(k)?
        .into_iter()
        .enumerate()
        .map(|(i, shard)| HospitalState::new(i, shard, model_len, seed))
        .collect())
}

/// One noisy clipped gradient `g̃` on a Poisson sample of the hospital's
/// shard, evaluated at `model`. Returns the gradient and the realized batch
/// size.
fn private_gradient(
    h: &mut HospitalState,
    model: &ModelParams,
    dp: &DpConfig,
    noise_parties: usize,
    calibration: Calibration,
) -> Result<(Vec<f64>, usize)> {
    let batch = poisson_sample(&h.shard, dp.q, &mut h.sampler);
    if batch.is_empty() {
        let g = match calibration {
            Calibration::Multiplier => empty_batch_noise(
                model.len(),
                dp.sigma,
                dp.clip_norm,
                noise_parties,
                &mut h.noise,
            ),
            Calibration::PerRound { epsilon_per_round } => {
                let var = lemma1_noise_variance(
                    epsilon_per_round,
                    dp.delta,
                    dp.clip_norm,
                    1,
                    noise_parties,
                )?;
                h.noise.gaussian(model.len(), var.sqrt())
            }
        };
        return Ok((g, 0));
    }
    let (_, grads) = loss_and_per_sample_grads(model, &batch)?;
    let clipped = grads
        .iter()
        .map(|g| clip_gradient(g, dp.clip_norm))
        .collect::<Result<Vec<_>>>()?;
    let g = match calibration {
        Calibration::Multiplier => noisy_average(
            &clipped,
            dp.sigma,
            dp.clip_norm,
            noise_parties,
            &mut h.noise,
        )?,
        Calibration::PerRound { epsilon_per_round } => per_round_noisy_average(
            &clipped,
            epsilon_per_round,
            dp.delta,
            dp.clip_norm,
            noise_parties,
            &mut h.noise,
        )?,
    };
    Ok((g, batch.len()))
}

/// Plain mean gradient on a Poisson sample; zero for an empty sample.
fn plain_gradient(h: &mut HospitalState, model: &ModelParams, q: f64) -> Result<(Vec<f64>, usize)> {
    let batch = poisson_sample(&h.shard, q, &mut h.sampler);
    if batch.is_empty() {
        return Ok((vec![0.0; model.len()], 0));
    }
    let (_, grads) = loss_and_per_sample_grads(model, &batch)?;
    let m = batch.len() as f64;
    let mut avg = vec![0.0; model.len()];
    for g in &grads {
        for (a, v) in avg.iter_mut().zip(g.values()) {
            *a += v;
        }
    }
    for a in avg.iter_mut() {
        *a /= m;
    }
    Ok((avg, batch.len()))
}

/// Coordinate-wise mean, summed in the given order.
pub fn plain_average(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut sum = vec![0.0; first.len()];
    for m in models {
        if m.len() != sum.len() {
            return invalid("models differ in length");
        }
        for (s, v) in sum.iter_mut().zip(m.values()) {
            *s += v;
        }
    }
    let k = models.len() as f64;
    first.with_values(sum.into_iter().map(|s| s / k).collect())
}

/// Aggregation backend instantiated from [`Aggregation`].
pub enum Aggregator {
    Plain,
    Secure(Box<SecureAggregator>),
    Audit(Box<SecureAggregator>),
}

impl Aggregator {
    pub fn new(kind: &Aggregation, hospitals: usize, seed: u64) -> Result<Self> {
        Ok(match kind {
            Aggregation::Plain => Aggregator::Plain,
            Aggregation::Secure(cfg) => Aggregator::Secure(Box::new(SecureAggregator::new(
                hospitals,
                cfg.clone(),
                seed,
            )?)),
            Aggregation::PlaintextAudit(cfg) => Aggregator::Audit(Box::new(SecureAggregator::new(
                hospitals,
                cfg.clone(),
                seed,
            )?)),
        })
    }

    /// Average of `local` (in order) and, in audit mode, the largest gap to
    /// the plaintext average.
    pub fn aggregate(
        &mut self,
        local: &[(usize, &ModelParams)],
    ) -> Result<(ModelParams, Option<f64>)> {
        let plain = || plain_average(&local.iter().map(|(_, m)| *m).collect::<Vec<_>>());
        match self {
            Aggregator::Plain => Ok((plain()?, None)),
            Aggregator::Secure(s) => Ok((s.aggregate(local)?, None)),
            Aggregator::Audit(s) => {
                let secure = s.aggregate(local)?;
                let reference = plain()?;
                let gap = secure
                    .values()
                    .iter()
                    .zip(reference.values())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                if gap > AUDIT_TOLERANCE {
                    return Err(Error::Protocol(format!(
                        "secure average deviates from plaintext by {gap:.3e}"
                    )));
                }
                Ok((secure, Some(gap)))
            }
        }
    }

    pub fn broadcast_initial(&mut self, model: &ModelParams) -> Result<()> {
        match self {
            Aggregator::Plain => Ok(()),
            Aggregator::Secure(s) | Aggregator::Audit(s) => {
                let received = s.broadcast_initial(model)?;
                if received != *model {
                    return Err(Error::Protocol(
                        "broadcast model was altered in transit".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn finish(&mut self, model: &ModelParams) -> Result<()> {
        match self {
            Aggregator::Plain => Ok(()),
            Aggregator::Secure(s) | Aggregator::Audit(s) => s.finish(model).map(|_| ()),
        }
    }
}

/// Privacy ledger for DOPAMINE/CDP: RDP accounting in multiplier mode,
/// linear composition of the per-round ε in per-round mode.
#[derive(Clone, Debug)]
pub enum Ledger {
    Rdp(AccountantState),
    Linear {
        epsilon_per_round: f64,
        rounds: usize,
    },
}

impl Ledger {
    pub fn new(dp: &DpConfig, calibration: Calibration) -> Result<Self> {
        Ok(match calibration {
            Calibration::Multiplier => {
                Ledger::Rdp(AccountantState::with_default_orders(dp.q, dp.sigma)?)
            }
            Calibration::PerRound { epsilon_per_round } => Ledger::Linear {
                epsilon_per_round,
                rounds: 0,
            },
        })
    }

    pub fn preview(&self, steps: usize, delta: f64) -> PrivacySpend {
        match self {
            Ledger::Rdp(st) => st.preview(steps, delta),
            Ledger::Linear {
                epsilon_per_round,
                rounds,
            } => PrivacySpend {
                epsilon_hat: epsilon_per_round * (rounds + steps) as f64,
                delta,
                rounds: rounds + steps,
            },
        }
    }

    pub fn charge(&mut self, steps: usize, delta: f64) -> Result<PrivacySpend> {
        match self {
            Ledger::Rdp(st) => crate::accountant::compose_and_convert(st, steps, delta),
            Ledger::Linear { rounds, .. } => {
                *rounds += steps;
                Ok(self.preview(0, delta))
            }
        }
    }
}

pub enum RoundResult {
    Committed {
        model: ModelParams,
        spend: PrivacySpend,
        batch_sizes: Vec<usize>,
        audit_deviation: Option<f64>,
    },
    BudgetExceeded {
        spend: PrivacySpend,
    },
}

/// One round of federated DP-SGD: every hospital takes exactly one noisy
/// clipped momentum step from `global`, the privacy cost of the round is
/// checked against the target, and the local models are averaged. Momentum
/// buffers and the ledger change only when the round commits.
pub fn dopamine_round(
    global: &ModelParams,
    hospitals: &mut [HospitalState],
    dp: &DpConfig,
    calibration: Calibration,
    ledger: &mut Ledger,
    aggregator: &mut Aggregator,
) -> Result<RoundResult> {
    let k = hospitals.len();
    let steps: Vec<(MomentumState, ModelParams, usize)> = hospitals
        .par_iter_mut()
        .map(|h| {
            let (g, m) = private_gradient(h, global, dp, k, calibration)?;
            let mom = momentum_step(&h.momentum, &g, dp.momentum)?;
            let local = sgd_update(global, &mom, dp.learning_rate)?;
            Ok((mom, local, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let spend = ledger.preview(1, dp.delta);
    if budget_exceeded(&spend, dp.epsilon) {
        return Ok(RoundResult::BudgetExceeded { spend });
    }
    let local: Vec<(usize, &ModelParams)> =
        steps.iter().enumerate().map(|(i, s)| (i, &s.1)).collect();
    let (model, audit_deviation) = aggregator.aggregate(&local)?;
    let spend = ledger.charge(1, dp.delta)?;
    let batch_sizes = steps.iter().map(|s| s.2).collect();
    for (h, (mom, _, _)) in hospitals.iter_mut().zip(steps) {
        h.momentum = mom;
    }
    Ok(RoundResult::Committed {
        model,
        spend,
        batch_sizes,
        audit_deviation,
    })
}

fn init_model(config: &RunConfig) -> ModelParams {
    config
        .architecture
        .init(&mut stream(config.seed, Stream::ModelInit))
}

fn check_data(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    config.validate()?;
    let arch = &config.architecture;
    for d in [train, test] {
        if d.num_features() != arch.num_features() || d.num_classes() > arch.num_classes() {
            return invalid(format!(
                "dataset ({} features, {} classes) does not fit the model ({} features, {} classes)",
                d.num_features(),
                d.num_classes(),
                arch.num_features(),
                arch.num_classes()
            ));
        }
    }
    if train.len() < config.dp.hospitals {
        return invalid("fewer training samples than hospitals");
    }
    if let Some(w) = config.dp.delta_warning(train.len()) {
        log::warn!("{w}");
    }
    Ok(())
}

fn record(
    round: usize,
    model: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    epsilon_hat: Option<f64>,
    batch_sizes: Vec<usize>,
    audit_deviation: Option<f64>,
) -> Result<RoundMetrics> {
    let eval = evaluate(model, test)?;
    let empty_batches = batch_sizes.iter().filter(|&&b| b == 0).count();
    Ok(RoundMetrics {
        round,
        train_loss: mean_loss(model, train.samples())?,
        test_accuracy: eval.accuracy,
        test_loss: eval.loss,
        epsilon_hat,
        batch_sizes,
        empty_batches,
        audit_deviation,
    })
}

/// Called with each round's metrics as soon as the round commits.
pub type Observer<'a> = dyn FnMut(&RoundMetrics) + 'a;

/// Runs `config.method` for up to `dp.max_rounds` rounds.
pub fn run(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    run_observed(config, train, test, &mut |_| {})
}

pub fn run_observed(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut Observer<'_>,
) -> Result<RunOutcome> {
    check_data(config, train, test)?;
    match config.method {
        Method::C => run_baseline_c(config, train, test, observer),
        Method::Cdp | Method::Dopamine => run_dp_rounds(config, train, test, observer),
        Method::F => run_fedavg(config, train, test, false, observer),
        Method::Fpdp => run_fedavg(config, train, test, true, observer),
    }
}

/// DOPAMINE over `dp.hospitals` shards, or CDP: one hospital holding the
/// whole training set, noise variance `σ²C²`, one accountant step per round.
fn run_dp_rounds(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut Observer<'_>,
) -> Result<RunOutcome> {
    let dp = &config.dp;
    let hospitals = if config.method == Method::Cdp {
        1
    } else {
        dp.hospitals
    };
    let mut global = init_model(config);
    let mut hs = make_hospitals(train, hospitals, global.len(), config.seed)?;
    let mut ledger = Ledger::new(dp, config.calibration)?;
    let mut aggregator = Aggregator::new(&config.aggregation, hospitals, config.seed)?;
    aggregator.broadcast_initial(&global)?;
    let mut metrics = Vec::with_capacity(dp.max_rounds);
    let mut snapshots = vec![global.digest()];
    let mut stopped_at = None;
    let mut spend = ledger.preview(0, dp.delta);
    for t in 1..=dp.max_rounds {
        match dopamine_round(
            &global,
            &mut hs,
            dp,
            config.calibration,
            &mut ledger,
            &mut aggregator,
        )? {
            RoundResult::BudgetExceeded { spend: over } => {
                log::info!(
                    "{} seed {}: round {t} would reach ε̂ = {:.4} > {}; stopping",
                    config.method,
                    config.seed,
                    over.epsilon_hat,
                    dp.epsilon
                );
                stopped_at = Some(t);
                break;
            }
            RoundResult::Committed {
                model,
                spend: s,
                batch_sizes,
                audit_deviation,
            } => {
                global = model;
                spend = s;
                snapshots.push(global.digest());
                let m = record(
                    t,
                    &global,
                    train,
                    test,
                    Some(s.epsilon_hat),
                    batch_sizes,
                    audit_deviation,
                )?;
                observer(&m);
                metrics.push(m);
            }
        }
    }
    aggregator.finish(&global)?;
    Ok(RunOutcome {
        method: config.method,
        seed: config.seed,
        metrics,
        model: global,
        snapshots,
        stopped_at,
        spend: Some(spend),
    })
}

/// Centralized momentum SGD on Poisson-sampled minibatches, without
/// clipping, noise or accounting. One epoch is `⌈1/q⌉` steps.
fn run_baseline_c(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut Observer<'_>,
) -> Result<RunOutcome> {
    let dp = &config.dp;
    let mut global = init_model(config);
    let mut h = make_hospitals(train, 1, global.len(), config.seed)?.remove(0);
    let mut metrics = Vec::with_capacity(dp.max_rounds);
    let mut snapshots = vec![global.digest()];
    for epoch in 1..=dp.max_rounds {
        let mut sizes = Vec::with_capacity(config.steps_per_epoch());
        for _ in 0..config.steps_per_epoch() {
            let (g, m) = plain_gradient(&mut h, &global, dp.q)?;
            h.momentum = momentum_step(&h.momentum, &g, dp.momentum)?;
            global = sgd_update(&global, &h.momentum, dp.learning_rate)?;
            sizes.push(m);
        }
        snapshots.push(global.digest());
        let m = record(epoch, &global, train, test, None, sizes, None)?;
        observer(&m);
        metrics.push(m);
    }
    Ok(RunOutcome {
        method: config.method,
        seed: config.seed,
        metrics,
        model: global,
        snapshots,
        stopped_at: None,
        spend: None,
    })
}

/// Hospitals drawn for a FedAvg round, without replacement, ascending.
pub fn select_participants<R: Rng + ?Sized>(k: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let m = ((k as f64 * fraction).ceil() as usize).clamp(1, k);
    let mut chosen = index::sample(rng, k, m).into_vec();
    chosen.sort_unstable();
    chosen
}

/// FedAvg: each round a random subset of hospitals runs
/// `fedavg_local_epochs` epochs of local momentum SGD from the global model
/// and the server averages the returned weights. With `private`, every local
/// step is a DP-SGD step with the full `σ²C²` noise on the hospital's own
/// batch, each hospital keeps its own accountant, and the run reports (and
/// stops on) the worst hospital's ε̂.
fn run_fedavg(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    private: bool,
    observer: &mut Observer<'_>,
) -> Result<RunOutcome> {
    let dp = &config.dp;
    let k = dp.hospitals;
    let mut global = init_model(config);
    let mut hs = make_hospitals(train, k, global.len(), config.seed)?;
    let mut participation = stream(config.seed, Stream::Participation);
    let local_steps = config.fedavg_local_epochs * config.steps_per_epoch();
    let mut ledgers = if private {
        (0..k)
            .map(|_| AccountantState::with_default_orders(dp.q, dp.sigma))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let worst = |ledgers: &[AccountantState]| -> Option<PrivacySpend> {
        ledgers
            .iter()
            .map(|l| l.spend(dp.delta))
            .max_by(|a, b| a.epsilon_hat.total_cmp(&b.epsilon_hat))
    };
    let mut metrics = Vec::with_capacity(dp.max_rounds);
    let mut snapshots = vec![global.digest()];
    let mut stopped_at = None;
    for t in 1..=dp.max_rounds {
        let chosen = select_participants(k, config.participation_fraction, &mut participation);
        if private {
            let over = chosen
                .iter()
                .map(|&i| ledgers[i].preview(local_steps, dp.delta))
                .find(|s| budget_exceeded(s, dp.epsilon));
            if let Some(s) = over {
                log::info!(
                    "{} seed {}: round {t} would reach ε̂ = {:.4} > {}; stopping",
                    config.method,
                    config.seed,
                    s.epsilon_hat,
                    dp.epsilon
                );
                stopped_at = Some(t);
                break;
            }
        }
        let results: Vec<(ModelParams, MomentumState, Vec<usize>)> = hs
            .par_iter_mut()
            .filter(|h| chosen.contains(&h.id))
            .map(|h| {
                let mut local = global.clone();
                let mut mom = h.momentum.clone();
                let mut sizes = Vec::with_capacity(local_steps);
                for _ in 0..local_steps {
                    let (g, m) = if private {
                        private_gradient(h, &local, dp, 1, Calibration::Multiplier)?
                    } else {
                        plain_gradient(h, &local, dp.q)?
                    };
                    mom = momentum_step(&mom, &g, dp.momentum)?;
                    local = sgd_update(&local, &mom, dp.learning_rate)?;
                    sizes.push(m);
                }
                Ok((local, mom, sizes))
            })
            .collect::<Result<Vec<_>>>()?;
        global = plain_average(&results.iter().map(|r| &r.0).collect::<Vec<_>>())?;
        let mut sizes = Vec::new();
        for (&i, (_, mom, s)) in chosen.iter().zip(results) {
            hs[i].momentum = mom;
            sizes.extend(s);
            if private {
                crate::accountant::compose_and_convert(&mut ledgers[i], local_steps, dp.delta)?;
            }
        }
        snapshots.push(global.digest());
        let eps = if private {
            worst(&ledgers).map(|s| s.epsilon_hat)
        } else {
            None
        };
        let m = record(t, &global, train, test, eps, sizes, None)?;
        observer(&m);
        metrics.push(m);
    }
    Ok(RunOutcome {
        method: config.method,
        seed: config.seed,
        metrics,
        model: global,
        snapshots,
        stopped_at,
        spend: if private { worst(&ledgers) } else { None },
    })
}
