//! Privacy accounting for the Poisson-subsampled Gaussian mechanism via
//! Rényi differential privacy: per-step RDP at a grid of orders, linear
//! composition over rounds, and conversion to an `(ε, δ)` bound.

use statrs::function::erf::erfc;

use crate::error::{invalid, Result};

/// The orders `{1 + k/4 : k = 1..16} ∪ {6, 8, 12, 16, 24, 32, 48, 64}` plus a
/// finer fill (sixteenths up to 4, eighths up to 64, then about 2.5% spacing
/// up to 512). Per-step RDP can rise steeply in the order, so a coarse grid
/// can miss the minimizing order by several percent in ε.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=48).map(|k| 1.0 + k as f64 / 16.0).collect();
    orders.extend((25..=504).map(|k| 1.0 + k as f64 / 8.0));
    let mut a = 64.0f64;
    while a < 512.0 {
        a = (a * 1.025).ceil().min(512.0);
        orders.push(a);
    }
    orders.extend(coarse_orders());
    orders.sort_by(f64::total_cmp);
    orders.dedup();
    orders
}

/// The coarse order grid `{1 + k/4 : k = 1..16} ∪ {6, 8, 12, 16, 24, 32, 48, 64}`.
pub fn coarse_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=16).map(|k| 1.0 + k as f64 / 4.0).collect();
    orders.extend([6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0]);
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    // asymptotic series of erfc(x)·x·√π·e^{x²}
    let r = 1.0 / (x * x);
    let series = 1.0 - 0.5 * r + 0.75 * r * r - 1.875 * r * r * r + 6.5625 * r * r * r * r;
    -x * x - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term =
            log_binom + kf * lq + (alpha - k) as f64 * l1q + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = std::f64::consts::SQRT_2 * sigma;
    // generalized binomial coefficient C(alpha, i), tracked as sign and log |.|
    let (mut coef_sign, mut log_coef) = (1.0f64, 0.0f64);
    let mut i = 0u32;
    loop {
        let fi = i as f64;
        if i > 0 {
            let factor = (alpha - fi + 1.0) / fi;
            if factor == 0.0 {
                break;
            }
            coef_sign *= factor.signum();
            log_coef += factor.abs().ln();
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / s2);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / s2);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef_sign > 0.0 {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            a0 = log_sub(a0, log_s0);
            a1 = log_sub(a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -30.0 && fi > alpha {
            break;
        }
        if i > 100_000 {
            break;
        }
    }
    log_add(a0, a1)
}

/// Per-step RDP of order `alpha` for the Gaussian mechanism with noise
/// multiplier `sigma` applied to a Poisson sample drawn at rate `q`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("q = {q} must lie in (0, 1]"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma = {sigma} must be positive"));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return invalid(format!("Rényi order {alpha} must exceed 1"));
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(q, sigma, alpha as u64)
    } else {
        log_a_fractional(q, sigma, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// `min_α (rdp(α) + ln(1/δ)/(α − 1))` over the supplied orders.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> f64 {
    let log_inv_delta = -delta.ln();
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| r + log_inv_delta / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Cumulative `(ε̂, δ)` after `rounds` charged steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacySpend {
    pub epsilon_hat: f64,
    pub delta: f64,
    pub rounds: usize,
}

/// Running RDP ledger for a fixed `(q, σ)`. Single-writer.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountantState {
    q: f64,
    sigma: f64,
    orders: Vec<f64>,
    per_step: Vec<f64>,
    rdp_ledger: Vec<f64>,
    rounds: usize,
}

impl AccountantState {
    /// `sigma = 0` is accepted and yields an infinite per-step cost.
    pub fn new(q: f64, sigma: f64, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
            return invalid("Rényi orders must be finite and > 1");
        }
        let per_step = if sigma == 0.0 {
            if !(q > 0.0 && q <= 1.0) {
                return invalid(format!("q = {q} must lie in (0, 1]"));
            }
            vec![f64::INFINITY; orders.len()]
        } else {
            orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
                .collect::<Result<Vec<_>>>()?
        };
        let rdp_ledger = vec![0.0; orders.len()];
        Ok(Self {
            q,
            sigma,
            orders,
            per_step,
            rdp_ledger,
            rounds: 0,
        })
    }

    pub fn with_default_orders(q: f64, sigma: f64) -> Result<Self> {
        Self::new(q, sigma, default_orders())
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn per_step(&self) -> &[f64] {
        &self.per_step
    }

    pub fn rdp_ledger(&self) -> &[f64] {
        &self.rdp_ledger
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Current spend without charging anything.
    pub fn spend(&self, delta: f64) -> PrivacySpend {
        let epsilon_hat = if self.rounds == 0 {
            0.0
        } else {
            epsilon_from_rdp(&self.orders, &self.rdp_ledger, delta)
        };
        PrivacySpend {
            epsilon_hat,
            delta,
            rounds: self.rounds,
        }
    }

    /// Spend that `steps` further charges would produce, leaving the ledger
    /// untouched.
    pub fn preview(&self, steps: usize, delta: f64) -> PrivacySpend {
        let mut next = self.clone();
        next.charge(steps);
        next.spend(delta)
    }

    fn charge(&mut self, steps: usize) {
        if steps == 0 {
            return;
        }
        self.rounds += steps;
        let t = self.rounds as f64;
        for (total, step) in self.rdp_ledger.iter_mut().zip(&self.per_step) {
            *total = step * t;
        }
    }
}

/// Charges `steps` more subsampled-Gaussian steps and converts the total.
pub fn compose_and_convert(
    state: &mut AccountantState,
    steps: usize,
    delta: f64,
) -> Result<PrivacySpend> {
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("δ = {delta} must lie in (0, 1)"));
    }
    state.charge(steps);
    Ok(state.spend(delta))
}

pub fn budget_exceeded(spend: &PrivacySpend, target_epsilon: f64) -> bool {
    spend.epsilon_hat > target_epsilon
}

/// ε̂ after each of rounds `1..=rounds`.
pub fn epsilon_curve(q: f64, sigma: f64, delta: f64, rounds: usize) -> Result<Vec<PrivacySpend>> {
    let mut state = AccountantState::with_default_orders(q, sigma)?;
    (0..rounds)
        .map(|_| compose_and_convert(&mut state, 1, delta))
        .collect()
}

/// First round whose ε̂ exceeds `target`, if any within `max_rounds`.
pub fn first_exceeding_round(
    q: f64,
    sigma: f64,
    delta: f64,
    target: f64,
    max_rounds: usize,
) -> Result<Option<usize>> {
    Ok(epsilon_curve(q, sigma, delta, max_rounds)?
        .iter()
        .find(|s| budget_exceeded(s, target))
        .map(|s| s.rounds))
}
