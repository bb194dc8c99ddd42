//! Per-sample clipping, Gaussian noise calibration, noisy averaging and
//! heavy-ball momentum for the hospital-side DP-SGD step.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelParams, PerSampleGradient};

/// Hyperparameters of one federated DP-SGD run.
#[derive(Clone, Debug, PartialEq)]
pub struct DpConfig {
    /// Poisson sampling probability.
    pub q: f64,
    /// Noise multiplier: noise std relative to `clip_norm`.
    pub sigma: f64,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_rounds: usize,
    /// Target ε; `f64::INFINITY` disables the early stop.
    pub epsilon: f64,
    pub delta: f64,
    pub hospitals: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            q: 0.3,
            sigma: 1.0,
            clip_norm: 1.0,
            learning_rate: 0.1,
            momentum: 0.9,
            max_rounds: 100,
            epsilon: 1.0,
            delta: 1e-4,
            hospitals: 10,
        }
    }
}

impl DpConfig {
    /// `sigma = 0` is accepted (no privacy, ε̂ = ∞) so that the non-private
    /// reductions can be expressed; `hospitals = 1` is the centralized case.
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return invalid(format!("q = {} must lie in (0, 1]", self.q));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma = {} must be finite and ≥ 0", self.sigma));
        }
        if !(self.clip_norm > 0.0) {
            return invalid(format!("clip norm C = {} must be > 0", self.clip_norm));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum β = {} must lie in [0, 1)", self.momentum));
        }
        if self.max_rounds == 0 {
            return invalid("max_rounds must be ≥ 1");
        }
        if !(self.epsilon > 0.0) {
            return invalid(format!("target ε = {} must be > 0", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("δ = {} must lie in (0, 1)", self.delta));
        }
        if self.hospitals == 0 {
            return invalid("need at least one hospital");
        }
        Ok(())
    }

    /// Warning text when δ is not below `1/|D|`.
    pub fn delta_warning(&self, dataset_len: usize) -> Option<String> {
        (self.delta >= 1.0 / dataset_len as f64).then(|| {
            format!(
                "δ = {} is not below 1/|D| = {:.3e}; the guarantee is weak",
                self.delta,
                1.0 / dataset_len as f64
            )
        })
    }
}

/// How the per-hospital noise is calibrated.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Calibration {
    /// Noise variance `σ²C²/K` added to the clipped-gradient sum; ε tracked by
    /// the moments accountant.
    #[default]
    Multiplier,
    /// Noise variance from the per-round closed form at `epsilon_per_round`,
    /// added to the clipped-gradient average; ε composes linearly.
    PerRound { epsilon_per_round: f64 },
}

/// A hospital's momentum buffer `ĝ_k`, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub buffer: Vec<f64>,
    pub round: usize,
}

impl MomentumState {
    pub fn new(len: usize) -> Self {
        Self {
            buffer: vec![0.0; len],
            round: 0,
        }
    }
}

/// Seeded source of i.i.d. standard normals. Single-owner.
pub struct NoiseSource<R> {
    rng: R,
}

impl<R: Rng> NoiseSource<R> {
    pub fn new(rng: R) -> Self {
        Self { rng }
    }

    pub fn gaussian(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }
}

/// `g / max(1, ‖g‖₂ / C)`.
pub fn clip_gradient(g: &PerSampleGradient, clip_norm: f64) -> Result<PerSampleGradient> {
    if !(clip_norm > 0.0) {
        return invalid(format!("clip norm {clip_norm} must be > 0"));
    }
    if g.values().iter().any(|v| !v.is_finite()) {
        return invalid("gradient has non-finite entries");
    }
    let scale = (g.norm() / clip_norm).max(1.0);
    Ok(PerSampleGradient(
        g.values().iter().map(|v| v / scale).collect(),
    ))
}

/// Per-coordinate std of one hospital's noise share: `σC/√K`. Zero when
/// `σ = 0`, even for an unbounded clip norm.
pub fn hospital_noise_std(sigma: f64, clip_norm: f64, hospitals: usize) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    sigma * clip_norm / (hospitals as f64).sqrt()
}

/// `(Σ clipped_i + z) / m` with `z ~ N(0, σ²C²/K · I)` and `m` the realized
/// batch size.
pub fn noisy_average<R: Rng>(
    clipped: &[PerSampleGradient],
    sigma: f64,
    clip_norm: f64,
    hospitals: usize,
    noise: &mut NoiseSource<R>,
) -> Result<Vec<f64>> {
    let Some(first) = clipped.first() else {
        return Err(Error::EmptyBatch);
    };
    let len = first.values().len();
    let mut sum = vec![0.0; len];
    for (i, g) in clipped.iter().enumerate() {
        if g.values().len() != len {
            return invalid(format!(
                "gradient {i} has length {}, expected {len}",
                g.values().len()
            ));
        }
        if g.norm() > clip_norm + 1e-9 {
            return invalid(format!(
                "gradient {i} has norm {} above C = {clip_norm}",
                g.norm()
            ));
        }
        for (s, v) in sum.iter_mut().zip(g.values()) {
            *s += v;
        }
    }
    let z = noise.gaussian(len, hospital_noise_std(sigma, clip_norm, hospitals));
    let m = clipped.len() as f64;
    Ok(sum.iter().zip(&z).map(|(s, n)| (s + n) / m).collect())
}

/// Noise share of a hospital whose Poisson sample came back empty: the same
/// draw as [`noisy_average`] with batch size 1 and a zero gradient sum.
pub fn empty_batch_noise<R: Rng>(
    len: usize,
    sigma: f64,
    clip_norm: f64,
    hospitals: usize,
    noise: &mut NoiseSource<R>,
) -> Vec<f64> {
    noise.gaussian(len, hospital_noise_std(sigma, clip_norm, hospitals))
}

/// `mean(clipped) + n_k` with `n_k` drawn from the per-round closed form.
pub fn per_round_noisy_average<R: Rng>(
    clipped: &[PerSampleGradient],
    epsilon: f64,
    delta: f64,
    clip_norm: f64,
    hospitals: usize,
    noise: &mut NoiseSource<R>,
) -> Result<Vec<f64>> {
    let Some(first) = clipped.first() else {
        return Err(Error::EmptyBatch);
    };
    let len = first.values().len();
    let var = lemma1_noise_variance(epsilon, delta, clip_norm, clipped.len(), hospitals)?;
    let m = clipped.len() as f64;
    let mut avg = vec![0.0; len];
    for g in clipped {
        for (a, v) in avg.iter_mut().zip(g.values()) {
            *a += v / m;
        }
    }
    let z = noise.gaussian(len, var.sqrt());
    Ok(avg.iter().zip(&z).map(|(a, n)| a + n).collect())
}

/// `ĝ ← g̃ + β ĝ`.
pub fn momentum_step(
    state: &MomentumState,
    noisy_grad: &[f64],
    beta: f64,
) -> Result<MomentumState> {
    if noisy_grad.len() != state.buffer.len() {
        return invalid(format!(
            "gradient length {} does not match momentum buffer {}",
            noisy_grad.len(),
            state.buffer.len()
        ));
    }
    Ok(MomentumState {
        buffer: noisy_grad
            .iter()
            .zip(&state.buffer)
            .map(|(g, b)| g + beta * b)
            .collect(),
        round: state.round + 1,
    })
}

/// `w ← w − η ĝ`.
pub fn sgd_update(model: &ModelParams, momentum: &MomentumState, eta: f64) -> Result<ModelParams> {
    if momentum.buffer.len() != model.len() {
        return invalid(format!(
            "momentum length {} does not match model {}",
            momentum.buffer.len(),
            model.len()
        ));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return invalid(format!("learning rate {eta} must be finite and ≥ 0"));
    }
    model.with_values(
        model
            .values()
            .iter()
            .zip(&momentum.buffer)
            .map(|(w, b)| w - eta * b)
            .collect(),
    )
}

fn check_eps_delta(epsilon: f64, delta: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return invalid(format!("ε = {epsilon} must be positive"));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return invalid(format!(
            "δ = {delta} must lie in (0, 1.25) for ln(1.25/δ) > 0"
        ));
    }
    Ok(())
}

/// Per-hospital variance `2 ln(1.25/δ) C² / (ε² |D_k^t|² K)`.
pub fn lemma1_noise_variance(
    epsilon: f64,
    delta: f64,
    clip_norm: f64,
    batch_size: usize,
    hospitals: usize,
) -> Result<f64> {
    check_eps_delta(epsilon, delta)?;
    if !(clip_norm > 0.0) || batch_size == 0 || hospitals == 0 {
        return invalid("C, batch size and K must be positive");
    }
    let m = batch_size as f64;
    Ok(2.0 * (1.25 / delta).ln() * clip_norm * clip_norm
        / (epsilon * epsilon * m * m * hospitals as f64))
}

/// Classic Gaussian mechanism: `2 ln(1.25/δ) Δ₂² / ε²`.
pub fn gaussian_mechanism_variance(epsilon: f64, delta: f64, l2_sensitivity: f64) -> Result<f64> {
    check_eps_delta(epsilon, delta)?;
    if !(l2_sensitivity > 0.0) {
        return invalid(format!("sensitivity {l2_sensitivity} must be positive"));
    }
    Ok(2.0 * (1.25 / delta).ln() * l2_sensitivity * l2_sensitivity / (epsilon * epsilon))
}

/// Guarantee against a hospital that can cancel its own noise share:
/// `ε √(K/(K−1))`.
pub fn hospital_view_epsilon(epsilon: f64, hospitals: usize) -> Result<f64> {
    if hospitals < 2 {
        return invalid(format!("hospital view needs K ≥ 2, got {hospitals}"));
    }
    let k = hospitals as f64;
    Ok(epsilon * (k / (k - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn noise(seed: u64) -> NoiseSource<ChaCha20Rng> {
        NoiseSource::new(ChaCha20Rng::seed_from_u64(seed))
    }

    fn sample_variance(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn clipping_halves_long_gradient() {
        let g = PerSampleGradient(vec![0.0, 4.0 * 0.6, 4.0 * 0.8]);
        let c = clip_gradient(&g, 2.0).unwrap();
        assert!((c.norm() - 2.0).abs() < 1e-12);
        for (a, b) in c.values().iter().zip(g.values()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_is_identity_inside_ball() {
        let g = PerSampleGradient(vec![0.6, 0.8]);
        assert_eq!(clip_gradient(&g, 2.0).unwrap(), g);
        let z = PerSampleGradient(vec![0.0; 4]);
        assert_eq!(clip_gradient(&z, 1.0).unwrap(), z);
        assert!(clip_gradient(&PerSampleGradient(vec![f64::NAN]), 1.0).is_err());
        assert!(clip_gradient(&g, 0.0).is_err());
    }

    #[test]
    fn zero_sigma_gives_exact_mean() {
        let g = vec![
            PerSampleGradient(vec![0.5, -0.5]),
            PerSampleGradient(vec![0.1, 0.3]),
        ];
        let avg = noisy_average(&g, 0.0, 1.0, 10, &mut noise(0)).unwrap();
        assert!((avg[0] - 0.3).abs() < 1e-15 && (avg[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_signalled() {
        assert!(matches!(
            noisy_average(&[], 1.0, 1.0, 1, &mut noise(0)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn unclipped_gradient_is_rejected() {
        let g = vec![PerSampleGradient(vec![3.0, 4.0])];
        assert!(noisy_average(&g, 1.0, 1.0, 1, &mut noise(0)).is_err());
    }

    #[test]
    fn single_hospital_noise_has_unit_variance() {
        let mut src = noise(1);
        let zero = [PerSampleGradient(vec![0.0])];
        let draws: Vec<f64> = (0..100_000)
            .map(|_| noisy_average(&zero, 1.0, 1.0, 1, &mut src).unwrap()[0])
            .collect();
        let var = sample_variance(&draws);
        // chi-square: relative std of the sample variance is √(2/n) ≈ 0.45%
        assert!((var - 1.0).abs() <= 0.02, "variance {var}");
    }

    #[test]
    fn ten_hospitals_get_a_tenth_of_the_variance() {
        let zero = [PerSampleGradient(vec![0.0])];
        let draw = |k: usize, seed: u64| -> f64 {
            let mut src = noise(seed);
            let x: Vec<f64> = (0..100_000)
                .map(|_| noisy_average(&zero, 1.3, 0.7, k, &mut src).unwrap()[0])
                .collect();
            sample_variance(&x)
        };
        let ratio = draw(10, 2) / draw(1, 3);
        assert!((ratio - 0.1).abs() <= 0.003, "ratio {ratio}");
    }

    #[test]
    fn momentum_examples() {
        let s0 = MomentumState::new(1);
        assert_eq!(momentum_step(&s0, &[2.5], 0.0).unwrap().buffer, vec![2.5]);
        let s1 = momentum_step(&s0, &[1.0], 0.5).unwrap();
        let s2 = momentum_step(&s1, &[1.0], 0.5).unwrap();
        assert_eq!(s1.buffer, vec![1.0]);
        assert_eq!(s2.buffer, vec![1.5]);
        assert_eq!(s2.round, 2);
        assert!(momentum_step(&s0, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn momentum_matches_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let beta = 0.9;
        let history: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut state = MomentumState::new(5);
        for (t, g) in history.iter().enumerate() {
            state = momentum_step(&state, g, beta).unwrap();
            for j in 0..5 {
                let closed: f64 = (0..=t)
                    .map(|i| beta.powi(i as i32) * history[t - i][j])
                    .sum();
                assert!((state.buffer[j] - closed).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sgd_update_examples() {
        use crate::model::LayerShape;
        let shape = vec![LayerShape::new("bias", &[1])];
        let w = ModelParams::new(vec![1.0], shape).unwrap();
        let mom = MomentumState {
            buffer: vec![2.0],
            round: 1,
        };
        assert!((sgd_update(&w, &mom, 0.1).unwrap().values()[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_update(&w, &mom, 0.0).unwrap(), w);
        assert_eq!(sgd_update(&w, &MomentumState::new(1), 0.3).unwrap(), w);
        assert!(sgd_update(&w, &MomentumState::new(2), 0.1).is_err());
    }

    #[test]
    fn per_round_variance_closed_form() {
        // 2 ln(12500) / 1e5, evaluated to 40 digits with mpmath
        let v = lemma1_noise_variance(1.0, 1e-4, 1.0, 100, 10).unwrap();
        assert!((v - 1.886_696_784_658_078_5e-4).abs() <= 1e-9);
        let half = lemma1_noise_variance(1.0, 1e-4, 1.0, 100, 20).unwrap();
        assert!((half / v - 0.5).abs() < 1e-14);
        let quad = lemma1_noise_variance(1.0, 1e-4, 2.0, 100, 10).unwrap();
        assert!((quad / v - 4.0).abs() < 1e-14);
        assert!(lemma1_noise_variance(1.0, 1.25, 1.0, 100, 10).is_err());
        assert!(lemma1_noise_variance(1.0, 2.0, 1.0, 100, 10).is_err());
    }

    #[test]
    fn gaussian_mechanism_closed_form() {
        // 2 ln(1.25e5) = 23.472138032568876 (mpmath, 40 digits)
        let v = gaussian_mechanism_variance(1.0, 1e-5, 1.0).unwrap();
        assert!((v - 23.472_138_032_568_876).abs() <= 1e-4);
        let s = gaussian_mechanism_variance(1.0, 1e-5, 3.0).unwrap();
        assert!((s / v - 9.0).abs() < 1e-12);
        let e2 = gaussian_mechanism_variance(2.0, 1e-5, 1.0).unwrap();
        assert!((e2 / v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn hospital_view_examples() {
        assert!((hospital_view_epsilon(1.0, 2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let big = hospital_view_epsilon(1.0, 1_000_000).unwrap();
        assert!(big > 1.0 && big < 1.000_001);
        assert!((hospital_view_epsilon(0.5, 10).unwrap() - 0.527_046_276_694_729_9).abs() <= 1e-6);
        assert!(hospital_view_epsilon(1.0, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DpConfig::default().validate().is_ok());
        let bad = |f: fn(&mut DpConfig)| {
            let mut c = DpConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.q = 0.0));
        assert!(bad(|c| c.q = 1.5));
        assert!(bad(|c| c.sigma = -1.0));
        assert!(bad(|c| c.clip_norm = 0.0));
        assert!(bad(|c| c.momentum = 1.0));
        assert!(bad(|c| c.delta = 1.0));
        assert!(bad(|c| c.max_rounds = 0));
        assert!(DpConfig::default().delta_warning(100).is_none());
        assert!(DpConfig::default().delta_warning(20_000).is_some());
    }
}
