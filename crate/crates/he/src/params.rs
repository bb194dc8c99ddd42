use sha2::{Digest, Sha256};

use crate::arith::{find_ntt_prime_below, is_prime};
use crate::error::{HeError, Result};

/// Largest prime below 2^60 that is `≡ 1 (mod 8192)`.
pub const DEFAULT_COEFF_MODULUS: u64 = 1_152_921_504_606_830_593;
/// Plaintext modulus; `40961 = 5 · 8192 + 1`.
pub const DEFAULT_PLAIN_MODULUS: u64 = 40961;
pub const DEFAULT_DEGREE: usize = 4096;
pub const DEFAULT_NOISE_STD: f64 = 3.2;
/// Largest prime below 2^40 that is `≡ 1 (mod 32)`; used by the toy rings.
pub const TOY_COEFF_MODULUS: u64 = 1_099_511_627_297;

/// Scheme parameters for the ring `Z_qc[x]/(x^d + 1)` with plaintext space `Z_b`.
///
/// The default set targets `d = 4096, b = 40961` with a single ~60-bit
/// coefficient prime. The security level of this triple is not formally
/// estimated.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptionParams {
    degree: usize,
    plain_modulus: u64,
    coeff_modulus: u64,
    noise_std: f64,
}

impl EncryptionParams {
    pub fn new(degree: usize, plain_modulus: u64, coeff_modulus: u64, noise_std: f64) -> Result<Self> {
        let invalid = |m: String| Err(HeError::InvalidArgument(m));
        if degree < 2 || !degree.is_power_of_two() {
            return invalid(format!("degree {degree} is not a power of two ≥ 2"));
        }
        let two_d = 2 * degree as u64;
        if !is_prime(plain_modulus) || plain_modulus % two_d != 1 {
            return invalid(format!("plaintext modulus {plain_modulus} must be a prime ≡ 1 mod {two_d}"));
        }
        if !is_prime(coeff_modulus) || coeff_modulus % two_d != 1 || coeff_modulus >= 1 << 62 {
            return invalid(format!(
                "coefficient modulus {coeff_modulus} must be a prime < 2^62, ≡ 1 mod {two_d}"
            ));
        }
        if coeff_modulus / plain_modulus < 2 * plain_modulus {
            return invalid("Δ = ⌊qc/b⌋ must be at least 2b".into());
        }
        if !(noise_std.is_finite() && noise_std > 0.0) {
            return invalid(format!("noise_std {noise_std} must be positive"));
        }
        Ok(Self {
            degree,
            plain_modulus,
            coeff_modulus,
            noise_std,
        })
    }

    /// Small rings (`d ∈ {8, 16}`) for exhaustive checks.
    pub fn toy(degree: usize) -> Result<Self> {
        let b = match degree {
            8 => 17,
            16 => 97,
            _ => return Err(HeError::InvalidArgument(format!("no toy ring of degree {degree}"))),
        };
        Self::new(degree, b, TOY_COEFF_MODULUS, DEFAULT_NOISE_STD)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn plain_modulus(&self) -> u64 {
        self.plain_modulus
    }

    pub fn coeff_modulus(&self) -> u64 {
        self.coeff_modulus
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Δ = ⌊qc / b⌋.
    pub fn delta_scale(&self) -> u64 {
        self.coeff_modulus / self.plain_modulus
    }

    /// Largest slot magnitude, `(b - 1) / 2`.
    pub fn slot_bound(&self) -> i64 {
        ((self.plain_modulus - 1) / 2) as i64
    }

    /// 8-byte fingerprint stamped on every serialized ciphertext and key.
    pub fn fingerprint(&self) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update((self.degree as u64).to_le_bytes());
        h.update(self.plain_modulus.to_le_bytes());
        h.update(self.coeff_modulus.to_le_bytes());
        h.update(self.noise_std.to_le_bytes());
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

impl Default for EncryptionParams {
    fn default() -> Self {
        Self::new(
            DEFAULT_DEGREE,
            DEFAULT_PLAIN_MODULUS,
            DEFAULT_COEFF_MODULUS,
            DEFAULT_NOISE_STD,
        )
        .expect("default parameters are valid")
    }
}

/// Reruns the modulus search that produced [`DEFAULT_COEFF_MODULUS`].
pub fn search_coeff_modulus(degree: usize, bits: u32) -> Option<u64> {
    find_ntt_prime_below(1u64 << bits, 2 * degree as u64)
}
