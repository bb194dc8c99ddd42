//! Key generation, encryption, decryption and homomorphic addition.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arith::{add_mod, center, lift, mul_mod, sub_mod};
use crate::encoding::{BatchEncoder, PlaintextPoly};
use crate::error::{HeError, Result};
use crate::ntt::NttPlan;
use crate::params::EncryptionParams;

/// Cap on the addition counter carried by a ciphertext. Fresh noise is a
/// few thousand at the default parameters against a decryption margin of
/// `Δ/4 ≈ 7·10^12`, so the cap sits far inside the noise budget.
pub const MAX_LEVEL: u32 = 1 << 20;

/// Error samples are rejected beyond this many standard deviations.
const TAIL_CUT: f64 = 6.0;

pub struct SecretKey {
    s: Vec<i64>,
    s_ntt: Vec<u64>,
    fingerprint: [u8; 8],
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey").finish_non_exhaustive()
    }
}

impl Clone for SecretKey {
    fn clone(&self) -> Self {
        Self {
            s: self.s.clone(),
            s_ntt: self.s_ntt.clone(),
            fingerprint: self.fingerprint,
        }
    }
}

impl SecretKey {
    /// Ternary coefficients of `s`.
    pub fn coeffs(&self) -> &[i64] {
        &self.s
    }

    /// `s` lifted into `[0, qc)`, little-endian `u64` per coefficient; the same
    /// encoding a ciphertext uses, so leaks of this byte string are detectable.
    pub fn to_bytes(&self, params: &EncryptionParams) -> Vec<u8> {
        let q = params.coeff_modulus();
        self.s
            .iter()
            .flat_map(|&c| lift(c, q).to_le_bytes())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    p0: Vec<u64>,
    p1: Vec<u64>,
    p0_ntt: Vec<u64>,
    p1_ntt: Vec<u64>,
    fingerprint: [u8; 8],
}

impl PublicKey {
    pub fn p0(&self) -> &[u64] {
        &self.p0
    }

    pub fn p1(&self) -> &[u64] {
        &self.p1
    }

    /// Fingerprint followed by `p0` then `p1`, each coefficient `u64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.p0.len());
        out.extend_from_slice(&self.fingerprint);
        for c in self.p0.iter().chain(&self.p1) {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    c0: Vec<u64>,
    c1: Vec<u64>,
    level: u32,
    fingerprint: [u8; 8],
}

pub const CIPHERTEXT_HEADER_LEN: usize = 12;

impl Ciphertext {
    pub fn c0(&self) -> &[u64] {
        &self.c0
    }

    pub fn c1(&self) -> &[u64] {
        &self.c1
    }

    /// Number of homomorphic additions folded into this ciphertext.
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn serialized_len(degree: usize) -> usize {
        CIPHERTEXT_HEADER_LEN + 16 * degree
    }

    /// Params fingerprint (8 bytes), level (`u32` LE), then `c0` and `c1`
    /// coefficients as `u64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::serialized_len(self.c0.len()));
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.level.to_le_bytes());
        for c in self.c0.iter().chain(&self.c1) {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }

    pub fn from_bytes(bytes: &[u8], params: &EncryptionParams) -> Result<Self> {
        let d = params.degree();
        if bytes.len() != Self::serialized_len(d) {
            return Err(HeError::Malformed(format!(
                "ciphertext is {} bytes, expected {}",
                bytes.len(),
                Self::serialized_len(d)
            )));
        }
        let fingerprint: [u8; 8] = bytes[..8].try_into().expect("length checked");
        if fingerprint != params.fingerprint() {
            return Err(HeError::Malformed("ciphertext parameter fingerprint mismatch".into()));
        }
        let level = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked"));
        if level > MAX_LEVEL {
            return Err(HeError::Malformed(format!("level {level} exceeds cap")));
        }
        let coeffs = read_coeffs(&bytes[CIPHERTEXT_HEADER_LEN..], params.coeff_modulus())?;
        let (c0, c1) = coeffs.split_at(d);
        Ok(Self {
            c0: c0.to_vec(),
            c1: c1.to_vec(),
            level,
            fingerprint,
        })
    }
}

fn read_coeffs(bytes: &[u8], q: u64) -> Result<Vec<u64>> {
    bytes
        .chunks_exact(8)
        .map(|chunk| {
            let c = u64::from_le_bytes(chunk.try_into().expect("chunks_exact"));
            if c >= q {
                Err(HeError::Malformed(format!("coefficient {c} not reduced mod qc")))
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// A BFV instance: parameters plus precomputed transforms.
#[derive(Clone, Debug)]
pub struct Bfv {
    params: EncryptionParams,
    q_plan: NttPlan,
    encoder: BatchEncoder,
    error_dist: Normal<f64>,
}

impl Bfv {
    pub fn new(params: EncryptionParams) -> Result<Self> {
        let q_plan = NttPlan::new(params.degree(), params.coeff_modulus())
            .ok_or_else(|| HeError::InvalidArgument("coefficient modulus is not NTT-friendly".into()))?;
        let encoder = BatchEncoder::new(&params)?;
        let error_dist = Normal::new(0.0, params.noise_std())
            .map_err(|e| HeError::InvalidArgument(e.to_string()))?;
        Ok(Self {
            params,
            q_plan,
            encoder,
            error_dist,
        })
    }

    pub fn params(&self) -> &EncryptionParams {
        &self.params
    }

    pub fn encoder(&self) -> &BatchEncoder {
        &self.encoder
    }

    fn q(&self) -> u64 {
        self.params.coeff_modulus()
    }

    fn sample_error<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let cut = TAIL_CUT * self.params.noise_std();
        (0..self.params.degree())
            .map(|_| loop {
                let x: f64 = self.error_dist.sample(rng);
                if x.abs() <= cut {
                    break x.round() as i64;
                }
            })
            .collect()
    }

    fn sample_ternary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        (0..self.params.degree())
            .map(|_| rng.random_range(-1i64..=1))
            .collect()
    }

    fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        let q = self.q();
        (0..self.params.degree())
            .map(|_| rng.random_range(0..q))
            .collect()
    }

    fn lift_poly(&self, p: &[i64]) -> Vec<u64> {
        let q = self.q();
        p.iter().map(|&c| lift(c, q)).collect()
    }

    fn to_ntt(&self, mut p: Vec<u64>) -> Vec<u64> {
        self.q_plan.forward(&mut p);
        p
    }

    /// Rebuilds a public key from its two coefficient vectors.
    pub fn public_key_from_parts(&self, p0: Vec<u64>, p1: Vec<u64>) -> Result<PublicKey> {
        let d = self.params.degree();
        let q = self.q();
        if p0.len() != d || p1.len() != d || p0.iter().chain(&p1).any(|&c| c >= q) {
            return Err(HeError::Malformed("public key polynomials malformed".into()));
        }
        let p0_ntt = self.to_ntt(p0.clone());
        let p1_ntt = self.to_ntt(p1.clone());
        Ok(PublicKey {
            p0,
            p1,
            p0_ntt,
            p1_ntt,
            fingerprint: self.params.fingerprint(),
        })
    }

    pub fn public_key_from_bytes(&self, bytes: &[u8]) -> Result<PublicKey> {
        let d = self.params.degree();
        if bytes.len() != 8 + 16 * d {
            return Err(HeError::Malformed(format!("public key is {} bytes", bytes.len())));
        }
        if bytes[..8] != self.params.fingerprint() {
            return Err(HeError::Malformed("public key parameter fingerprint mismatch".into()));
        }
        let coeffs = read_coeffs(&bytes[8..], self.q())?;
        let (p0, p1) = coeffs.split_at(d);
        self.public_key_from_parts(p0.to_vec(), p1.to_vec())
    }

    pub fn secret_key_from_bytes(&self, bytes: &[u8]) -> Result<SecretKey> {
        let q = self.q();
        let coeffs = read_coeffs(bytes, q)?;
        if coeffs.len() != self.params.degree() {
            return Err(HeError::Malformed("secret key length mismatch".into()));
        }
        let s: Vec<i64> = coeffs.iter().map(|&c| center(c, q)).collect();
        if s.iter().any(|c| c.abs() > 1) {
            return Err(HeError::Malformed("secret key is not ternary".into()));
        }
        Ok(self.secret_key_from_coeffs(s))
    }

    fn secret_key_from_coeffs(&self, s: Vec<i64>) -> SecretKey {
        let s_ntt = self.to_ntt(self.lift_poly(&s));
        SecretKey {
            s,
            s_ntt,
            fingerprint: self.params.fingerprint(),
        }
    }

    /// `s` ternary; `pk = ([-(a·s + e)]_q, a)` with `a` uniform and `e ← χ`.
    pub fn keygen<R: Rng + ?Sized>(&self, rng: &mut R) -> (SecretKey, PublicKey) {
        let q = self.q();
        let sk = self.secret_key_from_coeffs(self.sample_ternary(rng));
        let a = self.sample_uniform(rng);
        let e = self.sample_error(rng);
        let a_ntt = self.to_ntt(a.clone());
        let mut a_s = self.q_plan.pointwise(&a_ntt, &sk.s_ntt);
        self.q_plan.inverse(&mut a_s);
        let p0: Vec<u64> = a_s
            .iter()
            .zip(&e)
            .map(|(&x, &ei)| sub_mod(0, add_mod(x, lift(ei, q), q), q))
            .collect();
        let pk = PublicKey {
            p0_ntt: self.to_ntt(p0.clone()),
            p1_ntt: a_ntt,
            p0,
            p1: a,
            fingerprint: self.params.fingerprint(),
        };
        (sk, pk)
    }

    /// Centered coefficients of `p0 + p1·s`, which equal `-e` for a
    /// well-formed key pair.
    pub fn public_key_residual(&self, sk: &SecretKey, pk: &PublicKey) -> Vec<i64> {
        let q = self.q();
        let mut p1s = self.q_plan.pointwise(&pk.p1_ntt, &sk.s_ntt);
        self.q_plan.inverse(&mut p1s);
        pk.p0
            .iter()
            .zip(&p1s)
            .map(|(&a, &b)| center(add_mod(a, b, q), q))
            .collect()
    }

    /// `ct = ([p0·u + e1 + Δ·m]_q, [p1·u + e2]_q)` with `u, e1, e2 ← χ`.
    pub fn encrypt<R: Rng + ?Sized>(
        &self,
        m: &PlaintextPoly,
        pk: &PublicKey,
        rng: &mut R,
    ) -> Result<Ciphertext> {
        self.check_fingerprint(&pk.fingerprint)?;
        let bound = self.params.slot_bound();
        if m.coeffs().len() != self.params.degree() || m.coeffs().iter().any(|c| c.abs() > bound) {
            return Err(HeError::InvalidArgument("plaintext out of range for these parameters".into()));
        }
        let q = self.q();
        let delta = self.params.delta_scale();
        let u_ntt = self.to_ntt(self.lift_poly(&self.sample_error(rng)));
        let e1 = self.sample_error(rng);
        let e2 = self.sample_error(rng);

        let mut c0 = self.q_plan.pointwise(&pk.p0_ntt, &u_ntt);
        self.q_plan.inverse(&mut c0);
        let mut c1 = self.q_plan.pointwise(&pk.p1_ntt, &u_ntt);
        self.q_plan.inverse(&mut c1);

        for ((c, &e), &mi) in c0.iter_mut().zip(&e1).zip(m.coeffs()) {
            let scaled = mul_mod(delta, lift(mi, q), q);
            *c = add_mod(add_mod(*c, lift(e, q), q), scaled, q);
        }
        for (c, &e) in c1.iter_mut().zip(&e2) {
            *c = add_mod(*c, lift(e, q), q);
        }
        Ok(Ciphertext {
            c0,
            c1,
            level: 0,
            fingerprint: self.params.fingerprint(),
        })
    }

    /// `[c0 + c1·s]_q`, coefficients in `[0, q)`.
    fn phase(&self, ct: &Ciphertext, sk: &SecretKey) -> Vec<u64> {
        let q = self.q();
        let mut c1s = self.q_plan.pointwise(&self.to_ntt(ct.c1.clone()), &sk.s_ntt);
        self.q_plan.inverse(&mut c1s);
        ct.c0.iter().zip(&c1s).map(|(&a, &b)| add_mod(a, b, q)).collect()
    }

    /// `[[b·[c0 + c1·s]_q / q]]_b`, returned in balanced form. Fails when the
    /// residual noise passes `Δ/4`, the point past which rounding is no
    /// longer trustworthy.
    pub fn decrypt(&self, ct: &Ciphertext, sk: &SecretKey) -> Result<PlaintextPoly> {
        self.check_fingerprint(&ct.fingerprint)?;
        self.check_fingerprint(&sk.fingerprint)?;
        let q = self.q();
        let b = self.params.plain_modulus();
        let phase = self.phase(ct, sk);
        let coeffs: Vec<i64> = phase
            .iter()
            .map(|&x| {
                let scaled = (b as u128 * x as u128 + (q / 2) as u128) / q as u128;
                center((scaled % b as u128) as u64, b)
            })
            .collect();
        let noise = self.noise_of_phase(&phase, &coeffs);
        let margin = self.params.delta_scale() / 4;
        if noise >= margin {
            return Err(HeError::DecryptionFailure { noise, margin });
        }
        Ok(PlaintextPoly::from_raw(coeffs))
    }

    fn noise_of_phase(&self, phase: &[u64], m: &[i64]) -> u64 {
        let q = self.q();
        let delta = self.params.delta_scale();
        phase
            .iter()
            .zip(m)
            .map(|(&x, &mi)| {
                let expected = mul_mod(delta, lift(mi, q), q);
                center(sub_mod(x, expected, q), q).unsigned_abs()
            })
            .max()
            .unwrap_or(0)
    }

    /// `‖c0 + c1·s − Δ·m‖∞` (centered), measured against the expected plaintext.
    pub fn decryption_noise(&self, ct: &Ciphertext, sk: &SecretKey, expected: &PlaintextPoly) -> u64 {
        self.noise_of_phase(&self.phase(ct, sk), expected.coeffs())
    }

    /// Componentwise sum mod `qc`; the result's level is `a.level + b.level + 1`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check_fingerprint(&a.fingerprint)?;
        self.check_fingerprint(&b.fingerprint)?;
        let level = a.level as u64 + b.level as u64 + 1;
        if level > MAX_LEVEL as u64 {
            return Err(HeError::InvalidArgument(format!("level {level} exceeds cap {MAX_LEVEL}")));
        }
        let q = self.q();
        let sum = |x: &[u64], y: &[u64]| -> Vec<u64> {
            x.iter().zip(y).map(|(&u, &v)| add_mod(u, v, q)).collect()
        };
        Ok(Ciphertext {
            c0: sum(&a.c0, &b.c0),
            c1: sum(&a.c1, &b.c1),
            level: level as u32,
            fingerprint: a.fingerprint,
        })
    }

    fn check_fingerprint(&self, fp: &[u8; 8]) -> Result<()> {
        if *fp != self.params.fingerprint() {
            return Err(HeError::InvalidArgument(
                "object was created under different encryption parameters".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> Bfv {
        Bfv::new(EncryptionParams::toy(16).unwrap()).unwrap()
    }

    fn random_plaintext(bfv: &Bfv, rng: &mut ChaCha20Rng) -> PlaintextPoly {
        let bound = bfv.params().slot_bound();
        let coeffs = (0..bfv.params().degree())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        PlaintextPoly::new(coeffs, bfv.params()).unwrap()
    }

    #[test]
    fn encrypt_zero_decrypts_to_zero() {
        let bfv = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (sk, pk) = bfv.keygen(&mut rng);
        let zero = PlaintextPoly::zero(bfv.params());
        let ct = bfv.encrypt(&zero, &pk, &mut rng).unwrap();
        assert_eq!(bfv.decrypt(&ct, &sk).unwrap(), zero);
    }

    #[test]
    fn encryption_is_probabilistic() {
        let bfv = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (_, pk) = bfv.keygen(&mut rng);
        let m = random_plaintext(&bfv, &mut rng);
        let a = bfv.encrypt(&m, &pk, &mut rng).unwrap();
        let b = bfv.encrypt(&m, &pk, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn keygen_is_seed_deterministic() {
        let bfv = toy();
        let (sk1, pk1) = bfv.keygen(&mut ChaCha20Rng::seed_from_u64(9));
        let (sk2, pk2) = bfv.keygen(&mut ChaCha20Rng::seed_from_u64(9));
        let (sk3, pk3) = bfv.keygen(&mut ChaCha20Rng::seed_from_u64(10));
        assert_eq!(pk1, pk2);
        assert_eq!(sk1.coeffs(), sk2.coeffs());
        assert_ne!(pk1, pk3);
        assert_ne!(sk1.coeffs(), sk3.coeffs());
    }

    #[test]
    fn public_key_residual_is_small() {
        let bfv = Bfv::new(EncryptionParams::default()).unwrap();
        for seed in 0..5 {
            let (sk, pk) = bfv.keygen(&mut ChaCha20Rng::seed_from_u64(seed));
            let worst = bfv
                .public_key_residual(&sk, &pk)
                .iter()
                .map(|c| c.abs())
                .max()
                .unwrap();
            assert!(worst as f64 <= 6.0 * 3.2, "residual {worst}");
        }
    }

    #[test]
    fn fresh_noise_below_quarter_delta() {
        let bfv = Bfv::new(EncryptionParams::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (sk, pk) = bfv.keygen(&mut rng);
        let margin = bfv.params().coeff_modulus() / (4 * bfv.params().plain_modulus());
        for _ in 0..5 {
            let m = random_plaintext(&bfv, &mut rng);
            let ct = bfv.encrypt(&m, &pk, &mut rng).unwrap();
            assert!(bfv.decryption_noise(&ct, &sk, &m) < margin);
        }
    }

    #[test]
    fn noise_grows_at_most_linearly_with_additions() {
        let bfv = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (sk, pk) = bfv.keygen(&mut rng);
        let b = bfv.params().plain_modulus();
        let mut fresh_bound = 0;
        let mut acc: Option<(Ciphertext, Vec<i64>)> = None;
        for k in 1..=20u64 {
            let m = random_plaintext(&bfv, &mut rng);
            let ct = bfv.encrypt(&m, &pk, &mut rng).unwrap();
            fresh_bound = fresh_bound.max(bfv.decryption_noise(&ct, &sk, &m));
            acc = Some(match acc {
                None => (ct, m.coeffs().to_vec()),
                Some((sum_ct, sum_m)) => {
                    let sum_m: Vec<i64> = sum_m
                        .iter()
                        .zip(m.coeffs())
                        .map(|(x, y)| center(lift(x + y, b), b))
                        .collect();
                    (bfv.add(&sum_ct, &ct).unwrap(), sum_m)
                }
            });
            let (sum_ct, sum_m) = acc.as_ref().unwrap();
            let expected = PlaintextPoly::new(sum_m.clone(), bfv.params()).unwrap();
            // the Δ·m cross term contributes at most (k-1)·(q mod b) on top of
            // the summed fresh noises.
            let slack = (k - 1) * (bfv.params().coeff_modulus() % b);
            assert!(bfv.decryption_noise(sum_ct, &sk, &expected) <= k * fresh_bound + slack);
            assert_eq!(bfv.decrypt(sum_ct, &sk).unwrap(), expected);
        }
    }

    #[test]
    fn add_tracks_level_and_rejects_foreign_params() {
        let bfv = toy();
        let other = Bfv::new(EncryptionParams::toy(8).unwrap()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (_, pk) = bfv.keygen(&mut rng);
        let (_, pk8) = other.keygen(&mut rng);
        let m = PlaintextPoly::zero(bfv.params());
        let a = bfv.encrypt(&m, &pk, &mut rng).unwrap();
        let b = bfv.encrypt(&m, &pk, &mut rng).unwrap();
        let ab = bfv.add(&a, &b).unwrap();
        assert_eq!(ab.level(), 1);
        assert_eq!(bfv.add(&ab, &ab).unwrap().level(), 3);
        let foreign = other
            .encrypt(&PlaintextPoly::zero(other.params()), &pk8, &mut rng)
            .unwrap();
        assert!(bfv.add(&a, &foreign).is_err());
    }

    #[test]
    fn garbage_ciphertext_reports_decryption_failure() {
        let bfv = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (sk, pk) = bfv.keygen(&mut rng);
        let ct = bfv.encrypt(&PlaintextPoly::zero(bfv.params()), &pk, &mut rng).unwrap();
        let q = bfv.params().coeff_modulus();
        let delta = bfv.params().delta_scale();
        let mut bytes = ct.to_bytes();
        // shift c0[0] by ~Δ/2: lands midway between two plaintext values
        let c0 = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        bytes[12..20].copy_from_slice(&add_mod(c0, delta / 2, q).to_le_bytes());
        let bad = Ciphertext::from_bytes(&bytes, bfv.params()).unwrap();
        assert!(matches!(bfv.decrypt(&bad, &sk), Err(HeError::DecryptionFailure { .. })));
    }

    #[test]
    fn ciphertext_bytes_round_trip_and_validate() {
        let bfv = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (sk, pk) = bfv.keygen(&mut rng);
        let m = random_plaintext(&bfv, &mut rng);
        let ct = bfv.encrypt(&m, &pk, &mut rng).unwrap();
        let bytes = ct.to_bytes();
        assert_eq!(bytes.len(), 12 + 16 * 16);
        assert_eq!(&bytes[..8], &bfv.params().fingerprint());
        let back = Ciphertext::from_bytes(&bytes, bfv.params()).unwrap();
        assert_eq!(back, ct);
        assert!(Ciphertext::from_bytes(&bytes[1..], bfv.params()).is_err());
        let mut wrong_fp = bytes.clone();
        wrong_fp[0] ^= 1;
        assert!(Ciphertext::from_bytes(&wrong_fp, bfv.params()).is_err());

        let pk_back = bfv.public_key_from_bytes(&pk.to_bytes()).unwrap();
        assert_eq!(pk_back, pk);
        let sk_back = bfv.secret_key_from_bytes(&sk.to_bytes(bfv.params())).unwrap();
        assert_eq!(sk_back.coeffs(), sk.coeffs());
    }
}
