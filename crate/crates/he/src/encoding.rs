//! Plaintext encodings: SIMD slot batching, balanced base-b integer
//! expansion, and the decimal fixed-point map for real-valued weights.

use crate::arith::{center, lift};
use crate::error::{HeError, Result};
use crate::ntt::NttPlan;
use crate::params::EncryptionParams;

/// Element of `R_b` held as balanced coefficients in `[-(b-1)/2, (b-1)/2]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaintextPoly {
    coeffs: Vec<i64>,
}

impl PlaintextPoly {
    pub fn new(coeffs: Vec<i64>, params: &EncryptionParams) -> Result<Self> {
        if coeffs.len() != params.degree() {
            return Err(HeError::InvalidArgument(format!(
                "plaintext has {} coefficients, ring degree is {}",
                coeffs.len(),
                params.degree()
            )));
        }
        let bound = params.slot_bound();
        if let Some(c) = coeffs.iter().find(|c| c.abs() > bound) {
            return Err(HeError::InvalidArgument(format!(
                "plaintext coefficient {c} outside ±{bound}"
            )));
        }
        Ok(Self { coeffs })
    }

    pub fn zero(params: &EncryptionParams) -> Self {
        Self {
            coeffs: vec![0; params.degree()],
        }
    }

    pub fn coeffs(&self) -> &[i64] {
        &self.coeffs
    }

    pub(crate) fn from_raw(coeffs: Vec<i64>) -> Self {
        Self { coeffs }
    }
}

/// Packs up to `d` integers into one plaintext so that ring addition acts
/// slot-wise. Slots are the evaluations of the plaintext at the odd powers
/// of a primitive `2d`-th root of unity modulo `b`.
#[derive(Clone, Debug)]
pub struct BatchEncoder {
    params: EncryptionParams,
    plan: NttPlan,
}

impl BatchEncoder {
    pub fn new(params: &EncryptionParams) -> Result<Self> {
        let plan = NttPlan::new(params.degree(), params.plain_modulus()).ok_or_else(|| {
            HeError::InvalidArgument("plaintext modulus admits no 2d-th root of unity".into())
        })?;
        Ok(Self {
            params: params.clone(),
            plan,
        })
    }

    /// Shorter inputs are zero-padded to `d` slots.
    pub fn encode(&self, values: &[i64]) -> Result<PlaintextPoly> {
        let d = self.params.degree();
        if values.len() > d {
            return Err(HeError::InvalidArgument(format!(
                "{} values do not fit in {d} slots",
                values.len()
            )));
        }
        let bound = self.params.slot_bound();
        let b = self.params.plain_modulus();
        let mut slots = vec![0u64; d];
        for (slot, &v) in slots.iter_mut().zip(values) {
            if v.abs() > bound {
                return Err(HeError::Range {
                    value: v as f64,
                    limit: bound as f64,
                });
            }
            *slot = lift(v, b);
        }
        self.plan.inverse(&mut slots);
        Ok(PlaintextPoly::from_raw(
            slots.into_iter().map(|c| center(c, b)).collect(),
        ))
    }

    /// Always returns `d` slots, balanced.
    pub fn decode(&self, pt: &PlaintextPoly) -> Vec<i64> {
        let b = self.params.plain_modulus();
        let mut evals: Vec<u64> = pt.coeffs.iter().map(|&c| lift(c, b)).collect();
        self.plan.forward(&mut evals);
        evals.into_iter().map(|e| center(e, b)).collect()
    }
}

/// Balanced base-`base` expansion of `u`, lowest power first.
///
/// Odd bases use digits in `[-(b-1)/2, (b-1)/2]`, even bases `[-b/2, (b-1)/2]`,
/// and base 2 uses `{0, 1}` (so only non-negative integers are representable).
pub fn base_b_encode(u: i64, base: u64) -> Result<Vec<i64>> {
    if base < 2 {
        return Err(HeError::InvalidArgument(format!("base {base} < 2")));
    }
    if base == 2 && u < 0 {
        return Err(HeError::InvalidArgument(
            "base 2 uses digits {0, 1} and cannot encode negative integers".into(),
        ));
    }
    let b = base as i128;
    let hi = if base == 2 { 1 } else { (b - 1) / 2 };
    let mut rest = u as i128;
    let mut digits = Vec::new();
    while rest != 0 {
        let mut r = rest.rem_euclid(b);
        if r > hi {
            r -= b;
        }
        digits.push(r as i64);
        rest = (rest - r) / b;
    }
    Ok(digits)
}

/// Evaluates the digit polynomial at `x = base`.
pub fn base_b_decode(digits: &[i64], base: u64) -> Result<i64> {
    let b = base as i128;
    let mut acc: i128 = 0;
    for &d in digits.iter().rev() {
        acc = acc
            .checked_mul(b)
            .and_then(|a| a.checked_add(d as i128))
            .ok_or_else(|| HeError::Malformed("base-b value overflows".into()))?;
    }
    i64::try_from(acc).map_err(|_| HeError::Malformed("base-b value exceeds 64 bits".into()))
}

/// Decimal fixed-point map `w ↦ round(w · scale)`, with an aggregation
/// headroom check so that the sum of `parties` encodings stays inside the
/// plaintext slot range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPoint {
    pub scale: f64,
    pub parties: u32,
    pub slot_bound: i64,
}

pub const DEFAULT_FIXED_POINT_SCALE: f64 = 1e3;

impl FixedPoint {
    pub fn new(params: &EncryptionParams, parties: u32) -> Self {
        Self {
            scale: DEFAULT_FIXED_POINT_SCALE,
            parties: parties.max(1),
            slot_bound: params.slot_bound(),
        }
    }

    /// Largest `|w|` that survives aggregation of `parties` values.
    pub fn max_abs_weight(&self) -> f64 {
        self.slot_bound as f64 / (self.scale * self.parties as f64)
    }

    /// Rounds half away from zero.
    pub fn encode(&self, w: f64) -> Result<i64> {
        let limit = self.max_abs_weight();
        if !w.is_finite() {
            return Err(HeError::Range { value: w, limit });
        }
        let v = (w * self.scale).round();
        if v.abs() * self.parties as f64 > self.slot_bound as f64 {
            return Err(HeError::Range { value: w, limit });
        }
        Ok(v as i64)
    }

    pub fn decode(&self, v: i64) -> f64 {
        v as f64 / self.scale
    }
}
