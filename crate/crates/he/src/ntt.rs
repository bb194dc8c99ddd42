//! Negacyclic number-theoretic transform over `Z_p[x]/(x^n + 1)`.
//!
//! Forward transform is Cooley-Tukey with the `ψ` twist merged into the
//! butterflies (bit-reversed output); the inverse is Gentleman-Sande with
//! bit-reversed input. Twiddles carry Shoup precomputations so the inner
//! loops avoid 128-bit division.

use crate::arith::{add_mod, inv_mod, mul_mod, pow_mod, primitive_root_of_unity, sub_mod};

#[derive(Clone, Copy, Debug)]
struct Twiddle {
    value: u64,
    shoup: u64,
}

impl Twiddle {
    fn new(value: u64, p: u64) -> Self {
        let shoup = (((value as u128) << 64) / p as u128) as u64;
        Self { value, shoup }
    }

    /// `self.value * a mod p`, for `a < p < 2^63`.
    #[inline]
    fn mul(self, a: u64, p: u64) -> u64 {
        let q = ((self.shoup as u128 * a as u128) >> 64) as u64;
        let r = self.value.wrapping_mul(a).wrapping_sub(q.wrapping_mul(p));
        if r >= p {
            r - p
        } else {
            r
        }
    }
}

/// Precomputed tables for one `(n, p)` pair.
#[derive(Clone, Debug)]
pub struct NttPlan {
    n: usize,
    modulus: u64,
    psi_rev: Vec<Twiddle>,
    psi_inv_rev: Vec<Twiddle>,
    n_inv: Twiddle,
}

fn bit_reverse(x: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (usize::BITS - bits)
    }
}

impl NttPlan {
    /// Returns `None` unless `n` is a power of two and `p ≡ 1 (mod 2n)` is
    /// an odd prime below `2^62`.
    pub fn new(n: usize, modulus: u64) -> Option<Self> {
        if n < 2 || !n.is_power_of_two() || modulus >= 1 << 62 {
            return None;
        }
        let psi = primitive_root_of_unity(2 * n as u64, modulus)?;
        let psi_inv = inv_mod(psi, modulus);
        let bits = n.trailing_zeros();
        let mut psi_rev = Vec::with_capacity(n);
        let mut psi_inv_rev = Vec::with_capacity(n);
        for i in 0..n {
            let e = bit_reverse(i, bits) as u64;
            psi_rev.push(Twiddle::new(pow_mod(psi, e, modulus), modulus));
            psi_inv_rev.push(Twiddle::new(pow_mod(psi_inv, e, modulus), modulus));
        }
        let n_inv = Twiddle::new(inv_mod(n as u64, modulus), modulus);
        Some(Self {
            n,
            modulus,
            psi_rev,
            psi_inv_rev,
            n_inv,
        })
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// In-place forward transform; coefficients must already be reduced.
    pub fn forward(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n, "ntt length mismatch");
        let p = self.modulus;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let s = self.psi_rev[m + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (u, v) in lo.iter_mut().zip(hi.iter_mut()) {
                    let x = *u;
                    let y = s.mul(*v, p);
                    *u = add_mod(x, y, p);
                    *v = sub_mod(x, y, p);
                }
            }
            m <<= 1;
        }
    }

    /// In-place inverse transform, including the `1/n` scaling.
    pub fn inverse(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n, "ntt length mismatch");
        let p = self.modulus;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            for i in 0..h {
                let s = self.psi_inv_rev[h + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (u, v) in lo.iter_mut().zip(hi.iter_mut()) {
                    let x = *u;
                    let y = *v;
                    *u = add_mod(x, y, p);
                    *v = s.mul(sub_mod(x, y, p), p);
                }
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = self.n_inv.mul(*x, p);
        }
    }

    /// Negacyclic product of two reduced polynomials.
    pub fn multiply(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        let mut fa = a.to_vec();
        let mut fb = b.to_vec();
        self.forward(&mut fa);
        self.forward(&mut fb);
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x = mul_mod(*x, *y, self.modulus);
        }
        self.inverse(&mut fa);
        fa
    }

    /// Pointwise product in the evaluation domain.
    pub fn pointwise(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| mul_mod(*x, *y, self.modulus))
            .collect()
    }
}

/// Schoolbook negacyclic multiplication, `O(n^2)`. Reference path for tests
/// and tiny rings.
pub fn schoolbook_negacyclic(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        for j in 0..n {
            let prod = mul_mod(a[i], b[j], p);
            let k = i + j;
            if k < n {
                out[k] = add_mod(out[k], prod, p);
            } else {
                out[k - n] = sub_mod(out[k - n], prod, p);
            }
        }
    }
    out
}
