//! Word-sized modular arithmetic and prime search helpers.

/// `(a * b) mod m` through a 128-bit product.
#[inline]
pub fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

#[inline]
pub fn add_mod(a: u64, b: u64, m: u64) -> u64 {
    let s = a + b;
    if s >= m {
        s - m
    } else {
        s
    }
}

#[inline]
pub fn sub_mod(a: u64, b: u64, m: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + m - b
    }
}

pub fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    let mut result = 1 % m;
    let mut b = base % m;
    while exp > 0 {
        if exp & 1 == 1 {
            result = mul_mod(result, b, m);
        }
        b = mul_mod(b, b, m);
        exp >>= 1;
    }
    result
}

/// Inverse modulo a prime `p` (Fermat).
pub fn inv_mod(a: u64, p: u64) -> u64 {
    pow_mod(a, p - 2, p)
}

/// Maps `x mod m` into the centered range `(-m/2, m/2]`.
#[inline]
pub fn center(x: u64, m: u64) -> i64 {
    if x > m / 2 {
        -((m - x) as i64)
    } else {
        x as i64
    }
}

/// Lifts a signed value into `[0, m)`.
#[inline]
pub fn lift(x: i64, m: u64) -> u64 {
    let r = (x as i128).rem_euclid(m as i128);
    r as u64
}

/// Deterministic Miller-Rabin for all 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &WITNESSES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &WITNESSES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest prime `p < bound` with `p ≡ 1 (mod step)`.
pub fn find_ntt_prime_below(bound: u64, step: u64) -> Option<u64> {
    if bound <= step {
        return None;
    }
    let mut candidate = (bound - 1) / step * step + 1;
    if candidate >= bound {
        candidate = candidate.checked_sub(step)?;
    }
    while candidate > step {
        if is_prime(candidate) {
            return Some(candidate);
        }
        candidate -= step;
    }
    None
}

/// Smallest-generator primitive `order`-th root of unity modulo prime `p`,
/// where `order` is a power of two dividing `p - 1`.
pub fn primitive_root_of_unity(order: u64, p: u64) -> Option<u64> {
    if order < 2 || !order.is_power_of_two() || (p - 1) % order != 0 {
        return None;
    }
    let cofactor = (p - 1) / order;
    (2..p).find_map(|g| {
        let w = pow_mod(g, cofactor, p);
        // order divides a power of two, so w has exact order `order`
        // iff w^(order/2) = -1.
        (pow_mod(w, order / 2, p) == p - 1).then_some(w)
    })
}
