//! BFV additively homomorphic encryption over `Z_qc[x]/(x^d + 1)`, with SIMD
//! slot batching and the fixed-point encoding used to ship model weights.
//!
//! Only the operations needed for secure summation are provided: key
//! generation, public-key encryption, decryption and ciphertext addition.
//!
//! **Security warning:** this crate has not been audited and makes no
//! constant-time guarantees. The default parameters (`d = 4096`,
//! `b = 40961`, a single 60-bit `qc`, `χ` with σ = 3.2) follow common
//! homomorphic-encryption defaults, but their concrete security level has not
//! been estimated. Do not use it to protect real data.

pub mod arith;
pub mod encoding;
pub mod error;
pub mod ntt;
pub mod params;
pub mod scheme;

pub use encoding::{base_b_decode, base_b_encode, BatchEncoder, FixedPoint, PlaintextPoly};
pub use error::{HeError, Result};
pub use params::EncryptionParams;
pub use scheme::{Bfv, Ciphertext, PublicKey, SecretKey, MAX_LEVEL};
