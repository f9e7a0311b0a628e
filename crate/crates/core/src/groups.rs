//! Pairing-group arithmetic for the attestation scheme.
//!
//! Backed by BLS12-381, a type-3 pairing-friendly curve whose prime subgroup
//! order is just under 2^255. The `bls12_381` crate writes all groups
//! additively, including the target group, so `g^a` in the usual
//! multiplicative notation is `g * a` here and a product of group elements is
//! a sum.

use bls12_381::hash_to_curve::{ExpandMsgXmd, HashToCurve};
use bls12_381::{G1Affine, G2Affine};
use ff::Field;
use num_bigint::BigUint;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use bls12_381::{G1Projective as G1, G2Projective as G2, Gt, Scalar};

/// Compressed G1 encoding length.
pub const G1_BYTES: usize = 48;
/// Compressed G2 encoding length.
pub const G2_BYTES: usize = 96;
pub const SCALAR_BYTES: usize = 32;

/// Big-endian group order.
const ORDER_BE: [u8; 32] = [
    0x73, 0xed, 0xa7, 0x53, 0x29, 0x9d, 0x7d, 0x48, 0x33, 0x39, 0xd8, 0x08, 0x09, 0xa1, 0xd8, 0x05,
    0x53, 0xbd, 0xa4, 0x02, 0xff, 0xfe, 0x5b, 0xfe, 0xff, 0xff, 0xff, 0xff, 0x00, 0x00, 0x00, 0x01,
];

const H0_DST: &[u8] = b"SIMTPM-V01-CS01-with-BLS12381G1_XMD:SHA-256_SSWU_RO_";

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum GroupError {
    #[error("invalid {what} encoding ({len} bytes)")]
    InvalidEncoding { what: &'static str, len: usize },
    #[error("unsupported security parameter {0}; expected 80, 112 or 128")]
    UnsupportedSecurity(u32),
}

/// Public group setup: generators, their pairing, and the security level.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupParams {
    pub g1: G1,
    pub g2: G2,
    pub gt: Gt,
    pub lambda: u32,
}

impl GroupParams {
    /// Picks random generators of G1 and G2.
    pub fn generate<R: RngCore>(lambda: u32, rng: &mut R) -> Result<Self, GroupError> {
        if !matches!(lambda, 80 | 112 | 128) {
            return Err(GroupError::UnsupportedSecurity(lambda));
        }
        let g1 = G1::generator() * random_nonzero_scalar(rng);
        let g2 = G2::generator() * random_nonzero_scalar(rng);
        Ok(Self::from_generators(lambda, g1, g2))
    }

    pub fn from_generators(lambda: u32, g1: G1, g2: G2) -> Self {
        let gt = pairing(&g1, &g2);
        GroupParams { g1, g2, gt, lambda }
    }

    /// Group order p.
    pub fn order(&self) -> BigUint {
        group_order()
    }
}

pub fn group_order() -> BigUint {
    BigUint::from_bytes_be(&ORDER_BE)
}

pub fn pairing(a: &G1, b: &G2) -> Gt {
    bls12_381::pairing(&G1Affine::from(a), &G2Affine::from(b))
}

pub fn random_scalar<R: RngCore>(rng: &mut R) -> Scalar {
    Scalar::random(rng)
}

pub fn random_nonzero_scalar<R: RngCore>(rng: &mut R) -> Scalar {
    loop {
        let s = Scalar::random(&mut *rng);
        if !bool::from(s.is_zero()) {
            return s;
        }
    }
}

pub fn random_g1<R: RngCore>(rng: &mut R) -> G1 {
    G1::generator() * random_nonzero_scalar(rng)
}

/// Hash into Z_p under a per-call-site domain tag.
///
/// Two SHA-256 blocks (counter 0 and 1) are concatenated and reduced as a
/// 512-bit integer, so the bias of the reduction is negligible.
pub fn hash_to_zp(tag: &str, msg: &[u8]) -> Scalar {
    let mut wide = [0u8; 64];
    for (counter, out) in wide.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update((tag.len() as u32).to_be_bytes());
        h.update(tag.as_bytes());
        h.update([counter as u8]);
        h.update(msg);
        out.copy_from_slice(&h.finalize());
    }
    Scalar::from_bytes_wide(&wide)
}

/// Hash onto G1 with the random-oracle SSWU construction.
pub fn hash_to_g1(msg: &[u8]) -> G1 {
    <G1 as HashToCurve<ExpandMsgXmd<sha2_09::Sha256>>>::hash_to_curve(msg, H0_DST)
}

pub fn g1_to_bytes(p: &G1) -> [u8; G1_BYTES] {
    G1Affine::from(p).to_compressed()
}

pub fn g1_from_bytes(bytes: &[u8]) -> Result<G1, GroupError> {
    let err = GroupError::InvalidEncoding {
        what: "G1",
        len: bytes.len(),
    };
    let arr: &[u8; G1_BYTES] = bytes.try_into().map_err(|_| err.clone())?;
    Option::<G1Affine>::from(G1Affine::from_compressed(arr))
        .map(G1::from)
        .ok_or(err)
}

pub fn g2_to_bytes(p: &G2) -> [u8; G2_BYTES] {
    G2Affine::from(p).to_compressed()
}

pub fn g2_from_bytes(bytes: &[u8]) -> Result<G2, GroupError> {
    let err = GroupError::InvalidEncoding {
        what: "G2",
        len: bytes.len(),
    };
    let arr: &[u8; G2_BYTES] = bytes.try_into().map_err(|_| err.clone())?;
    Option::<G2Affine>::from(G2Affine::from_compressed(arr))
        .map(G2::from)
        .ok_or(err)
}

/// Big-endian canonical scalar encoding.
pub fn scalar_to_bytes(s: &Scalar) -> [u8; SCALAR_BYTES] {
    let mut out = s.to_bytes();
    out.reverse();
    out
}

/// Rejects non-canonical (≥ p) encodings.
pub fn scalar_from_bytes(bytes: &[u8]) -> Result<Scalar, GroupError> {
    let err = GroupError::InvalidEncoding {
        what: "scalar",
        len: bytes.len(),
    };
    let mut le: [u8; SCALAR_BYTES] = bytes.try_into().map_err(|_| err.clone())?;
    le.reverse();
    Option::from(Scalar::from_bytes(&le)).ok_or(err)
}

pub fn scalar_to_biguint(s: &Scalar) -> BigUint {
    BigUint::from_bytes_le(&s.to_bytes())
}

/// Reduces an arbitrary non-negative integer mod p.
pub fn biguint_to_scalar(n: &BigUint) -> Scalar {
    let reduced = n % group_order();
    let mut le = reduced.to_bytes_le();
    le.resize(SCALAR_BYTES, 0);
    let arr: [u8; SCALAR_BYTES] = le.try_into().expect("resized to 32 bytes");
    Option::from(Scalar::from_bytes(&arr)).expect("reduced value is below the order")
}
