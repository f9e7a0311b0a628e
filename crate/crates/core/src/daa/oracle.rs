//! Random-oracle plumbing and the proof-of-security test oracles.
//!
//! [`sim_sign`] produces signatures without any credential by programming
//! the challenge oracle, and [`extract`] recovers a credential from two
//! accepting transcripts that share their commitments. Neither is used by the
//! signing or verification paths.

use std::collections::HashMap;

use rand::RngCore;

use super::{
    basename_point, challenge_transcript, daa_sign_with, restore_commitments, DaaCredential,
    DaaError, DaaPublicParams, DaaSignature, SignNonces, SIGN_TAG,
};
use crate::groups::{hash_to_zp, random_g1, random_nonzero_scalar, random_scalar, Scalar, G1};

/// Source of Fiat-Shamir challenges for signing and verification.
pub trait ChallengeOracle {
    fn challenge(&self, transcript: &[u8]) -> Scalar;
}

/// The hash `H` into Z_p.
#[derive(Clone, Copy, Debug, Default)]
pub struct HashOracle;

impl ChallengeOracle for HashOracle {
    fn challenge(&self, transcript: &[u8]) -> Scalar {
        hash_to_zp(SIGN_TAG, transcript)
    }
}

/// Hash oracle with patched outputs on chosen inputs.
#[derive(Clone, Debug, Default)]
pub struct ProgrammableOracle {
    patches: HashMap<Vec<u8>, Scalar>,
}

impl ProgrammableOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn program(&mut self, transcript: Vec<u8>, c: Scalar) {
        self.patches.insert(transcript, c);
    }

    pub fn patched(&self) -> usize {
        self.patches.len()
    }
}

impl ChallengeOracle for ProgrammableOracle {
    fn challenge(&self, transcript: &[u8]) -> Scalar {
        self.patches
            .get(transcript)
            .copied()
            .unwrap_or_else(|| HashOracle.challenge(transcript))
    }
}

/// Zero-knowledge simulator: a signature for `nym` without a credential.
///
/// Picks `R = g1^r̂`, `B = gpk1^r̂`, random `(c, s1, s2)`, derives the
/// commitments the verifier will restore, and programs `oracle` to answer
/// `c` on that transcript. Requires the programmable oracle, so the output
/// only verifies under the patched oracle.
pub fn sim_sign<R: RngCore>(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    nym: &G1,
    m: &[u8],
    oracle: &mut ProgrammableOracle,
    rng: &mut R,
) -> DaaSignature {
    let d = match bsn {
        Some(name) => basename_point(name),
        None => random_g1(rng),
    };
    let r_hat = random_nonzero_scalar(rng);
    let sig = DaaSignature {
        c: random_scalar(rng),
        s1: random_scalar(rng),
        s2: random_scalar(rng),
        r: crs.group.g1 * r_hat,
        b: crs.gpk1 * r_hat,
        nym: *nym,
        d: bsn.is_none().then_some(d),
    };
    // R^-s1 (not R^s1) so the commitments match what verification restores.
    let (t1, t2) = restore_commitments(crs, &d, &sig);
    let transcript = challenge_transcript(crs, &d, nym, &sig.r, &sig.b, &t1, &t2, m);
    oracle.program(transcript, sig.c);
    sig
}

/// Credential recovered by the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    pub a: G1,
    pub sk_u: Scalar,
}

/// Rewinding extractor over two transcripts with equal `(R, B, nym, D)` and
/// equal restored commitments but different challenges.
///
/// With `α = Δs1/Δc` and `β = Δs2/Δc` the transcripts give
/// `B = g1^β · R^-α` and `nym = D^α`; the pairing equation then yields
/// `e(R^(1/β), gpk2 · g2^α) = gT`, so the extracted key is `α` and the
/// credential is `R^(1/β)`.
pub fn extract(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    first: &DaaSignature,
    second: &DaaSignature,
) -> Result<Extracted, DaaError> {
    if first.r != second.r {
        return Err(DaaError::ForkMismatch("R"));
    }
    if first.b != second.b {
        return Err(DaaError::ForkMismatch("B"));
    }
    if first.nym != second.nym {
        return Err(DaaError::ForkMismatch("nym"));
    }
    let d = match (bsn, &first.d, &second.d) {
        (Some(name), None, None) => basename_point(name),
        (None, Some(d1), Some(d2)) if d1 == d2 => *d1,
        _ => return Err(DaaError::ForkMismatch("D")),
    };
    if restore_commitments(crs, &d, first) != restore_commitments(crs, &d, second) {
        return Err(DaaError::ForkMismatch("commitments"));
    }
    let delta_c = first.c - second.c;
    let inv_dc: Scalar =
        Option::from(delta_c.invert()).ok_or(DaaError::ExtractionDegenerate("equal challenges"))?;
    let alpha = (first.s1 - second.s1) * inv_dc;
    let beta = (first.s2 - second.s2) * inv_dc;
    let inv_beta: Scalar =
        Option::from(beta.invert()).ok_or(DaaError::ExtractionDegenerate("beta is zero"))?;
    let a = first.r * inv_beta;
    if bool::from(a.is_identity()) {
        return Err(DaaError::ExtractionDegenerate("identity credential"));
    }
    Ok(Extracted { a, sk_u: alpha })
}

/// Runs the honest signer twice on the same nonces, answering the second run
/// with a fresh random challenge. Returns both transcripts and the oracle
/// that makes the second one verify.
pub fn fork_sign<R: RngCore>(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    w: &DaaCredential,
    m: &[u8],
    rng: &mut R,
) -> (DaaSignature, DaaSignature, ProgrammableOracle) {
    let nonces = SignNonces::random(crs, rng);
    let d = bsn.is_none().then(|| random_g1(rng));
    let first = daa_sign_with(crs, bsn, w, m, &nonces, d, &super::HashOracle);
    let d_pt = first
        .d
        .unwrap_or_else(|| basename_point(bsn.expect("basename")));
    let (t1, t2) = restore_commitments(crs, &d_pt, &first);
    let transcript = challenge_transcript(crs, &d_pt, &first.nym, &first.r, &first.b, &t1, &t2, m);
    let mut oracle = ProgrammableOracle::new();
    let fresh = loop {
        let c = random_scalar(rng);
        if c != first.c {
            break c;
        }
    };
    oracle.program(transcript, fresh);
    let second = daa_sign_with(crs, bsn, w, m, &nonces, d, &oracle);
    (first, second, oracle)
}
