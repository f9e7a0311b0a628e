//! Pairing-based Direct Anonymous Attestation.
//!
//! The issuer certifies a platform secret `sk_u` with a Boneh-Boyen style
//! credential `A = g1^(1/(sk_u + sk_iss))`, obtained blindly through the
//! join/issue exchange in [`join`]. A signature randomizes the credential as
//! `R = A^r`, `B = R^sk_iss` and proves knowledge of `(sk_u, r)` with
//!
//! ```text
//! SoK{(α, β): B = g1^β · R^-α  ∧  nym = D^α}(m)
//! ```
//!
//! where `D = H0(bsn)` for a basename, or a random point otherwise. The
//! verifier checks the proof and `e(R, gpk2) = e(B, g2)`.
//!
//! [`oracle`] holds the programmable random oracle, the zero-knowledge
//! simulator and the rewinding extractor used as test oracles.

pub mod join;
pub mod oracle;

use std::sync::Mutex;

use rand::RngCore;
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::groups::{
    g1_from_bytes, g1_to_bytes, g2_from_bytes, g2_to_bytes, hash_to_g1, pairing, random_g1,
    random_nonzero_scalar, random_scalar, scalar_from_bytes, scalar_to_bytes, GroupError,
    GroupParams, Scalar, G1, G2,
};

pub use join::{
    issue, join_finish, join_init, join_init_with_keys, sok_join_prove, sok_join_verify,
    JoinRequest, JoinResponse, JoinSok, PlatformJoinState,
};
pub use oracle::{extract, sim_sign, ChallengeOracle, HashOracle, ProgrammableOracle};

/// Wire format version of every DAA protocol message.
pub const WIRE_VERSION: u8 = 1;

/// Domain tag of the signing challenge hash.
pub const SIGN_TAG: &str = "daa-sign";

#[derive(Debug, Error)]
pub enum DaaError {
    #[error("join proof rejected; issuance refused")]
    SokRejected,
    #[error("issuer response failed the credential pairing check")]
    CredentialInvalid,
    #[error("degenerate value in {0}")]
    Degenerate(&'static str),
    #[error("encryption modulus too small for the join protocol")]
    ModulusTooSmall,
    #[error("extraction impossible: {0}")]
    ExtractionDegenerate(&'static str),
    #[error("forked transcripts disagree on {0}")]
    ForkMismatch(&'static str),
    #[error(transparent)]
    HomEnc(#[from] crate::homenc::HomEncError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Public parameters (`crs`): group setup plus issuer keys in both groups.
#[derive(Clone, Debug, PartialEq)]
pub struct DaaPublicParams {
    pub group: GroupParams,
    pub gpk1: G1,
    pub gpk2: G2,
}

impl DaaPublicParams {
    pub fn lambda(&self) -> u32 {
        self.group.lambda
    }

    /// Checks `e(gpk1, g2) = e(g1, gpk2)`.
    pub fn is_consistent(&self) -> bool {
        pairing(&self.gpk1, &self.group.g2) == pairing(&self.group.g1, &self.gpk2)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .u32(self.group.lambda)
            .raw(&g1_to_bytes(&self.group.g1))
            .raw(&g2_to_bytes(&self.group.g2))
            .raw(&g1_to_bytes(&self.gpk1))
            .raw(&g2_to_bytes(&self.gpk2));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DaaError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r, "crs")?;
        let lambda = r.u32("lambda")?;
        let g1 = g1_from_bytes(r.raw(48, "g1")?)?;
        let g2 = g2_from_bytes(r.raw(96, "g2")?)?;
        let gpk1 = g1_from_bytes(r.raw(48, "gpk1")?)?;
        let gpk2 = g2_from_bytes(r.raw(96, "gpk2")?)?;
        r.finish()?;
        let crs = DaaPublicParams {
            group: GroupParams::from_generators(lambda, g1, g2),
            gpk1,
            gpk2,
        };
        if !crs.is_consistent() {
            return Err(CodecError::Invalid("issuer public key pair").into());
        }
        Ok(crs)
    }
}

#[derive(Clone)]
pub struct IssuerSecret {
    pub(crate) sk_iss: Scalar,
}

impl IssuerSecret {
    pub fn scalar(&self) -> &Scalar {
        &self.sk_iss
    }

    pub fn from_scalar(sk_iss: Scalar) -> Self {
        IssuerSecret { sk_iss }
    }
}

impl std::fmt::Debug for IssuerSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("IssuerSecret(..)")
    }
}

pub fn daa_setup<R: RngCore>(
    lambda: u32,
    rng: &mut R,
) -> Result<(DaaPublicParams, IssuerSecret), DaaError> {
    let group = GroupParams::generate(lambda, rng)?;
    let sk_iss = random_nonzero_scalar(rng);
    let crs = DaaPublicParams {
        gpk1: group.g1 * sk_iss,
        gpk2: group.g2 * sk_iss,
        group,
    };
    Ok((crs, IssuerSecret { sk_iss }))
}

/// Membership credential `w = (A, sk_u)`.
#[derive(Clone, PartialEq)]
pub struct DaaCredential {
    pub a: G1,
    pub sk_u: Scalar,
}

impl std::fmt::Debug for DaaCredential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DaaCredential")
            .field("a", &self.a)
            .finish_non_exhaustive()
    }
}

impl DaaCredential {
    /// `e(A, g2^sk_u · gpk2) = gT`
    pub fn is_valid(&self, crs: &DaaPublicParams) -> bool {
        !bool::from(self.a.is_identity())
            && pairing(&self.a, &(crs.group.g2 * self.sk_u + crs.gpk2)) == crs.group.gt
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .raw(&g1_to_bytes(&self.a))
            .raw(&scalar_to_bytes(&self.sk_u));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DaaError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r, "credential")?;
        let a = g1_from_bytes(r.raw(48, "A")?)?;
        let sk_u = scalar_from_bytes(r.raw(32, "sk_u")?)?;
        r.finish()?;
        Ok(DaaCredential { a, sk_u })
    }
}

/// `σ = (c, s1, s2, R, B, nym[, D])`
#[derive(Clone, Debug, PartialEq)]
pub struct DaaSignature {
    pub c: Scalar,
    pub s1: Scalar,
    pub s2: Scalar,
    pub r: G1,
    pub b: G1,
    pub nym: G1,
    /// Present exactly when the signature was made without a basename.
    pub d: Option<G1>,
}

impl DaaSignature {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .raw(&scalar_to_bytes(&self.c))
            .raw(&scalar_to_bytes(&self.s1))
            .raw(&scalar_to_bytes(&self.s2))
            .raw(&g1_to_bytes(&self.r))
            .raw(&g1_to_bytes(&self.b))
            .raw(&g1_to_bytes(&self.nym));
        match &self.d {
            Some(d) => w.u8(1).raw(&g1_to_bytes(d)),
            None => w.u8(0),
        };
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DaaError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r, "signature")?;
        let c = scalar_from_bytes(r.raw(32, "c")?)?;
        let s1 = scalar_from_bytes(r.raw(32, "s1")?)?;
        let s2 = scalar_from_bytes(r.raw(32, "s2")?)?;
        let rr = g1_from_bytes(r.raw(48, "R")?)?;
        let b = g1_from_bytes(r.raw(48, "B")?)?;
        let nym = g1_from_bytes(r.raw(48, "nym")?)?;
        let d = match r.u8("D flag")? {
            0 => None,
            1 => Some(g1_from_bytes(r.raw(48, "D")?)?),
            _ => return Err(CodecError::Invalid("D flag").into()),
        };
        r.finish()?;
        Ok(DaaSignature {
            c,
            s1,
            s2,
            r: rr,
            b,
            nym,
            d,
        })
    }
}

pub(crate) fn check_version(r: &mut Reader<'_>, what: &'static str) -> Result<(), CodecError> {
    let got = r.u8("version")?;
    if got != WIRE_VERSION {
        return Err(CodecError::Version { what, got });
    }
    Ok(())
}

/// Per-signature randomness `(r, t1, t2)` with `g1^t2` already computed.
///
/// Each value may be used for one signature only.
#[derive(Clone)]
pub struct SignNonces {
    pub r: Scalar,
    pub t1: Scalar,
    pub t2: Scalar,
    pub(crate) g1_t2: G1,
}

impl SignNonces {
    pub fn new(crs: &DaaPublicParams, r: Scalar, t1: Scalar, t2: Scalar) -> Self {
        SignNonces {
            r,
            t1,
            t2,
            g1_t2: crs.group.g1 * t2,
        }
    }

    pub fn random<R: RngCore>(crs: &DaaPublicParams, rng: &mut R) -> Self {
        let r = random_nonzero_scalar(rng);
        let t1 = random_scalar(rng);
        let t2 = random_scalar(rng);
        Self::new(crs, r, t1, t2)
    }
}

/// Pool of precomputed signing nonces. Each tuple is handed out once.
#[derive(Default)]
pub struct PrecomputeCache {
    pool: Mutex<Vec<SignNonces>>,
}

impl PrecomputeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fill<R: RngCore>(&self, crs: &DaaPublicParams, count: usize, rng: &mut R) {
        let fresh: Vec<_> = (0..count).map(|_| SignNonces::random(crs, rng)).collect();
        self.pool.lock().expect("cache lock").extend(fresh);
    }

    pub fn take(&self) -> Option<SignNonces> {
        self.pool.lock().expect("cache lock").pop()
    }

    pub fn len(&self) -> usize {
        self.pool.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.pool.lock().expect("cache lock").clear();
    }
}

/// Serialized challenge input `gpk ‖ D ‖ nym ‖ R ‖ B ‖ T1 ‖ T2 ‖ m`, each
/// element length-prefixed in canonical encoding.
#[allow(clippy::too_many_arguments)]
pub fn challenge_transcript(
    crs: &DaaPublicParams,
    d: &G1,
    nym: &G1,
    r: &G1,
    b: &G1,
    t1: &G1,
    t2: &G1,
    m: &[u8],
) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&g2_to_bytes(&crs.gpk2));
    for p in [d, nym, r, b, t1, t2] {
        w.bytes(&g1_to_bytes(p));
    }
    w.bytes(m);
    w.finish()
}

fn basename_point(bsn: &[u8]) -> G1 {
    hash_to_g1(bsn)
}

pub fn daa_sign<R: RngCore>(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    w: &DaaCredential,
    m: &[u8],
    rng: &mut R,
) -> DaaSignature {
    let nonces = SignNonces::random(crs, rng);
    let d = bsn.is_none().then(|| random_g1(rng));
    daa_sign_with(crs, bsn, w, m, &nonces, d, &HashOracle)
}

/// Signing with caller-supplied randomness and challenge oracle.
///
/// `random_d` is used as `D` when `bsn` is `None`; it is ignored otherwise.
pub fn daa_sign_with<O: ChallengeOracle + ?Sized>(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    w: &DaaCredential,
    m: &[u8],
    nonces: &SignNonces,
    random_d: Option<G1>,
    oracle: &O,
) -> DaaSignature {
    let g1 = crs.group.g1;
    let d = match bsn {
        Some(name) => basename_point(name),
        None => random_d.expect("random D required when signing without a basename"),
    };
    let nym = d * w.sk_u;
    let r_pt = w.a * nonces.r;
    let b_pt = g1 * nonces.r - r_pt * w.sk_u;
    let t1_pt = nonces.g1_t2 - r_pt * nonces.t1;
    let t2_pt = d * nonces.t1;
    let c = oracle.challenge(&challenge_transcript(
        crs, &d, &nym, &r_pt, &b_pt, &t1_pt, &t2_pt, m,
    ));
    DaaSignature {
        c,
        s1: nonces.t1 + c * w.sk_u,
        s2: nonces.t2 + c * nonces.r,
        r: r_pt,
        b: b_pt,
        nym,
        d: bsn.is_none().then_some(d),
    }
}

pub fn daa_verify(crs: &DaaPublicParams, bsn: Option<&[u8]>, m: &[u8], sig: &DaaSignature) -> bool {
    daa_verify_with(crs, bsn, m, sig, &HashOracle)
}

pub fn daa_verify_with<O: ChallengeOracle + ?Sized>(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    m: &[u8],
    sig: &DaaSignature,
    oracle: &O,
) -> bool {
    let d = match (bsn, &sig.d) {
        (Some(name), None) => basename_point(name),
        (None, Some(d)) => *d,
        _ => return false,
    };
    let identity = |p: &G1| bool::from(p.is_identity());
    if identity(&d) || identity(&sig.r) || identity(&sig.b) || identity(&sig.nym) {
        return false;
    }
    let (t1, t2) = restore_commitments(crs, &d, sig);
    let expected = oracle.challenge(&challenge_transcript(
        crs, &d, &sig.nym, &sig.r, &sig.b, &t1, &t2, m,
    ));
    expected == sig.c && pairing(&sig.r, &crs.gpk2) == pairing(&sig.b, &crs.group.g2)
}

/// `T1 = g1^s2 · R^-s1 · B^-c` and `T2 = D^s1 · nym^-c`.
pub(crate) fn restore_commitments(crs: &DaaPublicParams, d: &G1, sig: &DaaSignature) -> (G1, G1) {
    let t1 = crs.group.g1 * sig.s2 - sig.r * sig.s1 - sig.b * sig.c;
    let t2 = *d * sig.s1 - sig.nym * sig.c;
    (t1, t2)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// A credential minted directly with the issuer secret, skipping the
    /// (slow) encrypted join. Only for tests of signing and verification.
    pub fn direct_credential<R: RngCore>(
        crs: &DaaPublicParams,
        isk: &IssuerSecret,
        rng: &mut R,
    ) -> DaaCredential {
        loop {
            let sk_u = random_scalar(rng);
            let denom = sk_u + isk.sk_iss;
            if let Some(inv) = Option::<Scalar>::from(denom.invert()) {
                return DaaCredential {
                    a: crs.group.g1 * inv,
                    sk_u,
                };
            }
        }
    }

    pub fn setup(seed: u64) -> (DaaPublicParams, IssuerSecret, DaaCredential, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (crs, isk) = daa_setup(128, &mut rng).unwrap();
        let w = direct_credential(&crs, &isk, &mut rng);
        (crs, isk, w, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::setup;
    use super::*;

    #[test]
    fn setup_is_consistent() {
        let (crs, isk, _, mut rng) = setup(1);
        assert!(crs.is_consistent());
        assert_eq!(crs.gpk2, crs.group.g2 * isk.sk_iss);
        let (_, isk2) = daa_setup(128, &mut rng).unwrap();
        assert_ne!(isk.sk_iss, isk2.sk_iss);
    }

    #[test]
    fn setup_rejects_unknown_lambda() {
        let mut rng = rand::thread_rng();
        assert!(matches!(daa_setup(100, &mut rng), Err(DaaError::Group(_))));
    }

    #[test]
    fn sign_verify_with_basename() {
        let (crs, _, w, mut rng) = setup(2);
        assert!(w.is_valid(&crs));
        let sig = daa_sign(&crs, Some(b"service"), &w, b"hello", &mut rng);
        assert!(sig.d.is_none());
        assert!(daa_verify(&crs, Some(b"service"), b"hello", &sig));
        assert!(!daa_verify(&crs, Some(b"other"), b"hello", &sig));
        assert!(!daa_verify(&crs, None, b"hello", &sig));
    }

    #[test]
    fn sign_verify_without_basename() {
        let (crs, _, w, mut rng) = setup(3);
        let s1 = daa_sign(&crs, None, &w, b"m", &mut rng);
        let s2 = daa_sign(&crs, None, &w, b"m", &mut rng);
        assert!(daa_verify(&crs, None, b"m", &s1));
        assert!(daa_verify(&crs, None, b"m", &s2));
        assert_ne!(s1.d, s2.d);
        assert_ne!(s1.nym, s2.nym);
    }

    #[test]
    fn basename_links() {
        let (crs, _, w, mut rng) = setup(4);
        let s1 = daa_sign(&crs, Some(b"bsn"), &w, b"one", &mut rng);
        let s2 = daa_sign(&crs, Some(b"bsn"), &w, b"two", &mut rng);
        assert_eq!(s1.nym, s2.nym);
        assert_eq!(s1.nym, hash_to_g1(b"bsn") * w.sk_u);
        assert_ne!(s1.r, s2.r);
    }

    #[test]
    fn message_bit_flip_rejects() {
        let (crs, _, w, mut rng) = setup(5);
        let sig = daa_sign(&crs, Some(b"b"), &w, b"message", &mut rng);
        let mut m = b"message".to_vec();
        m[0] ^= 1;
        assert!(!daa_verify(&crs, Some(b"b"), &m, &sig));
    }

    #[test]
    fn every_field_corruption_rejects() {
        let (crs, _, w, mut rng) = setup(6);
        let sig = daa_sign(&crs, Some(b"b"), &w, b"m", &mut rng);
        let g1 = crs.group.g1;
        let one = Scalar::one();
        let variants: Vec<(&str, DaaSignature)> = vec![
            (
                "c",
                DaaSignature {
                    c: sig.c + one,
                    ..sig.clone()
                },
            ),
            (
                "s1",
                DaaSignature {
                    s1: sig.s1 + one,
                    ..sig.clone()
                },
            ),
            (
                "s2",
                DaaSignature {
                    s2: sig.s2 + one,
                    ..sig.clone()
                },
            ),
            (
                "R",
                DaaSignature {
                    r: sig.r + g1,
                    ..sig.clone()
                },
            ),
            (
                "B",
                DaaSignature {
                    b: sig.b + g1,
                    ..sig.clone()
                },
            ),
            (
                "nym",
                DaaSignature {
                    nym: sig.nym + g1,
                    ..sig.clone()
                },
            ),
        ];
        for (field, bad) in variants {
            assert!(!daa_verify(&crs, Some(b"b"), b"m", &bad), "{field}");
        }
    }

    #[test]
    fn identity_points_rejected() {
        let (crs, _, w, mut rng) = setup(7);
        let sig = daa_sign(&crs, Some(b"b"), &w, b"m", &mut rng);
        let bad = DaaSignature {
            r: G1::identity(),
            b: G1::identity(),
            ..sig
        };
        assert!(!daa_verify(&crs, Some(b"b"), b"m", &bad));
    }

    #[test]
    fn pairing_relation_of_honest_signature() {
        let (crs, isk, w, mut rng) = setup(8);
        let sig = daa_sign(&crs, None, &w, b"m", &mut rng);
        assert_eq!(sig.b, sig.r * isk.sk_iss);
        assert_eq!(pairing(&sig.r, &crs.gpk2), pairing(&sig.b, &crs.group.g2));
    }

    #[test]
    fn wire_round_trips() {
        let (crs, _, w, mut rng) = setup(9);
        for bsn in [Some(&b"x"[..]), None] {
            let sig = daa_sign(&crs, bsn, &w, b"m", &mut rng);
            let back = DaaSignature::from_bytes(&sig.to_bytes()).unwrap();
            assert_eq!(back, sig);
        }
        assert_eq!(DaaPublicParams::from_bytes(&crs.to_bytes()).unwrap(), crs);
        assert_eq!(DaaCredential::from_bytes(&w.to_bytes()).unwrap(), w);
        let mut bytes = w.to_bytes();
        bytes[0] = 9;
        assert!(matches!(
            DaaCredential::from_bytes(&bytes),
            Err(DaaError::Codec(CodecError::Version { .. }))
        ));
    }

    #[test]
    fn precompute_cache_hands_out_each_tuple_once() {
        let (crs, _, w, mut rng) = setup(10);
        let cache = PrecomputeCache::new();
        cache.fill(&crs, 3, &mut rng);
        assert_eq!(cache.len(), 3);
        let mut seen = Vec::new();
        while let Some(n) = cache.take() {
            let sig = daa_sign_with(&crs, Some(b"b"), &w, b"m", &n, None, &HashOracle);
            assert!(daa_verify(&crs, Some(b"b"), b"m", &sig));
            seen.push(n.r);
        }
        assert_eq!(seen.len(), 3);
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert!(cache.is_empty());
    }
}
