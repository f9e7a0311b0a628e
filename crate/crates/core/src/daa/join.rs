//! Blind credential issuance.
//!
//! The platform commits to `u'` as `U' = g1^u'` and `Enc(u')` under its own
//! Paillier key, and proves the two hide the same value. The issuer adds its
//! share `u''` and its secret under encryption, masks the sum with `b` and
//! `k·p`, and returns `A' = g1^b`. Decrypting gives
//! `t = b·(u' + u'' + sk_iss) + k·p`, and `A = A'^(1/t mod p)` is the
//! credential on `sk_u = u' + u''`.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{check_version, DaaCredential, DaaError, DaaPublicParams, IssuerSecret, WIRE_VERSION};
use crate::codec::{Reader, Writer};
use crate::groups::{
    biguint_to_scalar, g1_from_bytes, g1_to_bytes, g2_to_bytes, group_order, random_nonzero_scalar,
    random_scalar, scalar_from_bytes, scalar_to_biguint, scalar_to_bytes, Scalar, G1,
};
use crate::homenc::{
    he_add, he_dec, he_enc, he_keygen, he_mulc, to_fixed_be, HomCiphertext, HomEncKeyPair,
    PaillierPublicKey,
};

/// Statistical slack (bits) of the interval proof on `α`.
pub const SOK_SLACK_BITS: usize = 64;

const SOK_TAG: &[u8] = b"join-sok";

/// Fiat-Shamir proof that `U' = g1^α`, `c = Enc(pk_E, α)` and `α` is small.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinSok {
    pub commit_u: G1,
    pub commit_c: HomCiphertext,
    pub challenge: BigUint,
    pub response: BigUint,
    pub response_nonce: BigUint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinRequest {
    pub u_prime: G1,
    pub pk_e: PaillierPublicKey,
    pub c_u_prime: HomCiphertext,
    pub sok: JoinSok,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JoinResponse {
    pub c_u_dblprime: HomCiphertext,
    pub a_prime: G1,
    pub u_dblprime: Scalar,
}

/// Platform-side secrets retained between the two join messages.
#[derive(Clone, Debug)]
pub struct PlatformJoinState {
    keys: HomEncKeyPair,
    u_prime: Scalar,
}

impl PlatformJoinState {
    pub fn u_prime(&self) -> &Scalar {
        &self.u_prime
    }

    pub fn keys(&self) -> &HomEncKeyPair {
        &self.keys
    }
}

fn join_context(crs: &DaaPublicParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&g1_to_bytes(&crs.group.g1))
        .bytes(&g1_to_bytes(&crs.gpk1))
        .bytes(&g2_to_bytes(&crs.gpk2));
    w.finish()
}

/// Exclusive bound on honest responses: `2^(λ + slack)·p + 2^λ·p`.
fn response_bound(lambda: u32) -> BigUint {
    let p = group_order();
    let mask_bound = mask_bound(lambda);
    mask_bound + (BigUint::one() << lambda as usize) * p
}

fn mask_bound(lambda: u32) -> BigUint {
    (BigUint::one() << (lambda as usize + SOK_SLACK_BITS)) * group_order()
}

fn sok_challenge(
    crs: &DaaPublicParams,
    u_prime: &G1,
    pk: &PaillierPublicKey,
    c: &HomCiphertext,
    commit_u: &G1,
    commit_c: &HomCiphertext,
) -> BigUint {
    let mut w = Writer::new();
    w.bytes(SOK_TAG)
        .bytes(&join_context(crs))
        .bytes(&g1_to_bytes(u_prime))
        .bytes(&pk.modulus().to_bytes_be())
        .bytes(&c.to_bytes(pk))
        .bytes(&g1_to_bytes(commit_u))
        .bytes(&commit_c.to_bytes(pk));
    let digest = Sha256::digest(w.finish());
    let full = BigUint::from_bytes_be(&digest);
    let lambda = crs.lambda() as u64;
    full >> (256 - lambda.min(256))
}

/// Proves knowledge of `α` behind `(g1^α, Enc(pk, α; nonce))`.
pub fn sok_join_prove<R: RngCore>(
    crs: &DaaPublicParams,
    pk: &PaillierPublicKey,
    alpha: &Scalar,
    nonce: &BigUint,
    rng: &mut R,
) -> Result<(G1, HomCiphertext, JoinSok), DaaError> {
    let alpha_int = scalar_to_biguint(alpha);
    let u_prime = crs.group.g1 * alpha;
    let c = pk.encrypt_with_nonce(&alpha_int, nonce)?;

    let rho = rng.gen_biguint_below(&mask_bound(crs.lambda()));
    let rho_nonce = pk.random_nonce(rng);
    let commit_u = crs.group.g1 * biguint_to_scalar(&rho);
    let commit_c = pk.encrypt_with_nonce(&rho, &rho_nonce)?;

    let challenge = sok_challenge(crs, &u_prime, pk, &c, &commit_u, &commit_c);
    let response = rho + &challenge * alpha_int;
    let response_nonce = (rho_nonce * nonce.modpow(&challenge, pk.modulus())) % pk.modulus();
    Ok((
        u_prime,
        c,
        JoinSok {
            commit_u,
            commit_c,
            challenge,
            response,
            response_nonce,
        },
    ))
}

pub fn sok_join_verify(
    crs: &DaaPublicParams,
    u_prime: &G1,
    pk: &PaillierPublicKey,
    c: &HomCiphertext,
    proof: &JoinSok,
) -> bool {
    if proof.response >= response_bound(crs.lambda())
        || proof.response >= *pk.modulus()
        || proof.response_nonce.is_zero()
        || proof.response_nonce >= *pk.modulus()
        || bool::from(u_prime.is_identity())
    {
        return false;
    }
    let expected = sok_challenge(crs, u_prime, pk, c, &proof.commit_u, &proof.commit_c);
    if expected != proof.challenge {
        return false;
    }
    let ch_scalar = biguint_to_scalar(&proof.challenge);
    if crs.group.g1 * biguint_to_scalar(&proof.response) != proof.commit_u + u_prime * ch_scalar {
        return false;
    }
    let Ok(lhs) = pk.encrypt_with_nonce(&proof.response, &proof.response_nonce) else {
        return false;
    };
    let Ok(c_pow) = he_mulc(pk, c, &proof.challenge) else {
        return false;
    };
    match he_add(pk, &proof.commit_c, &c_pow) {
        Ok(rhs) => lhs == rhs,
        Err(_) => false,
    }
}

/// Generates a fresh encryption key pair and the first join message.
pub fn join_init<R: RngCore>(
    crs: &DaaPublicParams,
    rng: &mut R,
) -> Result<(PlatformJoinState, JoinRequest), DaaError> {
    let keys = he_keygen(crs.lambda(), &group_order(), rng)?;
    join_init_with_keys(crs, keys, rng)
}

/// Like [`join_init`] with a caller-provided encryption key pair.
pub fn join_init_with_keys<R: RngCore>(
    crs: &DaaPublicParams,
    keys: HomEncKeyPair,
    rng: &mut R,
) -> Result<(PlatformJoinState, JoinRequest), DaaError> {
    let u_prime = random_scalar(rng);
    let nonce = keys.pk.random_nonce(rng);
    let (u_point, c_u_prime, sok) = sok_join_prove(crs, &keys.pk, &u_prime, &nonce, rng)?;
    let request = JoinRequest {
        u_prime: u_point,
        pk_e: keys.pk.clone(),
        c_u_prime,
        sok,
    };
    Ok((PlatformJoinState { keys, u_prime }, request))
}

/// Issuer side. Refuses requests whose proof does not verify.
pub fn issue<R: RngCore>(
    crs: &DaaPublicParams,
    isk: &IssuerSecret,
    req: &JoinRequest,
    rng: &mut R,
) -> Result<JoinResponse, DaaError> {
    if !sok_join_verify(crs, &req.u_prime, &req.pk_e, &req.c_u_prime, &req.sok) {
        return Err(DaaError::SokRejected);
    }
    let pk = &req.pk_e;
    let p = group_order();
    let lambda = crs.lambda() as usize;
    let k_bound = (BigUint::one() << (lambda + 2)) * &p;
    // t < p·(response_bound + 2p) + k_bound·p must not wrap mod n
    let t_max = &p * (response_bound(crs.lambda()) + &p * 2u32) + &k_bound * &p;
    if pk.modulus() <= &t_max {
        return Err(DaaError::ModulusTooSmall);
    }

    let u_dblprime = random_scalar(rng);
    let b = random_nonzero_scalar(rng);
    let c_u2 = he_enc(pk, &scalar_to_biguint(&u_dblprime), rng)?;
    let c_iss = he_enc(pk, &scalar_to_biguint(&isk.sk_iss), rng)?;
    let c1 = he_add(pk, &he_add(pk, &req.c_u_prime, &c_u2)?, &c_iss)?;
    let c2 = he_mulc(pk, &c1, &scalar_to_biguint(&b))?;
    let k = rng.gen_biguint_below(&k_bound);
    let c_mask = he_enc(pk, &(k * &p), rng)?;
    let c_u_dblprime = he_add(pk, &c2, &c_mask)?;
    Ok(JoinResponse {
        c_u_dblprime,
        a_prime: crs.group.g1 * b,
        u_dblprime,
    })
}

/// Unblinds the issuer response and checks `e(A, g2^sk_u · gpk2) = gT`.
pub fn join_finish(
    crs: &DaaPublicParams,
    state: &PlatformJoinState,
    resp: &JoinResponse,
) -> Result<DaaCredential, DaaError> {
    let t = he_dec(&state.keys, &resp.c_u_dblprime)?;
    let t_mod_p = biguint_to_scalar(&t);
    let t_inv: Scalar = Option::from(t_mod_p.invert()).ok_or(DaaError::CredentialInvalid)?;
    let sk_u = state.u_prime + resp.u_dblprime;
    let credential = DaaCredential {
        a: resp.a_prime * t_inv,
        sk_u,
    };
    if credential.is_valid(crs) {
        Ok(credential)
    } else {
        Err(DaaError::CredentialInvalid)
    }
}

impl JoinRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let pk = &self.pk_e;
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .raw(&g1_to_bytes(&self.u_prime))
            .bytes(&pk.modulus().to_bytes_be())
            .raw(&self.c_u_prime.to_bytes(pk))
            .raw(&g1_to_bytes(&self.sok.commit_u))
            .raw(&self.sok.commit_c.to_bytes(pk))
            .bytes(&self.sok.challenge.to_bytes_be())
            .bytes(&self.sok.response.to_bytes_be())
            .raw(&to_fixed_be(&self.sok.response_nonce, pk.modulus_len()));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DaaError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r, "join request")?;
        let u_prime = g1_from_bytes(r.raw(48, "U'")?)?;
        let pk_e = PaillierPublicKey::from_modulus(BigUint::from_bytes_be(r.bytes("n")?));
        let clen = pk_e.ciphertext_len();
        let c_u_prime = HomCiphertext::from_bytes(&pk_e, r.raw(clen, "c_u'")?)?;
        let commit_u = g1_from_bytes(r.raw(48, "sok commit U")?)?;
        let commit_c = HomCiphertext::from_bytes(&pk_e, r.raw(clen, "sok commit c")?)?;
        let challenge = BigUint::from_bytes_be(r.bytes("sok challenge")?);
        let response = BigUint::from_bytes_be(r.bytes("sok response")?);
        let response_nonce = BigUint::from_bytes_be(r.raw(pk_e.modulus_len(), "sok nonce")?);
        r.finish()?;
        Ok(JoinRequest {
            u_prime,
            pk_e,
            c_u_prime,
            sok: JoinSok {
                commit_u,
                commit_c,
                challenge,
                response,
                response_nonce,
            },
        })
    }
}

impl JoinResponse {
    pub fn to_bytes(&self, pk: &PaillierPublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(WIRE_VERSION)
            .bytes(&self.c_u_dblprime.to_bytes(pk))
            .raw(&g1_to_bytes(&self.a_prime))
            .raw(&scalar_to_bytes(&self.u_dblprime));
        w.finish()
    }

    pub fn from_bytes(pk: &PaillierPublicKey, bytes: &[u8]) -> Result<Self, DaaError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r, "join response")?;
        let c_u_dblprime = HomCiphertext::from_bytes(pk, r.bytes("c_u''")?)?;
        let a_prime = g1_from_bytes(r.raw(48, "A'")?)?;
        let u_dblprime = scalar_from_bytes(r.raw(32, "u''")?)?;
        r.finish()?;
        Ok(JoinResponse {
            c_u_dblprime,
            a_prime,
            u_dblprime,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daa::daa_setup;
    use crate::groups::pairing;
    use crate::homenc::test_keys;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(seed: u64) -> (DaaPublicParams, IssuerSecret, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (crs, isk) = daa_setup(128, &mut rng).unwrap();
        (crs, isk, rng)
    }

    fn init(crs: &DaaPublicParams, rng: &mut ChaCha20Rng) -> (PlatformJoinState, JoinRequest) {
        join_init_with_keys(crs, test_keys::shared().clone(), rng).unwrap()
    }

    #[test]
    fn honest_request_proof_verifies() {
        let (crs, _, mut rng) = setup(30);
        let (state, req) = init(&crs, &mut rng);
        assert!(sok_join_verify(
            &crs,
            &req.u_prime,
            &req.pk_e,
            &req.c_u_prime,
            &req.sok
        ));
        assert_eq!(req.u_prime, crs.group.g1 * state.u_prime);
        assert_eq!(
            he_dec(&state.keys, &req.c_u_prime).unwrap(),
            scalar_to_biguint(&state.u_prime)
        );
    }

    #[test]
    fn proof_binds_statement_and_context() {
        let (crs, _, mut rng) = setup(31);
        let (_, req) = init(&crs, &mut rng);
        let other_u = req.u_prime + crs.group.g1;
        assert!(!sok_join_verify(
            &crs,
            &other_u,
            &req.pk_e,
            &req.c_u_prime,
            &req.sok
        ));
        let (other_crs, _) = daa_setup(128, &mut rng).unwrap();
        let swapped = DaaPublicParams {
            gpk1: other_crs.gpk1,
            gpk2: other_crs.gpk2,
            ..crs.clone()
        };
        assert!(!sok_join_verify(
            &swapped,
            &req.u_prime,
            &req.pk_e,
            &req.c_u_prime,
            &req.sok
        ));
    }

    #[test]
    fn oversized_response_rejected() {
        let (crs, _, mut rng) = setup(32);
        let (_, mut req) = init(&crs, &mut rng);
        req.sok.response += response_bound(crs.lambda());
        assert!(!sok_join_verify(
            &crs,
            &req.u_prime,
            &req.pk_e,
            &req.c_u_prime,
            &req.sok
        ));
    }

    #[test]
    fn full_join_yields_valid_credential() {
        let (crs, isk, mut rng) = setup(33);
        let (state, req) = init(&crs, &mut rng);
        let resp = issue(&crs, &isk, &req, &mut rng).unwrap();
        let w = join_finish(&crs, &state, &resp).unwrap();
        assert_eq!(w.sk_u, state.u_prime + resp.u_dblprime);
        let u = crs.group.g2 * w.sk_u;
        assert_eq!(pairing(&w.a, &(u + crs.gpk2)), crs.group.gt);
        assert_eq!(w.a * (w.sk_u + isk.sk_iss), crs.group.g1);
    }

    #[test]
    fn tampered_challenge_refused() {
        let (crs, isk, mut rng) = setup(34);
        let (_, mut req) = init(&crs, &mut rng);
        let mut bytes = req.sok.challenge.to_bytes_be();
        bytes[0] ^= 0x01;
        req.sok.challenge = BigUint::from_bytes_be(&bytes);
        assert!(matches!(
            issue(&crs, &isk, &req, &mut rng),
            Err(DaaError::SokRejected)
        ));
    }

    #[test]
    fn issuance_is_randomized() {
        let (crs, isk, mut rng) = setup(35);
        let (_, req) = init(&crs, &mut rng);
        let r1 = issue(&crs, &isk, &req, &mut rng).unwrap();
        let r2 = issue(&crs, &isk, &req, &mut rng).unwrap();
        assert_ne!(r1.a_prime, r2.a_prime);
    }

    #[test]
    fn corrupted_response_detected() {
        let (crs, isk, mut rng) = setup(36);
        let (state, req) = init(&crs, &mut rng);
        let resp = issue(&crs, &isk, &req, &mut rng).unwrap();
        let bad_a = JoinResponse {
            a_prime: crs.group.g1,
            ..resp.clone()
        };
        assert!(matches!(
            join_finish(&crs, &state, &bad_a),
            Err(DaaError::CredentialInvalid)
        ));
        let bad_u = JoinResponse {
            u_dblprime: resp.u_dblprime + Scalar::one(),
            ..resp.clone()
        };
        assert!(join_finish(&crs, &state, &bad_u).is_err());
        let bad_c = JoinResponse {
            c_u_dblprime: he_add(&req.pk_e, &resp.c_u_dblprime, &resp.c_u_dblprime).unwrap(),
            ..resp
        };
        assert!(join_finish(&crs, &state, &bad_c).is_err());
    }

    #[test]
    fn messages_round_trip() {
        let (crs, isk, mut rng) = setup(37);
        let (_, req) = init(&crs, &mut rng);
        let back = JoinRequest::from_bytes(&req.to_bytes()).unwrap();
        assert_eq!(back, req);
        let resp = issue(&crs, &isk, &req, &mut rng).unwrap();
        let back = JoinResponse::from_bytes(&req.pk_e, &resp.to_bytes(&req.pk_e)).unwrap();
        assert_eq!(back, resp);
    }

    #[test]
    fn issuer_view_hides_u_prime() {
        let (crs, _, mut rng) = setup(38);
        let (state, req) = init(&crs, &mut rng);
        let wire = req.to_bytes();
        let secret = scalar_to_bytes(&state.u_prime);
        assert!(!wire.windows(secret.len()).any(|w| w == secret));
        let secret_be = scalar_to_biguint(&state.u_prime).to_bytes_be();
        assert!(!wire
            .windows(secret_be.len())
            .any(|w| w == secret_be.as_slice()));
    }
}
