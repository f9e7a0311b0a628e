//! Additively homomorphic encryption (Paillier, with generator `n + 1`).
//!
//! The plaintext space is `Z_n`. Key generation sizes `n` so that it covers
//! the `2^(λ+3)·p²` range needed by the join protocol, with prime factors of
//! at least 1024 bits.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

/// Floor on the size of each prime factor.
pub const MIN_FACTOR_BITS: u64 = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HomEncError {
    #[error("plaintext out of range: must be below the plaintext bound")]
    PlaintextRange,
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("security parameter {0} below 80")]
    WeakSecurity(u32),
    #[error("prime generation failed: {0}")]
    PrimeGeneration(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl PaillierPublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        let n_squared = &n * &n;
        PaillierPublicKey { n, n_squared }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn modulus_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// Exclusive upper bound on plaintexts (`M_max`).
    pub fn plaintext_bound(&self) -> &BigUint {
        &self.n
    }

    /// Fixed width of a ciphertext in bytes.
    pub fn ciphertext_len(&self) -> usize {
        (self.n_squared.bits() as usize).div_ceil(8)
    }

    pub fn modulus_len(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }

    fn check(&self, c: &HomCiphertext) -> Result<(), HomEncError> {
        if c.0.is_zero() || c.0 >= self.n_squared || !c.0.gcd(&self.n).is_one() {
            return Err(HomEncError::MalformedCiphertext);
        }
        Ok(())
    }

    /// Draws encryption randomness from `Z_n^*`.
    pub fn random_nonce<R: RngCore>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// Deterministic encryption `(1 + n)^m · r^n mod n²`.
    pub fn encrypt_with_nonce(
        &self,
        m: &BigUint,
        r: &BigUint,
    ) -> Result<HomCiphertext, HomEncError> {
        if m >= &self.n {
            return Err(HomEncError::PlaintextRange);
        }
        // (1 + n)^m = 1 + m·n mod n²
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(HomCiphertext((gm * rn) % &self.n_squared))
    }
}

#[derive(Clone)]
pub struct PaillierSecretKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl std::fmt::Debug for PaillierSecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PaillierSecretKey(..)")
    }
}

impl PaillierSecretKey {
    fn from_primes(p: BigUint, q: BigUint) -> Self {
        let n = &p * &q;
        let g = &n + 1u32;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = Self::h(&g, &p, &p_squared);
        let hq = Self::h(&g, &q, &q_squared);
        let q_inv_p = mod_inverse(&(&q % &p), &p).expect("distinct primes are coprime");
        PaillierSecretKey {
            p,
            q,
            p_squared,
            q_squared,
            hp,
            hq,
            q_inv_p,
        }
    }

    // h_p = L_p(g^(p-1) mod p²)^{-1} mod p
    fn h(g: &BigUint, prime: &BigUint, prime_sq: &BigUint) -> BigUint {
        let pm1 = prime - 1u32;
        let l = l_function(&g.modpow(&pm1, prime_sq), prime);
        mod_inverse(&(l % prime), prime).expect("L value is invertible for n + 1")
    }

    fn decrypt_raw(&self, c: &BigUint) -> BigUint {
        let mp = (l_function(&c.modpow(&(&self.p - 1u32), &self.p_squared), &self.p) * &self.hp)
            % &self.p;
        let mq = (l_function(&c.modpow(&(&self.q - 1u32), &self.q_squared), &self.q) * &self.hq)
            % &self.q;
        // Garner recombination
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let h = (diff * &self.q_inv_p) % &self.p;
        mq + h * &self.q
    }
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

pub(crate) fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let a = BigInt::from(a.clone());
    let m_int = BigInt::from(m.clone());
    let e = a.extended_gcd(&m_int);
    if !e.gcd.is_one() {
        return None;
    }
    let x = ((e.x % &m_int) + &m_int) % &m_int;
    x.to_biguint()
}

#[derive(Clone, Debug)]
pub struct HomEncKeyPair {
    pub pk: PaillierPublicKey,
    sk: PaillierSecretKey,
}

impl HomEncKeyPair {
    pub fn secret(&self) -> &PaillierSecretKey {
        &self.sk
    }

    pub fn plaintext_bound(&self) -> &BigUint {
        self.pk.plaintext_bound()
    }
}

/// A Paillier ciphertext in `Z_{n²}^*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HomCiphertext(pub BigUint);

impl HomCiphertext {
    /// Fixed-width big-endian encoding for the given key.
    pub fn to_bytes(&self, pk: &PaillierPublicKey) -> Vec<u8> {
        to_fixed_be(&self.0, pk.ciphertext_len())
    }

    pub fn from_bytes(pk: &PaillierPublicKey, bytes: &[u8]) -> Result<Self, HomEncError> {
        if bytes.len() != pk.ciphertext_len() {
            return Err(HomEncError::MalformedCiphertext);
        }
        let c = HomCiphertext(BigUint::from_bytes_be(bytes));
        pk.check(&c)?;
        Ok(c)
    }
}

pub fn to_fixed_be(n: &BigUint, width: usize) -> Vec<u8> {
    let raw = n.to_bytes_be();
    let mut out = vec![0u8; width.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

/// Minimum bit length of `n` for the join protocol: `⌈log2(2^(λ+3)·p²)⌉`.
pub fn required_modulus_bits(lambda: u32, order: &BigUint) -> u64 {
    let bound = (BigUint::one() << (lambda as usize + 3)) * order * order;
    // bits of (bound - 1) + 1 covers exact powers of two
    (bound - 1u32).bits()
}

/// Bit size of each prime factor chosen for a given security level and order.
pub fn factor_bits(lambda: u32, order: &BigUint) -> u64 {
    // n = p·q with |p| = |q| = b has at least 2b - 1 bits; leave one bit of margin.
    let needed = required_modulus_bits(lambda, order) + 1;
    needed.div_ceil(2).max(MIN_FACTOR_BITS)
}

pub fn he_keygen<R: RngCore>(
    lambda: u32,
    order: &BigUint,
    rng: &mut R,
) -> Result<HomEncKeyPair, HomEncError> {
    if lambda < 80 {
        return Err(HomEncError::WeakSecurity(lambda));
    }
    let bits = factor_bits(lambda, order);
    keygen_with_factor_bits(bits, rng)
}

/// Key generation with explicit prime size. Both factors have their top bit set.
pub fn keygen_with_factor_bits<R: RngCore>(
    bits: u64,
    rng: &mut R,
) -> Result<HomEncKeyPair, HomEncError> {
    let gen = |rng: &mut R| {
        glass_pumpkin::prime::from_rng(bits as usize, &mut RngAdapter(rng))
            .map_err(|e| HomEncError::PrimeGeneration(e.to_string()))
    };
    let p = gen(rng)?;
    let q = loop {
        let q = gen(rng)?;
        if q != p {
            break q;
        }
    };
    let pk = PaillierPublicKey::from_modulus(&p * &q);
    let sk = PaillierSecretKey::from_primes(p, q);
    Ok(HomEncKeyPair { pk, sk })
}

pub fn he_enc<R: RngCore>(
    pk: &PaillierPublicKey,
    m: &BigUint,
    rng: &mut R,
) -> Result<HomCiphertext, HomEncError> {
    let r = pk.random_nonce(rng);
    pk.encrypt_with_nonce(m, &r)
}

pub fn he_dec(keys: &HomEncKeyPair, c: &HomCiphertext) -> Result<BigUint, HomEncError> {
    keys.pk.check(c)?;
    Ok(keys.sk.decrypt_raw(&c.0))
}

pub fn he_add(
    pk: &PaillierPublicKey,
    c1: &HomCiphertext,
    c2: &HomCiphertext,
) -> Result<HomCiphertext, HomEncError> {
    pk.check(c1)?;
    pk.check(c2)?;
    Ok(HomCiphertext((&c1.0 * &c2.0) % &pk.n_squared))
}

pub fn he_mulc(
    pk: &PaillierPublicKey,
    c: &HomCiphertext,
    k: &BigUint,
) -> Result<HomCiphertext, HomEncError> {
    pk.check(c)?;
    Ok(HomCiphertext(c.0.modpow(k, &pk.n_squared)))
}

/// Wraps a `rand 0.8` RNG for `glass_pumpkin`'s `rand_core 0.6` bound.
struct RngAdapter<'a, R: RngCore>(&'a mut R);

impl<R: RngCore> rand::RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

impl<R: RngCore> rand::CryptoRng for RngAdapter<'_, R> {}

#[cfg(test)]
pub(crate) mod test_keys {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    /// One full-size key shared across unit tests; prime generation is slow.
    pub fn shared() -> &'static HomEncKeyPair {
        static KEY: OnceLock<HomEncKeyPair> = OnceLock::new();
        KEY.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
            he_keygen(128, &crate::groups::group_order(), &mut rng).unwrap()
        })
    }
}
