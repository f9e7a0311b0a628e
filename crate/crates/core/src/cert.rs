//! Minimal vendor certificates over P-256.
//!
//! A certificate is the length-prefixed record `subject ‖ public key ‖ issuer
//! ‖ signature`, where the issuer signs `subject ‖ public key ‖ issuer`. The
//! repository bundles one deterministic test vendor CA; everything that
//! ships "vendor certified" (endorsement keys, RTM device keys, boot-stage
//! keys) chains to it.

use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use ring::signature::{UnparsedPublicKey, ECDSA_P256_SHA256_FIXED};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};

/// Uncompressed SEC1 point length.
pub const PUBLIC_KEY_BYTES: usize = 65;
pub const SIGNATURE_BYTES: usize = 64;

const CERT_VERSION: u8 = 1;
const BUNDLED_CA_SEED: &[u8] = b"simtpm test vendor CA v1";

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum CertError {
    #[error("certificate issued by {got}, expected {expected}")]
    WrongIssuer { expected: String, got: String },
    #[error("certificate signature does not verify")]
    BadSignature,
    #[error("malformed public key")]
    BadKey,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Deterministic signing key for a named role, used for test fixtures and
/// the bundled CA.
pub fn derive_signing_key(label: &[u8]) -> SigningKey {
    let mut counter = 0u32;
    loop {
        let mut h = Sha256::new();
        h.update(b"simtpm-derive-key");
        h.update(counter.to_be_bytes());
        h.update(label);
        if let Ok(key) = SigningKey::from_slice(&h.finalize()) {
            return key;
        }
        counter += 1;
    }
}

pub fn public_key_bytes(key: &VerifyingKey) -> [u8; PUBLIC_KEY_BYTES] {
    key.to_encoded_point(false)
        .as_bytes()
        .try_into()
        .expect("uncompressed point")
}

pub fn public_key_from_bytes(bytes: &[u8]) -> Result<VerifyingKey, CertError> {
    VerifyingKey::from_sec1_bytes(bytes).map_err(|_| CertError::BadKey)
}

/// SHA-256 of the uncompressed public key; used as a key name.
pub fn key_name(key: &VerifyingKey) -> [u8; 32] {
    Sha256::digest(public_key_bytes(key)).into()
}

pub fn signature_bytes(sig: &Signature) -> [u8; SIGNATURE_BYTES] {
    sig.to_bytes().into()
}

pub fn signature_from_bytes(bytes: &[u8]) -> Option<Signature> {
    Signature::from_slice(bytes).ok()
}

/// ECDSA-SHA256 verification of a fixed-width `r ‖ s` signature; malformed
/// signatures simply fail.
pub fn verify_bytes(key: &VerifyingKey, msg: &[u8], sig: &[u8]) -> bool {
    UnparsedPublicKey::new(&ECDSA_P256_SHA256_FIXED, public_key_bytes(key))
        .verify(msg, sig)
        .is_ok()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    pub public_key: [u8; PUBLIC_KEY_BYTES],
    pub issuer: String,
    pub signature: [u8; SIGNATURE_BYTES],
}

impl Certificate {
    fn tbs(subject: &str, public_key: &[u8], issuer: &str) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(subject.as_bytes())
            .bytes(public_key)
            .bytes(issuer.as_bytes());
        w.finish()
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, CertError> {
        public_key_from_bytes(&self.public_key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(CERT_VERSION)
            .bytes(self.subject.as_bytes())
            .bytes(&self.public_key)
            .bytes(self.issuer.as_bytes())
            .raw(&self.signature);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CertError> {
        let mut r = Reader::new(bytes);
        let version = r.u8("certificate version")?;
        if version != CERT_VERSION {
            return Err(CodecError::Version {
                what: "certificate",
                got: version,
            }
            .into());
        }
        let subject = utf8(r.bytes("subject")?)?;
        let public_key = r
            .bytes("public key")?
            .try_into()
            .map_err(|_| CertError::BadKey)?;
        let issuer = utf8(r.bytes("issuer")?)?;
        let signature = r.array("certificate signature")?;
        r.finish()?;
        Ok(Certificate {
            subject,
            public_key,
            issuer,
            signature,
        })
    }
}

fn utf8(bytes: &[u8]) -> Result<String, CertError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| CodecError::Invalid("utf-8 name").into())
}

/// Issuing side of a certificate authority.
#[derive(Clone)]
pub struct CertAuthority {
    name: String,
    key: SigningKey,
}

impl CertAuthority {
    pub fn new(name: impl Into<String>, key: SigningKey) -> Self {
        CertAuthority {
            name: name.into(),
            key,
        }
    }

    /// The test vendor CA shipped with the emulator.
    pub fn bundled_vendor() -> Self {
        Self::new("simtpm-test-vendor", derive_signing_key(BUNDLED_CA_SEED))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            name: self.name.clone(),
            key: *self.key.verifying_key(),
        }
    }

    pub fn issue(&self, subject: impl Into<String>, key: &VerifyingKey) -> Certificate {
        let subject = subject.into();
        let public_key = public_key_bytes(key);
        let sig: Signature = self
            .key
            .sign(&Certificate::tbs(&subject, &public_key, &self.name));
        Certificate {
            subject,
            public_key,
            issuer: self.name.clone(),
            signature: signature_bytes(&sig),
        }
    }
}

impl std::fmt::Debug for CertAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CertAuthority")
            .field("name", &self.name)
            .finish()
    }
}

/// Verifying side of a certificate authority.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrustAnchor {
    pub name: String,
    pub key: VerifyingKey,
}

impl TrustAnchor {
    pub fn bundled_vendor() -> Self {
        CertAuthority::bundled_vendor().anchor()
    }

    /// Checks issuer name and signature, returning the certified key.
    pub fn verify(&self, cert: &Certificate) -> Result<VerifyingKey, CertError> {
        if cert.issuer != self.name {
            return Err(CertError::WrongIssuer {
                expected: self.name.clone(),
                got: cert.issuer.clone(),
            });
        }
        let tbs = Certificate::tbs(&cert.subject, &cert.public_key, &cert.issuer);
        if !verify_bytes(&self.key, &tbs, &cert.signature) {
            return Err(CertError::BadSignature);
        }
        cert.verifying_key()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn issued_certificate_verifies() {
        let ca = CertAuthority::bundled_vendor();
        let device = derive_signing_key(b"device");
        let cert = ca.issue("device-1", device.verifying_key());
        let key = TrustAnchor::bundled_vendor().verify(&cert).unwrap();
        assert_eq!(&key, device.verifying_key());
        let back = Certificate::from_bytes(&cert.to_bytes()).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn self_signed_rejected() {
        let device = derive_signing_key(b"device");
        let rogue = CertAuthority::new("simtpm-test-vendor", device.clone());
        let cert = rogue.issue("device-1", device.verifying_key());
        assert_eq!(
            TrustAnchor::bundled_vendor().verify(&cert),
            Err(CertError::BadSignature)
        );
    }

    #[test]
    fn tampered_subject_rejected() {
        let ca = CertAuthority::bundled_vendor();
        let mut cert = ca.issue("device-1", derive_signing_key(b"d").verifying_key());
        cert.subject.push('x');
        assert!(ca.anchor().verify(&cert).is_err());
        cert.subject.pop();
        cert.issuer = "other".into();
        assert!(matches!(
            ca.anchor().verify(&cert),
            Err(CertError::WrongIssuer { .. })
        ));
    }

    #[test]
    fn derived_keys_are_stable_and_distinct() {
        assert_eq!(derive_signing_key(b"a"), derive_signing_key(b"a"));
        assert_ne!(derive_signing_key(b"a"), derive_signing_key(b"b"));
    }
}
