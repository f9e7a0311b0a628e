//! ECIES sealing, PCR policies and the sealed blob format.
//!
//! Each blob is encrypted to its parent storage key with an ephemeral P-256
//! key agreement, HKDF-SHA-256 and AES-256-GCM. The encoded policy and the
//! parent key name are the AEAD associated data, so any change to the blob
//! surfaces as an authentication failure before the policy is evaluated.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use hkdf::Hkdf;
use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::{PcrBank, TpmError, PCR_COUNT};
use crate::cert::{public_key_bytes, signature_bytes, verify_bytes, PUBLIC_KEY_BYTES};
use crate::codec::{CodecError, Reader, Writer};

const BLOB_VERSION: u8 = 1;
const ECIES_INFO: &[u8] = b"simtpm-ecies-v1";
const APPROVAL_TAG: &[u8] = b"simtpm-policy-approve";

/// Bitmap of PCR indices, bit `i` selecting PCR `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct PcrSelection(pub u32);

impl PcrSelection {
    pub fn from_indices(indices: &[usize]) -> Result<Self, TpmError> {
        let mut bits = 0u32;
        for &i in indices {
            if i >= PCR_COUNT {
                return Err(TpmError::BadPcrIndex(i));
            }
            bits |= 1 << i;
        }
        Ok(PcrSelection(bits))
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..PCR_COUNT).filter(move |i| self.0 & (1 << i) != 0)
    }

    pub fn contains(self, index: usize) -> bool {
        index < PCR_COUNT && self.0 & (1 << index) != 0
    }

    pub fn is_valid(self) -> bool {
        self.0 >> PCR_COUNT == 0
    }
}

/// Release condition attached to sealed data and NV regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Policy {
    None,
    /// Composite digest of the selected PCRs must match.
    PcrBound {
        selection: PcrSelection,
        digest: [u8; 32],
    },
    /// The current composite digest must carry an approval signed by
    /// `authority`.
    Authorized {
        authority: [u8; PUBLIC_KEY_BYTES],
        selection: PcrSelection,
    },
}

impl Policy {
    /// Binds to the current values of `selection`.
    pub fn pcr_bound(pcrs: &PcrBank, selection: PcrSelection) -> Self {
        Policy::PcrBound {
            selection,
            digest: pcrs.composite(selection),
        }
    }

    pub fn authorized(authority: &VerifyingKey, selection: PcrSelection) -> Self {
        Policy::Authorized {
            authority: public_key_bytes(authority),
            selection,
        }
    }

    pub fn evaluate(&self, pcrs: &PcrBank, approvals: &[PolicyApproval]) -> Result<(), TpmError> {
        match self {
            Policy::None => Ok(()),
            Policy::PcrBound { selection, digest } => {
                if pcrs.composite(*selection) == *digest {
                    Ok(())
                } else {
                    Err(TpmError::PolicyViolation("PCR digest mismatch"))
                }
            }
            Policy::Authorized {
                authority,
                selection,
            } => {
                let key = VerifyingKey::from_sec1_bytes(authority)
                    .map_err(|_| TpmError::PolicyViolation("bad authority key"))?;
                let current = pcrs.composite(*selection);
                let approved = approvals.iter().any(|a| {
                    a.digest == current
                        && verify_bytes(
                            &key,
                            &approval_message(*selection, &a.digest),
                            &a.signature,
                        )
                });
                if approved {
                    Ok(())
                } else {
                    Err(TpmError::PolicyViolation("state not approved by authority"))
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Policy::None => {
                w.u8(0);
            }
            Policy::PcrBound { selection, digest } => {
                w.u8(1).u32(selection.0).raw(digest);
            }
            Policy::Authorized {
                authority,
                selection,
            } => {
                w.u8(2).u32(selection.0).raw(authority);
            }
        }
        w.finish()
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let policy = match r.u8("policy kind")? {
            0 => Policy::None,
            1 => Policy::PcrBound {
                selection: read_selection(r)?,
                digest: r.array("policy digest")?,
            },
            2 => Policy::Authorized {
                selection: read_selection(r)?,
                authority: r.array("policy authority")?,
            },
            _ => return Err(CodecError::Invalid("policy kind")),
        };
        Ok(policy)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }
}

fn read_selection(r: &mut Reader<'_>) -> Result<PcrSelection, CodecError> {
    let sel = PcrSelection(r.u32("PCR selection")?);
    if sel.is_valid() {
        Ok(sel)
    } else {
        Err(CodecError::Invalid("PCR selection"))
    }
}

fn approval_message(selection: PcrSelection, digest: &[u8; 32]) -> Vec<u8> {
    let mut msg = APPROVAL_TAG.to_vec();
    msg.extend_from_slice(&selection.0.to_be_bytes());
    msg.extend_from_slice(digest);
    msg
}

/// An authority's signature over one acceptable composite digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyApproval {
    pub digest: [u8; 32],
    pub signature: [u8; 64],
}

impl PolicyApproval {
    pub fn sign(authority: &SigningKey, selection: PcrSelection, digest: [u8; 32]) -> Self {
        let sig: Signature = authority.sign(&approval_message(selection, &digest));
        PolicyApproval {
            digest,
            signature: signature_bytes(&sig),
        }
    }

    pub fn list_to_bytes(list: &[PolicyApproval]) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(list.len() as u32);
        for a in list {
            w.raw(&a.digest).raw(&a.signature);
        }
        w.finish()
    }

    pub fn list_from_bytes(bytes: &[u8]) -> Result<Vec<Self>, CodecError> {
        let mut r = Reader::new(bytes);
        let n = r.u32("approval count")? as usize;
        if n > r.remaining() / 96 {
            return Err(CodecError::Truncated("approvals"));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(PolicyApproval {
                digest: r.array("approval digest")?,
                signature: r.array("approval signature")?,
            });
        }
        r.finish()?;
        Ok(out)
    }
}

/// Ephemeral public key plus AES-GCM ciphertext (tag appended).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EciesBox {
    pub ephemeral: [u8; PUBLIC_KEY_BYTES],
    pub ciphertext: Vec<u8>,
}

fn ecies_cipher(shared: &[u8], ephemeral: &[u8]) -> (Aes256Gcm, [u8; 12]) {
    let hk = Hkdf::<Sha256>::new(Some(ephemeral), shared);
    let mut okm = [0u8; 44];
    hk.expand(ECIES_INFO, &mut okm)
        .expect("44 bytes is a valid HKDF length");
    let cipher = Aes256Gcm::new_from_slice(&okm[..32]).expect("32-byte key");
    let nonce: [u8; 12] = okm[32..].try_into().expect("12-byte nonce");
    (cipher, nonce)
}

pub fn ecies_encrypt<R: RngCore + CryptoRng>(
    recipient: &PublicKey,
    aad: &[u8],
    plaintext: &[u8],
    rng: &mut R,
) -> EciesBox {
    let eph = SecretKey::random(rng);
    let ephemeral: [u8; PUBLIC_KEY_BYTES] = eph
        .public_key()
        .to_encoded_point(false)
        .as_bytes()
        .try_into()
        .expect("uncompressed point");
    let shared = p256::ecdh::diffie_hellman(eph.to_nonzero_scalar(), recipient.as_affine());
    let (cipher, nonce) = ecies_cipher(shared.raw_secret_bytes(), &ephemeral);
    let ciphertext = cipher
        .encrypt(
            &Nonce::from(nonce),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("AES-GCM encryption");
    EciesBox {
        ephemeral,
        ciphertext,
    }
}

pub fn ecies_decrypt(
    secret: &SecretKey,
    aad: &[u8],
    sealed: &EciesBox,
) -> Result<Vec<u8>, TpmError> {
    let eph = PublicKey::from_sec1_bytes(&sealed.ephemeral).map_err(|_| TpmError::Integrity)?;
    let shared = p256::ecdh::diffie_hellman(secret.to_nonzero_scalar(), eph.as_affine());
    let (cipher, nonce) = ecies_cipher(shared.raw_secret_bytes(), &sealed.ephemeral);
    cipher
        .decrypt(
            &Nonce::from(nonce),
            Payload {
                msg: &sealed.ciphertext,
                aad,
            },
        )
        .map_err(|_| TpmError::Integrity)
}

/// Name of a storage key: SHA-256 of its uncompressed public point.
pub fn storage_key_name(key: &PublicKey) -> [u8; 32] {
    Sha256::digest(key.to_encoded_point(false).as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub parent: [u8; 32],
    pub policy: Policy,
    pub sealed: EciesBox,
}

impl SealedBlob {
    pub(crate) fn aad(parent: &[u8; 32], policy: &Policy) -> Vec<u8> {
        let mut aad = b"simtpm-seal".to_vec();
        aad.extend_from_slice(parent);
        aad.extend_from_slice(&policy.to_bytes());
        aad
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(BLOB_VERSION)
            .raw(&self.parent)
            .bytes(&self.policy.to_bytes())
            .raw(&self.sealed.ephemeral)
            .bytes(&self.sealed.ciphertext);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let version = r.u8("blob version")?;
        if version != BLOB_VERSION {
            return Err(CodecError::Version {
                what: "sealed blob",
                got: version,
            });
        }
        let parent = r.array("parent name")?;
        let policy = Policy::from_bytes(r.bytes("policy")?)?;
        let ephemeral = r.array("ephemeral key")?;
        let ciphertext = r.bytes("ciphertext")?.to_vec();
        r.finish()?;
        Ok(SealedBlob {
            parent,
            policy,
            sealed: EciesBox {
                ephemeral,
                ciphertext,
            },
        })
    }
}
