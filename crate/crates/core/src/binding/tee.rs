//! TEE-proxy channel: an ECDH handshake authenticated by the device's
//! vendor-certified key, followed by AES-GCM frames with per-direction keys
//! and strictly increasing counters.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use hkdf::Hkdf;
use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use thiserror::Error;

use crate::apdu::{
    chunk_payload_with, decode_response, encode_command, ApduCommand, ApduError, ApduResponse,
};
use crate::cert::{signature_bytes, verify_bytes, Certificate, PUBLIC_KEY_BYTES, SIGNATURE_BYTES};
use crate::codec::{CodecError, Reader, Writer};

/// Direction tag for frames sent by the device.
pub const TO_CARD: u8 = 0x01;
/// Direction tag for frames sent by the card.
pub const TO_DEVICE: u8 = 0x02;

const HELLO_TAG: &[u8] = b"simtpm-tee-hello";

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TeeError {
    #[error("channel not established")]
    NotEstablished,
    #[error("card key rejected")]
    BadCardKey,
    #[error("response frame failed authentication")]
    Authentication,
    #[error("card refused the frame with status {0:#06x}")]
    Refused(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Apdu(#[from] ApduError),
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SessionKeys {
    pub command: [u8; 32],
    pub response: [u8; 32],
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

impl SessionKeys {
    pub fn derive(shared: &[u8], device_eph: &[u8], card_eph: &[u8]) -> Self {
        let mut salt = device_eph.to_vec();
        salt.extend_from_slice(card_eph);
        let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
        let mut command = [0u8; 32];
        let mut response = [0u8; 32];
        hk.expand(b"simtpm-tee-command", &mut command)
            .expect("32 bytes is a valid length");
        hk.expand(b"simtpm-tee-response", &mut response)
            .expect("32 bytes is a valid length");
        SessionKeys { command, response }
    }
}

fn frame_nonce(direction: u8, counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[0] = direction;
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

pub fn seal(key: &[u8; 32], direction: u8, counter: u64, plaintext: &[u8]) -> Vec<u8> {
    let nonce = frame_nonce(direction, counter);
    Aes256Gcm::new(key.into())
        .encrypt(
            &Nonce::from(nonce),
            Payload {
                msg: plaintext,
                aad: &nonce,
            },
        )
        .expect("AES-GCM encryption")
}

pub fn open(key: &[u8; 32], direction: u8, counter: u64, ciphertext: &[u8]) -> Option<Vec<u8>> {
    let nonce = frame_nonce(direction, counter);
    Aes256Gcm::new(key.into())
        .decrypt(
            &Nonce::from(nonce),
            Payload {
                msg: ciphertext,
                aad: &nonce,
            },
        )
        .ok()
}

/// One encrypted command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelFrame {
    pub counter: u64,
    pub ciphertext: Vec<u8>,
}

impl ChannelFrame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.counter.to_be_bytes().to_vec();
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < 8 {
            return Err(CodecError::Truncated("frame counter"));
        }
        Ok(ChannelFrame {
            counter: u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes")),
            ciphertext: bytes[8..].to_vec(),
        })
    }
}

/// Device's opening message: its certificate and a signed ephemeral key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeeHello {
    pub cert: Certificate,
    pub ephemeral: [u8; PUBLIC_KEY_BYTES],
    pub signature: [u8; SIGNATURE_BYTES],
}

fn hello_message(ephemeral: &[u8]) -> Vec<u8> {
    let mut msg = HELLO_TAG.to_vec();
    msg.extend_from_slice(ephemeral);
    msg
}

impl TeeHello {
    pub fn verify(&self, device: &VerifyingKey) -> bool {
        verify_bytes(device, &hello_message(&self.ephemeral), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.cert.to_bytes())
            .raw(&self.ephemeral)
            .raw(&self.signature);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let cert = Certificate::from_bytes(r.bytes("certificate")?)
            .map_err(|_| CodecError::Invalid("certificate"))?;
        let ephemeral = r.array("ephemeral key")?;
        let signature = r.array("hello signature")?;
        r.finish()?;
        Ok(TeeHello {
            cert,
            ephemeral,
            signature,
        })
    }
}

/// Device (secure-world) end of the channel.
pub struct TeeChannel {
    key: SigningKey,
    cert: Certificate,
    ephemeral: Option<(SecretKey, [u8; PUBLIC_KEY_BYTES])>,
    keys: Option<SessionKeys>,
    counter: u64,
}

impl TeeChannel {
    pub fn new(key: SigningKey, cert: Certificate) -> Self {
        TeeChannel {
            key,
            cert,
            ephemeral: None,
            keys: None,
            counter: 0,
        }
    }

    /// Draws a fresh ephemeral key and signs it.
    pub fn hello<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> TeeHello {
        let eph = SecretKey::random(rng);
        let ephemeral: [u8; PUBLIC_KEY_BYTES] = eph
            .public_key()
            .to_encoded_point(false)
            .as_bytes()
            .try_into()
            .expect("uncompressed point");
        let sig: Signature = self.key.sign(&hello_message(&ephemeral));
        self.ephemeral = Some((eph, ephemeral));
        self.keys = None;
        self.counter = 0;
        TeeHello {
            cert: self.cert.clone(),
            ephemeral,
            signature: signature_bytes(&sig),
        }
    }

    /// Completes the handshake with the card's ephemeral key.
    pub fn establish(&mut self, card_eph: &[u8]) -> Result<(), TeeError> {
        let (eph, device_eph) = self.ephemeral.take().ok_or(TeeError::NotEstablished)?;
        let card = PublicKey::from_sec1_bytes(card_eph).map_err(|_| TeeError::BadCardKey)?;
        let shared = p256::ecdh::diffie_hellman(eph.to_nonzero_scalar(), card.as_affine());
        self.keys = Some(SessionKeys::derive(
            shared.raw_secret_bytes(),
            &device_eph,
            card_eph,
        ));
        Ok(())
    }

    pub fn is_established(&self) -> bool {
        self.keys.is_some()
    }

    /// Encrypts one command under the next counter value.
    pub fn wrap(&mut self, cmd: &ApduCommand) -> Result<ChannelFrame, TeeError> {
        let keys = self.keys.ok_or(TeeError::NotEstablished)?;
        let plain = encode_command(cmd)?;
        self.counter += 1;
        Ok(ChannelFrame {
            counter: self.counter,
            ciphertext: seal(&keys.command, TO_CARD, self.counter, &plain),
        })
    }

    pub fn unwrap_response(
        &self,
        counter: u64,
        ciphertext: &[u8],
    ) -> Result<ApduResponse, TeeError> {
        let keys = self.keys.ok_or(TeeError::NotEstablished)?;
        let plain =
            open(&keys.response, TO_DEVICE, counter, ciphertext).ok_or(TeeError::Authentication)?;
        Ok(decode_response(&plain)?)
    }

    /// Sends a command of any length through `transport`, chunking it into
    /// several frames if needed. Returns the card's final response.
    pub fn send<F>(&mut self, cmd: &ApduCommand, mut transport: F) -> Result<ApduResponse, TeeError>
    where
        F: FnMut(&ChannelFrame) -> Result<Vec<u8>, TeeError>,
    {
        let chunks = chunk_payload_with(cmd.cla, cmd.ins, cmd.p1, &cmd.data).chunks;
        let mut last = None;
        for chunk in &chunks {
            let frame = self.wrap(chunk)?;
            let reply = transport(&frame)?;
            let rsp = self.unwrap_response(frame.counter, &reply)?;
            if !rsp.status_word.is_success() {
                return Ok(rsp);
            }
            last = Some(rsp);
        }
        Ok(last.expect("at least one chunk"))
    }
}
