//! The card-resident TPM: PCRs, NV storage, counters, keys, sealing,
//! quoting, key migration and the binding gate.
//!
//! State is split into a persistent part (NV, counters, storage root key,
//! endorsement key, wrapped keys, the DAA credential) that survives power
//! cycles through [`Tpm::to_persistent_bytes`], and a volatile part (PCRs,
//! clock, lock flags, sessions) rebuilt by [`Tpm::power_cycle`].
//!
//! Extend, seal, unseal and quote are refused until binding succeeds. In
//! TEE-proxy mode they are additionally refused unless they arrive through
//! the authenticated channel.

pub mod card;
pub mod dispatch;
pub mod seal;

use std::collections::BTreeMap;

use p256::ecdsa::SigningKey;
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{PublicKey, SecretKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apdu::{Reassembler, StatusWord};
use crate::binding::tee::{self, ChannelFrame, TeeHello};
use crate::binding::{
    BindingFailure, BindingMode, DbSession, DbState, DbStep, DistanceBoundingConfig, RoundOutcome,
    NONCE_BYTES,
};
use crate::cert::{CertAuthority, Certificate, TrustAnchor, PUBLIC_KEY_BYTES};
use crate::codec::{CodecError, Reader, Writer};
use crate::daa::{
    daa_sign_with, daa_verify, join_finish, join_init, DaaCredential, DaaError, DaaPublicParams,
    DaaSignature, HashOracle, JoinRequest, JoinResponse, PlatformJoinState, PrecomputeCache,
    SignNonces,
};
use crate::groups::random_g1;
pub use seal::{EciesBox, PcrSelection, Policy, PolicyApproval, SealedBlob};

pub const PCR_COUNT: usize = 24;
pub const PCR_BYTES: usize = 32;
/// Handle addressing the storage root key.
pub const SRK_HANDLE: u32 = 0;
const FIRST_KEY_HANDLE: u32 = 0x8100_0001;
/// NV index holding the binding transcript `(nonce, m)`.
pub const BINDING_TRANSCRIPT_NV: u32 = 0x0001_0000;
/// NV indices at or above this are reserved for the card.
pub const NV_RESERVED_BASE: u32 = 0x0001_0000;
pub const MAX_RANDOM_BYTES: usize = 64;
/// Algorithm tag for 256-bit elliptic-curve keys, the only one supported.
pub const ALG_ECC_P256: u8 = 0x01;

const PERSIST_MAGIC: &[u8; 8] = b"SIMTPM01";
const PERSIST_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TpmError {
    #[error("TPM not initialized (no storage root key loaded)")]
    NotInitialized,
    #[error("TPM already initialized")]
    AlreadyInitialized,
    #[error("hierarchies locked until binding succeeds")]
    Locked,
    #[error("command must arrive through the TEE channel")]
    OutsideChannel,
    #[error("PCR index {0} out of range")]
    BadPcrIndex(usize),
    #[error("policy not satisfied: {0}")]
    PolicyViolation(&'static str),
    #[error("integrity check failed")]
    Integrity,
    #[error("unknown key handle {0:#010x}")]
    UnknownHandle(u32),
    #[error("unknown counter {0}")]
    UnknownCounter(u32),
    #[error("counter {0} already exists")]
    CounterExists(u32),
    #[error("counter {0} would overflow")]
    CounterOverflow(u32),
    #[error("unknown NV index {0:#010x}")]
    UnknownNv(u32),
    #[error("NV index {0:#010x} is reserved")]
    NvReserved(u32),
    #[error("key is not duplicable")]
    NotDuplicable,
    #[error("unsupported algorithm {0:#04x}")]
    UnsupportedAlgorithm(u8),
    #[error("time-sensitive command needs a fresh clock injection")]
    ClockStale,
    #[error("clock regression from {last} to {got} µs")]
    ClockRegression { last: u64, got: u64 },
    #[error("no DAA credential")]
    NoCredential,
    #[error("random request of {0} bytes exceeds {MAX_RANDOM_BYTES}")]
    RandomTooLong(usize),
    #[error("binding failed: {0}")]
    Binding(BindingFailure),
    #[error("binding protocol state: {0}")]
    BindingState(&'static str),
    #[error("TEE channel: {0}")]
    Channel(&'static str),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("DAA: {0}")]
    Daa(String),
}

impl TpmError {
    pub fn status_word(&self) -> StatusWord {
        use TpmError::*;
        match self {
            NotInitialized | Locked | OutsideChannel | PolicyViolation(_) | ClockStale
            | NoCredential | Channel(_) => StatusWord::CONDITIONS_NOT_SATISFIED,
            Binding(BindingFailure::NotLocalRtm { .. }) => StatusWord::CONDITIONS_NOT_SATISFIED,
            Binding(_) | Integrity => StatusWord::SECURITY_STATUS_NOT_SATISFIED,
            AlreadyInitialized | NotDuplicable | CounterExists(_) | NvReserved(_)
            | BindingState(_) | CounterOverflow(_) => StatusWord::COMMAND_NOT_ALLOWED,
            BadPcrIndex(_) | UnsupportedAlgorithm(_) | RandomTooLong(_) => {
                StatusWord::INCORRECT_P1_P2
            }
            UnknownHandle(_) | UnknownCounter(_) | UnknownNv(_) => {
                StatusWord::REFERENCED_DATA_NOT_FOUND
            }
            ClockRegression { .. } | Malformed(_) | Daa(_) => StatusWord::WRONG_DATA,
        }
    }
}

impl From<CodecError> for TpmError {
    fn from(e: CodecError) -> Self {
        TpmError::Malformed(e.to_string())
    }
}

impl From<DaaError> for TpmError {
    fn from(e: DaaError) -> Self {
        TpmError::Daa(e.to_string())
    }
}

/// `SHA-256(old ‖ data)`.
pub fn extend_value(old: &[u8; PCR_BYTES], data: &[u8]) -> [u8; PCR_BYTES] {
    let mut h = Sha256::new();
    h.update(old);
    h.update(data);
    h.finalize().into()
}

/// A single SHA-256 bank of 24 registers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcrBank {
    regs: [[u8; PCR_BYTES]; PCR_COUNT],
}

impl Default for PcrBank {
    fn default() -> Self {
        PcrBank {
            regs: [[0; PCR_BYTES]; PCR_COUNT],
        }
    }
}

impl PcrBank {
    pub fn read(&self, index: usize) -> Result<[u8; PCR_BYTES], TpmError> {
        self.regs
            .get(index)
            .copied()
            .ok_or(TpmError::BadPcrIndex(index))
    }

    pub fn extend(&mut self, index: usize, data: &[u8]) -> [u8; PCR_BYTES] {
        self.regs[index] = extend_value(&self.regs[index], data);
        self.regs[index]
    }

    pub fn values(&self, selection: PcrSelection) -> Vec<[u8; PCR_BYTES]> {
        selection.indices().map(|i| self.regs[i]).collect()
    }

    /// SHA-256 over the selected registers in ascending index order.
    pub fn composite(&self, selection: PcrSelection) -> [u8; 32] {
        composite_digest(&self.values(selection))
    }
}

pub fn composite_digest(values: &[[u8; PCR_BYTES]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in values {
        h.update(v);
    }
    h.finalize().into()
}

/// Message covered by a quote signature.
pub fn quote_message(
    selection: PcrSelection,
    values: &[[u8; PCR_BYTES]],
    nonce: &[u8],
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"simtpm-quote");
    h.update(selection.0.to_be_bytes());
    for v in values {
        h.update(v);
    }
    h.update((nonce.len() as u32).to_be_bytes());
    h.update(nonce);
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quote {
    pub selection: PcrSelection,
    pub pcr_values: Vec<[u8; PCR_BYTES]>,
    pub signature: DaaSignature,
}

impl Quote {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.selection.0).u32(self.pcr_values.len() as u32);
        for v in &self.pcr_values {
            w.raw(v);
        }
        w.bytes(&self.signature.to_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TpmError> {
        let mut r = Reader::new(bytes);
        let selection = PcrSelection(r.u32("selection")?);
        let count = r.u32("PCR count")? as usize;
        if count > PCR_COUNT {
            return Err(TpmError::Malformed("too many PCR values".into()));
        }
        let pcr_values = (0..count)
            .map(|_| r.array("PCR value"))
            .collect::<Result<_, _>>()?;
        let signature = DaaSignature::from_bytes(r.bytes("signature")?)?;
        r.finish()?;
        Ok(Quote {
            selection,
            pcr_values,
            signature,
        })
    }
}

/// Verifier side: recompute the quoted digest from the reported PCR values
/// and the verifier's own nonce.
pub fn verify_quote(
    crs: &DaaPublicParams,
    bsn: Option<&[u8]>,
    quote: &Quote,
    nonce: &[u8],
) -> bool {
    if quote.pcr_values.len() != quote.selection.indices().count() {
        return false;
    }
    let msg = quote_message(quote.selection, &quote.pcr_values, nonce);
    daa_verify(crs, bsn, &msg, &quote.signature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct KeyTemplate {
    pub algorithm: u8,
    pub duplicable: bool,
    pub attestation: bool,
}

impl KeyTemplate {
    pub fn ecc(duplicable: bool, attestation: bool) -> Self {
        KeyTemplate {
            algorithm: ALG_ECC_P256,
            duplicable,
            attestation,
        }
    }

    fn flags(self) -> u8 {
        u8::from(self.duplicable) | u8::from(self.attestation) << 1
    }

    fn from_flags(algorithm: u8, flags: u8) -> Self {
        KeyTemplate {
            algorithm,
            duplicable: flags & 1 != 0,
            attestation: flags & 2 != 0,
        }
    }
}

/// A loaded key whose private half is wrapped under the SRK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRecord {
    pub handle: u32,
    pub template: KeyTemplate,
    pub public: [u8; PUBLIC_KEY_BYTES],
    pub wrapped: EciesBox,
}

impl KeyRecord {
    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_sec1_bytes(&self.public).expect("stored keys are valid")
    }

    pub fn name(&self) -> [u8; 32] {
        seal::storage_key_name(&self.public_key())
    }

    fn wrap_aad(public: &[u8], template: KeyTemplate) -> Vec<u8> {
        let mut aad = b"simtpm-wrap".to_vec();
        aad.extend_from_slice(public);
        aad.push(template.algorithm);
        aad.push(template.flags());
        aad
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NvRegion {
    pub data: Vec<u8>,
    pub policy: Policy,
}

#[derive(Clone, Debug, Default)]
struct Clock {
    last_us: Option<u64>,
    fresh: bool,
}

#[derive(Clone, Default)]
struct Persistent {
    nv: BTreeMap<u32, NvRegion>,
    counters: BTreeMap<u32, u64>,
    srk: Option<SecretKey>,
    ek: Option<(SigningKey, Certificate)>,
    keys: BTreeMap<u32, KeyRecord>,
    daa: Option<(DaaPublicParams, DaaCredential)>,
    next_handle: u32,
}

struct TeeCardSession {
    keys: tee::SessionKeys,
    last_counter: Option<u64>,
}

#[derive(Default)]
struct Volatile {
    pcrs: PcrBank,
    initialized: bool,
    mode: BindingMode,
    locked: bool,
    clock: Clock,
    reassembler: Option<Reassembler>,
    channel_reassembler: Option<Reassembler>,
    db: DbSession,
    tee: Option<TeeCardSession>,
    untrusted_phase: bool,
    join: Option<(DaaPublicParams, PlatformJoinState)>,
    precompute: PrecomputeCache,
}

/// Who is issuing a gated command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Host,
    Channel,
}

#[derive(Clone, Debug)]
pub struct TpmConfig {
    pub distance_bounding: DistanceBoundingConfig,
    pub vendor_anchor: TrustAnchor,
    /// Signing tuples precomputed when an attestation key is created.
    pub precompute: usize,
}

impl Default for TpmConfig {
    fn default() -> Self {
        TpmConfig {
            distance_bounding: DistanceBoundingConfig::default(),
            vendor_anchor: TrustAnchor::bundled_vendor(),
            precompute: 4,
        }
    }
}

/// One emulated card. Commands are processed one at a time; wrap it in a
/// mutex to share it between threads.
pub struct Tpm {
    config: TpmConfig,
    persistent: Persistent,
    volatile: Volatile,
    rng: ChaCha20Rng,
}

impl Tpm {
    /// A factory-fresh card. The endorsement key is generated and certified
    /// on first initialization.
    pub fn new(config: TpmConfig, seed: u64) -> Self {
        Tpm {
            config,
            persistent: Persistent {
                next_handle: FIRST_KEY_HANDLE,
                ..Persistent::default()
            },
            volatile: Volatile {
                locked: true,
                ..Volatile::default()
            },
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &TpmConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TpmConfig {
        &mut self.config
    }

    /// Rebuilds a card from its persistence file contents.
    pub fn restore(bytes: &[u8], config: TpmConfig, seed: u64) -> Result<Self, TpmError> {
        let mut tpm = Tpm::new(config, seed);
        tpm.persistent = decode_persistent(bytes)?;
        Ok(tpm)
    }

    /// Drops all volatile state: PCRs zeroed, clock cleared, hierarchies
    /// re-locked, sessions closed.
    pub fn power_cycle(&mut self) {
        self.volatile = Volatile {
            locked: true,
            ..Volatile::default()
        };
    }

    // Every command except clock injection consumes the freshness flag.
    fn begin(&mut self) -> bool {
        std::mem::take(&mut self.volatile.clock.fresh)
    }

    fn require_init(&self) -> Result<(), TpmError> {
        if self.volatile.initialized {
            Ok(())
        } else {
            Err(TpmError::NotInitialized)
        }
    }

    fn gate(&self, origin: Origin) -> Result<(), TpmError> {
        self.require_init()?;
        if self.volatile.locked {
            return Err(TpmError::Locked);
        }
        if self.volatile.mode == BindingMode::TeeProxy && origin != Origin::Channel {
            return Err(TpmError::OutsideChannel);
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.volatile.initialized
    }

    pub fn is_locked(&self) -> bool {
        self.volatile.locked
    }

    pub fn binding_mode(&self) -> BindingMode {
        self.volatile.mode
    }

    /// `TPM_INIT`. Generates the SRK (once) and the endorsement key (once),
    /// selects the binding mode and locks the hierarchies.
    pub fn init(&mut self, mode: BindingMode) -> Result<(), TpmError> {
        self.begin();
        if self.volatile.initialized {
            return Err(TpmError::AlreadyInitialized);
        }
        if self.persistent.srk.is_none() {
            self.persistent.srk = Some(SecretKey::random(&mut self.rng));
        }
        if self.persistent.ek.is_none() {
            let ek = SigningKey::random(&mut self.rng);
            let cert = CertAuthority::bundled_vendor().issue("simtpm-ek", ek.verifying_key());
            self.persistent.ek = Some((ek, cert));
        }
        self.volatile.initialized = true;
        self.volatile.mode = mode;
        self.volatile.locked = true;
        Ok(())
    }

    /// Baseband time injection. Marks the clock fresh for the next command.
    pub fn set_clock(&mut self, time_us: u64) -> Result<(), TpmError> {
        let clock = &mut self.volatile.clock;
        if let Some(last) = clock.last_us {
            if time_us < last {
                clock.fresh = false;
                return Err(TpmError::ClockRegression { last, got: time_us });
            }
        }
        clock.last_us = Some(time_us);
        clock.fresh = true;
        Ok(())
    }

    pub fn clock(&self) -> Option<u64> {
        self.volatile.clock.last_us
    }

    fn fresh_time(&mut self) -> Result<u64, TpmError> {
        if self.begin() {
            Ok(self.volatile.clock.last_us.expect("fresh implies set"))
        } else {
            Err(TpmError::ClockStale)
        }
    }

    pub fn pcr_extend(
        &mut self,
        index: usize,
        digest: &[u8; 32],
    ) -> Result<[u8; PCR_BYTES], TpmError> {
        self.pcr_extend_as(Origin::Host, index, digest)
    }

    pub fn pcr_extend_as(
        &mut self,
        origin: Origin,
        index: usize,
        digest: &[u8; 32],
    ) -> Result<[u8; PCR_BYTES], TpmError> {
        self.begin();
        if index >= PCR_COUNT {
            return Err(TpmError::BadPcrIndex(index));
        }
        self.gate(origin)?;
        Ok(self.volatile.pcrs.extend(index, digest))
    }

    pub fn pcr_read(&mut self, index: usize) -> Result<[u8; PCR_BYTES], TpmError> {
        self.begin();
        self.volatile.pcrs.read(index)
    }

    pub fn pcrs(&self) -> &PcrBank {
        &self.volatile.pcrs
    }

    fn srk(&self) -> Result<&SecretKey, TpmError> {
        self.require_init()?;
        self.persistent.srk.as_ref().ok_or(TpmError::NotInitialized)
    }

    pub fn srk_public(&self) -> Result<PublicKey, TpmError> {
        Ok(self.srk()?.public_key())
    }

    pub fn ek_certificate(&self) -> Option<&Certificate> {
        self.persistent.ek.as_ref().map(|(_, c)| c)
    }

    pub fn create_key(&mut self, template: KeyTemplate) -> Result<(u32, PublicKey), TpmError> {
        self.begin();
        if template.algorithm != ALG_ECC_P256 {
            return Err(TpmError::UnsupportedAlgorithm(template.algorithm));
        }
        let srk_public = self.srk()?.public_key();
        if template.attestation && self.persistent.daa.is_none() {
            return Err(TpmError::NoCredential);
        }
        let secret = SecretKey::random(&mut self.rng);
        let public = secret.public_key();
        let public_bytes = sec1(&public);
        let wrapped = seal::ecies_encrypt(
            &srk_public,
            &KeyRecord::wrap_aad(&public_bytes, template),
            &secret.to_bytes(),
            &mut self.rng,
        );
        let handle = self.store_key(template, public_bytes, wrapped);
        if template.attestation {
            let (crs, _) = self.persistent.daa.as_ref().expect("checked above");
            self.volatile
                .precompute
                .fill(crs, self.config.precompute.max(1), &mut self.rng);
        }
        Ok((handle, public))
    }

    fn store_key(
        &mut self,
        template: KeyTemplate,
        public: [u8; PUBLIC_KEY_BYTES],
        wrapped: EciesBox,
    ) -> u32 {
        let handle = self.persistent.next_handle;
        self.persistent.next_handle += 1;
        self.persistent.keys.insert(
            handle,
            KeyRecord {
                handle,
                template,
                public,
                wrapped,
            },
        );
        handle
    }

    pub fn key(&self, handle: u32) -> Option<&KeyRecord> {
        self.persistent.keys.get(&handle)
    }

    pub fn precomputed(&self) -> usize {
        self.volatile.precompute.len()
    }

    fn unwrap_key(&self, record: &KeyRecord) -> Result<SecretKey, TpmError> {
        let srk = self.srk()?;
        let raw = seal::ecies_decrypt(
            srk,
            &KeyRecord::wrap_aad(&record.public, record.template),
            &record.wrapped,
        )?;
        SecretKey::from_slice(&raw).map_err(|_| TpmError::Integrity)
    }

    fn parent_public(&self, handle: u32) -> Result<PublicKey, TpmError> {
        if handle == SRK_HANDLE {
            return Ok(self.srk()?.public_key());
        }
        self.require_init()?;
        self.persistent
            .keys
            .get(&handle)
            .map(KeyRecord::public_key)
            .ok_or(TpmError::UnknownHandle(handle))
    }

    fn secret_by_name(&self, name: &[u8; 32]) -> Result<SecretKey, TpmError> {
        let srk = self.srk()?;
        if seal::storage_key_name(&srk.public_key()) == *name {
            return Ok(srk.clone());
        }
        let record = self
            .persistent
            .keys
            .values()
            .find(|k| k.name() == *name)
            .ok_or(TpmError::Integrity)?;
        self.unwrap_key(record)
    }

    pub fn seal(
        &mut self,
        parent: u32,
        data: &[u8],
        policy: Policy,
    ) -> Result<SealedBlob, TpmError> {
        self.seal_as(Origin::Host, parent, data, policy)
    }

    pub fn seal_as(
        &mut self,
        origin: Origin,
        parent: u32,
        data: &[u8],
        policy: Policy,
    ) -> Result<SealedBlob, TpmError> {
        self.begin();
        self.srk()?;
        self.gate(origin)?;
        let parent_key = self.parent_public(parent)?;
        let parent_name = seal::storage_key_name(&parent_key);
        let sealed = seal::ecies_encrypt(
            &parent_key,
            &SealedBlob::aad(&parent_name, &policy),
            data,
            &mut self.rng,
        );
        Ok(SealedBlob {
            parent: parent_name,
            policy,
            sealed,
        })
    }

    pub fn unseal(
        &mut self,
        blob: &SealedBlob,
        approvals: &[PolicyApproval],
    ) -> Result<Vec<u8>, TpmError> {
        self.unseal_as(Origin::Host, blob, approvals)
    }

    pub fn unseal_as(
        &mut self,
        origin: Origin,
        blob: &SealedBlob,
        approvals: &[PolicyApproval],
    ) -> Result<Vec<u8>, TpmError> {
        self.begin();
        self.srk()?;
        self.gate(origin)?;
        let secret = self.secret_by_name(&blob.parent)?;
        let data = seal::ecies_decrypt(
            &secret,
            &SealedBlob::aad(&blob.parent, &blob.policy),
            &blob.sealed,
        )?;
        blob.policy.evaluate(&self.volatile.pcrs, approvals)?;
        Ok(data)
    }

    /// Exports a duplicable key encrypted to `new_parent`.
    pub fn duplicate_key(
        &mut self,
        handle: u32,
        new_parent: &PublicKey,
    ) -> Result<Vec<u8>, TpmError> {
        self.begin();
        self.require_init()?;
        let record = self
            .persistent
            .keys
            .get(&handle)
            .ok_or(TpmError::UnknownHandle(handle))?
            .clone();
        if !record.template.duplicable {
            return Err(TpmError::NotDuplicable);
        }
        let secret = self.unwrap_key(&record)?;
        let aad = duplication_aad(&record.public, record.template);
        let inner = seal::ecies_encrypt(new_parent, &aad, &secret.to_bytes(), &mut self.rng);
        let mut w = Writer::new();
        w.u8(1)
            .u8(record.template.algorithm)
            .u8(record.template.flags())
            .raw(&record.public)
            .raw(&inner.ephemeral)
            .bytes(&inner.ciphertext);
        Ok(w.finish())
    }

    /// Imports a duplication blob addressed to this card's SRK.
    pub fn import_key(&mut self, blob: &[u8]) -> Result<u32, TpmError> {
        self.begin();
        let srk = self.srk()?.clone();
        let mut r = Reader::new(blob);
        if r.u8("duplication version")? != 1 {
            return Err(TpmError::Malformed("duplication version".into()));
        }
        let template = KeyTemplate::from_flags(r.u8("algorithm")?, r.u8("flags")?);
        if template.algorithm != ALG_ECC_P256 {
            return Err(TpmError::UnsupportedAlgorithm(template.algorithm));
        }
        let public: [u8; PUBLIC_KEY_BYTES] = r.array("public key")?;
        let inner = EciesBox {
            ephemeral: r.array("ephemeral key")?,
            ciphertext: r.bytes("wrapped key")?.to_vec(),
        };
        r.finish()?;
        let raw = seal::ecies_decrypt(&srk, &duplication_aad(&public, template), &inner)?;
        let secret = SecretKey::from_slice(&raw).map_err(|_| TpmError::Integrity)?;
        if sec1(&secret.public_key()) != public {
            return Err(TpmError::Integrity);
        }
        let wrapped = seal::ecies_encrypt(
            &srk.public_key(),
            &KeyRecord::wrap_aad(&public, template),
            &raw,
            &mut self.rng,
        );
        Ok(self.store_key(template, public, wrapped))
    }

    pub fn hash(&mut self, data: &[u8]) -> [u8; 32] {
        self.begin();
        Sha256::digest(data).into()
    }

    pub fn get_random(&mut self, n: usize) -> Result<Vec<u8>, TpmError> {
        self.begin();
        if n > MAX_RANDOM_BYTES {
            return Err(TpmError::RandomTooLong(n));
        }
        let mut out = vec![0u8; n];
        self.rng.fill_bytes(&mut out);
        Ok(out)
    }

    pub fn counter_create(&mut self, id: u32) -> Result<u64, TpmError> {
        self.begin();
        if self.persistent.counters.contains_key(&id) {
            return Err(TpmError::CounterExists(id));
        }
        self.persistent.counters.insert(id, 0);
        Ok(0)
    }

    pub fn counter_increment(&mut self, id: u32) -> Result<u64, TpmError> {
        self.begin();
        let v = self
            .persistent
            .counters
            .get_mut(&id)
            .ok_or(TpmError::UnknownCounter(id))?;
        *v = v.checked_add(1).ok_or(TpmError::CounterOverflow(id))?;
        Ok(*v)
    }

    pub fn counter_read(&mut self, id: u32) -> Result<u64, TpmError> {
        self.begin();
        self.persistent
            .counters
            .get(&id)
            .copied()
            .ok_or(TpmError::UnknownCounter(id))
    }

    /// Defines (or redefines) an NV region with an access policy.
    pub fn nv_define(&mut self, index: u32, policy: Policy) -> Result<(), TpmError> {
        self.begin();
        if index >= NV_RESERVED_BASE {
            return Err(TpmError::NvReserved(index));
        }
        self.persistent.nv.insert(
            index,
            NvRegion {
                data: Vec::new(),
                policy,
            },
        );
        Ok(())
    }

    /// Writes a region, defining it with no policy if absent.
    pub fn nv_write(
        &mut self,
        index: u32,
        data: &[u8],
        approvals: &[PolicyApproval],
    ) -> Result<(), TpmError> {
        self.begin();
        if index >= NV_RESERVED_BASE {
            return Err(TpmError::NvReserved(index));
        }
        let pcrs = &self.volatile.pcrs;
        let region = self.persistent.nv.entry(index).or_insert(NvRegion {
            data: Vec::new(),
            policy: Policy::None,
        });
        region.policy.evaluate(pcrs, approvals)?;
        region.data = data.to_vec();
        Ok(())
    }

    pub fn nv_read(
        &mut self,
        index: u32,
        approvals: &[PolicyApproval],
    ) -> Result<Vec<u8>, TpmError> {
        self.begin();
        let region = self
            .persistent
            .nv
            .get(&index)
            .ok_or(TpmError::UnknownNv(index))?;
        region.policy.evaluate(&self.volatile.pcrs, approvals)?;
        Ok(region.data.clone())
    }

    /// First join message, generated on the card.
    pub fn daa_join_init(&mut self, crs: &DaaPublicParams) -> Result<JoinRequest, TpmError> {
        self.begin();
        self.require_init()?;
        let (state, request) = join_init(crs, &mut self.rng)?;
        self.volatile.join = Some((crs.clone(), state));
        Ok(request)
    }

    /// Second join message; the credential is checked before it is stored.
    pub fn daa_join_finish(&mut self, resp: &JoinResponse) -> Result<(), TpmError> {
        self.begin();
        self.require_init()?;
        let (crs, state) = self
            .volatile
            .join
            .take()
            .ok_or(TpmError::Daa("no join in progress".into()))?;
        let credential = join_finish(&crs, &state, resp)?;
        self.persistent.daa = Some((crs, credential));
        self.volatile.precompute.clear();
        Ok(())
    }

    /// Installs a credential obtained out of band.
    pub fn install_credential(
        &mut self,
        crs: DaaPublicParams,
        credential: DaaCredential,
    ) -> Result<(), TpmError> {
        if !credential.is_valid(&crs) {
            return Err(TpmError::Daa("credential does not verify".into()));
        }
        self.persistent.daa = Some((crs, credential));
        self.volatile.precompute.clear();
        Ok(())
    }

    pub fn daa_params(&self) -> Option<&DaaPublicParams> {
        self.persistent.daa.as_ref().map(|(crs, _)| crs)
    }

    pub fn quote(
        &mut self,
        selection: PcrSelection,
        nonce: &[u8],
        bsn: Option<&[u8]>,
    ) -> Result<Quote, TpmError> {
        self.quote_as(Origin::Host, selection, nonce, bsn)
    }

    pub fn quote_as(
        &mut self,
        origin: Origin,
        selection: PcrSelection,
        nonce: &[u8],
        bsn: Option<&[u8]>,
    ) -> Result<Quote, TpmError> {
        let fresh = self.begin();
        self.gate(origin)?;
        if !fresh {
            return Err(TpmError::ClockStale);
        }
        if !selection.is_valid() {
            return Err(TpmError::Malformed("PCR selection".into()));
        }
        let (crs, w) = self.persistent.daa.as_ref().ok_or(TpmError::NoCredential)?;
        let pcr_values = self.volatile.pcrs.values(selection);
        let msg = quote_message(selection, &pcr_values, nonce);
        let nonces = match self.volatile.precompute.take() {
            Some(n) => n,
            None => SignNonces::random(crs, &mut self.rng),
        };
        let d = bsn.is_none().then(|| random_g1(&mut self.rng));
        let signature = daa_sign_with(crs, bsn, w, &msg, &nonces, d, &HashOracle);
        Ok(Quote {
            selection,
            pcr_values,
            signature,
        })
    }

    /// `init_extend(pk)` of the distance-bounding protocol: verifies the RTM
    /// certificate, issues a nonce and records `T1`.
    pub fn binding_init_extend(
        &mut self,
        cert: &Certificate,
    ) -> Result<[u8; NONCE_BYTES], TpmError> {
        let t1 = self.fresh_time();
        self.require_init()?;
        if self.volatile.mode != BindingMode::DistanceBounding {
            return Err(TpmError::BindingState("card is in TEE-proxy mode"));
        }
        if self.volatile.db.state != DbState::Idle {
            return Err(TpmError::BindingState("session already started"));
        }
        let t1 = t1?;
        let key = match self.config.vendor_anchor.verify(cert) {
            Ok(k) => k,
            Err(_) => {
                let f = self.volatile.db.fail(BindingFailure::UntrustedCertificate);
                return Err(TpmError::Binding(f));
            }
        };
        Ok(self.volatile.db.start(key, t1, &mut self.rng))
    }

    /// `PCR_SIG_Extend(m, M_BL2)`; `T2` is the freshly injected clock.
    pub fn binding_pcr_sig_extend(
        &mut self,
        m: &[u8],
        m_bl2: &[u8; 32],
    ) -> Result<RoundOutcome, TpmError> {
        let t2 = self.fresh_time();
        self.require_init()?;
        if !matches!(self.volatile.db.state, DbState::Awaiting { .. }) {
            return Err(TpmError::BindingState("no nonce outstanding"));
        }
        let t2 = t2?;
        let cfg = self.config.distance_bounding;
        match self.volatile.db.respond(&cfg, t2, m, &mut self.rng) {
            Ok(DbStep::Continue(outcome)) => Ok(outcome),
            Ok(DbStep::Bind { outcome, m, nonce }) => {
                let pcrs = &mut self.volatile.pcrs;
                pcrs.extend(0, &m);
                let mut w = Writer::new();
                w.bytes(&nonce).bytes(&m);
                self.persistent.nv.insert(
                    BINDING_TRANSCRIPT_NV,
                    NvRegion {
                        data: w.finish(),
                        policy: Policy::None,
                    },
                );
                self.volatile.locked = false;
                self.volatile.pcrs.extend(1, m_bl2);
                Ok(outcome)
            }
            Err(f) => Err(TpmError::Binding(f)),
        }
    }

    /// Accepts a TEE handshake and returns the card's ephemeral key.
    pub fn tee_handshake(&mut self, hello: &TeeHello) -> Result<[u8; PUBLIC_KEY_BYTES], TpmError> {
        self.begin();
        self.require_init()?;
        if self.volatile.mode != BindingMode::TeeProxy {
            return Err(TpmError::BindingState("card is in distance-bounding mode"));
        }
        if self.volatile.untrusted_phase {
            return Err(TpmError::Channel("handshake after untrusted phase began"));
        }
        let device = self
            .config
            .vendor_anchor
            .verify(&hello.cert)
            .map_err(|_| TpmError::Binding(BindingFailure::UntrustedCertificate))?;
        if !hello.verify(&device) {
            return Err(TpmError::Binding(BindingFailure::UntrustedRtm));
        }
        let device_eph = PublicKey::from_sec1_bytes(&hello.ephemeral)
            .map_err(|_| TpmError::Channel("bad key"))?;
        let eph = SecretKey::random(&mut self.rng);
        let card_eph = sec1(&eph.public_key());
        let shared = p256::ecdh::diffie_hellman(eph.to_nonzero_scalar(), device_eph.as_affine());
        let keys = tee::SessionKeys::derive(shared.raw_secret_bytes(), &hello.ephemeral, &card_eph);
        self.volatile.tee = Some(TeeCardSession {
            keys,
            last_counter: None,
        });
        self.volatile.locked = false;
        Ok(card_eph)
    }

    /// Marks the start of the untrusted (normal-world) phase; no further
    /// handshakes are accepted until the next power cycle.
    pub fn enter_untrusted_phase(&mut self) {
        self.begin();
        self.volatile.untrusted_phase = true;
    }

    /// Decrypts and executes one channel frame, returning the encrypted
    /// response frame. Replays and forgeries are dropped.
    pub fn tee_frame(&mut self, frame: &ChannelFrame) -> Result<Vec<u8>, TpmError> {
        let session = self
            .volatile
            .tee
            .as_ref()
            .ok_or(TpmError::Channel("no session"))?;
        if session
            .last_counter
            .is_some_and(|last| frame.counter <= last)
        {
            self.begin();
            return Err(TpmError::Channel("replayed frame"));
        }
        let Some(plain) = tee::open(
            &session.keys.command,
            tee::TO_CARD,
            frame.counter,
            &frame.ciphertext,
        ) else {
            self.begin();
            return Err(TpmError::Channel("authentication failed"));
        };
        let rsp_key = session.keys.response;
        self.volatile.tee.as_mut().expect("checked").last_counter = Some(frame.counter);
        let response = match crate::apdu::decode_command(&plain) {
            Ok(cmd) => self.execute(&cmd, Origin::Channel),
            Err(_) => crate::apdu::ApduResponse::status(StatusWord::WRONG_DATA),
        };
        let encoded = crate::apdu::encode_response(&response);
        Ok(tee::seal(&rsp_key, tee::TO_DEVICE, frame.counter, &encoded))
    }

    /// Every private scalar the card holds, for leak scanning in tests.
    #[doc(hidden)]
    pub fn private_key_material(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(srk) = &self.persistent.srk {
            out.push(srk.to_bytes().to_vec());
        }
        if let Some((ek, _)) = &self.persistent.ek {
            out.push(ek.to_bytes().to_vec());
        }
        for record in self.persistent.keys.values() {
            if let Ok(k) = self.unwrap_key(record) {
                out.push(k.to_bytes().to_vec());
            }
        }
        if let Some((_, w)) = &self.persistent.daa {
            out.push(crate::groups::scalar_to_bytes(&w.sk_u).to_vec());
        }
        out
    }

    pub fn to_persistent_bytes(&self) -> Vec<u8> {
        encode_persistent(&self.persistent)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_persistent_bytes())
    }

    pub fn load(path: &std::path::Path, config: TpmConfig, seed: u64) -> Result<Self, TpmError> {
        let bytes = std::fs::read(path).map_err(|e| TpmError::Malformed(e.to_string()))?;
        Self::restore(&bytes, config, seed)
    }
}

fn sec1(key: &PublicKey) -> [u8; PUBLIC_KEY_BYTES] {
    key.to_encoded_point(false)
        .as_bytes()
        .try_into()
        .expect("uncompressed point")
}

fn duplication_aad(public: &[u8], template: KeyTemplate) -> Vec<u8> {
    let mut aad = b"simtpm-duplicate".to_vec();
    aad.extend_from_slice(public);
    aad.push(template.algorithm);
    aad.push(template.flags());
    aad
}

const SEC_NV: u8 = 1;
const SEC_COUNTERS: u8 = 2;
const SEC_SRK: u8 = 3;
const SEC_EK: u8 = 4;
const SEC_KEYS: u8 = 5;
const SEC_DAA: u8 = 6;
const SEC_NEXT_HANDLE: u8 = 7;

fn encode_persistent(p: &Persistent) -> Vec<u8> {
    let mut out = Writer::new();
    out.raw(PERSIST_MAGIC).u8(PERSIST_VERSION);

    let mut w = Writer::new();
    w.u32(p.nv.len() as u32);
    for (index, region) in &p.nv {
        w.u32(*index)
            .bytes(&region.policy.to_bytes())
            .bytes(&region.data);
    }
    out.u8(SEC_NV).bytes(&w.finish());

    let mut w = Writer::new();
    w.u32(p.counters.len() as u32);
    for (id, v) in &p.counters {
        w.u32(*id).u64(*v);
    }
    out.u8(SEC_COUNTERS).bytes(&w.finish());

    if let Some(srk) = &p.srk {
        out.u8(SEC_SRK).bytes(&srk.to_bytes());
    }
    if let Some((ek, cert)) = &p.ek {
        let mut w = Writer::new();
        w.raw(&ek.to_bytes()).bytes(&cert.to_bytes());
        out.u8(SEC_EK).bytes(&w.finish());
    }

    let mut w = Writer::new();
    w.u32(p.keys.len() as u32);
    for k in p.keys.values() {
        w.u32(k.handle)
            .u8(k.template.algorithm)
            .u8(k.template.flags())
            .raw(&k.public)
            .raw(&k.wrapped.ephemeral)
            .bytes(&k.wrapped.ciphertext);
    }
    out.u8(SEC_KEYS).bytes(&w.finish());

    if let Some((crs, cred)) = &p.daa {
        let mut w = Writer::new();
        w.bytes(&crs.to_bytes()).bytes(&cred.to_bytes());
        out.u8(SEC_DAA).bytes(&w.finish());
    }
    out.u8(SEC_NEXT_HANDLE).bytes(&p.next_handle.to_be_bytes());
    out.finish()
}

fn decode_persistent(bytes: &[u8]) -> Result<Persistent, TpmError> {
    let mut r = Reader::new(bytes);
    if r.raw(8, "magic")? != PERSIST_MAGIC {
        return Err(TpmError::Malformed("not a simtpm state file".into()));
    }
    let version = r.u8("state version")?;
    if version != PERSIST_VERSION {
        return Err(CodecError::Version {
            what: "state file",
            got: version,
        }
        .into());
    }
    let mut p = Persistent {
        next_handle: FIRST_KEY_HANDLE,
        ..Persistent::default()
    };
    while r.remaining() > 0 {
        let tag = r.u8("section tag")?;
        let mut s = Reader::new(r.bytes("section")?);
        match tag {
            SEC_NV => {
                for _ in 0..s.u32("NV count")? {
                    let index = s.u32("NV index")?;
                    let policy = Policy::from_bytes(s.bytes("NV policy")?)?;
                    let data = s.bytes("NV data")?.to_vec();
                    p.nv.insert(index, NvRegion { data, policy });
                }
            }
            SEC_COUNTERS => {
                for _ in 0..s.u32("counter count")? {
                    let id = s.u32("counter id")?;
                    p.counters.insert(id, s.u64("counter value")?);
                }
            }
            SEC_SRK => {
                let raw = s.raw(32, "SRK")?;
                p.srk = Some(SecretKey::from_slice(raw).map_err(|_| CodecError::Invalid("SRK"))?);
            }
            SEC_EK => {
                let raw = s.raw(32, "EK")?;
                let ek = SigningKey::from_slice(raw).map_err(|_| CodecError::Invalid("EK"))?;
                let cert = Certificate::from_bytes(s.bytes("EK certificate")?)
                    .map_err(|e| TpmError::Malformed(e.to_string()))?;
                p.ek = Some((ek, cert));
            }
            SEC_KEYS => {
                for _ in 0..s.u32("key count")? {
                    let handle = s.u32("key handle")?;
                    let template = KeyTemplate::from_flags(s.u8("algorithm")?, s.u8("flags")?);
                    let public = s.array("public key")?;
                    let wrapped = EciesBox {
                        ephemeral: s.array("ephemeral key")?,
                        ciphertext: s.bytes("wrapped key")?.to_vec(),
                    };
                    p.keys.insert(
                        handle,
                        KeyRecord {
                            handle,
                            template,
                            public,
                            wrapped,
                        },
                    );
                }
            }
            SEC_DAA => {
                let crs = DaaPublicParams::from_bytes(s.bytes("DAA parameters")?)?;
                let cred = DaaCredential::from_bytes(s.bytes("DAA credential")?)?;
                p.daa = Some((crs, cred));
            }
            SEC_NEXT_HANDLE => p.next_handle = s.u32("next handle")?,
            _ => return Err(CodecError::Invalid("section tag").into()),
        }
        s.finish()?;
    }
    Ok(p)
}
