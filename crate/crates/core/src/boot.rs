//! Bootloader chain simulator.
//!
//! Stages run in the order BL1, BL2, BL31, BL32 (optional), BL33. BL1 is the
//! root of trust for measurement and is never verified. Under secure boot
//! every later stage must carry a certificate issued by the root key whose
//! hash is fused into the chain, and a signature over its payload. Under
//! measured boot each stage is hashed and extended into PCR[1] without ever
//! aborting.

use std::fmt;
use std::str::FromStr;

use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apdu::ApduCommand;
use crate::binding::runner::RtmChannel;
use crate::binding::tee::TeeChannel;
use crate::binding::timing::{TimingError, TimingKind, TimingModel};
use crate::binding::NONCE_BYTES;
use crate::cert::{
    key_name, signature_bytes, verify_bytes, CertAuthority, Certificate, TrustAnchor,
    SIGNATURE_BYTES,
};
use crate::tpm::card::{Card, Transport};
use crate::tpm::dispatch::INS_EXTEND;
use crate::tpm::Tpm;

/// Register receiving boot-chain measurements.
pub const BOOT_PCR: usize = 1;
/// Register receiving the board identifier.
pub const BOARD_PCR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Bl1,
    Bl2,
    Bl31,
    Bl32,
    Bl33,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Bl1,
        Stage::Bl2,
        Stage::Bl31,
        Stage::Bl32,
        Stage::Bl33,
    ];

    pub fn id(self) -> u8 {
        match self {
            Stage::Bl1 => 1,
            Stage::Bl2 => 2,
            Stage::Bl31 => 31,
            Stage::Bl32 => 32,
            Stage::Bl33 => 33,
        }
    }

    pub fn is_optional(self) -> bool {
        self == Stage::Bl32
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BL{}", self.id())
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
#[error("unknown boot stage {0:?}")]
pub struct UnknownStage(pub String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "BL1" => Ok(Stage::Bl1),
            "BL2" => Ok(Stage::Bl2),
            "BL31" => Ok(Stage::Bl31),
            "BL32" => Ok(Stage::Bl32),
            "BL33" => Ok(Stage::Bl33),
            _ => Err(UnknownStage(s.to_string())),
        }
    }
}

fn image_message(stage: Stage, digest: &[u8; 32]) -> Vec<u8> {
    let mut msg = b"simtpm-boot-image".to_vec();
    msg.push(stage.id());
    msg.extend_from_slice(digest);
    msg
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootImage {
    pub stage: Stage,
    pub payload: Vec<u8>,
    pub signature: [u8; SIGNATURE_BYTES],
    pub signer: Certificate,
}

impl BootImage {
    pub fn sign(stage: Stage, payload: Vec<u8>, key: &SigningKey, signer: Certificate) -> Self {
        let digest: [u8; 32] = Sha256::digest(&payload).into();
        let sig: Signature = key.sign(&image_message(stage, &digest));
        BootImage {
            stage,
            payload,
            signature: signature_bytes(&sig),
            signer,
        }
    }

    /// The stage's measurement, `SHA-256(payload)`.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(&self.payload).into()
    }

    fn verify(&self, root: &TrustAnchor) -> bool {
        let Ok(key) = root.verify(&self.signer) else {
            return false;
        };
        verify_bytes(
            &key,
            &image_message(self.stage, &self.digest()),
            &self.signature,
        )
    }
}

/// One stage to be signed into a chain.
pub struct StageSpec {
    pub stage: Stage,
    pub payload: Vec<u8>,
    pub signer: SigningKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootChain {
    pub images: Vec<BootImage>,
    /// Root public key presented alongside the images.
    pub root: TrustAnchor,
    /// Hash of the trusted root key, burned into the hardware.
    pub fused_root_hash: [u8; 32],
}

impl BootChain {
    /// Signs every stage with its own key, certified by `root`.
    pub fn sign(root: &CertAuthority, stages: Vec<StageSpec>) -> Self {
        let anchor = root.anchor();
        let images = stages
            .into_iter()
            .map(|s| {
                let cert = root.issue(format!("{}-signer", s.stage), s.signer.verifying_key());
                BootImage::sign(s.stage, s.payload, &s.signer, cert)
            })
            .collect();
        BootChain {
            images,
            fused_root_hash: key_name(&anchor.key),
            root: anchor,
        }
    }

    /// A deterministic four- or five-stage demo chain.
    pub fn demo(label: &str, with_bl32: bool) -> Self {
        let root = CertAuthority::new(
            format!("{label}-rotpk"),
            crate::cert::derive_signing_key(format!("{label} root").as_bytes()),
        );
        let stages = Stage::ALL
            .into_iter()
            .filter(|s| with_bl32 || *s != Stage::Bl32)
            .map(|stage| StageSpec {
                stage,
                payload: format!("{label} {stage} firmware image").into_bytes(),
                signer: crate::cert::derive_signing_key(
                    format!("{label} {stage} signer").as_bytes(),
                ),
            })
            .collect();
        Self::sign(&root, stages)
    }

    pub fn image(&self, stage: Stage) -> Option<&BootImage> {
        self.images.iter().find(|i| i.stage == stage)
    }

    pub fn image_mut(&mut self, stage: Stage) -> Option<&mut BootImage> {
        self.images.iter_mut().find(|i| i.stage == stage)
    }

    /// `M_BL2`, the BL2 digest reported by the RTM.
    pub fn bl2_digest(&self) -> Option<[u8; 32]> {
        self.image(Stage::Bl2).map(BootImage::digest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BootResult {
    /// Stages that ran, in order.
    pub executed: Vec<Stage>,
    /// First stage that failed verification.
    pub failed_at: Option<Stage>,
}

impl BootResult {
    pub fn is_success(&self) -> bool {
        self.failed_at.is_none()
    }
}

/// Verify-then-execute. Stops at the first stage that is out of order, not
/// certified by the fused root key, or whose signature does not match.
pub fn secure_boot(chain: &BootChain) -> BootResult {
    let mut executed = Vec::new();
    let root_ok = key_name(&chain.root.key) == chain.fused_root_hash;
    let mut previous: Option<Stage> = None;
    for image in &chain.images {
        let in_order = match previous {
            None => image.stage == Stage::Bl1,
            Some(p) => image.stage > p,
        };
        let trusted = root_ok && image.verify(&chain.root);
        if !in_order || !trusted {
            return BootResult {
                executed,
                failed_at: Some(image.stage),
            };
        }
        executed.push(image.stage);
        previous = Some(image.stage);
    }
    BootResult {
        executed,
        failed_at: None,
    }
}

/// Receives PCR extensions during measured boot.
pub trait MeasurementSink {
    fn extend(&mut self, pcr: usize, digest: &[u8; 32]) -> Result<(), String>;
}

impl MeasurementSink for Tpm {
    fn extend(&mut self, pcr: usize, digest: &[u8; 32]) -> Result<(), String> {
        self.pcr_extend(pcr, digest)
            .map(drop)
            .map_err(|e| e.to_string())
    }
}

impl<T: Transport> MeasurementSink for Card<T> {
    fn extend(&mut self, pcr: usize, digest: &[u8; 32]) -> Result<(), String> {
        Card::extend(self, pcr as u8, digest)
            .map(drop)
            .map_err(|e| e.to_string())
    }
}

/// Extends through an established TEE channel.
pub struct ChannelSink<'a, T> {
    pub card: &'a mut Card<T>,
    pub channel: &'a mut TeeChannel,
}

impl<T: Transport> MeasurementSink for ChannelSink<'_, T> {
    fn extend(&mut self, pcr: usize, digest: &[u8; 32]) -> Result<(), String> {
        let cmd = ApduCommand::new(INS_EXTEND, pcr as u8, 0, digest.to_vec());
        let rsp = self
            .card
            .tee_send(self.channel, &cmd)
            .map_err(|e| e.to_string())?;
        if rsp.status_word.is_success() {
            Ok(())
        } else {
            Err(format!("card returned {}", rsp.status_word))
        }
    }
}

/// A sink that is never reachable.
pub struct Unreachable;

impl MeasurementSink for Unreachable {
    fn extend(&mut self, _: usize, _: &[u8; 32]) -> Result<(), String> {
        Err("TPM unreachable".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Stage(Stage),
    BoardId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Measurement {
    pub subject: Subject,
    pub digest: [u8; 32],
    pub pcr: usize,
    /// False when the TPM could not be reached or refused the extend.
    pub recorded: bool,
}

/// Measure-then-extend for every stage after BL1.
pub fn measured_boot<S: MeasurementSink + ?Sized>(
    chain: &BootChain,
    sink: &mut S,
) -> Vec<Measurement> {
    measured_boot_from(chain, Stage::Bl2, None, sink)
}

/// Measured boot starting at `first`, optionally extending the board
/// identifier into PCR[2] first. Empty optional stages are skipped.
pub fn measured_boot_from<S: MeasurementSink + ?Sized>(
    chain: &BootChain,
    first: Stage,
    board_id: Option<&[u8]>,
    sink: &mut S,
) -> Vec<Measurement> {
    let mut out = Vec::new();
    if let Some(id) = board_id {
        let digest: [u8; 32] = Sha256::digest(id).into();
        out.push(Measurement {
            subject: Subject::BoardId,
            digest,
            pcr: BOARD_PCR,
            recorded: sink.extend(BOARD_PCR, &digest).is_ok(),
        });
    }
    for image in &chain.images {
        if image.stage == Stage::Bl1 || image.stage < first {
            continue;
        }
        if image.stage.is_optional() && image.payload.is_empty() {
            continue;
        }
        let digest = image.digest();
        out.push(Measurement {
            subject: Subject::Stage(image.stage),
            digest,
            pcr: BOOT_PCR,
            recorded: sink.extend(BOOT_PCR, &digest).is_ok(),
        });
    }
    out
}

/// Device identity held by the RTM.
#[derive(Clone, Debug)]
pub struct RtmIdentity {
    pub key: SigningKey,
    pub cert: Certificate,
    pub board_id: Vec<u8>,
}

impl RtmIdentity {
    pub fn generate<R: RngCore + CryptoRng>(
        ca: &CertAuthority,
        board_id: &[u8],
        rng: &mut R,
    ) -> Self {
        let key = SigningKey::random(rng);
        let cert = ca.issue("rtm-device", key.verifying_key());
        RtmIdentity {
            key,
            cert,
            board_id: board_id.to_vec(),
        }
    }

    /// Deterministic identity certified by the bundled vendor CA.
    pub fn vendor_provisioned(label: &str) -> Self {
        let key = crate::cert::derive_signing_key(format!("{label} rtm").as_bytes());
        let cert =
            CertAuthority::bundled_vendor().issue(format!("{label}-rtm"), key.verifying_key());
        RtmIdentity {
            key,
            cert,
            board_id: label.as_bytes().to_vec(),
        }
    }

    pub fn tee_channel(&self) -> TeeChannel {
        TeeChannel::new(self.key.clone(), self.cert.clone())
    }
}

/// The RTM's answer to a nonce: a signature over it and BL2's digest.
pub fn rtm_respond(
    nonce: &[u8; NONCE_BYTES],
    identity: &RtmIdentity,
    chain: &BootChain,
) -> (Vec<u8>, [u8; 32]) {
    let sig: Signature = identity.key.sign(nonce);
    let m_bl2 = chain.bl2_digest().unwrap_or([0; 32]);
    (signature_bytes(&sig).to_vec(), m_bl2)
}

pub fn simulate_response_latency<R: RngCore>(
    model: &TimingModel,
    rng: &mut R,
) -> Result<u64, TimingError> {
    match &model.kind {
        TimingKind::Empirical(s) if s.is_empty() => Err(TimingError::Empty),
        _ => Ok(model.draw_honest(rng)),
    }
}

/// An honest RTM answering in-process.
pub struct LocalRtm<'a> {
    pub identity: &'a RtmIdentity,
    pub chain: &'a BootChain,
    /// Stop answering after this many responses.
    pub fail_after: Option<u32>,
    answered: u32,
}

impl<'a> LocalRtm<'a> {
    pub fn new(identity: &'a RtmIdentity, chain: &'a BootChain) -> Self {
        LocalRtm {
            identity,
            chain,
            fail_after: None,
            answered: 0,
        }
    }

    pub fn failing_after(mut self, rounds: u32) -> Self {
        self.fail_after = Some(rounds);
        self
    }
}

impl RtmChannel for LocalRtm<'_> {
    fn respond(&mut self, nonce: &[u8; NONCE_BYTES]) -> Option<(Vec<u8>, [u8; 32])> {
        if self.fail_after.is_some_and(|n| self.answered >= n) {
            return None;
        }
        self.answered += 1;
        Some(rtm_respond(nonce, self.identity, self.chain))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::{extend_value, TpmConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fold(digests: &[[u8; 32]]) -> [u8; 32] {
        digests.iter().fold([0u8; 32], |acc, d| {
            let mut h = Sha256::new();
            h.update(acc);
            h.update(d);
            h.finalize().into()
        })
    }

    struct Recorder(Vec<(usize, [u8; 32])>);

    impl MeasurementSink for Recorder {
        fn extend(&mut self, pcr: usize, digest: &[u8; 32]) -> Result<(), String> {
            self.0.push((pcr, *digest));
            Ok(())
        }
    }

    #[test]
    fn valid_chain_boots_in_order() {
        let chain = BootChain::demo("t", true);
        let r = secure_boot(&chain);
        assert!(r.is_success());
        assert_eq!(r.executed, Stage::ALL.to_vec());
    }

    #[test]
    fn flipped_byte_aborts_at_that_stage() {
        for stage in [Stage::Bl2, Stage::Bl31, Stage::Bl32, Stage::Bl33] {
            let mut chain = BootChain::demo("t", true);
            chain.image_mut(stage).unwrap().payload[0] ^= 1;
            let r = secure_boot(&chain);
            assert_eq!(r.failed_at, Some(stage));
            assert!(r.executed.iter().all(|s| *s < stage));
        }
    }

    #[test]
    fn unknown_signer_aborts() {
        let mut chain = BootChain::demo("t", false);
        let rogue = CertAuthority::new("t-rotpk", crate::cert::derive_signing_key(b"rogue"));
        let key = crate::cert::derive_signing_key(b"rogue signer");
        let cert = rogue.issue("BL33-signer", key.verifying_key());
        let img = chain.image_mut(Stage::Bl33).unwrap();
        *img = BootImage::sign(Stage::Bl33, img.payload.clone(), &key, cert);
        let r = secure_boot(&chain);
        assert_eq!(r.failed_at, Some(Stage::Bl33));
        assert_eq!(r.executed, vec![Stage::Bl1, Stage::Bl2, Stage::Bl31]);
    }

    #[test]
    fn wrong_fused_hash_stops_at_bl1() {
        let mut chain = BootChain::demo("t", false);
        chain.fused_root_hash[0] ^= 1;
        let r = secure_boot(&chain);
        assert_eq!(r.failed_at, Some(Stage::Bl1));
        assert!(r.executed.is_empty());
    }

    #[test]
    fn measured_fold_matches_oracle() {
        let chain = BootChain::demo("t", true);
        let mut rec = Recorder(Vec::new());
        let ms = measured_boot(&chain, &mut rec);
        assert_eq!(ms.len(), 4);
        assert!(ms.iter().all(|m| m.recorded && m.pcr == BOOT_PCR));
        let digests: Vec<[u8; 32]> = chain.images[1..]
            .iter()
            .map(|i| Sha256::digest(&i.payload).into())
            .collect();
        let pcr = rec
            .0
            .iter()
            .fold([0u8; 32], |acc, (_, d)| extend_value(&acc, d));
        assert_eq!(pcr, fold(&digests));
    }

    #[test]
    fn tampered_stage_still_boots_but_changes_pcr() {
        let golden = BootChain::demo("t", true);
        let mut bad = golden.clone();
        bad.image_mut(Stage::Bl2).unwrap().payload.push(0);
        let (mut a, mut b) = (Recorder(Vec::new()), Recorder(Vec::new()));
        assert_eq!(
            measured_boot(&golden, &mut a).len(),
            measured_boot(&bad, &mut b).len()
        );
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn empty_bl32_is_skipped() {
        let mut chain = BootChain::demo("t", true);
        chain.image_mut(Stage::Bl32).unwrap().payload.clear();
        let mut rec = Recorder(Vec::new());
        let ms = measured_boot(&chain, &mut rec);
        assert_eq!(ms.len(), 3);
        assert!(ms.iter().all(|m| m.subject != Subject::Stage(Stage::Bl32)));
    }

    #[test]
    fn unreachable_tpm_marks_unrecorded() {
        let chain = BootChain::demo("t", false);
        let ms = measured_boot_from(&chain, Stage::Bl2, Some(b"board-7"), &mut Unreachable);
        assert_eq!(ms.len(), 4);
        assert!(ms.iter().all(|m| !m.recorded));
        assert_eq!(ms[0].subject, Subject::BoardId);
        assert_eq!(ms[0].pcr, BOARD_PCR);
    }

    #[test]
    fn locked_tpm_refuses_measurements() {
        let mut tpm = Tpm::new(TpmConfig::default(), 1);
        tpm.init(crate::binding::BindingMode::DistanceBounding)
            .unwrap();
        let chain = BootChain::demo("t", false);
        let ms = measured_boot(&chain, &mut tpm);
        assert!(ms.iter().all(|m| !m.recorded));
        assert_eq!(tpm.pcrs().read(BOOT_PCR).unwrap(), [0; 32]);
    }

    #[test]
    fn rtm_response_verifies() {
        let id = RtmIdentity::vendor_provisioned("board");
        let chain = BootChain::demo("t", false);
        let n1 = [1u8; 8];
        let (m, m_bl2) = rtm_respond(&n1, &id, &chain);
        let pk = id.key.verifying_key();
        assert!(verify_bytes(pk, &n1, &m));
        assert!(!verify_bytes(pk, &[2u8; 8], &m));
        assert_eq!(
            m_bl2,
            <[u8; 32]>::from(Sha256::digest(&chain.image(Stage::Bl2).unwrap().payload))
        );
        assert!(TrustAnchor::bundled_vendor().verify(&id.cert).is_ok());
    }

    #[test]
    fn forged_responder_fails() {
        let id = RtmIdentity::vendor_provisioned("board");
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let forger = RtmIdentity {
            key: SigningKey::random(&mut rng),
            ..id.clone()
        };
        let chain = BootChain::demo("t", false);
        for i in 0..20u8 {
            let (m, _) = rtm_respond(&[i; 8], &forger, &chain);
            assert!(!verify_bytes(id.key.verifying_key(), &[i; 8], &m));
        }
    }

    #[test]
    fn latency_simulation() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let m = TimingModel::constant(600);
        assert_eq!(simulate_response_latency(&m, &mut rng), Ok(600));
        let empty = TimingModel {
            kind: TimingKind::Empirical(vec![]),
            ..m
        };
        assert_eq!(
            simulate_response_latency(&empty, &mut rng),
            Err(TimingError::Empty)
        );
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("bl31".parse::<Stage>().unwrap(), Stage::Bl31);
        assert!("BL4".parse::<Stage>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn secure_boot_is_deterministic(stage in 1usize..5, byte in 0usize..8) {
            let mut chain = BootChain::demo("p", true);
            let len = chain.images[stage].payload.len();
            chain.images[stage].payload[byte % len] ^= 0x80;
            prop_assert_eq!(secure_boot(&chain), secure_boot(&chain.clone()));
            prop_assert_eq!(secure_boot(&chain).failed_at, Some(chain.images[stage].stage));
        }

        #[test]
        fn swapping_stages_changes_pcr(i in 1usize..5, j in 1usize..5) {
            prop_assume!(i != j);
            let chain = BootChain::demo("p", true);
            let mut swapped = chain.clone();
            swapped.images.swap(i, j);
            let (mut a, mut b) = (Recorder(Vec::new()), Recorder(Vec::new()));
            measured_boot(&chain, &mut a);
            measured_boot(&swapped, &mut b);
            let fa = a.0.iter().fold([0u8; 32], |acc, (_, d)| extend_value(&acc, d));
            let fb = b.0.iter().fold([0u8; 32], |acc, (_, d)| extend_value(&acc, d));
            prop_assert_ne!(fa, fb);
            prop_assert!(!secure_boot(&swapped).is_success());
        }
    }
}
