//! Host-side client speaking APDUs to a card.

use p256::PublicKey;
use thiserror::Error;

use super::dispatch::*;
use super::{
    KeyTemplate, PcrSelection, Policy, PolicyApproval, Quote, SealedBlob, Tpm, TpmError, PCR_BYTES,
};
use crate::apdu::{
    chunk_payload_with, decode_command, decode_response, encode_command, encode_response, to_hex,
    ApduCommand, ApduError, ApduResponse, StatusWord, CLA_PROPRIETARY,
};
use crate::binding::runner::{BindingPort, PortError};
use crate::binding::tee::{ChannelFrame, TeeChannel, TeeError};
use crate::binding::{BindingFailure, BindingMode, RoundOutcome, NONCE_BYTES};
use crate::cert::{Certificate, PUBLIC_KEY_BYTES};
use crate::daa::{DaaPublicParams, JoinRequest, JoinResponse};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CardError {
    #[error("card returned {sw}")]
    Status { sw: StatusWord, data: Vec<u8> },
    #[error(transparent)]
    Apdu(#[from] ApduError),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl CardError {
    pub fn status_word(&self) -> Option<StatusWord> {
        match self {
            CardError::Status { sw, .. } => Some(*sw),
            _ => None,
        }
    }

    /// The binding failure carried in a rejected response, if any.
    pub fn binding_failure(&self) -> Option<BindingFailure> {
        match self {
            CardError::Status { data, .. } => BindingFailure::from_bytes(data),
            _ => None,
        }
    }
}

fn decode_err<E: std::fmt::Display>(e: E) -> CardError {
    CardError::Decode(e.to_string())
}

/// Moves encoded command frames to a card and back.
pub trait Transport {
    fn transmit(&mut self, frame: &[u8]) -> Result<Vec<u8>, ApduError>;
}

impl Transport for Tpm {
    fn transmit(&mut self, frame: &[u8]) -> Result<Vec<u8>, ApduError> {
        let cmd = decode_command(frame)?;
        Ok(encode_response(&self.dispatch(&cmd)))
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn transmit(&mut self, frame: &[u8]) -> Result<Vec<u8>, ApduError> {
        (**self).transmit(frame)
    }
}

pub struct Card<T> {
    transport: T,
    transcript: Vec<String>,
    recording: bool,
}

impl<T: Transport> Card<T> {
    pub fn new(transport: T) -> Self {
        Card {
            transport,
            transcript: Vec::new(),
            recording: true,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Every exchanged frame, `>` for commands and `<` for responses.
    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<String> {
        std::mem::take(&mut self.transcript)
    }

    fn exchange(&mut self, cmd: &ApduCommand) -> Result<ApduResponse, CardError> {
        let frame = encode_command(cmd)?;
        let reply = self.transport.transmit(&frame)?;
        if self.recording {
            self.transcript.push(format!("> {}", to_hex(&frame)));
            self.transcript.push(format!("< {}", to_hex(&reply)));
        }
        Ok(decode_response(&reply)?)
    }

    /// Sends a command, splitting its data across frames when needed.
    pub fn transmit(&mut self, cmd: &ApduCommand) -> Result<ApduResponse, CardError> {
        if cmd.data.len() <= crate::apdu::MAX_DATA_LEN {
            return self.exchange(cmd);
        }
        let chunks = chunk_payload_with(cmd.cla, cmd.ins, cmd.p1, &cmd.data).chunks;
        let mut last = None;
        for chunk in &chunks {
            let rsp = self.exchange(chunk)?;
            if !rsp.status_word.is_success() {
                return Ok(rsp);
            }
            last = Some(rsp);
        }
        Ok(last.expect("at least one chunk"))
    }

    pub fn call(&mut self, ins: u8, p1: u8, data: &[u8]) -> Result<Vec<u8>, CardError> {
        let rsp = self.transmit(&ApduCommand {
            cla: CLA_PROPRIETARY,
            ins,
            p1,
            p2: 0,
            data: data.to_vec(),
            exp_data_size: 0,
        })?;
        if rsp.status_word.is_success() {
            Ok(rsp.data)
        } else {
            Err(CardError::Status {
                sw: rsp.status_word,
                data: rsp.data,
            })
        }
    }

    pub fn init(&mut self, mode: BindingMode) -> Result<(), CardError> {
        self.call(INS_INIT, mode.to_byte(), &[]).map(drop)
    }

    pub fn set_clock(&mut self, time_us: u64) -> Result<(), CardError> {
        self.call(INS_CLOCK, 0, &time_us.to_be_bytes()).map(drop)
    }

    pub fn extend(&mut self, index: u8, digest: &[u8; 32]) -> Result<[u8; PCR_BYTES], CardError> {
        fixed(self.call(INS_EXTEND, index, digest)?)
    }

    pub fn read(&mut self, index: u8) -> Result<[u8; PCR_BYTES], CardError> {
        fixed(self.call(INS_READ, index, &[])?)
    }

    pub fn seal(
        &mut self,
        parent: u32,
        policy: &Policy,
        data: &[u8],
    ) -> Result<SealedBlob, CardError> {
        let out = self.call(INS_SEAL, 0, &encode_seal_request(parent, policy, data))?;
        SealedBlob::from_bytes(&out).map_err(decode_err)
    }

    pub fn unseal(
        &mut self,
        blob: &SealedBlob,
        approvals: &[PolicyApproval],
    ) -> Result<Vec<u8>, CardError> {
        self.call(INS_UNSEAL, 0, &encode_unseal_request(blob, approvals))
    }

    pub fn create_key(&mut self, template: KeyTemplate) -> Result<(u32, PublicKey), CardError> {
        let out = self.call(INS_CREATE_KEY, template.algorithm, &[template.flags()])?;
        if out.len() != 4 + PUBLIC_KEY_BYTES {
            return Err(CardError::Decode("create-key response length".into()));
        }
        let handle = u32::from_be_bytes(out[..4].try_into().expect("4 bytes"));
        let public = PublicKey::from_sec1_bytes(&out[4..]).map_err(decode_err)?;
        Ok((handle, public))
    }

    pub fn duplicate_key(
        &mut self,
        handle: u32,
        new_parent: &PublicKey,
    ) -> Result<Vec<u8>, CardError> {
        let mut data = handle.to_be_bytes().to_vec();
        data.extend_from_slice(&super::sec1(new_parent));
        self.call(INS_DUPLICATE, 0, &data)
    }

    pub fn import_key(&mut self, blob: &[u8]) -> Result<u32, CardError> {
        let out = self.call(INS_IMPORT, 0, blob)?;
        Ok(u32::from_be_bytes(fixed(out)?))
    }

    pub fn srk_public(&mut self) -> Result<PublicKey, CardError> {
        let out = self.call(INS_READ_PUBLIC, READ_PUBLIC_SRK, &[])?;
        PublicKey::from_sec1_bytes(&out).map_err(decode_err)
    }

    pub fn ek_certificate(&mut self) -> Result<Certificate, CardError> {
        let out = self.call(INS_READ_PUBLIC, READ_PUBLIC_EK_CERT, &[])?;
        Certificate::from_bytes(&out).map_err(decode_err)
    }

    pub fn key_public(&mut self, handle: u32) -> Result<PublicKey, CardError> {
        let out = self.call(INS_READ_PUBLIC, READ_PUBLIC_KEY, &handle.to_be_bytes())?;
        PublicKey::from_sec1_bytes(&out).map_err(decode_err)
    }

    pub fn quote(
        &mut self,
        selection: PcrSelection,
        nonce: &[u8],
        bsn: Option<&[u8]>,
    ) -> Result<Quote, CardError> {
        let out = self.call(INS_QUOTE, 0, &encode_quote_request(selection, nonce, bsn))?;
        Quote::from_bytes(&out).map_err(decode_err)
    }

    pub fn join_init(&mut self, crs: &DaaPublicParams) -> Result<JoinRequest, CardError> {
        let out = self.call(INS_JOIN_INIT, 0, &crs.to_bytes())?;
        JoinRequest::from_bytes(&out).map_err(decode_err)
    }

    pub fn join_finish(&mut self, req: &JoinRequest, resp: &JoinResponse) -> Result<(), CardError> {
        self.call(INS_JOIN_FINISH, 0, &resp.to_bytes(&req.pk_e))
            .map(drop)
    }

    pub fn hash(&mut self, data: &[u8]) -> Result<[u8; 32], CardError> {
        fixed(self.call(INS_HASH, 0, data)?)
    }

    pub fn random(&mut self, n: u8) -> Result<Vec<u8>, CardError> {
        self.call(INS_RANDOM, n, &[])
    }

    fn counter(&mut self, op: u8, id: u32) -> Result<u64, CardError> {
        Ok(u64::from_be_bytes(fixed(self.call(
            INS_COUNTER,
            op,
            &id.to_be_bytes(),
        )?)?))
    }

    pub fn counter_create(&mut self, id: u32) -> Result<u64, CardError> {
        self.counter(COUNTER_CREATE, id)
    }

    pub fn counter_increment(&mut self, id: u32) -> Result<u64, CardError> {
        self.counter(COUNTER_INCREMENT, id)
    }

    pub fn counter_read(&mut self, id: u32) -> Result<u64, CardError> {
        self.counter(COUNTER_READ, id)
    }

    pub fn nv_define(&mut self, index: u32, policy: &Policy) -> Result<(), CardError> {
        let mut w = crate::codec::Writer::new();
        w.u32(index).bytes(&policy.to_bytes());
        self.call(INS_NV, NV_DEFINE, &w.finish()).map(drop)
    }

    pub fn nv_write(
        &mut self,
        index: u32,
        data: &[u8],
        approvals: &[PolicyApproval],
    ) -> Result<(), CardError> {
        let mut w = crate::codec::Writer::new();
        w.u32(index)
            .bytes(data)
            .bytes(&PolicyApproval::list_to_bytes(approvals));
        self.call(INS_NV, NV_WRITE, &w.finish()).map(drop)
    }

    pub fn nv_read(
        &mut self,
        index: u32,
        approvals: &[PolicyApproval],
    ) -> Result<Vec<u8>, CardError> {
        let mut w = crate::codec::Writer::new();
        w.u32(index)
            .bytes(&PolicyApproval::list_to_bytes(approvals));
        self.call(INS_NV, NV_READ, &w.finish())
    }

    /// Runs the TEE handshake for `channel`.
    pub fn tee_establish<R>(
        &mut self,
        channel: &mut TeeChannel,
        rng: &mut R,
    ) -> Result<(), CardError>
    where
        R: rand::RngCore + rand::CryptoRng,
    {
        let hello = channel.hello(rng);
        let card_eph = self.call(INS_BINDING, BIND_TEE_HELLO, &hello.to_bytes())?;
        channel.establish(&card_eph).map_err(decode_err)
    }

    /// Sends `cmd` through an established channel.
    pub fn tee_send(
        &mut self,
        channel: &mut TeeChannel,
        cmd: &ApduCommand,
    ) -> Result<ApduResponse, TeeError> {
        channel.send(cmd, |frame| self.tee_frame(frame))
    }

    /// Delivers one raw channel frame, as a replaying attacker would.
    pub fn tee_frame(&mut self, frame: &ChannelFrame) -> Result<Vec<u8>, TeeError> {
        self.call(INS_BINDING, BIND_TEE_FRAME, &frame.to_bytes())
            .map_err(|e| match e {
                CardError::Status { sw, .. } => TeeError::Refused(sw.0),
                other => TeeError::Transport(other.to_string()),
            })
    }

    pub fn enter_untrusted_phase(&mut self) -> Result<(), CardError> {
        self.call(INS_BINDING, BIND_UNTRUSTED_PHASE, &[]).map(drop)
    }
}

/// Routes every frame of an outer card through an established TEE channel,
/// so the usual command helpers work in TEE-proxy mode.
pub struct SecureTransport<'a, T> {
    pub card: &'a mut Card<T>,
    pub channel: &'a mut TeeChannel,
}

impl<T: Transport> Transport for SecureTransport<'_, T> {
    fn transmit(&mut self, frame: &[u8]) -> Result<Vec<u8>, ApduError> {
        let cmd = decode_command(frame)?;
        let link = |e: TeeError| ApduError::Link(e.to_string());
        let wrapped = self.channel.wrap(&cmd).map_err(link)?;
        let reply = self.card.tee_frame(&wrapped).map_err(link)?;
        let rsp = self
            .channel
            .unwrap_response(wrapped.counter, &reply)
            .map_err(link)?;
        Ok(encode_response(&rsp))
    }
}

fn fixed<const N: usize>(bytes: Vec<u8>) -> Result<[u8; N], CardError> {
    let len = bytes.len();
    bytes
        .try_into()
        .map_err(|_| CardError::Decode(format!("expected {N} bytes, got {len}")))
}

fn port_error(e: CardError) -> PortError {
    match e.binding_failure() {
        Some(f) => PortError::Binding(f),
        None => PortError::Refused(e.to_string()),
    }
}

impl<T: Transport> BindingPort for Card<T> {
    fn inject_clock(&mut self, now_us: u64) -> Result<(), PortError> {
        self.set_clock(now_us).map_err(port_error)
    }

    fn init_extend(&mut self, cert: &Certificate) -> Result<[u8; NONCE_BYTES], PortError> {
        let out = self
            .call(INS_BINDING, BIND_INIT_EXTEND, &cert.to_bytes())
            .map_err(port_error)?;
        fixed(out).map_err(port_error)
    }

    fn pcr_sig_extend(&mut self, m: &[u8], m_bl2: [u8; 32]) -> Result<RoundOutcome, PortError> {
        let out = self
            .call(
                INS_BINDING,
                BIND_PCR_SIG_EXTEND,
                &encode_sig_extend(m, &m_bl2),
            )
            .map_err(port_error)?;
        RoundOutcome::from_bytes(&out).ok_or_else(|| PortError::Refused("bad round outcome".into()))
    }
}

fn tpm_port_error(e: TpmError) -> PortError {
    match e {
        TpmError::Binding(f) => PortError::Binding(f),
        other => PortError::Refused(other.to_string()),
    }
}

impl BindingPort for Tpm {
    fn inject_clock(&mut self, now_us: u64) -> Result<(), PortError> {
        self.set_clock(now_us).map_err(tpm_port_error)
    }

    fn init_extend(&mut self, cert: &Certificate) -> Result<[u8; NONCE_BYTES], PortError> {
        self.binding_init_extend(cert).map_err(tpm_port_error)
    }

    fn pcr_sig_extend(&mut self, m: &[u8], m_bl2: [u8; 32]) -> Result<RoundOutcome, PortError> {
        self.binding_pcr_sig_extend(m, &m_bl2)
            .map_err(tpm_port_error)
    }
}
