//! APDU command dispatcher.
//!
//! | INS  | command            | P1                          | data                                  |
//! |------|--------------------|-----------------------------|---------------------------------------|
//! | 0x01 | init               | binding mode                | –                                     |
//! | 0x02 | clock injection    | –                           | `u64` µs                              |
//! | 0x10 | PCR extend         | index                       | 32-byte digest                        |
//! | 0x20 | PCR read           | index                       | –                                     |
//! | 0x30 | seal               | –                           | parent `u32`, policy, payload         |
//! | 0x31 | unseal             | –                           | blob, approvals                       |
//! | 0x40 | create key         | algorithm                   | flags byte                            |
//! | 0x41 | duplicate key      | –                           | handle `u32`, new parent (65 bytes)   |
//! | 0x42 | import key         | –                           | duplication blob                      |
//! | 0x43 | read public        | 0 SRK, 1 EK cert, 2 key     | handle `u32` for P1 = 2               |
//! | 0x50 | quote              | –                           | selection `u32`, nonce, basename flag |
//! | 0x51 | DAA join init      | –                           | public parameters                     |
//! | 0x52 | DAA join finish    | –                           | issuer response                       |
//! | 0x60 | hash               | –                           | message                               |
//! | 0x61 | random             | byte count                  | –                                     |
//! | 0x70 | counter            | 0 create, 1 increment, 2 read | id `u32`                            |
//! | 0x71 | NV                 | 0 write, 1 read, 2 define   | index `u32`, ...                      |
//! | 0x80 | binding            | see `BIND_*`                | ...                                   |
//!
//! Variable fields use the crate's length-prefixed codec. P2 is reserved for
//! chunking: bit 7 flags more chunks, the low bits carry the sequence number.

use p256::PublicKey;

use super::{KeyTemplate, Origin, PcrSelection, Policy, PolicyApproval, SealedBlob, Tpm, TpmError};
use crate::apdu::{ApduCommand, ApduResponse, Reassembler, StatusWord};
use crate::binding::tee::{ChannelFrame, TeeHello};
use crate::binding::BindingMode;
use crate::cert::{Certificate, PUBLIC_KEY_BYTES};
use crate::codec::{Reader, Writer};
use crate::daa::{DaaPublicParams, JoinResponse};

pub const INS_INIT: u8 = 0x01;
pub const INS_CLOCK: u8 = 0x02;
pub const INS_EXTEND: u8 = 0x10;
pub const INS_READ: u8 = 0x20;
pub const INS_SEAL: u8 = 0x30;
pub const INS_UNSEAL: u8 = 0x31;
pub const INS_CREATE_KEY: u8 = 0x40;
pub const INS_DUPLICATE: u8 = 0x41;
pub const INS_IMPORT: u8 = 0x42;
pub const INS_READ_PUBLIC: u8 = 0x43;
pub const INS_QUOTE: u8 = 0x50;
pub const INS_JOIN_INIT: u8 = 0x51;
pub const INS_JOIN_FINISH: u8 = 0x52;
pub const INS_HASH: u8 = 0x60;
pub const INS_RANDOM: u8 = 0x61;
pub const INS_COUNTER: u8 = 0x70;
pub const INS_NV: u8 = 0x71;
pub const INS_BINDING: u8 = 0x80;

pub const BIND_INIT_EXTEND: u8 = 0x01;
pub const BIND_PCR_SIG_EXTEND: u8 = 0x02;
pub const BIND_TEE_HELLO: u8 = 0x10;
pub const BIND_TEE_FRAME: u8 = 0x11;
pub const BIND_UNTRUSTED_PHASE: u8 = 0x20;

pub const READ_PUBLIC_SRK: u8 = 0;
pub const READ_PUBLIC_EK_CERT: u8 = 1;
pub const READ_PUBLIC_KEY: u8 = 2;

pub const COUNTER_CREATE: u8 = 0;
pub const COUNTER_INCREMENT: u8 = 1;
pub const COUNTER_READ: u8 = 2;

pub const NV_WRITE: u8 = 0;
pub const NV_READ: u8 = 1;
pub const NV_DEFINE: u8 = 2;

/// Every instruction byte the card answers.
pub const SUPPORTED_INS: [u8; 18] = [
    INS_INIT,
    INS_CLOCK,
    INS_EXTEND,
    INS_READ,
    INS_SEAL,
    INS_UNSEAL,
    INS_CREATE_KEY,
    INS_DUPLICATE,
    INS_IMPORT,
    INS_READ_PUBLIC,
    INS_QUOTE,
    INS_JOIN_INIT,
    INS_JOIN_FINISH,
    INS_HASH,
    INS_RANDOM,
    INS_COUNTER,
    INS_NV,
    INS_BINDING,
];

fn malformed(what: &str) -> TpmError {
    TpmError::Malformed(what.to_string())
}

fn error_response(e: TpmError) -> ApduResponse {
    match e {
        TpmError::Binding(f) => ApduResponse::with_data(e.status_word(), f.to_bytes()),
        other => ApduResponse::status(other.status_word()),
    }
}

pub fn encode_quote_request(selection: PcrSelection, nonce: &[u8], bsn: Option<&[u8]>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(selection.0).bytes(nonce);
    match bsn {
        Some(b) => w.u8(1).bytes(b),
        None => w.u8(0),
    };
    w.finish()
}

pub fn encode_seal_request(parent: u32, policy: &Policy, data: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(parent).bytes(&policy.to_bytes()).bytes(data);
    w.finish()
}

pub fn encode_unseal_request(blob: &SealedBlob, approvals: &[PolicyApproval]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&blob.to_bytes())
        .bytes(&PolicyApproval::list_to_bytes(approvals));
    w.finish()
}

pub fn encode_sig_extend(m: &[u8], m_bl2: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(m).raw(m_bl2);
    w.finish()
}

impl Tpm {
    /// Processes one command frame from the host.
    pub fn dispatch(&mut self, cmd: &ApduCommand) -> ApduResponse {
        self.execute(cmd, Origin::Host)
    }

    pub(crate) fn execute(&mut self, cmd: &ApduCommand, origin: Origin) -> ApduResponse {
        let chunked = !cmd.is_final_chunk() || cmd.sequence() != 0;
        let pending = match origin {
            Origin::Host => self.volatile.reassembler.take(),
            Origin::Channel => self.volatile.channel_reassembler.take(),
        };
        if !chunked {
            return self.run(cmd.ins, cmd.p1, &cmd.data, origin);
        }
        let mut acc = match pending {
            Some(acc) if acc.ins() == cmd.ins => acc,
            _ => Reassembler::new(cmd.ins),
        };
        match acc.push(cmd) {
            Ok(Some(payload)) => self.run(cmd.ins, cmd.p1, &payload, origin),
            Ok(None) => {
                match origin {
                    Origin::Host => self.volatile.reassembler = Some(acc),
                    Origin::Channel => self.volatile.channel_reassembler = Some(acc),
                }
                ApduResponse::ok(Vec::new())
            }
            Err(_) => ApduResponse::status(StatusWord::WRONG_DATA),
        }
    }

    fn run(&mut self, ins: u8, p1: u8, data: &[u8], origin: Origin) -> ApduResponse {
        if !SUPPORTED_INS.contains(&ins) {
            self.begin();
            return ApduResponse::status(StatusWord::INS_NOT_SUPPORTED);
        }
        match self.run_inner(ins, p1, data, origin) {
            Ok(out) => ApduResponse::ok(out),
            Err(e) => {
                // Rejected commands, malformed ones included, still spend
                // the clock freshness.
                if ins != INS_CLOCK {
                    self.begin();
                }
                error_response(e)
            }
        }
    }

    fn run_inner(
        &mut self,
        ins: u8,
        p1: u8,
        data: &[u8],
        origin: Origin,
    ) -> Result<Vec<u8>, TpmError> {
        let mut r = Reader::new(data);
        let out = match ins {
            INS_INIT => {
                let mode = BindingMode::from_byte(p1).ok_or_else(|| malformed("binding mode"))?;
                r.finish()?;
                self.init(mode)?;
                Vec::new()
            }
            INS_CLOCK => {
                let t = r.u64("clock")?;
                r.finish()?;
                self.set_clock(t)?;
                Vec::new()
            }
            INS_EXTEND => {
                let digest: [u8; 32] = r.array("digest")?;
                r.finish()?;
                self.pcr_extend_as(origin, p1 as usize, &digest)?.to_vec()
            }
            INS_READ => {
                r.finish()?;
                self.pcr_read(p1 as usize)?.to_vec()
            }
            INS_SEAL => {
                let parent = r.u32("parent")?;
                let policy = Policy::from_bytes(r.bytes("policy")?)?;
                let payload = r.bytes("payload")?;
                r.finish()?;
                self.seal_as(origin, parent, payload, policy)?.to_bytes()
            }
            INS_UNSEAL => {
                let blob = SealedBlob::from_bytes(r.bytes("blob")?)?;
                let approvals = PolicyApproval::list_from_bytes(r.bytes("approvals")?)?;
                r.finish()?;
                self.unseal_as(origin, &blob, &approvals)?
            }
            INS_CREATE_KEY => {
                let flags = r.u8("flags")?;
                r.finish()?;
                let (handle, public) = self.create_key(KeyTemplate::from_flags(p1, flags))?;
                let mut out = handle.to_be_bytes().to_vec();
                out.extend_from_slice(&super::sec1(&public));
                out
            }
            INS_DUPLICATE => {
                let handle = r.u32("handle")?;
                let raw: [u8; PUBLIC_KEY_BYTES] = r.array("new parent")?;
                r.finish()?;
                let parent =
                    PublicKey::from_sec1_bytes(&raw).map_err(|_| malformed("new parent key"))?;
                self.duplicate_key(handle, &parent)?
            }
            INS_IMPORT => self.import_key(data)?.to_be_bytes().to_vec(),
            INS_READ_PUBLIC => {
                self.begin();
                match p1 {
                    READ_PUBLIC_SRK => {
                        r.finish()?;
                        super::sec1(&self.srk_public()?).to_vec()
                    }
                    READ_PUBLIC_EK_CERT => {
                        r.finish()?;
                        self.require_init()?;
                        self.ek_certificate()
                            .ok_or(TpmError::NotInitialized)?
                            .to_bytes()
                    }
                    READ_PUBLIC_KEY => {
                        let handle = r.u32("handle")?;
                        r.finish()?;
                        self.key(handle)
                            .ok_or(TpmError::UnknownHandle(handle))?
                            .public
                            .to_vec()
                    }
                    _ => return Err(malformed("read-public selector")),
                }
            }
            INS_QUOTE => {
                let selection = PcrSelection(r.u32("selection")?);
                let nonce = r.bytes("nonce")?;
                let bsn = match r.u8("basename flag")? {
                    0 => None,
                    1 => Some(r.bytes("basename")?),
                    _ => return Err(malformed("basename flag")),
                };
                r.finish()?;
                self.quote_as(origin, selection, nonce, bsn)?.to_bytes()
            }
            INS_JOIN_INIT => {
                let crs = DaaPublicParams::from_bytes(data)?;
                self.daa_join_init(&crs)?.to_bytes()
            }
            INS_JOIN_FINISH => {
                let (_, state) = self
                    .volatile
                    .join
                    .as_ref()
                    .ok_or(TpmError::Daa("no join in progress".into()))?;
                let resp = JoinResponse::from_bytes(&state.keys().pk, data)?;
                self.daa_join_finish(&resp)?;
                Vec::new()
            }
            INS_HASH => self.hash(data).to_vec(),
            INS_RANDOM => {
                r.finish()?;
                self.get_random(p1 as usize)?
            }
            INS_COUNTER => {
                let id = r.u32("counter id")?;
                r.finish()?;
                let v = match p1 {
                    COUNTER_CREATE => self.counter_create(id)?,
                    COUNTER_INCREMENT => self.counter_increment(id)?,
                    COUNTER_READ => self.counter_read(id)?,
                    _ => return Err(malformed("counter operation")),
                };
                v.to_be_bytes().to_vec()
            }
            INS_NV => {
                let index = r.u32("NV index")?;
                match p1 {
                    NV_WRITE => {
                        let payload = r.bytes("NV data")?;
                        let approvals = PolicyApproval::list_from_bytes(r.bytes("approvals")?)?;
                        r.finish()?;
                        self.nv_write(index, payload, &approvals)?;
                        Vec::new()
                    }
                    NV_READ => {
                        let approvals = PolicyApproval::list_from_bytes(r.bytes("approvals")?)?;
                        r.finish()?;
                        self.nv_read(index, &approvals)?
                    }
                    NV_DEFINE => {
                        let policy = Policy::from_bytes(r.bytes("NV policy")?)?;
                        r.finish()?;
                        self.nv_define(index, policy)?;
                        Vec::new()
                    }
                    _ => return Err(malformed("NV operation")),
                }
            }
            INS_BINDING => self.run_binding(p1, data)?,
            _ => unreachable!("filtered by SUPPORTED_INS"),
        };
        Ok(out)
    }

    fn run_binding(&mut self, op: u8, data: &[u8]) -> Result<Vec<u8>, TpmError> {
        match op {
            BIND_INIT_EXTEND => {
                let cert = Certificate::from_bytes(data)
                    .map_err(|e| TpmError::Malformed(e.to_string()))?;
                Ok(self.binding_init_extend(&cert)?.to_vec())
            }
            BIND_PCR_SIG_EXTEND => {
                let mut r = Reader::new(data);
                let m = r.bytes("signature")?;
                let m_bl2: [u8; 32] = r.array("BL2 measurement")?;
                r.finish()?;
                Ok(self.binding_pcr_sig_extend(m, &m_bl2)?.to_bytes())
            }
            BIND_TEE_HELLO => Ok(self.tee_handshake(&TeeHello::from_bytes(data)?)?.to_vec()),
            BIND_TEE_FRAME => self.tee_frame(&ChannelFrame::from_bytes(data)?),
            BIND_UNTRUSTED_PHASE => {
                self.enter_untrusted_phase();
                Ok(Vec::new())
            }
            _ => Err(malformed("binding operation")),
        }
    }
}
