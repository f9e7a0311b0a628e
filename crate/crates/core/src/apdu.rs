//! APDU command/response framing.
//!
//! Command frames are laid out as `CLA ‖ INS ‖ P1 ‖ P2 ‖ DATA_LEN ‖ DATA ‖ EXP_DATA_SIZE`,
//! so an encoded command is always `6 + DATA_LEN` bytes long. The trailer is
//! present even when `DATA_LEN` is zero. Response frames are the response data
//! followed by a two-byte status word.
//!
//! Payloads that do not fit in a single 255-byte data field are split with
//! [`chunk_payload`]. Bit `0x80` of P2 marks "more chunks follow" and the low
//! seven bits carry a rolling sequence number used to detect reordering.

use std::fmt;

use thiserror::Error;

/// Largest data field a short APDU can carry.
pub const MAX_DATA_LEN: usize = 255;

/// Header (5 bytes) plus the EXP_DATA_SIZE trailer.
pub const COMMAND_OVERHEAD: usize = 6;

/// P2 bit set on every chunk except the last one.
pub const P2_MORE_CHUNKS: u8 = 0x80;

const P2_SEQUENCE_MASK: u8 = 0x7F;

/// Default class byte for the proprietary TPM command set.
pub const CLA_PROPRIETARY: u8 = 0x80;

/// ISO 7816-4 style status word.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatusWord(pub u16);

impl StatusWord {
    pub const SUCCESS: StatusWord = StatusWord(0x9000);
    pub const WRONG_DATA: StatusWord = StatusWord(0x6A80);
    pub const CONDITIONS_NOT_SATISFIED: StatusWord = StatusWord(0x6985);
    pub const INS_NOT_SUPPORTED: StatusWord = StatusWord(0x6D00);
    /// Incorrect P1/P2 (e.g. PCR index out of range).
    pub const INCORRECT_P1_P2: StatusWord = StatusWord(0x6A86);
    /// Referenced data (key handle, counter id, NV index) not found.
    pub const REFERENCED_DATA_NOT_FOUND: StatusWord = StatusWord(0x6A88);
    /// Security status not satisfied (integrity/authentication failure).
    pub const SECURITY_STATUS_NOT_SATISFIED: StatusWord = StatusWord(0x6982);
    /// Command not allowed in the current state (e.g. repeated init).
    pub const COMMAND_NOT_ALLOWED: StatusWord = StatusWord(0x6986);

    pub fn is_success(self) -> bool {
        self == Self::SUCCESS
    }

    pub fn to_bytes(self) -> [u8; 2] {
        self.0.to_be_bytes()
    }
}

impl fmt::Debug for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StatusWord({:04X})", self.0)
    }
}

impl fmt::Display for StatusWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ApduError {
    #[error("data field of {len} bytes exceeds the {MAX_DATA_LEN}-byte limit")]
    Oversize { len: usize },
    #[error("frame truncated: {field} needs {needed} bytes, got {got}")]
    Truncated {
        field: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("{field} declares {declared} bytes but frame carries {actual}")]
    LengthMismatch {
        field: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("chunk {index} out of order: expected sequence {expected}, got {got}")]
    OutOfOrder { index: usize, expected: u8, got: u8 },
    #[error("chunk {index} has INS {got:#04x}, transfer uses {expected:#04x}")]
    InsMismatch { index: usize, expected: u8, got: u8 },
    #[error("chunked transfer ended without a final chunk")]
    MissingFinal,
    #[error("chunk {index} follows the final chunk")]
    TrailingChunk { index: usize },
    #[error("reassembled {actual} bytes, transfer declares {declared}")]
    TotalMismatch { declared: usize, actual: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("link failure: {0}")]
    Link(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduCommand {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub exp_data_size: u8,
}

impl ApduCommand {
    /// Proprietary-class command with no expected-length hint.
    pub fn new(ins: u8, p1: u8, p2: u8, data: impl Into<Vec<u8>>) -> Self {
        ApduCommand {
            cla: CLA_PROPRIETARY,
            ins,
            p1,
            p2,
            data: data.into(),
            exp_data_size: 0,
        }
    }

    pub fn encoded_len(&self) -> usize {
        COMMAND_OVERHEAD + self.data.len()
    }

    pub fn is_final_chunk(&self) -> bool {
        self.p2 & P2_MORE_CHUNKS == 0
    }

    pub fn sequence(&self) -> u8 {
        self.p2 & P2_SEQUENCE_MASK
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduResponse {
    pub data: Vec<u8>,
    pub status_word: StatusWord,
}

impl ApduResponse {
    pub fn ok(data: impl Into<Vec<u8>>) -> Self {
        ApduResponse {
            data: data.into(),
            status_word: StatusWord::SUCCESS,
        }
    }

    pub fn status(sw: StatusWord) -> Self {
        ApduResponse {
            data: Vec::new(),
            status_word: sw,
        }
    }

    pub fn with_data(sw: StatusWord, data: impl Into<Vec<u8>>) -> Self {
        ApduResponse {
            data: data.into(),
            status_word: sw,
        }
    }
}

pub fn encode_command(cmd: &ApduCommand) -> Result<Vec<u8>, ApduError> {
    if cmd.data.len() > MAX_DATA_LEN {
        return Err(ApduError::Oversize {
            len: cmd.data.len(),
        });
    }
    let mut frame = Vec::with_capacity(cmd.encoded_len());
    frame.extend_from_slice(&[cmd.cla, cmd.ins, cmd.p1, cmd.p2, cmd.data.len() as u8]);
    frame.extend_from_slice(&cmd.data);
    frame.push(cmd.exp_data_size);
    Ok(frame)
}

pub fn decode_command(frame: &[u8]) -> Result<ApduCommand, ApduError> {
    if frame.len() < COMMAND_OVERHEAD {
        return Err(ApduError::Truncated {
            field: "header",
            needed: COMMAND_OVERHEAD,
            got: frame.len(),
        });
    }
    let declared = frame[4] as usize;
    let actual = frame.len() - COMMAND_OVERHEAD;
    if declared != actual {
        return Err(ApduError::LengthMismatch {
            field: "DATA_LEN",
            declared,
            actual,
        });
    }
    Ok(ApduCommand {
        cla: frame[0],
        ins: frame[1],
        p1: frame[2],
        p2: frame[3],
        data: frame[5..5 + declared].to_vec(),
        exp_data_size: frame[5 + declared],
    })
}

pub fn encode_response(resp: &ApduResponse) -> Vec<u8> {
    let mut frame = Vec::with_capacity(resp.data.len() + 2);
    frame.extend_from_slice(&resp.data);
    frame.extend_from_slice(&resp.status_word.to_bytes());
    frame
}

pub fn decode_response(frame: &[u8]) -> Result<ApduResponse, ApduError> {
    if frame.len() < 2 {
        return Err(ApduError::Truncated {
            field: "status word",
            needed: 2,
            got: frame.len(),
        });
    }
    let split = frame.len() - 2;
    Ok(ApduResponse {
        data: frame[..split].to_vec(),
        status_word: StatusWord(u16::from_be_bytes([frame[split], frame[split + 1]])),
    })
}

/// A payload split across several command frames sharing one INS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedTransfer {
    pub ins: u8,
    pub total_len: usize,
    pub chunks: Vec<ApduCommand>,
}

pub fn chunk_payload(ins: u8, payload: &[u8]) -> ChunkedTransfer {
    chunk_payload_with(CLA_PROPRIETARY, ins, 0, payload)
}

/// Like [`chunk_payload`] with an explicit class byte and P1 repeated on every chunk.
pub fn chunk_payload_with(cla: u8, ins: u8, p1: u8, payload: &[u8]) -> ChunkedTransfer {
    let mut pieces: Vec<&[u8]> = payload.chunks(MAX_DATA_LEN).collect();
    if pieces.is_empty() {
        pieces.push(&[]);
    }
    let last = pieces.len() - 1;
    let chunks = pieces
        .into_iter()
        .enumerate()
        .map(|(i, piece)| {
            let mut p2 = (i as u8) & P2_SEQUENCE_MASK;
            if i != last {
                p2 |= P2_MORE_CHUNKS;
            }
            ApduCommand {
                cla,
                ins,
                p1,
                p2,
                data: piece.to_vec(),
                exp_data_size: 0,
            }
        })
        .collect();
    ChunkedTransfer {
        ins,
        total_len: payload.len(),
        chunks,
    }
}

pub fn reassemble(transfer: &ChunkedTransfer) -> Result<Vec<u8>, ApduError> {
    let mut acc = Reassembler::new(transfer.ins);
    let mut done = None;
    for (index, chunk) in transfer.chunks.iter().enumerate() {
        if done.is_some() {
            return Err(ApduError::TrailingChunk { index });
        }
        done = acc.push(chunk)?;
    }
    let payload = done.ok_or(ApduError::MissingFinal)?;
    if payload.len() != transfer.total_len {
        return Err(ApduError::TotalMismatch {
            declared: transfer.total_len,
            actual: payload.len(),
        });
    }
    Ok(payload)
}

/// Incremental receiver for chunked commands, as used by the card side.
#[derive(Debug, Clone)]
pub struct Reassembler {
    ins: u8,
    buf: Vec<u8>,
    next: usize,
}

impl Reassembler {
    pub fn new(ins: u8) -> Self {
        Reassembler {
            ins,
            buf: Vec::new(),
            next: 0,
        }
    }

    pub fn ins(&self) -> u8 {
        self.ins
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Feed one chunk. Returns the whole payload once the final chunk arrives.
    pub fn push(&mut self, chunk: &ApduCommand) -> Result<Option<Vec<u8>>, ApduError> {
        if chunk.ins != self.ins {
            return Err(ApduError::InsMismatch {
                index: self.next,
                expected: self.ins,
                got: chunk.ins,
            });
        }
        let expected = (self.next as u8) & P2_SEQUENCE_MASK;
        if chunk.sequence() != expected {
            return Err(ApduError::OutOfOrder {
                index: self.next,
                expected,
                got: chunk.sequence(),
            });
        }
        self.buf.extend_from_slice(&chunk.data);
        self.next += 1;
        if chunk.is_final_chunk() {
            self.next = 0;
            Ok(Some(std::mem::take(&mut self.buf)))
        } else {
            Ok(None)
        }
    }
}

/// Two hex digits per byte, space separated.
pub fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{b:02X}"));
    }
    out
}

/// Parses the [`to_hex`] form. Whitespace between bytes is optional.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, ApduError> {
    let digits: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return Err(ApduError::Hex(format!(
            "odd number of digits ({})",
            digits.len()
        )));
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&digits[i..i + 2], 16)
                .map_err(|_| ApduError::Hex(format!("bad digits {:?}", &digits[i..i + 2])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extend_frame_layout() {
        let cmd = ApduCommand {
            cla: 0x80,
            ins: 0x10,
            p1: 0x01,
            p2: 0x00,
            data: vec![0xAA; 32],
            exp_data_size: 0x00,
        };
        let frame = encode_command(&cmd).unwrap();
        assert_eq!(frame.len(), 38);
        assert_eq!(&frame[..5], &[0x80, 0x10, 0x01, 0x00, 0x20]);
        assert!(frame[5..37].iter().all(|&b| b == 0xAA));
        assert_eq!(frame[37], 0x00);
    }

    #[test]
    fn read_frame_layout() {
        let cmd = ApduCommand {
            cla: 0x80,
            ins: 0x20,
            p1: 0x00,
            p2: 0x00,
            data: vec![],
            exp_data_size: 0x20,
        };
        let frame = encode_command(&cmd).unwrap();
        assert_eq!(frame, vec![0x80, 0x20, 0x00, 0x00, 0x00, 0x20]);
        assert_eq!(decode_command(&frame).unwrap(), cmd);
    }

    #[test]
    fn oversize_data_rejected() {
        let cmd = ApduCommand::new(0x10, 0, 0, vec![0; 256]);
        assert_eq!(encode_command(&cmd), Err(ApduError::Oversize { len: 256 }));
    }

    #[test]
    fn truncated_and_mismatched_frames() {
        assert!(matches!(
            decode_command(&[0x80, 0x20, 0, 0, 0]),
            Err(ApduError::Truncated {
                field: "header",
                ..
            })
        ));
        // DATA_LEN says 4, only 1 data byte follows.
        assert!(matches!(
            decode_command(&[0x80, 0x20, 0, 0, 4, 0xAB, 0x00]),
            Err(ApduError::LengthMismatch {
                field: "DATA_LEN",
                declared: 4,
                actual: 1
            })
        ));
    }

    #[test]
    fn response_frames() {
        assert_eq!(
            encode_response(&ApduResponse::status(StatusWord::SUCCESS)),
            vec![0x90, 0x00]
        );
        let resp = ApduResponse::ok(vec![0x01, 0x02]);
        assert_eq!(encode_response(&resp), vec![0x01, 0x02, 0x90, 0x00]);
        assert_eq!(decode_response(&[0x01, 0x02, 0x90, 0x00]).unwrap(), resp);
        assert!(decode_response(&[0x90]).is_err());
    }

    #[test]
    fn chunking_600_bytes() {
        let payload: Vec<u8> = (0..600u32).map(|i| i as u8).collect();
        let t = chunk_payload(0x30, &payload);
        let sizes: Vec<usize> = t.chunks.iter().map(|c| c.data.len()).collect();
        assert_eq!(sizes, vec![255, 255, 90]);
        assert!(!t.chunks[0].is_final_chunk());
        assert!(!t.chunks[1].is_final_chunk());
        assert!(t.chunks[2].is_final_chunk());
        assert_eq!(reassemble(&t).unwrap(), payload);
    }

    #[test]
    fn chunking_boundaries() {
        let t = chunk_payload(0x30, &[7u8; 255]);
        assert_eq!(t.chunks.len(), 1);
        assert!(t.chunks[0].is_final_chunk());
        assert_eq!(reassemble(&t).unwrap(), vec![7u8; 255]);

        let t = chunk_payload(0x30, &[]);
        assert_eq!(t.chunks.len(), 1);
        assert!(t.chunks[0].data.is_empty());
        assert_eq!(encode_command(&t.chunks[0]).unwrap()[4], 0);
        assert_eq!(reassemble(&t).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn reassembly_errors() {
        let mut t = chunk_payload(0x30, &[1u8; 600]);
        t.chunks.pop();
        assert_eq!(reassemble(&t), Err(ApduError::MissingFinal));

        let mut t = chunk_payload(0x30, &[1u8; 600]);
        t.chunks.swap(0, 1);
        assert!(matches!(reassemble(&t), Err(ApduError::OutOfOrder { .. })));

        let mut t = chunk_payload(0x30, &[1u8; 10]);
        t.chunks.push(t.chunks[0].clone());
        assert!(matches!(
            reassemble(&t),
            Err(ApduError::TrailingChunk { index: 1 })
        ));
    }

    #[test]
    fn hex_round_trip() {
        assert_eq!(to_hex(&[0x80, 0x20, 0x0A]), "80 20 0A");
        assert_eq!(parse_hex("80 20 0a").unwrap(), vec![0x80, 0x20, 0x0A]);
        assert!(parse_hex("8").is_err());
        assert!(parse_hex("zz").is_err());
    }

    fn arb_command() -> impl Strategy<Value = ApduCommand> {
        (
            any::<u8>(),
            any::<u8>(),
            any::<u8>(),
            any::<u8>(),
            proptest::collection::vec(any::<u8>(), 0..=MAX_DATA_LEN),
            any::<u8>(),
        )
            .prop_map(|(cla, ins, p1, p2, data, exp_data_size)| ApduCommand {
                cla,
                ins,
                p1,
                p2,
                data,
                exp_data_size,
            })
    }

    proptest! {
        #[test]
        fn command_round_trip(cmd in arb_command()) {
            let frame = encode_command(&cmd).unwrap();
            prop_assert_eq!(frame.len(), 6 + cmd.data.len());
            prop_assert_eq!(frame[4] as usize, cmd.data.len());
            let back = decode_command(&frame).unwrap();
            prop_assert_eq!(encode_command(&back).unwrap(), frame);
            prop_assert_eq!(back, cmd);
        }

        #[test]
        fn response_round_trip(data in proptest::collection::vec(any::<u8>(), 0..600), sw in any::<u16>()) {
            let resp = ApduResponse { data, status_word: StatusWord(sw) };
            prop_assert_eq!(decode_response(&encode_response(&resp)).unwrap(), resp);
        }

        #[test]
        fn chunk_round_trip(payload in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let t = chunk_payload(0x42, &payload);
            prop_assert_eq!(t.chunks.len(), payload.len().div_ceil(MAX_DATA_LEN).max(1));
            prop_assert_eq!(reassemble(&t).unwrap(), payload);
        }
    }
}
