//! Binding the removable TPM to the local root of trust for measurement.
//!
//! Two mutually exclusive modes, picked at `tpm_init`:
//!
//! * distance bounding: the RTM answers timed nonce challenges and the card
//!   accepts when enough rounds arrive within the threshold;
//! * TEE proxy: a trusted execution environment opens an authenticated
//!   channel with a session key, and gated commands are only accepted
//!   through it.
//!
//! The statistical models for round success and relay attacks live in
//! [`stats`] and [`timing`].

pub mod runner;
pub mod stats;
pub mod tee;
pub mod timing;

use std::fmt;

use p256::ecdsa::VerifyingKey;
use rand::RngCore;
use thiserror::Error;

use crate::cert::verify_bytes;

pub use runner::{run_distance_bounding, BindingPort, DbReport, RtmChannel, VirtualClock};
pub use stats::{
    attacker_success, binom_tail, empirical_cdf, min_relay_bandwidth, synthetic_samples, StatsError,
};
pub use tee::TeeChannel;
pub use timing::{TimingKind, TimingModel};

/// Default round-trip threshold in microseconds.
pub const DEFAULT_THRESHOLD_US: u64 = 721;
pub const DEFAULT_ROUNDS: u32 = 30;
pub const DEFAULT_FRACTION: f64 = 0.47;
pub const NONCE_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BindingMode {
    #[default]
    DistanceBounding,
    TeeProxy,
}

impl BindingMode {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(BindingMode::DistanceBounding),
            1 => Some(BindingMode::TeeProxy),
            _ => None,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            BindingMode::DistanceBounding => 0,
            BindingMode::TeeProxy => 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Clone)]
pub enum ConfigError {
    #[error("fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("round count must be at least 1")]
    Rounds,
    #[error("threshold must be positive")]
    Threshold,
}

/// Parameters `(T, δ, n, f)` of the distance-bounding protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceBoundingConfig {
    /// Multi-round threshold `T` in microseconds.
    pub threshold_us: u64,
    /// Single-exchange window `δ`; equal to `T` by default.
    pub delta_us: u64,
    pub rounds: u32,
    pub fraction: f64,
    pub nonce_bits: u32,
    /// Conclude as soon as the outcome can no longer change instead of
    /// running all `n` rounds. The accept/reject decision is the same.
    pub stop_when_decided: bool,
}

impl Default for DistanceBoundingConfig {
    fn default() -> Self {
        DistanceBoundingConfig {
            threshold_us: DEFAULT_THRESHOLD_US,
            delta_us: DEFAULT_THRESHOLD_US,
            rounds: DEFAULT_ROUNDS,
            fraction: DEFAULT_FRACTION,
            nonce_bits: (NONCE_BYTES * 8) as u32,
            stop_when_decided: false,
        }
    }
}

impl DistanceBoundingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ConfigError::Fraction(self.fraction));
        }
        if self.rounds == 0 {
            return Err(ConfigError::Rounds);
        }
        if self.threshold_us == 0 || self.delta_us == 0 {
            return Err(ConfigError::Threshold);
        }
        Ok(())
    }

    /// Successes needed to bind: `⌊f·n⌋`, at least one.
    ///
    /// For `f = 0.47, n = 30` this is 14.
    pub fn required_successes(&self) -> u32 {
        required_successes(self.fraction, self.rounds)
    }
}

pub fn required_successes(fraction: f64, rounds: u32) -> u32 {
    let k = (fraction * rounds as f64 + 1e-9).floor() as u32;
    k.clamp(1, rounds)
}

/// Why a binding attempt ended in the failed state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindingFailure {
    UntrustedCertificate,
    UntrustedRtm,
    NotLocalRtm { successes: u32, rounds: u32 },
}

impl BindingFailure {
    pub fn code(self) -> u8 {
        match self {
            BindingFailure::UntrustedCertificate => 1,
            BindingFailure::UntrustedRtm => 2,
            BindingFailure::NotLocalRtm { .. } => 3,
        }
    }

    pub fn to_bytes(self) -> Vec<u8> {
        let mut out = vec![self.code()];
        if let BindingFailure::NotLocalRtm { successes, rounds } = self {
            out.extend_from_slice(&successes.to_be_bytes());
            out.extend_from_slice(&rounds.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        match bytes {
            [1] => Some(BindingFailure::UntrustedCertificate),
            [2] => Some(BindingFailure::UntrustedRtm),
            [3, rest @ ..] if rest.len() == 8 => Some(BindingFailure::NotLocalRtm {
                successes: u32::from_be_bytes(rest[..4].try_into().ok()?),
                rounds: u32::from_be_bytes(rest[4..].try_into().ok()?),
            }),
            _ => None,
        }
    }
}

impl fmt::Display for BindingFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BindingFailure::UntrustedCertificate => write!(f, "FAIL, untrusted certificate"),
            BindingFailure::UntrustedRtm => write!(f, "ERROR, untrusted RTM"),
            BindingFailure::NotLocalRtm { successes, rounds } => {
                write!(
                    f,
                    "ERROR, not local RTM ({successes}/{rounds} rounds in time)"
                )
            }
        }
    }
}

/// Result of one accepted `PCR_SIG_Extend` round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundOutcome {
    /// More rounds needed; answer this nonce next.
    Continue {
        nonce: [u8; NONCE_BYTES],
        successes: u32,
        rounds: u32,
    },
    Bound {
        successes: u32,
        rounds: u32,
    },
}

impl RoundOutcome {
    pub fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17);
        match self {
            RoundOutcome::Continue {
                nonce,
                successes,
                rounds,
            } => {
                out.push(1);
                out.extend_from_slice(&successes.to_be_bytes());
                out.extend_from_slice(&rounds.to_be_bytes());
                out.extend_from_slice(&nonce);
            }
            RoundOutcome::Bound { successes, rounds } => {
                out.push(0);
                out.extend_from_slice(&successes.to_be_bytes());
                out.extend_from_slice(&rounds.to_be_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 9 {
            return None;
        }
        let successes = u32::from_be_bytes(bytes[1..5].try_into().ok()?);
        let rounds = u32::from_be_bytes(bytes[5..9].try_into().ok()?);
        match (bytes[0], bytes.len()) {
            (0, 9) => Some(RoundOutcome::Bound { successes, rounds }),
            (1, 17) => Some(RoundOutcome::Continue {
                nonce: bytes[9..].try_into().ok()?,
                successes,
                rounds,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum DbState {
    Idle,
    Awaiting { nonce: [u8; NONCE_BYTES], t1: u64 },
    Bound,
    Failed(BindingFailure),
}

/// Card-side distance-bounding state machine.
#[derive(Clone, Debug)]
pub(crate) struct DbSession {
    pub(crate) state: DbState,
    rtm_key: Option<VerifyingKey>,
    successes: u32,
    rounds: u32,
    /// Last in-time transcript `(nonce, m)`.
    pub(crate) last: Option<([u8; NONCE_BYTES], Vec<u8>)>,
}

impl Default for DbSession {
    fn default() -> Self {
        DbSession {
            state: DbState::Idle,
            rtm_key: None,
            successes: 0,
            rounds: 0,
            last: None,
        }
    }
}

/// What the card must do after a round.
pub(crate) enum DbStep {
    Continue(RoundOutcome),
    Bind {
        outcome: RoundOutcome,
        m: Vec<u8>,
        nonce: [u8; NONCE_BYTES],
    },
}

impl DbSession {
    pub(crate) fn start<R: RngCore>(
        &mut self,
        key: VerifyingKey,
        t1: u64,
        rng: &mut R,
    ) -> [u8; NONCE_BYTES] {
        let mut nonce = [0u8; NONCE_BYTES];
        rng.fill_bytes(&mut nonce);
        self.rtm_key = Some(key);
        self.successes = 0;
        self.rounds = 0;
        self.last = None;
        self.state = DbState::Awaiting { nonce, t1 };
        nonce
    }

    pub(crate) fn fail(&mut self, failure: BindingFailure) -> BindingFailure {
        self.state = DbState::Failed(failure);
        failure
    }

    /// Processes a response arriving at time `t2`. The round counts if it
    /// arrived strictly within `δ`; its signature is only checked then.
    pub(crate) fn respond<R: RngCore>(
        &mut self,
        cfg: &DistanceBoundingConfig,
        t2: u64,
        m: &[u8],
        rng: &mut R,
    ) -> Result<DbStep, BindingFailure> {
        let DbState::Awaiting { nonce, t1 } = self.state else {
            unreachable!("caller checks the session state");
        };
        let key = self.rtm_key.expect("key set with nonce");
        self.rounds += 1;
        if t2.saturating_sub(t1) < cfg.delta_us {
            if !verify_bytes(&key, &nonce, m) {
                return Err(self.fail(BindingFailure::UntrustedRtm));
            }
            self.successes += 1;
            self.last = Some((nonce, m.to_vec()));
        }
        let k = cfg.required_successes();
        let remaining = cfg.rounds - self.rounds;
        let decided = remaining == 0 || cfg.stop_when_decided;
        if decided && self.successes >= k {
            self.state = DbState::Bound;
            let (nonce, m) = self.last.clone().expect("at least one success");
            return Ok(DbStep::Bind {
                outcome: RoundOutcome::Bound {
                    successes: self.successes,
                    rounds: self.rounds,
                },
                m,
                nonce,
            });
        }
        if decided && (self.successes + remaining < k || remaining == 0) {
            return Err(self.fail(BindingFailure::NotLocalRtm {
                successes: self.successes,
                rounds: self.rounds,
            }));
        }
        let mut next = [0u8; NONCE_BYTES];
        rng.fill_bytes(&mut next);
        self.state = DbState::Awaiting {
            nonce: next,
            t1: t2,
        };
        Ok(DbStep::Continue(RoundOutcome::Continue {
            nonce: next,
            successes: self.successes,
            rounds: self.rounds,
        }))
    }
}
