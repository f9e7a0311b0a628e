//! Host-side driver for the distance-bounding protocol on a virtual clock.

use rand::RngCore;
use thiserror::Error;

use super::{BindingFailure, RoundOutcome, TimingModel, NONCE_BYTES};
use crate::cert::Certificate;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum PortError {
    #[error("{0}")]
    Binding(BindingFailure),
    #[error("card refused: {0}")]
    Refused(String),
}

/// The card-side operations the protocol needs. Implemented by the TPM
/// directly and by the APDU transport.
pub trait BindingPort {
    fn inject_clock(&mut self, now_us: u64) -> Result<(), PortError>;
    fn init_extend(&mut self, cert: &Certificate) -> Result<[u8; NONCE_BYTES], PortError>;
    fn pcr_sig_extend(&mut self, m: &[u8], m_bl2: [u8; 32]) -> Result<RoundOutcome, PortError>;
}

/// The RTM side of the exchange. `None` models a broken channel.
pub trait RtmChannel {
    fn respond(&mut self, nonce: &[u8; NONCE_BYTES]) -> Option<(Vec<u8>, [u8; 32])>;
}

/// Deterministic microsecond clock advanced by the channel model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VirtualClock {
    pub now_us: u64,
}

impl VirtualClock {
    pub fn starting_at(now_us: u64) -> Self {
        VirtualClock { now_us }
    }

    pub fn advance(&mut self, us: u64) -> u64 {
        self.now_us += us;
        self.now_us
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DbReport {
    pub bound: bool,
    pub successes: u32,
    pub rounds: u32,
    pub failure: Option<BindingFailure>,
    /// Set when the RTM channel broke before the card reached a decision.
    pub channel_broken: bool,
}

impl DbReport {
    fn rejected(successes: u32, rounds: u32, failure: Option<BindingFailure>) -> Self {
        DbReport {
            bound: false,
            successes,
            rounds,
            failure,
            channel_broken: false,
        }
    }
}

/// Runs rounds until the card binds or rejects.
///
/// Each response reaches the card after a latency drawn from `timing`
/// (including any relay delay); the card stamps arrival with the injected
/// virtual time.
pub fn run_distance_bounding<P, C, R>(
    port: &mut P,
    rtm: &mut C,
    cert: &Certificate,
    timing: &TimingModel,
    clock: &mut VirtualClock,
    rng: &mut R,
) -> Result<DbReport, PortError>
where
    P: BindingPort + ?Sized,
    C: RtmChannel + ?Sized,
    R: RngCore,
{
    port.inject_clock(clock.advance(1))?;
    let mut nonce = match port.init_extend(cert) {
        Ok(n) => n,
        Err(PortError::Binding(f)) => return Ok(DbReport::rejected(0, 0, Some(f))),
        Err(e) => return Err(e),
    };
    let (mut successes, mut rounds) = (0, 0);
    loop {
        let Some((m, m_bl2)) = rtm.respond(&nonce) else {
            return Ok(DbReport {
                channel_broken: true,
                ..DbReport::rejected(successes, rounds, None)
            });
        };
        port.inject_clock(clock.advance(timing.draw(rng)))?;
        match port.pcr_sig_extend(&m, m_bl2) {
            Ok(RoundOutcome::Continue {
                nonce: next,
                successes: s,
                rounds: r,
            }) => {
                nonce = next;
                successes = s;
                rounds = r;
            }
            Ok(RoundOutcome::Bound {
                successes: s,
                rounds: r,
            }) => {
                return Ok(DbReport {
                    bound: true,
                    successes: s,
                    rounds: r,
                    failure: None,
                    channel_broken: false,
                })
            }
            Err(PortError::Binding(f)) => {
                let (s, r) = match f {
                    BindingFailure::NotLocalRtm { successes, rounds } => (successes, rounds),
                    _ => (successes, rounds + 1),
                };
                return Ok(DbReport::rejected(s, r, Some(f)));
            }
            Err(e) => return Err(e),
        }
    }
}
