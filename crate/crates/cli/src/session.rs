//! One emulated card plus the platform around it: the RTM identity, the boot
//! chain, a virtual clock and the APDU transcript.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use simtpm_core::binding::runner::{run_distance_bounding, DbReport, VirtualClock};
use simtpm_core::binding::tee::TeeChannel;
use simtpm_core::binding::{BindingMode, TimingModel};
use simtpm_core::boot::{measured_boot_from, BootChain, LocalRtm, Measurement, RtmIdentity, Stage};
use simtpm_core::tpm::card::{Card, CardError, SecureTransport, Transport};
use simtpm_core::tpm::{composite_digest, PcrSelection, Tpm, TpmConfig};

use crate::config::{LoadedChain, DEFAULT_BOARD, DEFAULT_RTM};
use crate::error::CliError;

/// Response latency of the bundled RTM at power-on.
pub const LOCAL_RTM_LATENCY_US: u64 = 600;

pub type DynCard<'a> = Card<&'a mut dyn Transport>;

#[derive(Clone, Debug)]
pub struct Platform {
    pub identity: RtmIdentity,
    pub chain: BootChain,
}

impl Platform {
    /// The bundled board: a vendor-provisioned RTM and a four-stage chain.
    pub fn demo() -> Self {
        Self::labelled(DEFAULT_RTM, DEFAULT_BOARD.as_bytes())
    }

    pub fn labelled(label: &str, board_id: &[u8]) -> Self {
        let mut identity = RtmIdentity::vendor_provisioned(label);
        identity.board_id = board_id.to_vec();
        Platform {
            identity,
            chain: BootChain::demo(label, false),
        }
    }

    pub fn from_chain(loaded: &LoadedChain) -> Self {
        let mut identity = RtmIdentity::vendor_provisioned(&loaded.rtm);
        identity.board_id = loaded.board_id.clone();
        Platform {
            identity,
            chain: loaded.chain.clone(),
        }
    }
}

pub struct Session {
    pub tpm: Tpm,
    pub platform: Platform,
    pub clock: VirtualClock,
    pub rng: ChaCha20Rng,
    pub channel: Option<TeeChannel>,
    pub transcript: Vec<String>,
}

fn card_failure(e: CardError) -> CliError {
    CliError::failed(e)
}

impl Session {
    pub fn new(tpm: Tpm, platform: Platform, seed: u64) -> Self {
        Session {
            tpm,
            platform,
            clock: VirtualClock::default(),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x005e_ed0f_4057),
            channel: None,
            transcript: Vec::new(),
        }
    }

    /// Loads the card from `state`, or manufactures a new one if the file
    /// does not exist yet.
    pub fn open(
        state: &Path,
        seed: u64,
        platform: Platform,
        config: TpmConfig,
    ) -> Result<Self, CliError> {
        let tpm = if state.exists() {
            Tpm::load(state, config, seed)
                .map_err(|e| CliError::Usage(format!("{}: {e}", state.display())))?
        } else {
            Tpm::new(config, seed)
        };
        Ok(Self::new(tpm, platform, seed))
    }

    pub fn save(&self, state: &Path) -> Result<(), CliError> {
        crate::error::write_file(state, &self.tpm.to_persistent_bytes())
    }

    /// Runs `f` against the card's host interface.
    pub fn host<R>(
        &mut self,
        f: impl FnOnce(&mut DynCard<'_>) -> Result<R, CardError>,
    ) -> Result<R, CardError> {
        let mut card = Card::new(&mut self.tpm as &mut dyn Transport);
        let out = f(&mut card);
        self.transcript.extend(card.take_transcript());
        out
    }

    /// Runs `f` through the TEE channel when one is established, otherwise
    /// against the host interface.
    pub fn card<R>(
        &mut self,
        f: impl FnOnce(&mut DynCard<'_>) -> Result<R, CardError>,
    ) -> Result<R, CardError> {
        let Some(channel) = self.channel.as_mut() else {
            return self.host(f);
        };
        let mut outer = Card::new(&mut self.tpm as &mut dyn Transport);
        let out = {
            let mut secure = SecureTransport {
                card: &mut outer,
                channel,
            };
            let mut inner = Card::new(&mut secure as &mut dyn Transport);
            inner.set_recording(false);
            f(&mut inner)
        };
        self.transcript.extend(outer.take_transcript());
        out
    }

    /// Injects the next clock value, as the baseband does before a
    /// time-sensitive command.
    pub fn tick(&mut self) -> Result<(), CliError> {
        let now = self.clock.advance(1);
        self.host(|c| c.set_clock(now)).map_err(card_failure)
    }

    pub fn init(&mut self, mode: BindingMode) -> Result<(), CliError> {
        self.channel = None;
        self.clock = VirtualClock::default();
        self.host(|c| c.init(mode)).map_err(card_failure)
    }

    pub fn bind_db(&mut self, timing: &TimingModel) -> Result<DbReport, CliError> {
        let Session {
            tpm,
            platform,
            clock,
            rng,
            transcript,
            ..
        } = self;
        let mut card = Card::new(tpm as &mut dyn Transport);
        let mut rtm = LocalRtm::new(&platform.identity, &platform.chain);
        let report = run_distance_bounding(
            &mut card,
            &mut rtm,
            &platform.identity.cert,
            timing,
            clock,
            rng,
        );
        transcript.extend(card.take_transcript());
        report.map_err(CliError::failed)
    }

    /// Opens the TEE channel with the platform's RTM key.
    pub fn bind_tee(&mut self) -> Result<(), CliError> {
        let mut channel = self.platform.identity.tee_channel();
        let mut rng = self.rng.clone();
        self.host(|c| c.tee_establish(&mut channel, &mut rng))
            .map_err(card_failure)?;
        self.rng = rng;
        self.channel = Some(channel);
        Ok(())
    }

    /// Extends the measurements of the stages from `first` on, plus the
    /// board identity.
    pub fn measure(&mut self, first: Stage) -> Vec<Measurement> {
        let chain = self.platform.chain.clone();
        let board = self.platform.identity.board_id.clone();
        self.card(|c| Ok(measured_boot_from(&chain, first, Some(&board), c)))
            .expect("measurement failures are reported per stage")
    }

    /// Composite digest of `selection`, read back from the card.
    pub fn composite(&mut self, selection: PcrSelection) -> Result<[u8; 32], CliError> {
        let values = self
            .host(|c| {
                selection
                    .indices()
                    .map(|i| c.read(i as u8))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map_err(card_failure)?;
        Ok(composite_digest(&values))
    }

    /// Power-on sequence: initialize in distance-bounding mode, bind to the
    /// platform RTM (which extends BL2), then measure the later stages.
    pub fn power_on(&mut self) -> Result<Vec<Measurement>, CliError> {
        self.init(BindingMode::DistanceBounding)?;
        let report = self.bind_db(&TimingModel::constant(LOCAL_RTM_LATENCY_US))?;
        if !report.bound {
            return Err(CliError::Failed(format!(
                "binding to the local RTM failed: {report:?}"
            )));
        }
        Ok(self.measure(Stage::Bl31))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use simtpm_core::tpm::extend_value;

    #[test]
    fn power_on_binds_and_measures() {
        let mut s = Session::new(Tpm::new(TpmConfig::default(), 1), Platform::demo(), 1);
        let ms = s.power_on().unwrap();
        assert!(ms.iter().all(|m| m.recorded));
        let chain = &s.platform.chain;
        let pcr1 = [Stage::Bl2, Stage::Bl31, Stage::Bl33]
            .iter()
            .fold([0; 32], |acc, st| {
                extend_value(&acc, &chain.image(*st).unwrap().digest())
            });
        assert_eq!(s.host(|c| c.read(1)).unwrap(), pcr1);
        assert!(!s.transcript.is_empty());
    }

    #[test]
    fn tee_session_routes_through_channel() {
        let mut s = Session::new(Tpm::new(TpmConfig::default(), 2), Platform::demo(), 2);
        s.init(BindingMode::TeeProxy).unwrap();
        assert!(s.card(|c| c.extend(3, &[1; 32])).is_err());
        s.bind_tee().unwrap();
        assert!(s.card(|c| c.extend(3, &[1; 32])).is_ok());
        assert!(s.host(|c| c.extend(3, &[1; 32])).is_err());
    }
}
