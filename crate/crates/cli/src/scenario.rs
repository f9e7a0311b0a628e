//! Scripted runs against one or more emulated cards.
//!
//! ```toml
//! seed = 7
//! devices = ["phone"]
//!
//! [[step]]
//! action = "boot"
//! device = "phone"
//! mode = "both"
//!
//! [[step]]
//! action = "bind"
//! device = "phone"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use simtpm_core::binding::{BindingMode, TimingModel};
use simtpm_core::boot::{secure_boot, Stage};
use simtpm_core::cert::derive_signing_key;
use simtpm_core::daa::{daa_setup, issue, DaaPublicParams, IssuerSecret};
use simtpm_core::tpm::{
    verify_quote, KeyTemplate, PcrSelection, Policy, PolicyApproval, Quote, SealedBlob, Tpm,
    TpmConfig, SRK_HANDLE,
};

use crate::config::{load_chain, tamper};
use crate::error::CliError;
use crate::session::{Platform, Session, LOCAL_RTM_LATENCY_US};

/// Group security parameter used when the scenario does not set one.
pub const DEFAULT_LAMBDA: u32 = 128;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    pub devices: Vec<String>,
    pub lambda: Option<u32>,
    #[serde(rename = "step", default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub action: Action,
    /// The step must fail for the scenario to continue.
    #[serde(default)]
    pub expect_failure: bool,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BootMode {
    Secure,
    Measured,
    #[default]
    Both,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BindMode {
    #[default]
    Db,
    Tee,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    TamperStage,
    CorruptBlob,
}

fn default_latency() -> u64 {
    LOCAL_RTM_LATENCY_US
}

#[derive(Debug, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    Boot {
        device: String,
        #[serde(default)]
        mode: BootMode,
        /// Chain description file; the device's bundled chain otherwise.
        chain: Option<PathBuf>,
    },
    Bind {
        device: String,
        #[serde(default)]
        mode: BindMode,
        #[serde(default = "default_latency")]
        latency_us: u64,
        #[serde(default)]
        relay_delay_us: u64,
    },
    Join {
        device: String,
    },
    Quote {
        device: String,
        pcrs: Vec<usize>,
        nonce: String,
        bsn: Option<String>,
    },
    Verify {
        device: String,
    },
    Extend {
        device: String,
        pcr: usize,
        data: String,
    },
    Seal {
        device: String,
        name: String,
        data: String,
        #[serde(default)]
        pcrs: Vec<usize>,
        /// Key id of an authority approving PCR states.
        authority: Option<String>,
        /// Name of a key created earlier; the SRK otherwise.
        parent: Option<String>,
    },
    Unseal {
        device: String,
        name: String,
        /// Key id of the authority that approves the device's current state.
        approve: Option<String>,
        expect: Option<String>,
    },
    CreateKey {
        device: String,
        name: String,
        #[serde(default)]
        duplicable: bool,
    },
    Duplicate {
        from: String,
        to: String,
        key: String,
    },
    PowerCycle {
        device: String,
    },
    InjectFault {
        device: String,
        fault: Fault,
        stage: Option<String>,
        blob: Option<String>,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Boot { .. } => "boot",
            Action::Bind { .. } => "bind",
            Action::Join { .. } => "join",
            Action::Quote { .. } => "quote",
            Action::Verify { .. } => "verify",
            Action::Extend { .. } => "extend",
            Action::Seal { .. } => "seal",
            Action::Unseal { .. } => "unseal",
            Action::CreateKey { .. } => "create-key",
            Action::Duplicate { .. } => "duplicate",
            Action::PowerCycle { .. } => "power-cycle",
            Action::InjectFault { .. } => "inject-fault",
        }
    }

    fn devices(&self) -> Vec<&str> {
        match self {
            Action::Duplicate { from, to, .. } => vec![from, to],
            Action::Boot { device, .. }
            | Action::Bind { device, .. }
            | Action::Join { device }
            | Action::Quote { device, .. }
            | Action::Verify { device }
            | Action::Extend { device, .. }
            | Action::Seal { device, .. }
            | Action::Unseal { device, .. }
            | Action::CreateKey { device, .. }
            | Action::PowerCycle { device }
            | Action::InjectFault { device, .. } => vec![device],
        }
    }
}

struct Instance {
    session: Session,
    bound: bool,
    measure_pending: bool,
    keys: BTreeMap<String, u32>,
    last_quote: Option<(Quote, Vec<u8>, Option<Vec<u8>>)>,
}

/// Result of a run: the transcript so far and the first failing step.
#[derive(Debug)]
pub struct Outcome {
    pub transcript: Vec<String>,
    pub error: Option<CliError>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        self.error.as_ref().map_or(0, CliError::exit_code)
    }
}

pub fn parse(text: &str) -> Result<ScenarioFile, CliError> {
    let file: ScenarioFile = toml::from_str(text).map_err(CliError::usage)?;
    if file.devices.is_empty() {
        return Err(CliError::usage("a scenario declares at least one device"));
    }
    for (i, step) in file.steps.iter().enumerate() {
        for d in step.action.devices() {
            if !file.devices.iter().any(|x| x == d) {
                return Err(CliError::Usage(format!(
                    "step {}: undeclared device {d:?}",
                    i + 1
                )));
            }
        }
    }
    Ok(file)
}

pub fn run_file(path: &Path) -> Outcome {
    match crate::error::read_text(path) {
        Ok(text) => run(&text, path.parent().unwrap_or(Path::new("."))),
        Err(e) => Outcome {
            transcript: Vec::new(),
            error: Some(e),
        },
    }
}

pub fn run(text: &str, base: &Path) -> Outcome {
    match parse(text) {
        Ok(file) => Runner::new(&file, base).execute(&file),
        Err(e) => Outcome {
            transcript: Vec::new(),
            error: Some(e),
        },
    }
}

struct Runner {
    base: PathBuf,
    lambda: u32,
    rng: ChaCha20Rng,
    devices: BTreeMap<String, Instance>,
    issuer: Option<(DaaPublicParams, IssuerSecret)>,
    blobs: BTreeMap<String, SealedBlob>,
    log: Vec<String>,
}

fn digest_of(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

fn selection(pcrs: &[usize]) -> Result<PcrSelection, CliError> {
    PcrSelection::from_indices(pcrs).map_err(CliError::usage)
}

impl Runner {
    fn new(file: &ScenarioFile, base: &Path) -> Self {
        let devices = file
            .devices
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let seed = file.seed.wrapping_mul(1000).wrapping_add(i as u64);
                let platform = Platform::labelled(name, name.as_bytes());
                let session = Session::new(Tpm::new(TpmConfig::default(), seed), platform, seed);
                let inst = Instance {
                    session,
                    bound: false,
                    measure_pending: false,
                    keys: BTreeMap::new(),
                    last_quote: None,
                };
                (name.clone(), inst)
            })
            .collect();
        Runner {
            base: base.to_path_buf(),
            lambda: file.lambda.unwrap_or(DEFAULT_LAMBDA),
            rng: ChaCha20Rng::seed_from_u64(file.seed),
            devices,
            issuer: None,
            blobs: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    fn execute(mut self, file: &ScenarioFile) -> Outcome {
        for (i, step) in file.steps.iter().enumerate() {
            let index = i + 1;
            self.log
                .push(format!("# step {index}: {}", step.action.name()));
            let result = self.step(&step.action);
            for d in step.action.devices() {
                let inst = self.devices.get_mut(d).expect("validated");
                for line in inst.session.transcript.drain(..) {
                    self.log.push(format!("{d} {line}"));
                }
            }
            let failure = match (result, step.expect_failure) {
                (Ok(()), false) => None,
                (Err(e), true) => {
                    self.log.push(format!("  failed as expected: {e}"));
                    None
                }
                (Ok(()), true) => Some("step succeeded but was expected to fail".to_string()),
                (Err(e), false) => Some(e.to_string()),
            };
            if let Some(reason) = failure {
                self.log.push(format!("  FAILED: {reason}"));
                return Outcome {
                    transcript: self.log,
                    error: Some(CliError::Step {
                        index,
                        action: step.action.name().into(),
                        reason,
                    }),
                };
            }
        }
        self.log.push("# scenario complete".into());
        Outcome {
            transcript: self.log,
            error: None,
        }
    }

    fn device(&mut self, name: &str) -> &mut Instance {
        self.devices.get_mut(name).expect("validated")
    }

    fn issuer(&mut self) -> Result<(DaaPublicParams, IssuerSecret), CliError> {
        if self.issuer.is_none() {
            let setup = daa_setup(self.lambda, &mut self.rng).map_err(CliError::failed)?;
            self.log
                .push(format!("  issuer set up (lambda {})", self.lambda));
            self.issuer = Some(setup);
        }
        let (crs, isk) = self.issuer.as_ref().expect("just set");
        Ok((crs.clone(), IssuerSecret::from_scalar(*isk.scalar())))
    }

    fn step(&mut self, action: &Action) -> Result<(), CliError> {
        match action {
            Action::Boot {
                device,
                mode,
                chain,
            } => {
                let loaded = match chain {
                    Some(p) => Some(load_chain(&self.base.join(p))?),
                    None => None,
                };
                let inst = self.device(device);
                if let Some(l) = loaded {
                    inst.session.platform = Platform::from_chain(&l);
                }
                let mut notes = Vec::new();
                if *mode != BootMode::Measured {
                    let r = secure_boot(&inst.session.platform.chain);
                    let ran: Vec<String> = r.executed.iter().map(Stage::to_string).collect();
                    notes.push(format!("  secure boot executed [{}]", ran.join(", ")));
                    if let Some(stage) = r.failed_at {
                        self.log.extend(notes);
                        return Err(CliError::Failed(format!("secure boot aborted at {stage}")));
                    }
                }
                if *mode != BootMode::Secure {
                    if inst.bound {
                        let ms = inst.session.measure(Stage::Bl31);
                        if let Some(m) = ms.iter().find(|m| !m.recorded) {
                            return Err(CliError::Failed(format!(
                                "measurement {:?} not recorded",
                                m.subject
                            )));
                        }
                        notes.push(format!("  measured {} components", ms.len()));
                    } else {
                        inst.measure_pending = true;
                        notes.push("  measurements deferred until binding".into());
                    }
                }
                self.log.extend(notes);
                Ok(())
            }
            Action::Bind {
                device,
                mode,
                latency_us,
                relay_delay_us,
            } => {
                let inst = self.device(device);
                let note = match mode {
                    BindMode::Db => {
                        inst.session.init(BindingMode::DistanceBounding)?;
                        let timing = TimingModel::constant(*latency_us).with_relay(*relay_delay_us);
                        let report = inst.session.bind_db(&timing)?;
                        let note = format!(
                            "  distance bounding: {}/{} rounds in time, {}",
                            report.successes,
                            report.rounds,
                            if report.bound { "bound" } else { "rejected" }
                        );
                        if !report.bound {
                            self.log.push(note);
                            return Err(CliError::Failed(match report.failure {
                                Some(f) => f.to_string(),
                                None => "RTM channel broke".into(),
                            }));
                        }
                        note
                    }
                    BindMode::Tee => {
                        inst.session.init(BindingMode::TeeProxy)?;
                        inst.session.bind_tee()?;
                        "  TEE channel established".into()
                    }
                };
                inst.bound = true;
                let mut notes = vec![note];
                if std::mem::take(&mut inst.measure_pending) {
                    let ms = inst.session.measure(Stage::Bl31);
                    notes.push(format!("  measured {} components", ms.len()));
                }
                self.log.extend(notes);
                Ok(())
            }
            Action::Join { device } => {
                let (crs, isk) = self.issuer()?;
                let req = self
                    .device(device)
                    .session
                    .card(|c| c.join_init(&crs))
                    .map_err(CliError::failed)?;
                let resp = issue(&crs, &isk, &req, &mut self.rng).map_err(CliError::failed)?;
                self.device(device)
                    .session
                    .card(|c| c.join_finish(&req, &resp))
                    .map_err(CliError::failed)?;
                self.log.push("  credential installed".into());
                Ok(())
            }
            Action::Quote {
                device,
                pcrs,
                nonce,
                bsn,
            } => {
                let sel = selection(pcrs)?;
                let inst = self.device(device);
                inst.session.tick()?;
                let bsn = bsn.as_ref().map(|b| b.as_bytes().to_vec());
                let quote = inst
                    .session
                    .card(|c| c.quote(sel, nonce.as_bytes(), bsn.as_deref()))
                    .map_err(CliError::failed)?;
                inst.last_quote = Some((quote, nonce.as_bytes().to_vec(), bsn));
                Ok(())
            }
            Action::Verify { device } => {
                let crs = match &self.issuer {
                    Some((crs, _)) => crs.clone(),
                    None => return Err(CliError::failed("no issuer: run a join first")),
                };
                let inst = self.device(device);
                let (quote, nonce, bsn) = inst
                    .last_quote
                    .as_ref()
                    .ok_or_else(|| CliError::failed("no quote to verify"))?;
                if !verify_quote(&crs, bsn.as_deref(), quote, nonce) {
                    return Err(CliError::failed("quote signature rejected"));
                }
                let values: Vec<String> = quote
                    .selection
                    .indices()
                    .zip(&quote.pcr_values)
                    .map(|(i, v)| format!("  PCR[{i}] = {}", hex::encode(v)))
                    .collect();
                self.log.push("  quote verified".into());
                self.log.extend(values);
                Ok(())
            }
            Action::Extend { device, pcr, data } => {
                let index = u8::try_from(*pcr).map_err(CliError::usage)?;
                let d = digest_of(data);
                let v = self
                    .device(device)
                    .session
                    .card(|c| c.extend(index, &d))
                    .map_err(CliError::failed)?;
                self.log.push(format!("  PCR[{pcr}] = {}", hex::encode(v)));
                Ok(())
            }
            Action::Seal {
                device,
                name,
                data,
                pcrs,
                authority,
                parent,
            } => {
                let sel = selection(pcrs)?;
                let inst = self.device(device);
                let parent = match parent {
                    Some(k) => *inst
                        .keys
                        .get(k)
                        .ok_or_else(|| CliError::Usage(format!("unknown key {k:?}")))?,
                    None => SRK_HANDLE,
                };
                let policy = match (authority, pcrs.is_empty()) {
                    (Some(id), _) => {
                        Policy::authorized(derive_signing_key(id.as_bytes()).verifying_key(), sel)
                    }
                    (None, true) => Policy::None,
                    (None, false) => Policy::PcrBound {
                        selection: sel,
                        digest: inst.session.composite(sel)?,
                    },
                };
                let blob = inst
                    .session
                    .card(|c| c.seal(parent, &policy, data.as_bytes()))
                    .map_err(CliError::failed)?;
                self.blobs.insert(name.clone(), blob);
                Ok(())
            }
            Action::Unseal {
                device,
                name,
                approve,
                expect,
            } => {
                let blob = self
                    .blobs
                    .get(name)
                    .cloned()
                    .ok_or_else(|| CliError::Usage(format!("unknown blob {name:?}")))?;
                let inst = self.device(device);
                let approvals = match (approve, &blob.policy) {
                    (Some(id), Policy::Authorized { selection, .. }) => {
                        let digest = inst.session.composite(*selection)?;
                        vec![PolicyApproval::sign(
                            &derive_signing_key(id.as_bytes()),
                            *selection,
                            digest,
                        )]
                    }
                    (Some(_), _) => return Err(CliError::usage("blob has no authorized policy")),
                    (None, _) => Vec::new(),
                };
                let data = inst
                    .session
                    .card(|c| c.unseal(&blob, &approvals))
                    .map_err(CliError::failed)?;
                self.log
                    .push(format!("  unsealed {:?}", String::from_utf8_lossy(&data)));
                match expect {
                    Some(e) if e.as_bytes() != data => {
                        Err(CliError::Failed(format!("expected {e:?}")))
                    }
                    _ => Ok(()),
                }
            }
            Action::CreateKey {
                device,
                name,
                duplicable,
            } => {
                let inst = self.device(device);
                let (handle, _) = inst
                    .session
                    .card(|c| c.create_key(KeyTemplate::ecc(*duplicable, false)))
                    .map_err(CliError::failed)?;
                inst.keys.insert(name.clone(), handle);
                self.log
                    .push(format!("  key {name} = handle {handle:#010x}"));
                Ok(())
            }
            Action::Duplicate { from, to, key } => {
                let target = self
                    .device(to)
                    .session
                    .card(|c| c.srk_public())
                    .map_err(CliError::failed)?;
                let src = self.device(from);
                let handle = *src
                    .keys
                    .get(key)
                    .ok_or_else(|| CliError::Usage(format!("unknown key {key:?}")))?;
                let blob = src
                    .session
                    .card(|c| c.duplicate_key(handle, &target))
                    .map_err(CliError::failed)?;
                let dst = self.device(to);
                let imported = dst
                    .session
                    .card(|c| c.import_key(&blob))
                    .map_err(CliError::failed)?;
                dst.keys.insert(key.clone(), imported);
                self.log
                    .push(format!("  key {key} imported as handle {imported:#010x}"));
                Ok(())
            }
            Action::PowerCycle { device } => {
                let inst = self.device(device);
                inst.session.tpm.power_cycle();
                inst.session.channel = None;
                inst.bound = false;
                inst.measure_pending = false;
                self.log.push("  power cycled".into());
                Ok(())
            }
            Action::InjectFault {
                device,
                fault,
                stage,
                blob,
            } => match fault {
                Fault::TamperStage => {
                    let stage: Stage = stage
                        .as_deref()
                        .ok_or_else(|| CliError::usage("tamper-stage needs a stage"))?
                        .parse()
                        .map_err(CliError::usage)?;
                    let image = self
                        .device(device)
                        .session
                        .platform
                        .chain
                        .image_mut(stage)
                        .ok_or_else(|| CliError::Usage(format!("chain has no {stage}")))?;
                    tamper(&mut image.payload);
                    self.log.push(format!("  {stage} image tampered"));
                    Ok(())
                }
                Fault::CorruptBlob => {
                    let name = blob
                        .as_deref()
                        .ok_or_else(|| CliError::usage("corrupt-blob needs a blob"))?;
                    let b = self
                        .blobs
                        .get_mut(name)
                        .ok_or_else(|| CliError::Usage(format!("unknown blob {name:?}")))?;
                    tamper(&mut b.sealed.ciphertext);
                    self.log.push(format!("  blob {name} corrupted"));
                    Ok(())
                }
            },
        }
    }
}
