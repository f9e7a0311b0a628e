//! Argument definitions and command implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::PublicKey;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use simtpm_core::binding::stats::{
    attacker_success, binom_tail, empirical_cdf, min_relay_bandwidth, synthetic_samples,
};
use simtpm_core::binding::{BindingMode, DistanceBoundingConfig, TimingKind, TimingModel};
use simtpm_core::boot::{secure_boot, Stage, Subject};
use simtpm_core::cert::{derive_signing_key, CertAuthority};
use simtpm_core::codec::{Reader, Writer};
use simtpm_core::daa::{daa_setup, issue, DaaPublicParams, IssuerSecret};
use simtpm_core::groups::{scalar_from_bytes, scalar_to_bytes};
use simtpm_core::tpm::{
    verify_quote, KeyTemplate, PcrSelection, Policy, PolicyApproval, Quote, SealedBlob, TpmConfig,
    PCR_COUNT,
};

use crate::bench::{bench, COMMANDS, DEFAULT_ITERATIONS};
use crate::config::{load_chain, parse_bind_config, parse_bytes, parse_digest, parse_samples};
use crate::error::{read_file, read_text, write_file, CliError};
use crate::scenario::{self, DEFAULT_LAMBDA};
use crate::session::{Platform, Session};

#[derive(Debug, Parser)]
#[command(
    name = "simtpm",
    version,
    about = "Emulated SIM-card TPM bound to a device's root of trust"
)]
pub struct Cli {
    /// Card persistence file; created on first use.
    #[arg(long, global = true, default_value = "simtpm.state")]
    pub state: PathBuf,
    /// Seed for every random choice made by the card and the host.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Read and write binary files as hex text.
    #[arg(long, global = true)]
    pub hex: bool,
    /// Print the APDU transcript to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize the card and print its endorsement certificate and SRK.
    Init {
        #[arg(long, value_enum, default_value = "db")]
        mode: ModeArg,
    },
    /// Extend a PCR after power-on.
    Extend {
        #[arg(long)]
        pcr: u8,
        /// 32-byte digest in hex.
        #[arg(long, required_unless_present = "data", conflicts_with = "data")]
        digest: Option<String>,
        /// Text whose SHA-256 is extended.
        #[arg(long)]
        data: Option<String>,
    },
    /// Print PCR values after power-on.
    Read {
        #[arg(long)]
        pcr: Option<u8>,
    },
    /// Seal a file to the card.
    Seal {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// PCRs the blob is bound to, e.g. `0,1`.
        #[arg(long, value_delimiter = ',')]
        pcrs: Vec<usize>,
        /// File holding the key id of an approving authority.
        #[arg(long)]
        authority: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        parent: u32,
    },
    /// Recover sealed data.
    Unseal {
        #[arg(long = "in")]
        input: PathBuf,
        /// Approval files produced by `approve`.
        #[arg(long)]
        approval: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign, as the authority, the card's current state for a blob's policy.
    Approve {
        #[arg(long)]
        authority: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create, export, duplicate and import keys
    #[command(subcommand)]
    Key(KeyCommand),
    /// Anonymous attestation over selected PCRs.
    Quote {
        #[arg(long, value_delimiter = ',')]
        pcrs: Vec<usize>,
        /// Verifier nonce in hex.
        #[arg(long)]
        nonce: String,
        #[arg(long)]
        bsn: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Issuer setup, join, anonymous signing and verification
    #[command(subcommand)]
    Daa(DaaCommand),
    /// Run a boot chain through secure and measured boot
    #[command(subcommand)]
    Boot(BootCommand),
    /// Bind the card to the RTM by distance bounding or a TEE channel
    #[command(subcommand)]
    Bind(BindCommand),
    /// Binding statistics: binomial tail, timing CDF, relay bandwidth
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Time the emulator's command set.
    Bench {
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iterations: usize,
        /// Restrict to these commands.
        #[arg(long = "command", value_parser = clap::builder::PossibleValuesParser::new(COMMANDS))]
        commands: Vec<String>,
    },
    /// Run a scenario file and print its transcript.
    Scenario {
        file: PathBuf,
        /// Also write the transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Db,
    Tee,
}

#[derive(Debug, Subcommand)]
pub enum KeyCommand {
    /// Create an ECC key under the SRK.
    Create {
        #[arg(long)]
        duplicable: bool,
        #[arg(long)]
        attestation: bool,
    },
    /// Export a public key; handle 0 is the SRK.
    Public {
        #[arg(long, default_value_t = 0)]
        handle: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wrap a duplicable key for another card's SRK.
    Duplicate {
        #[arg(long)]
        handle: u32,
        /// The target card's SRK public key.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load a duplicated key.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DaaCommand {
    /// Create issuer parameters.
    Setup {
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: u32,
        /// Issuer file (public parameters and secret key).
        #[arg(long)]
        issuer: PathBuf,
        /// Public parameters for verifiers.
        #[arg(long)]
        params: PathBuf,
    },
    /// Obtain a credential from the issuer.
    Join {
        #[arg(long)]
        issuer: PathBuf,
    },
    /// Sign a message with the card's credential.
    Sign {
        #[arg(long)]
        message: String,
        #[arg(long)]
        bsn: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a signature or quote.
    Verify {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        signature: PathBuf,
        /// Message given to `daa sign`.
        #[arg(long, required_unless_present = "nonce", conflicts_with = "nonce")]
        message: Option<String>,
        /// Nonce given to `quote`, in hex.
        #[arg(long)]
        nonce: Option<String>,
        #[arg(long)]
        bsn: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BootCommand {
    /// Boot a chain.
    Run {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: BootModeArg,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BootModeArg {
    Secure,
    Measured,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum BindCommand {
    /// Distance-bounding binding against a measured latency distribution.
    Db {
        /// Protocol parameters (TOML: threshold_us, delta_us, rounds, fraction, stop_when_decided).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Response times in µs, one per line.
        #[arg(long)]
        timing: Option<PathBuf>,
        /// Extra delay added by a relay, in µs.
        #[arg(long, default_value_t = 0)]
        relay_delay: u64,
    },
    /// TEE-proxy binding with the device key named in a file.
    Tee {
        #[arg(long)]
        device_key: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Probability of at least k successes in n rounds.
    Binom {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        k: u32,
        #[arg(long)]
        p: f64,
    },
    /// Fraction of samples at or below a threshold.
    Cdf {
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long, default_value_t = 721.0)]
        t: f64,
    },
    /// Bandwidth needed to relay `bits` within the timing slack.
    Bandwidth {
        #[arg(long)]
        bits: f64,
        #[arg(long)]
        slack_us: f64,
    },
    /// Binding probability for a relay adding a fixed delay.
    Attacker {
        /// One-way delay added by the relay, in µs.
        #[arg(long)]
        relay_delay: f64,
        /// Response times in µs, one per line; the synthetic set when omitted.
        #[arg(long)]
        timing: Option<PathBuf>,
        /// Protocol parameters, as for `bind db`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Io<'a> {
    out: &'a mut dyn Write,
    hex: bool,
}

impl Io<'_> {
    fn say(&mut self, line: impl std::fmt::Display) -> Result<(), CliError> {
        writeln!(self.out, "{line}").map_err(CliError::failed)
    }

    fn emit(&mut self, label: &str, out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
        match out {
            None => self.say(format!("{label}: {}", hex::encode(bytes))),
            Some(p) if self.hex => write_file(p, format!("{}\n", hex::encode(bytes)).as_bytes()),
            Some(p) => write_file(p, bytes),
        }
    }

    fn load(&self, path: &Path) -> Result<Vec<u8>, CliError> {
        if self.hex {
            parse_bytes(&read_text(path)?)
        } else {
            read_file(path)
        }
    }
}

fn key_id(path: &Path) -> Result<String, CliError> {
    let id = read_text(path)?.trim().to_string();
    if id.is_empty() {
        return Err(CliError::Usage(format!("{}: empty key id", path.display())));
    }
    Ok(id)
}

fn sec1(key: &PublicKey) -> Vec<u8> {
    key.to_encoded_point(false).as_bytes().to_vec()
}

fn failed<E: std::fmt::Display>(e: E) -> CliError {
    CliError::failed(e)
}

fn samples_or_bundled(path: Option<&Path>) -> Result<Vec<u64>, CliError> {
    match path {
        Some(p) => parse_samples(&read_text(p)?),
        None => Ok(synthetic_samples()),
    }
}

fn bind_config(path: Option<&Path>) -> Result<DistanceBoundingConfig, CliError> {
    match path {
        Some(p) => parse_bind_config(&read_text(p)?),
        None => Ok(DistanceBoundingConfig::default()),
    }
}

fn encode_issuer(crs: &DaaPublicParams, isk: &IssuerSecret) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&crs.to_bytes())
        .bytes(&scalar_to_bytes(isk.scalar()));
    w.finish()
}

fn decode_issuer(bytes: &[u8]) -> Result<(DaaPublicParams, IssuerSecret), CliError> {
    let mut r = Reader::new(bytes);
    let crs = DaaPublicParams::from_bytes(r.bytes("parameters").map_err(CliError::usage)?)
        .map_err(CliError::usage)?;
    let isk = scalar_from_bytes(r.bytes("issuer key").map_err(CliError::usage)?)
        .map_err(CliError::usage)?;
    r.finish().map_err(CliError::usage)?;
    Ok((crs, IssuerSecret::from_scalar(isk)))
}

struct Ctx<'a> {
    state: PathBuf,
    seed: u64,
    verbose: bool,
    io: Io<'a>,
}

impl Ctx<'_> {
    fn open(&self, platform: Platform, config: TpmConfig) -> Result<Session, CliError> {
        Session::open(&self.state, self.seed, platform, config)
    }

    /// Loads the card and runs the power-on binding with the bundled RTM.
    fn powered(&mut self) -> Result<Session, CliError> {
        let mut s = self.open(Platform::demo(), TpmConfig::default())?;
        s.power_on()?;
        Ok(s)
    }

    fn close(&mut self, session: Session) -> Result<(), CliError> {
        self.flush(&session);
        session.save(&self.state)
    }

    fn flush(&self, session: &Session) {
        if self.verbose {
            for line in &session.transcript {
                eprintln!("{line}");
            }
        }
    }
}

/// Executes a parsed command line, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut ctx = Ctx {
        state: cli.state,
        seed: cli.seed,
        verbose: cli.verbose,
        io: Io { out, hex: cli.hex },
    };
    match cli.command {
        Command::Init { mode } => {
            let mut s = ctx.open(Platform::demo(), TpmConfig::default())?;
            let mode = match mode {
                ModeArg::Db => BindingMode::DistanceBounding,
                ModeArg::Tee => BindingMode::TeeProxy,
            };
            s.init(mode)?;
            let ek = s.host(|c| c.ek_certificate()).map_err(failed)?;
            let srk = s.host(|c| c.srk_public()).map_err(failed)?;
            ctx.io.say(format!(
                "EK certificate: subject {:?}, issuer {:?}",
                ek.subject, ek.issuer
            ))?;
            ctx.io
                .say(format!("EK public: {}", hex::encode(ek.public_key)))?;
            ctx.io
                .say(format!("SRK public: {}", hex::encode(sec1(&srk))))?;
            ctx.close(s)
        }
        Command::Extend { pcr, digest, data } => {
            let d = match (digest, data) {
                (Some(h), _) => parse_digest(&h)?,
                (None, Some(t)) => Sha256::digest(t.as_bytes()).into(),
                (None, None) => return Err(CliError::usage("need --digest or --data")),
            };
            let mut s = ctx.powered()?;
            let v = s.card(|c| c.extend(pcr, &d)).map_err(failed)?;
            ctx.io.say(format!("PCR[{pcr}] = {}", hex::encode(v)))?;
            ctx.close(s)
        }
        Command::Read { pcr } => {
            let mut s = ctx.powered()?;
            let indices: Vec<u8> = match pcr {
                Some(p) => vec![p],
                None => (0..PCR_COUNT as u8).collect(),
            };
            for i in indices {
                let v = s.card(|c| c.read(i)).map_err(failed)?;
                ctx.io.say(format!("PCR[{i:2}] = {}", hex::encode(v)))?;
            }
            ctx.close(s)
        }
        Command::Seal {
            input,
            out,
            pcrs,
            authority,
            parent,
        } => {
            let data = read_file(&input)?;
            let sel = PcrSelection::from_indices(&pcrs).map_err(CliError::usage)?;
            let mut s = ctx.powered()?;
            let policy = match (authority, pcrs.is_empty()) {
                (Some(path), _) => Policy::authorized(
                    derive_signing_key(key_id(&path)?.as_bytes()).verifying_key(),
                    sel,
                ),
                (None, true) => Policy::None,
                (None, false) => Policy::PcrBound {
                    selection: sel,
                    digest: s.composite(sel)?,
                },
            };
            let blob = s.card(|c| c.seal(parent, &policy, &data)).map_err(failed)?;
            ctx.io.emit("blob", out.as_deref(), &blob.to_bytes())?;
            ctx.close(s)
        }
        Command::Unseal {
            input,
            approval,
            out,
        } => {
            let blob = SealedBlob::from_bytes(&ctx.io.load(&input)?).map_err(CliError::usage)?;
            let mut approvals = Vec::new();
            for p in &approval {
                approvals.extend(
                    PolicyApproval::list_from_bytes(&ctx.io.load(p)?).map_err(CliError::usage)?,
                );
            }
            let mut s = ctx.powered()?;
            let data = s.card(|c| c.unseal(&blob, &approvals)).map_err(failed)?;
            match out {
                Some(p) => write_file(&p, &data)?,
                None => ctx.io.say(String::from_utf8_lossy(&data))?,
            }
            ctx.close(s)
        }
        Command::Approve {
            authority,
            input,
            out,
        } => {
            let blob = SealedBlob::from_bytes(&ctx.io.load(&input)?).map_err(CliError::usage)?;
            let Policy::Authorized { selection, .. } = blob.policy else {
                return Err(CliError::usage("blob has no authorized policy"));
            };
            let key = derive_signing_key(key_id(&authority)?.as_bytes());
            let mut s = ctx.powered()?;
            let digest = s.composite(selection)?;
            let approval = PolicyApproval::sign(&key, selection, digest);
            ctx.io.emit(
                "approval",
                out.as_deref(),
                &PolicyApproval::list_to_bytes(&[approval]),
            )?;
            ctx.close(s)
        }
        Command::Key(cmd) => key_command(&mut ctx, cmd),
        Command::Quote {
            pcrs,
            nonce,
            bsn,
            out,
        } => {
            let sel = PcrSelection::from_indices(&pcrs).map_err(CliError::usage)?;
            let nonce = parse_bytes(&nonce)?;
            let mut s = ctx.powered()?;
            s.tick()?;
            let quote = s
                .card(|c| c.quote(sel, &nonce, bsn.as_deref().map(str::as_bytes)))
                .map_err(failed)?;
            for (i, v) in quote.selection.indices().zip(&quote.pcr_values) {
                ctx.io.say(format!("PCR[{i}] = {}", hex::encode(v)))?;
            }
            ctx.io.emit("quote", out.as_deref(), &quote.to_bytes())?;
            ctx.close(s)
        }
        Command::Daa(cmd) => daa_command(&mut ctx, cmd),
        Command::Boot(BootCommand::Run { chain, mode }) => boot_command(&mut ctx, &chain, mode),
        Command::Bind(cmd) => bind_command(&mut ctx, cmd),
        Command::Stats(cmd) => stats_command(&mut ctx.io, cmd),
        Command::Bench {
            iterations,
            commands,
        } => {
            let selected: Vec<&'static str> = if commands.is_empty() {
                COMMANDS.to_vec()
            } else {
                COMMANDS
                    .iter()
                    .copied()
                    .filter(|c| commands.iter().any(|x| x == c))
                    .collect()
            };
            let report = bench(&selected, iterations, ctx.seed)?;
            write!(ctx.io.out, "{}", report.render()).map_err(failed)
        }
        Command::Scenario { file, transcript } => {
            let outcome = scenario::run_file(&file);
            let text: String = outcome
                .transcript
                .iter()
                .map(|l| format!("{l}\n"))
                .collect();
            write!(ctx.io.out, "{text}").map_err(failed)?;
            if let Some(p) = transcript {
                write_file(&p, text.as_bytes())?;
            }
            match outcome.error {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
    }
}

fn key_command(ctx: &mut Ctx<'_>, cmd: KeyCommand) -> Result<(), CliError> {
    let mut s = ctx.powered()?;
    match cmd {
        KeyCommand::Create {
            duplicable,
            attestation,
        } => {
            let (handle, public) = s
                .card(|c| c.create_key(KeyTemplate::ecc(duplicable, attestation)))
                .map_err(failed)?;
            ctx.io.say(format!("handle: {handle:#010x}"))?;
            ctx.io
                .say(format!("public: {}", hex::encode(sec1(&public))))?;
        }
        KeyCommand::Public { handle, out } => {
            let public = if handle == 0 {
                s.card(|c| c.srk_public())
            } else {
                s.card(|c| c.key_public(handle))
            }
            .map_err(failed)?;
            ctx.io.emit("public", out.as_deref(), &sec1(&public))?;
        }
        KeyCommand::Duplicate {
            handle,
            target,
            out,
        } => {
            let target = PublicKey::from_sec1_bytes(&ctx.io.load(&target)?)
                .map_err(|_| CliError::usage("target is not a P-256 public key"))?;
            let blob = s
                .card(|c| c.duplicate_key(handle, &target))
                .map_err(failed)?;
            ctx.io.emit("duplicate", out.as_deref(), &blob)?;
        }
        KeyCommand::Import { input } => {
            let blob = ctx.io.load(&input)?;
            let handle = s.card(|c| c.import_key(&blob)).map_err(failed)?;
            ctx.io.say(format!("handle: {handle:#010x}"))?;
        }
    }
    ctx.close(s)
}

fn daa_command(ctx: &mut Ctx<'_>, cmd: DaaCommand) -> Result<(), CliError> {
    match cmd {
        DaaCommand::Setup {
            lambda,
            issuer,
            params,
        } => {
            let mut rng = ChaCha20Rng::seed_from_u64(ctx.seed);
            let (crs, isk) = daa_setup(lambda, &mut rng).map_err(CliError::usage)?;
            ctx.io
                .emit("issuer", Some(&issuer), &encode_issuer(&crs, &isk))?;
            ctx.io.emit("params", Some(&params), &crs.to_bytes())?;
            ctx.io
                .say(format!("issuer parameters created (lambda {lambda})"))
        }
        DaaCommand::Join { issuer } => {
            let (crs, isk) = decode_issuer(&ctx.io.load(&issuer)?)?;
            let mut s = ctx.powered()?;
            let req = s.card(|c| c.join_init(&crs)).map_err(failed)?;
            let mut rng = ChaCha20Rng::seed_from_u64(ctx.seed ^ 0x155e);
            let resp = issue(&crs, &isk, &req, &mut rng).map_err(failed)?;
            s.card(|c| c.join_finish(&req, &resp)).map_err(failed)?;
            ctx.io.say("credential installed")?;
            ctx.close(s)
        }
        DaaCommand::Sign { message, bsn, out } => {
            let mut s = ctx.powered()?;
            s.tick()?;
            let sig = s
                .card(|c| {
                    c.quote(
                        PcrSelection(0),
                        message.as_bytes(),
                        bsn.as_deref().map(str::as_bytes),
                    )
                })
                .map_err(failed)?;
            ctx.io.emit("signature", out.as_deref(), &sig.to_bytes())?;
            ctx.close(s)
        }
        DaaCommand::Verify {
            params,
            signature,
            message,
            nonce,
            bsn,
        } => {
            let crs =
                DaaPublicParams::from_bytes(&ctx.io.load(&params)?).map_err(CliError::usage)?;
            let quote = Quote::from_bytes(&ctx.io.load(&signature)?).map_err(CliError::usage)?;
            let nonce = match (message, nonce) {
                (Some(m), _) => m.into_bytes(),
                (None, Some(n)) => parse_bytes(&n)?,
                (None, None) => return Err(CliError::usage("need --message or --nonce")),
            };
            if verify_quote(&crs, bsn.as_deref().map(str::as_bytes), &quote, &nonce) {
                ctx.io.say("valid")
            } else {
                Err(CliError::failed("signature rejected"))
            }
        }
    }
}

fn boot_command(ctx: &mut Ctx<'_>, chain: &Path, mode: BootModeArg) -> Result<(), CliError> {
    let loaded = load_chain(chain)?;
    if mode != BootModeArg::Measured {
        let r = secure_boot(&loaded.chain);
        for stage in &r.executed {
            ctx.io.say(format!("{stage}: verified, executed"))?;
        }
        if let Some(stage) = r.failed_at {
            ctx.io
                .say(format!("{stage}: verification failed, boot aborted"))?;
            return Err(CliError::Failed(format!("secure boot aborted at {stage}")));
        }
    }
    if mode != BootModeArg::Secure {
        let mut s = ctx.open(Platform::from_chain(&loaded), TpmConfig::default())?;
        let ms = s.power_on()?;
        let bl2 = loaded.chain.bl2_digest().unwrap_or([0; 32]);
        ctx.io.say(format!(
            "BL2: measured by the RTM during binding, {}",
            hex::encode(bl2)
        ))?;
        for m in &ms {
            let what = match m.subject {
                Subject::Stage(st) => st.to_string(),
                Subject::BoardId => "board id".into(),
            };
            let status = if m.recorded {
                "extended"
            } else {
                "NOT RECORDED"
            };
            ctx.io.say(format!(
                "{what}: {status} into PCR[{}], {}",
                m.pcr,
                hex::encode(m.digest)
            ))?;
        }
        for pcr in [1u8, 2] {
            let v = s.card(|c| c.read(pcr)).map_err(failed)?;
            ctx.io.say(format!("PCR[{pcr}] = {}", hex::encode(v)))?;
        }
        let missing = ms.iter().any(|m| !m.recorded);
        ctx.close(s)?;
        if missing {
            return Err(CliError::failed("some measurements were not recorded"));
        }
    }
    Ok(())
}

fn bind_command(ctx: &mut Ctx<'_>, cmd: BindCommand) -> Result<(), CliError> {
    match cmd {
        BindCommand::Db {
            config,
            timing,
            relay_delay,
        } => {
            let cfg = bind_config(config.as_deref())?;
            let samples = samples_or_bundled(timing.as_deref())?;
            let model = TimingModel::new(TimingKind::Empirical(samples))
                .map_err(CliError::usage)?
                .with_relay(relay_delay);
            let tpm_config = TpmConfig {
                distance_bounding: cfg,
                ..TpmConfig::default()
            };
            let mut s = ctx.open(Platform::demo(), tpm_config)?;
            s.init(BindingMode::DistanceBounding)?;
            let report = s.bind_db(&model)?;
            ctx.io.say(format!(
                "threshold {} µs, {} rounds, {} successes required",
                cfg.threshold_us,
                cfg.rounds,
                cfg.required_successes()
            ))?;
            ctx.io.say(format!(
                "{}/{} rounds answered in time",
                report.successes, report.rounds
            ))?;
            ctx.close(s)?;
            if report.bound {
                ctx.io.say("bound")
            } else {
                let why = report
                    .failure
                    .map_or_else(|| "RTM channel broke".to_string(), |f| f.to_string());
                ctx.io.say(format!("rejected: {why}"))?;
                Err(CliError::Failed(format!("binding rejected: {why}")))
            }
        }
        BindCommand::Tee { device_key } => {
            let id = key_id(&device_key)?;
            let key = derive_signing_key(id.as_bytes());
            let mut platform = Platform::demo();
            platform.identity.cert =
                CertAuthority::bundled_vendor().issue(format!("{id}-device"), key.verifying_key());
            platform.identity.key = key;
            let mut s = ctx.open(platform, TpmConfig::default())?;
            s.init(BindingMode::TeeProxy)?;
            s.bind_tee()?;
            ctx.io.say("TEE channel established")?;
            let ms = s.measure(Stage::Bl2);
            ctx.io.say(format!(
                "{} measurements extended through the channel",
                ms.iter().filter(|m| m.recorded).count()
            ))?;
            let probe = [0u8; 32];
            let outside = s.host(|c| c.extend(9, &probe));
            let outcome = match outside {
                Ok(_) => "accepted".to_string(),
                Err(e) => e
                    .status_word()
                    .map_or(e.to_string(), |sw| format!("refused ({sw})")),
            };
            ctx.io
                .say(format!("extend outside the channel: {outcome}"))?;
            let v = s.card(|c| c.read(1)).map_err(failed)?;
            ctx.io.say(format!("PCR[1] = {}", hex::encode(v)))?;
            ctx.close(s)
        }
    }
}

fn stats_command(io: &mut Io<'_>, cmd: StatsCommand) -> Result<(), CliError> {
    match cmd {
        StatsCommand::Binom { n, k, p } => {
            let v = binom_tail(n, k, p).map_err(CliError::usage)?;
            io.say(format!("{v:?}"))
        }
        StatsCommand::Cdf { timing, t } => {
            let samples = samples_or_bundled(timing.as_deref())?;
            let v = empirical_cdf(&samples, t).map_err(CliError::usage)?;
            io.say(format!("{v:?}"))
        }
        StatsCommand::Bandwidth { bits, slack_us } => {
            let v = min_relay_bandwidth(bits, slack_us).map_err(CliError::usage)?;
            io.say(format!("{v:?} bit/s ({:.2} Mbps)", v / 1e6))
        }
        StatsCommand::Attacker {
            relay_delay,
            timing,
            config,
        } => {
            let samples = samples_or_bundled(timing.as_deref())?;
            let cfg = bind_config(config.as_deref())?;
            let v = attacker_success(relay_delay, &samples, &cfg).map_err(CliError::usage)?;
            io.say(format!("{v:?}"))
        }
    }
}
