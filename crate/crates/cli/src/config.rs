//! Text formats read by the CLI: boot chain descriptions, distance-bounding
//! configurations and timing sample files.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use simtpm_core::binding::DistanceBoundingConfig;
use simtpm_core::boot::{BootChain, BootImage, Stage};
use simtpm_core::cert::{derive_signing_key, key_name, CertAuthority};

use crate::error::{read_text, CliError};

/// A boot chain description.
///
/// ```toml
/// root = "vendor root"
/// board_id = "board-A"
///
/// [[stage]]
/// name = "BL1"
/// payload = "bl1.bin"
///
/// [[stage]]
/// name = "BL2"
/// text = "second stage"
/// signer = "bl2 key"
/// ```
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    /// Key id of the root-of-trust key that certifies every stage signer.
    pub root: String,
    /// Hex hash of the root key burned into the board; derived from `root`
    /// when absent.
    pub fused_root_hash: Option<String>,
    pub board_id: Option<String>,
    /// Key id of the RTM's device key.
    pub rtm: Option<String>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub name: String,
    /// Path of the image, relative to the chain file.
    pub payload: Option<PathBuf>,
    /// Inline image contents, used when `payload` is absent.
    pub text: Option<String>,
    /// Key id of the stage signer; defaults to a key derived from the
    /// root id and stage name.
    pub signer: Option<String>,
    /// Key id of the authority certifying the signer; defaults to `root`.
    pub issuer: Option<String>,
    /// Flip a payload byte after signing.
    #[serde(default)]
    pub tamper: bool,
}

/// A signed chain together with the board and RTM it belongs to.
#[derive(Clone, Debug)]
pub struct LoadedChain {
    pub chain: BootChain,
    pub board_id: Vec<u8>,
    pub rtm: String,
}

pub const DEFAULT_BOARD: &str = "simtpm-board";
pub const DEFAULT_RTM: &str = "simtpm";

fn authority(id: &str) -> CertAuthority {
    CertAuthority::new(id, derive_signing_key(id.as_bytes()))
}

pub fn tamper(payload: &mut Vec<u8>) {
    match payload.first_mut() {
        Some(b) => *b ^= 0x01,
        None => payload.push(0),
    }
}

pub fn parse_chain(text: &str, base: &Path) -> Result<LoadedChain, CliError> {
    let file: ChainFile = toml::from_str(text).map_err(CliError::usage)?;
    let root = authority(&file.root);
    let mut images = Vec::with_capacity(file.stages.len());
    for entry in &file.stages {
        let stage: Stage = entry.name.parse().map_err(CliError::usage)?;
        let mut payload = match (&entry.payload, &entry.text) {
            (Some(p), _) => crate::error::read_file(&base.join(p))?,
            (None, Some(t)) => t.clone().into_bytes(),
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "stage {stage} needs a payload path or inline text"
                )))
            }
        };
        let signer_id = entry
            .signer
            .clone()
            .unwrap_or_else(|| format!("{} {stage}", file.root));
        let key = derive_signing_key(signer_id.as_bytes());
        let issuer = match &entry.issuer {
            Some(id) => authority(id),
            None => root.clone(),
        };
        let cert = issuer.issue(format!("{stage}-signer"), key.verifying_key());
        let mut image = BootImage::sign(stage, std::mem::take(&mut payload), &key, cert);
        if entry.tamper {
            tamper(&mut image.payload);
        }
        images.push(image);
    }
    let anchor = root.anchor();
    let fused_root_hash = match &file.fused_root_hash {
        Some(h) => parse_digest(h)?,
        None => key_name(&anchor.key),
    };
    Ok(LoadedChain {
        chain: BootChain {
            images,
            root: anchor,
            fused_root_hash,
        },
        board_id: file
            .board_id
            .unwrap_or_else(|| DEFAULT_BOARD.into())
            .into_bytes(),
        rtm: file.rtm.unwrap_or_else(|| DEFAULT_RTM.into()),
    })
}

pub fn load_chain(path: &Path) -> Result<LoadedChain, CliError> {
    let text = read_text(path)?;
    parse_chain(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Distance-bounding parameters; absent keys take the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindConfigFile {
    pub threshold_us: Option<u64>,
    pub delta_us: Option<u64>,
    pub rounds: Option<u32>,
    pub fraction: Option<f64>,
    pub stop_when_decided: Option<bool>,
}

impl BindConfigFile {
    pub fn resolve(&self) -> Result<DistanceBoundingConfig, CliError> {
        let d = DistanceBoundingConfig::default();
        let threshold_us = self.threshold_us.unwrap_or(d.threshold_us);
        let cfg = DistanceBoundingConfig {
            threshold_us,
            delta_us: self.delta_us.unwrap_or(threshold_us),
            rounds: self.rounds.unwrap_or(d.rounds),
            fraction: self.fraction.unwrap_or(d.fraction),
            stop_when_decided: self.stop_when_decided.unwrap_or(d.stop_when_decided),
            ..d
        };
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }
}

pub fn parse_bind_config(text: &str) -> Result<DistanceBoundingConfig, CliError> {
    toml::from_str::<BindConfigFile>(text)
        .map_err(CliError::usage)?
        .resolve()
}

/// One positive integer (µs) per line; blank lines and `#` comments are
/// skipped.
pub fn parse_samples(text: &str) -> Result<Vec<u64>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: u64 = line
            .parse()
            .map_err(|_| CliError::Usage(format!("line {}: not an integer: {line:?}", n + 1)))?;
        if v == 0 {
            return Err(CliError::Usage(format!(
                "line {}: samples must be positive",
                n + 1
            )));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(CliError::usage("timing file holds no samples"));
    }
    Ok(out)
}

pub fn parse_digest(text: &str) -> Result<[u8; 32], CliError> {
    let bytes = parse_bytes(text)?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| CliError::Usage(format!("expected 32 bytes, got {}", b.len())))
}

/// Hex with optional spaces, as printed by the CLI.
pub fn parse_bytes(text: &str) -> Result<Vec<u8>, CliError> {
    simtpm_core::apdu::parse_hex(text).map_err(CliError::usage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use simtpm_core::boot::secure_boot;

    const CHAIN: &str = r#"
root = "test root"
board_id = "board-7"

[[stage]]
name = "BL1"
text = "rom"

[[stage]]
name = "BL2"
text = "loader"

[[stage]]
name = "BL31"
text = "monitor"

[[stage]]
name = "BL33"
text = "os loader"
"#;

    #[test]
    fn chain_file_signs_a_bootable_chain() {
        let loaded = parse_chain(CHAIN, Path::new(".")).unwrap();
        assert_eq!(loaded.board_id, b"board-7");
        assert_eq!(loaded.chain.images.len(), 4);
        assert!(secure_boot(&loaded.chain).is_success());
    }

    #[test]
    fn tampered_or_foreign_stages_abort() {
        let text = CHAIN.replace("text = \"monitor\"", "text = \"monitor\"\ntamper = true");
        let r = secure_boot(&parse_chain(&text, Path::new(".")).unwrap().chain);
        assert_eq!(r.failed_at, Some(Stage::Bl31));
        assert_eq!(r.executed, vec![Stage::Bl1, Stage::Bl2]);

        let text = CHAIN.replace(
            "text = \"os loader\"",
            "text = \"os loader\"\nissuer = \"rogue\"",
        );
        let r = secure_boot(&parse_chain(&text, Path::new(".")).unwrap().chain);
        assert_eq!(r.failed_at, Some(Stage::Bl33));

        let text = format!("fused_root_hash = \"{}\"\n{CHAIN}", "00".repeat(32));
        let r = secure_boot(&parse_chain(&text, Path::new(".")).unwrap().chain);
        assert_eq!(r.failed_at, Some(Stage::Bl1));
        assert!(r.executed.is_empty());
    }

    #[test]
    fn chain_file_errors() {
        assert!(parse_chain("root = 1", Path::new(".")).is_err());
        let bad = CHAIN.replace("BL31", "BL9");
        assert!(matches!(
            parse_chain(&bad, Path::new(".")),
            Err(CliError::Usage(_))
        ));
        let missing = "root = \"r\"\n[[stage]]\nname = \"BL1\"\n";
        assert!(parse_chain(missing, Path::new(".")).is_err());
    }

    #[test]
    fn bind_config_defaults_and_validation() {
        let cfg = parse_bind_config("").unwrap();
        assert_eq!(cfg, DistanceBoundingConfig::default());
        let cfg = parse_bind_config("threshold_us = 649\nrounds = 10").unwrap();
        assert_eq!((cfg.threshold_us, cfg.delta_us, cfg.rounds), (649, 649, 10));
        assert!(parse_bind_config("fraction = 1.5").is_err());
        assert!(parse_bind_config("bogus = 1").is_err());
    }

    #[test]
    fn sample_files() {
        assert_eq!(
            parse_samples("563\n\n# c\n600 # x\n").unwrap(),
            vec![563, 600]
        );
        assert!(parse_samples("0\n").is_err());
        assert!(parse_samples("abc\n").is_err());
        assert!(parse_samples("\n").is_err());
    }
}
