//! Wall-clock timings of the emulator's command set.

use std::time::Instant;

use simtpm_core::tpm::card::CardError;
use simtpm_core::tpm::{KeyTemplate, Policy, Tpm, TpmConfig, SRK_HANDLE};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::CliError;
use crate::session::{DynCard, Platform, Session};

pub const DEFAULT_ITERATIONS: usize = 50;

pub const COMMANDS: [&str; 7] = [
    "key-gen", "hash", "extend", "read", "seal", "unseal", "random",
];

pub const HEADER: &str =
    "Timings of the software emulator on this host; they are not measurements of card hardware.";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub command: &'static str,
    /// Per-call wall-clock time in milliseconds.
    pub samples: Vec<f64>,
}

impl BenchRow {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Half-width of the 95% Student-t confidence interval of the mean.
    pub fn ci95(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return f64::INFINITY;
        }
        let m = self.mean();
        let var = self.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{HEADER}\n{:<10} {:>8} {:>12} {:>12}\n",
            "command", "samples", "mean ms", "95% CI ±"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>8} {:>12.4} {:>12.4}\n",
                r.command,
                r.samples.len(),
                r.mean(),
                r.ci95()
            ));
        }
        out
    }
}

fn time<T>(f: impl FnOnce() -> Result<T, CardError>) -> Result<(f64, T), CliError> {
    let start = Instant::now();
    let out = f().map_err(CliError::failed)?;
    Ok((start.elapsed().as_secs_f64() * 1e3, out))
}

fn measure(card: &mut DynCard<'_>, command: &str, iterations: usize) -> Result<Vec<f64>, CliError> {
    let payload = [0x5a; 64];
    let blob = card
        .seal(SRK_HANDLE, &Policy::None, &payload)
        .map_err(CliError::failed)?;
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let digest = [i as u8; 32];
        let ms = match command {
            "key-gen" => time(|| card.create_key(KeyTemplate::ecc(false, false)))?.0,
            "hash" => time(|| card.hash(&payload))?.0,
            "extend" => time(|| card.extend(10, &digest))?.0,
            "read" => time(|| card.read(10))?.0,
            "seal" => time(|| card.seal(SRK_HANDLE, &Policy::None, &payload))?.0,
            "unseal" => time(|| card.unseal(&blob, &[]))?.0,
            "random" => time(|| card.random(32))?.0,
            other => return Err(CliError::Usage(format!("unknown bench command {other:?}"))),
        };
        samples.push(ms);
    }
    Ok(samples)
}

/// Times each command `iterations` times over the APDU interface of a
/// freshly bound card.
pub fn bench(
    commands: &[&'static str],
    iterations: usize,
    seed: u64,
) -> Result<BenchReport, CliError> {
    if iterations == 0 {
        return Err(CliError::usage("iterations must be positive"));
    }
    let mut session = Session::new(Tpm::new(TpmConfig::default(), seed), Platform::demo(), seed);
    session.power_on()?;
    let mut rows = Vec::with_capacity(commands.len());
    for &command in commands {
        let samples = session
            .host(|card| Ok(measure(card, command, iterations)))
            .expect("closure never fails")?;
        session.transcript.clear();
        rows.push(BenchRow { command, samples });
    }
    Ok(BenchReport { rows })
}
