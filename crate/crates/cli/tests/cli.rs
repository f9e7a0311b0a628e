use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn simtpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simtpm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = simtpm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

#[test]
fn stats_print_full_precision() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(
        ok(d, &["stats", "binom", "--n", "5", "--k", "0", "--p", "0.2"]).trim(),
        "1.0"
    );
    let v: f64 = ok(
        d,
        &["stats", "binom", "--n", "30", "--k", "14", "--p", "0.83"],
    )
    .trim()
    .parse()
    .unwrap();
    assert!((v - 0.999_998_972_13).abs() < 1e-10);
    let bw = ok(
        d,
        &["stats", "bandwidth", "--bits", "880", "--slack-us", "158"],
    );
    assert!(bw.contains("(5.57 Mbps)"), "{bw}");
    let cdf = ok(d, &["stats", "cdf", "--t", "721"]);
    assert!((cdf.trim().parse::<f64>().unwrap() - 25.0 / 30.0).abs() < 1e-12);
    assert_eq!(
        ok(d, &["stats", "attacker", "--relay-delay", "200"]).trim(),
        "0.0"
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&simtpm(d, &["frobnicate"])), 2);
    assert_eq!(
        code(&simtpm(
            d,
            &["stats", "binom", "--n", "3", "--k", "1", "--p", "1.5"]
        )),
        2
    );
    assert_eq!(
        code(&simtpm(
            d,
            &["stats", "bandwidth", "--bits", "1", "--slack-us", "0"]
        )),
        2
    );
    assert_eq!(code(&simtpm(d, &["scenario", "missing.toml"])), 2);
    std::fs::write(d.join("bad.toml"), "devices = []\n").unwrap();
    assert_eq!(code(&simtpm(d, &["scenario", "bad.toml"])), 2);
}

#[test]
fn golden_scenario_passes_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let file = scenarios().join("golden.toml");
    let file = file.to_str().unwrap();
    let first = ok(d, &["scenario", file]);
    assert!(first.contains("quote verified"));
    assert!(
        first.lines().any(|l| l.starts_with("phone > 80")),
        "APDUs are logged in hex"
    );
    assert_eq!(first, ok(d, &["scenario", file]));
}

#[test]
fn tampered_bl2_fails_at_the_boot_step() {
    let dir = TempDir::new().unwrap();
    let out = simtpm(
        dir.path(),
        &[
            "scenario",
            scenarios().join("tampered_bl2.toml").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 2 (boot)"));
}

#[test]
fn migration_scenario_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(
        dir.path(),
        &[
            "scenario",
            scenarios().join("migrate.toml").to_str().unwrap(),
        ],
    );
    assert!(out.contains("scenario complete"));
}

#[test]
fn seal_survives_invocations_and_follows_pcrs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("secret.txt"), b"top secret").unwrap();
    ok(d, &["init"]);
    ok(
        d,
        &[
            "seal",
            "--in",
            "secret.txt",
            "--out",
            "blob.bin",
            "--pcrs",
            "0,1,2",
        ],
    );
    assert_eq!(ok(d, &["unseal", "--in", "blob.bin"]).trim(), "top secret");
    // Another seed changes the binding nonce and therefore PCR[0].
    let out = simtpm(d, &["--seed", "9", "unseal", "--in", "blob.bin"]);
    assert_eq!(code(&out), 1);

    ok(
        d,
        &["--hex", "seal", "--in", "secret.txt", "--out", "blob.hex"],
    );
    let text = std::fs::read_to_string(d.join("blob.hex")).unwrap();
    assert!(text.trim().chars().all(|c| c.is_ascii_hexdigit()));
    ok(
        d,
        &["--hex", "unseal", "--in", "blob.hex", "--out", "plain.txt"],
    );
    assert_eq!(std::fs::read(d.join("plain.txt")).unwrap(), b"top secret");
}

#[test]
fn authorized_blob_needs_an_approval() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("secret.txt"), b"s").unwrap();
    std::fs::write(d.join("authority.key"), "policy authority\n").unwrap();
    std::fs::write(d.join("rogue.key"), "rogue\n").unwrap();
    ok(
        d,
        &[
            "seal",
            "--in",
            "secret.txt",
            "--out",
            "blob",
            "--pcrs",
            "1,2",
            "--authority",
            "authority.key",
        ],
    );
    assert_eq!(code(&simtpm(d, &["unseal", "--in", "blob"])), 1);
    ok(
        d,
        &[
            "approve",
            "--authority",
            "rogue.key",
            "--in",
            "blob",
            "--out",
            "forged",
        ],
    );
    assert_eq!(
        code(&simtpm(
            d,
            &["unseal", "--in", "blob", "--approval", "forged"]
        )),
        1
    );
    ok(
        d,
        &[
            "approve",
            "--authority",
            "authority.key",
            "--in",
            "blob",
            "--out",
            "ok",
        ],
    );
    assert_eq!(
        ok(d, &["unseal", "--in", "blob", "--approval", "ok"]).trim(),
        "s"
    );
}

#[test]
fn key_duplication_between_two_cards() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let created = ok(d, &["--state", "a.state", "key", "create", "--duplicable"]);
    let handle = created
        .lines()
        .find_map(|l| l.strip_prefix("handle: "))
        .unwrap()
        .to_string();
    ok(
        d,
        &[
            "--state", "b.state", "--seed", "1", "key", "public", "--out", "b.srk",
        ],
    );
    ok(
        d,
        &[
            "--state",
            "a.state",
            "key",
            "duplicate",
            "--handle",
            &handle_number(&handle),
            "--target",
            "b.srk",
            "--out",
            "dup",
        ],
    );
    let imported = ok(
        d,
        &[
            "--state", "b.state", "--seed", "1", "key", "import", "--in", "dup",
        ],
    );
    assert!(imported.starts_with("handle: 0x"));
    // Addressed to b, so a cannot import it.
    assert_eq!(
        code(&simtpm(
            d,
            &["--state", "a.state", "key", "import", "--in", "dup"]
        )),
        1
    );
}

fn handle_number(hex: &str) -> String {
    u32::from_str_radix(hex.trim_start_matches("0x"), 16)
        .unwrap()
        .to_string()
}

#[test]
fn daa_flow_and_quote() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "daa",
            "setup",
            "--issuer",
            "issuer.bin",
            "--params",
            "params.bin",
        ],
    );
    assert_eq!(
        code(&simtpm(d, &["daa", "sign", "--message", "m"])),
        1,
        "no credential yet"
    );
    ok(d, &["daa", "join", "--issuer", "issuer.bin"]);
    ok(
        d,
        &[
            "daa",
            "sign",
            "--message",
            "hello",
            "--bsn",
            "shop",
            "--out",
            "sig",
        ],
    );
    assert_eq!(
        ok(
            d,
            &[
                "daa",
                "verify",
                "--params",
                "params.bin",
                "--signature",
                "sig",
                "--message",
                "hello",
                "--bsn",
                "shop"
            ]
        )
        .trim(),
        "valid"
    );
    let wrong = simtpm(
        d,
        &[
            "daa",
            "verify",
            "--params",
            "params.bin",
            "--signature",
            "sig",
            "--message",
            "bye",
            "--bsn",
            "shop",
        ],
    );
    assert_eq!(code(&wrong), 1);

    let quote = ok(
        d,
        &[
            "quote", "--pcrs", "0,1", "--nonce", "01 02 03", "--out", "q",
        ],
    );
    assert!(quote.contains("PCR[1] = "));
    ok(
        d,
        &[
            "daa",
            "verify",
            "--params",
            "params.bin",
            "--signature",
            "q",
            "--nonce",
            "010203",
        ],
    );
    assert_eq!(
        code(&simtpm(
            d,
            &[
                "daa",
                "verify",
                "--params",
                "params.bin",
                "--signature",
                "q",
                "--nonce",
                "04"
            ]
        )),
        1
    );
}

#[test]
fn boot_run_modes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let chain = scenarios().join("chain.toml");
    let chain = chain.to_str().unwrap();
    let out = ok(d, &["boot", "run", "--chain", chain, "--mode", "both"]);
    assert!(out.contains("BL33: verified, executed"));
    assert!(out.contains("board id: extended into PCR[2]"));

    let text = std::fs::read_to_string(chain).unwrap();
    let tampered = text.replacen(
        "text = \"EL3 runtime\"",
        "text = \"EL3 runtime\"\ntamper = true",
        1,
    );
    std::fs::write(d.join("tampered.toml"), tampered).unwrap();
    let out = simtpm(
        d,
        &[
            "boot",
            "run",
            "--chain",
            "tampered.toml",
            "--mode",
            "secure",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("BL31: verification failed"));
    // Measured boot still records the modified image.
    ok(
        d,
        &[
            "boot",
            "run",
            "--chain",
            "tampered.toml",
            "--mode",
            "measured",
        ],
    );
}

#[test]
fn bind_commands() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let out = ok(d, &["bind", "db"]);
    assert!(out.contains("bound"), "{out}");
    std::fs::write(d.join("timing.txt"), "563\n600\n650\n").unwrap();
    std::fs::write(
        d.join("db.toml"),
        "threshold_us = 721\nrounds = 30\nfraction = 0.47\n",
    )
    .unwrap();
    let out = simtpm(
        d,
        &[
            "bind",
            "db",
            "--config",
            "db.toml",
            "--timing",
            "timing.txt",
            "--relay-delay",
            "159",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0/30 rounds answered in time"));

    std::fs::write(d.join("device.key"), "handset tee key\n").unwrap();
    let out = ok(d, &["bind", "tee", "--device-key", "device.key"]);
    assert!(out.contains("TEE channel established"));
    assert!(
        out.contains("extend outside the channel: refused (6985)"),
        "{out}"
    );
}

#[test]
fn bench_reports_requested_commands() {
    let dir = TempDir::new().unwrap();
    let out = ok(
        dir.path(),
        &[
            "bench",
            "--iterations",
            "3",
            "--command",
            "hash",
            "--command",
            "random",
        ],
    );
    assert!(out.starts_with("Timings of the software emulator"));
    assert!(out.contains("hash") && out.contains("random") && !out.contains("seal"));
}
