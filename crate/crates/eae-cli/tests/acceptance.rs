//! End-to-end determinism acceptance: the verification suite and every
//! shipped experiment pipeline must re-run byte-identically under their
//! pinned seeds. Both runs of a pipeline use the same relative output path
//! inside separate scratch directories, so every artifact — resolved
//! config included — is comparable byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn report(label: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {label}: {status} ({detail})");
    assert!(pass, "acceptance {label} failed: {detail}");
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eae"))
        .args(args)
        .current_dir(dir)
        .env_remove("EAE_DATA_DIR")
        .output()
        .expect("runner binary executes")
}

/// Every artifact below `dir`, keyed by its path relative to `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("artifact dir readable") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(dir)
                    .expect("under snapshot root")
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, std::fs::read(&p).expect("artifact readable"));
            }
        }
    }
    files
}

fn first_difference(
    a: &BTreeMap<String, Vec<u8>>,
    b: &BTreeMap<String, Vec<u8>>,
) -> Option<String> {
    for k in a.keys().chain(b.keys()) {
        match (a.get(k), b.get(k)) {
            (Some(x), Some(y)) => {
                if x != y {
                    return Some(format!("{k} differs between runs"));
                }
            }
            (Some(_), None) => return Some(format!("{k} missing from the second run")),
            (None, Some(_)) => return Some(format!("{k} missing from the first run")),
            (None, None) => unreachable!("key came from one of the maps"),
        }
    }
    None
}

/// Run the given subcommands against one config in a fresh scratch
/// directory; return the artifact bytes plus the combined command
/// transcript.
fn run_pipeline(config: &Path, commands: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let tmp = tempfile::tempdir().expect("scratch dir");
    let cfg = config.to_string_lossy();
    let mut transcript = Vec::new();
    for cmd in commands {
        let out = run_in(tmp.path(), &[cmd, "--config", &cfg, "--output", "out"]);
        assert!(
            out.status.success(),
            "`{cmd}` on {cfg} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        transcript.extend_from_slice(cmd.as_bytes());
        transcript.push(b'\n');
        transcript.extend_from_slice(&out.stdout);
        transcript.extend_from_slice(&out.stderr);
    }
    let mut files = snapshot(&tmp.path().join("out"));
    files.insert("(transcript)".into(), transcript);
    files
}

fn run_verify() -> BTreeMap<String, Vec<u8>> {
    let tmp = tempfile::tempdir().expect("scratch dir");
    let out = run_in(tmp.path(), &["verify", "--output", "out"]);
    assert!(
        out.status.success(),
        "verify exited {:?}: {}{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let mut files = snapshot(&tmp.path().join("out"));
    let mut transcript = out.stdout.clone();
    transcript.extend_from_slice(&out.stderr);
    files.insert("(transcript)".into(), transcript);
    files
}

#[test]
fn c10_pipelines_rerun_byte_identically() {
    let root = repo_root();
    let pipelines: [(&str, &[&str]); 5] = [
        ("configs/quadratic-toy.json", &["train", "sample", "diagnose"]),
        ("configs/gm-eae.json", &["train", "sample", "diagnose"]),
        ("configs/gm-vae.json", &["train", "sample", "diagnose"]),
        ("configs/gm-ae.json", &["train", "sample", "diagnose"]),
        (
            "configs/oscillator-dynamics.json",
            &["train", "sample", "diagnose", "dynamics"],
        ),
    ];
    let mut details = Vec::new();
    for (cfg_rel, commands) in pipelines {
        let cfg = root.join(cfg_rel);
        let first = run_pipeline(&cfg, commands);
        let second = run_pipeline(&cfg, commands);
        if let Some(diff) = first_difference(&first, &second) {
            report(
                "10 end-to-end determinism",
                false,
                &format!("{cfg_rel}: {diff}"),
            );
        }
        details.push(format!("{cfg_rel} ({} artifacts)", first.len()));
    }

    let first = run_verify();
    let second = run_verify();
    if let Some(diff) = first_difference(&first, &second) {
        report("10 end-to-end determinism", false, &format!("verify: {diff}"));
    }
    details.push(format!("verify ({} artifacts)", first.len()));

    report(
        "10 end-to-end determinism",
        true,
        &format!(
            "byte-identical re-runs, artifacts and transcripts included: {}",
            details.join(", ")
        ),
    );
}

/// Self-test of the verification suite: flipping the thermostat chain force
/// must be caught and reported through the failure exit code.
#[test]
fn verify_flags_flipped_chain_force() {
    let tmp = tempfile::tempdir().expect("scratch dir");
    let out = run_in(tmp.path(), &["verify", "--flip-chain-force", "--output", "out"]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "flipped chain force must exit 1, got {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("FAIL"),
        "flipped chain force must mark checks failed:\n{stdout}"
    );
}
