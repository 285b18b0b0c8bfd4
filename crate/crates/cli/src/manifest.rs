//! `manifest.tsv`: one row per artifact with its producing stage, inputs,
//! seed and SHA-256.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "stage\tinputs\tseed\tartifact\tsha256";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Replaces every row of `stage` with fresh rows for `artifacts` (paths
/// relative to `run_dir`), keeping the other stages' rows in place.
pub fn record(run_dir: &Path, stage: &str, inputs: &[String], seed: u64, artifacts: &[String]) -> CliResult<()> {
    let path = run_dir.join(MANIFEST_FILE);
    let existing = match std::fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CliError::io(&path)(e)),
    };
    let mut out = format!("{HEADER}\n");
    for line in existing.lines().skip(1) {
        if line.split('\t').next() != Some(stage) {
            out.push_str(line);
            out.push('\n');
        }
    }
    let inputs = if inputs.is_empty() { "-".to_string() } else { inputs.join(";") };
    for a in artifacts {
        let full = run_dir.join(a);
        let bytes = std::fs::read(&full).map_err(CliError::io(&full))?;
        let _ = writeln!(out, "{stage}\t{inputs}\t{seed}\t{a}\t{}", sha256_hex(&bytes));
    }
    std::fs::write(&path, out).map_err(CliError::io(&path))
}
