//! `manifest.json`: inputs, content hashes and results of one run. Timing
//! and worker count sit under `runtime`, the only block allowed to differ
//! between repeated runs.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};
use sha1::{Digest, Sha1};

use crate::config::LoadedConfig;
use crate::run::Outcome;
use crate::RunOptions;

/// Hash of `bytes` as git stores a blob.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha1_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha1::digest(bytes))
}

pub fn build(opts: &RunOptions, loaded: &LoadedConfig, outcome: &Outcome, exit_code: i32, workers: usize, wall: Duration) -> Value {
    let artifacts: Vec<Value> = outcome
        .artifacts
        .iter()
        .map(|a| json!({"file": a.name, "bytes": a.bytes.len(), "sha1": sha1_hex(&a.bytes)}))
        .collect();
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": opts.subcommand.to_string(),
        "config_path": opts.config.display().to_string(),
        "config_hash": git_blob_sha1(&loaded.raw),
        "overrides": opts.overrides,
        "seed": loaded.config.seed,
        "resolved_config": loaded.resolved,
        "results": outcome.results,
        "diagnostics": {"passed": outcome.failures.is_empty(), "failures": outcome.failures},
        "artifacts": artifacts,
        "exit_code": exit_code,
        "runtime": {
            "workers": workers,
            "wall_time_s": wall.as_secs_f64(),
            "timestamp_unix": now.as_secs(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_sha1(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }
}
