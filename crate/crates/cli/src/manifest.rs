use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use stagcomp::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

/// Settings shared by every command.
pub struct Context {
    pub seed: Option<u64>,
    pub workers: usize,
    started: String,
}

impl Context {
    pub fn new(seed: Option<u64>, workers: Option<usize>) -> Self {
        Context {
            seed,
            workers: workers.unwrap_or(0),
            started: now(),
        }
    }

    /// Writes the manifest for `command` run with `config`.
    pub fn write_manifest<T: Serialize>(
        &self,
        path: &Path,
        command: &str,
        config: &T,
        seed: u64,
    ) -> Result<()> {
        let manifest = RunManifest {
            command,
            config,
            seed,
            versions: Versions {
                tool: env!("CARGO_PKG_VERSION"),
                format: FORMAT_VERSION,
            },
            started: &self.started,
            finished: now(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Serialize)]
struct Versions {
    tool: &'static str,
    format: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
    seed: u64,
    versions: Versions,
    started: &'a str,
    finished: String,
}

/// `dir/stem<suffix>` for an output file `out`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}
