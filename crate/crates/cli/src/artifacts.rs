//! Provenance sidecars and the up-to-date check that makes every command
//! idempotent.
//!
//! Each artifact `x` gets `x.prov.json` recording a hash of the settings that
//! produced it and the SHA-256 of every upstream artifact. A rerun with the
//! same inputs skips the work; different inputs abort unless forced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zskd_core::data::write_atomically;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub artifact: String,
    pub command: String,
    pub artifact_sha256: String,
    /// SHA-256 of the canonical JSON of the producing settings.
    pub config_hash: String,
    /// Upstream file name to its SHA-256.
    pub upstream: BTreeMap<String, String>,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| zskd_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_json(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".prov.json");
    artifact.with_file_name(name)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// One unit of work producing `artifact`.
pub struct Stage {
    pub command: &'static str,
    pub artifact: PathBuf,
    pub settings: serde_json::Value,
    pub upstream: Vec<PathBuf>,
    /// A partial artifact without a sidecar is an interrupted run to resume
    /// rather than a foreign file.
    pub resumable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    UpToDate,
    Run,
}

impl Stage {
    fn expected(&self) -> CliResult<(String, BTreeMap<String, String>)> {
        let mut upstream = BTreeMap::new();
        for p in &self.upstream {
            if !p.exists() {
                return Err(CliError::Missing(p.display().to_string()));
            }
            upstream.insert(file_name(p), sha256_file(p)?);
        }
        Ok((sha256_json(&self.settings), upstream))
    }

    /// Whether the artifact must be (re)built. Errors with
    /// [`CliError::Stale`] when it exists from other inputs and `force` is off.
    pub fn status(&self, force: bool) -> CliResult<Status> {
        let (config_hash, upstream) = self.expected()?;
        if !self.artifact.exists() {
            return Ok(Status::Run);
        }
        let stale = |reason: String| {
            if force {
                Ok(Status::Run)
            } else {
                Err(CliError::Stale {
                    artifact: self.artifact.display().to_string(),
                    reason,
                })
            }
        };
        let side = sidecar_path(&self.artifact);
        let Ok(text) = fs::read_to_string(&side) else {
            if self.resumable {
                return Ok(Status::Run);
            }
            return stale("no provenance record".into());
        };
        let Ok(record) = serde_json::from_str::<Sidecar>(&text) else {
            return stale("unreadable provenance record".into());
        };
        if record.config_hash != config_hash {
            return stale("settings changed".into());
        }
        if record.upstream != upstream {
            return stale("an upstream artifact changed".into());
        }
        if record.artifact_sha256 != sha256_file(&self.artifact)? {
            return stale("artifact was modified after it was written".into());
        }
        Ok(Status::UpToDate)
    }

    /// Writes the sidecar for a freshly produced artifact.
    pub fn record(&self) -> CliResult<Sidecar> {
        let (config_hash, upstream) = self.expected()?;
        let sidecar = Sidecar {
            artifact: file_name(&self.artifact),
            command: self.command.to_string(),
            artifact_sha256: sha256_file(&self.artifact)?,
            config_hash,
            upstream,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
        write_atomically(&sidecar_path(&self.artifact), json.as_bytes())?;
        Ok(sidecar)
    }

    /// Runs `build` unless the artifact is up to date, then records it.
    /// With `force`, an existing artifact and its sidecar are removed first;
    /// otherwise a resumable partial artifact is left for `build` to extend.
    pub fn run(&self, force: bool, build: impl FnOnce() -> CliResult<()>) -> CliResult<Status> {
        match self.status(force)? {
            Status::UpToDate => {
                log::info!("{} is up to date", self.artifact.display());
                Ok(Status::UpToDate)
            }
            Status::Run => {
                if force && self.artifact.exists() {
                    let _ = fs::remove_file(&self.artifact);
                    let _ = fs::remove_file(sidecar_path(&self.artifact));
                }
                build()?;
                self.record()?;
                Ok(Status::Run)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(dir: &Path, lr: f64) -> Stage {
        Stage {
            command: "test",
            artifact: dir.join("out.bin"),
            settings: serde_json::json!({ "lr": lr }),
            upstream: vec![dir.join("in.bin")],
            resumable: false,
        }
    }

    #[test]
    fn skip_rebuild_and_stale_detection() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("in.bin"), b"upstream").unwrap();
        let s = stage(dir.path(), 0.1);
        let write = || {
            fs::write(dir.path().join("out.bin"), b"artifact").unwrap();
            Ok(())
        };
        assert_eq!(s.run(false, write).unwrap(), Status::Run);
        assert_eq!(s.run(false, || panic!("must not rebuild")).unwrap(), Status::UpToDate);

        let changed = stage(dir.path(), 0.2);
        assert!(matches!(changed.status(false), Err(CliError::Stale { .. })));
        assert_eq!(changed.status(true).unwrap(), Status::Run);

        fs::write(dir.path().join("in.bin"), b"other upstream").unwrap();
        let err = s.status(false).unwrap_err();
        assert!(err.to_string().contains("upstream"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn missing_upstream_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(stage(dir.path(), 0.1).status(false), Err(CliError::Missing(_))));
    }

    #[test]
    fn tampered_artifact_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("in.bin"), b"upstream").unwrap();
        let s = stage(dir.path(), 0.1);
        s.run(false, || {
            fs::write(dir.path().join("out.bin"), b"artifact").unwrap();
            Ok(())
        })
        .unwrap();
        fs::write(dir.path().join("out.bin"), b"edited").unwrap();
        assert!(matches!(s.status(false), Err(CliError::Stale { .. })));
    }
}
