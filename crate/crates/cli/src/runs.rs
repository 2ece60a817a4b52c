//! Self-describing run directories.
//!
//! Every command operates inside a run directory laid out as
//!
//! ```text
//! <run>/config.toml     resolved configuration, written verbatim once
//! <run>/manifest.json   append-only record of everything that happened
//! <run>/dataset.json    dataset manifest (written by `make-data`)
//! <run>/checkpoints/    step-numbered model checkpoints
//! <run>/audio/          generated and edited WAV files + sidecars
//! <run>/reports/        metric reports (JSON + CSV)
//! <run>/logs/           loss curves (CSV)
//! ```
//!
//! The directory is the reproducibility unit: its config is compared
//! bit-for-bit on reopen (a run never silently changes meaning), artifacts
//! are only ever added (never rewritten with different content), and a lock
//! file keeps two commands from writing concurrently.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mage_core::error::{MageError, Result};

use crate::config::RunConfig;

/// Well-known file and directory names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn audio(&self) -> PathBuf {
        self.root.join("audio")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

/// One manifest entry: a command that ran to completion in this directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub unix_time_sec: u64,
    pub command: String,
    pub detail: String,
    pub wall_clock_sec: f64,
}

/// Append-only account of a run directory. Loaded, extended, and rewritten
/// whole; existing entries are never altered or dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Short id derived from the config hash (stable across re-runs of the
    /// same configuration).
    pub run_id: String,
    /// SHA-256 of the canonical `config.toml` text.
    pub config_sha256: String,
    pub created_unix_sec: u64,
    pub events: Vec<ManifestEvent>,
    /// Checkpoint files, relative to the run root, in creation order.
    pub checkpoints: Vec<String>,
    /// Report files, relative to the run root, in creation order.
    pub reports: Vec<String>,
    /// Latest completed optimizer step per trainer ("codec", "flux").
    pub steps: BTreeMap<String, u64>,
}

/// Exclusive-access guard: a `.lock` file created with `create_new` and
/// removed on drop.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self> {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(MageError::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "run directory is locked by another command ({} exists; \
                         delete it if that command is no longer running)",
                        path.display()
                    ),
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// An open run directory: verified config, loaded manifest, held lock.
#[derive(Debug)]
pub struct RunContext {
    pub paths: RunPaths,
    pub config: RunConfig,
    /// SHA-256 hex of the canonical config text.
    pub config_hash: String,
    manifest: RunManifest,
    command: String,
    started: Instant,
    _lock: LockGuard,
}

/// SHA-256 hex digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now_sec() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunContext {
    /// Opens (creating if needed) a run directory for `config`.
    ///
    /// A directory that already holds a `config.toml` must match the given
    /// config byte-for-byte; artifacts from earlier commands are preserved
    /// and the manifest is extended rather than replaced.
    pub fn open(root: impl Into<PathBuf>, config: RunConfig, command: &str) -> Result<Self> {
        let paths = RunPaths::new(root);
        std::fs::create_dir_all(&paths.root)?;
        let lock = LockGuard::acquire(paths.lock())?;

        let canonical = config.to_toml()?;
        let config_hash = sha256_hex(canonical.as_bytes());
        let config_path = paths.config();
        if config_path.exists() {
            let existing = std::fs::read_to_string(&config_path)?;
            if existing != canonical {
                return Err(MageError::Config(format!(
                    "run directory {} was created with a different configuration; \
                     keep its config or start a fresh --run-dir",
                    paths.root.display()
                )));
            }
        } else {
            std::fs::write(&config_path, &canonical)?;
        }
        for dir in [
            paths.checkpoints(),
            paths.audio(),
            paths.reports(),
            paths.logs(),
        ] {
            std::fs::create_dir_all(dir)?;
        }

        let manifest_path = paths.manifest();
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)?;
            let loaded: RunManifest = serde_json::from_str(&text)?;
            if loaded.config_sha256 != config_hash {
                return Err(MageError::Config(format!(
                    "manifest in {} records a different config hash",
                    paths.root.display()
                )));
            }
            loaded
        } else {
            RunManifest {
                run_id: config_hash[..12].to_string(),
                config_sha256: config_hash.clone(),
                created_unix_sec: unix_now_sec(),
                events: Vec::new(),
                checkpoints: Vec::new(),
                reports: Vec::new(),
                steps: BTreeMap::new(),
            }
        };

        Ok(RunContext {
            paths,
            config,
            config_hash,
            manifest,
            command: command.to_string(),
            started: Instant::now(),
            _lock: lock,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.paths.root)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    /// Records a new checkpoint file (idempotent) and saves the manifest.
    pub fn add_checkpoint(&mut self, path: &Path) -> Result<()> {
        let rel = self.relative(path);
        if !self.manifest.checkpoints.contains(&rel) {
            self.manifest.checkpoints.push(rel);
        }
        self.save_manifest()
    }

    /// Records a new report file (idempotent) and saves the manifest.
    pub fn add_report(&mut self, path: &Path) -> Result<()> {
        let rel = self.relative(path);
        if !self.manifest.reports.contains(&rel) {
            self.manifest.reports.push(rel);
        }
        self.save_manifest()
    }

    /// Records the latest completed step for a trainer.
    pub fn set_steps(&mut self, trainer: &str, steps: u64) -> Result<()> {
        self.manifest.steps.insert(trainer.to_string(), steps);
        self.save_manifest()
    }

    /// Appends this command's completion event and releases the lock.
    pub fn finish(mut self, detail: &str) -> Result<()> {
        self.manifest.events.push(ManifestEvent {
            unix_time_sec: unix_now_sec(),
            command: self.command.clone(),
            detail: detail.to_string(),
            wall_clock_sec: self.started.elapsed().as_secs_f64(),
        });
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let tmp = self.paths.root.join(".manifest.json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.paths.manifest())?;
        Ok(())
    }
}

/// Finds the highest-step checkpoint named `<kind>-step-<N>.ckpt` in a
/// directory, if any.
pub fn latest_checkpoint(dir: &Path, kind: &str) -> Result<Option<PathBuf>> {
    let prefix = format!("{kind}-step-");
    let mut best: Option<(u64, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Canonical checkpoint path for a trainer at a step.
pub fn checkpoint_path(dir: &Path, kind: &str, step: u64) -> PathBuf {
    dir.join(format!("{kind}-step-{step:06}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};

    fn tiny_config() -> RunConfig {
        RunConfig::profile_defaults(Profile::Tiny, 5)
    }

    #[test]
    fn opening_creates_the_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run-a");
        let ctx = RunContext::open(&root, tiny_config(), "make-data").unwrap();
        assert!(ctx.paths.config().is_file());
        assert!(ctx.paths.lock().is_file());
        for sub in ["checkpoints", "audio", "reports", "logs"] {
            assert!(root.join(sub).is_dir(), "{sub} missing");
        }
        ctx.finish("done").unwrap();
        assert!(!root.join(".lock").exists(), "lock not released");
        assert!(root.join("manifest.json").is_file());
    }

    #[test]
    fn manifest_accumulates_events_across_commands() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run-b");
        let ctx = RunContext::open(&root, tiny_config(), "first").unwrap();
        ctx.finish("one").unwrap();
        let ctx = RunContext::open(&root, tiny_config(), "second").unwrap();
        assert_eq!(ctx.manifest().events.len(), 1);
        assert_eq!(ctx.manifest().events[0].command, "first");
        assert_eq!(ctx.manifest().events[0].detail, "one");
        ctx.finish("two").unwrap();

        let text = std::fs::read_to_string(root.join("manifest.json")).unwrap();
        let manifest: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest.events.len(), 2);
        assert_eq!(manifest.events[1].command, "second");
        assert_eq!(manifest.run_id.len(), 12);
    }

    #[test]
    fn lock_blocks_concurrent_commands() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run-c");
        let held = RunContext::open(&root, tiny_config(), "long-job").unwrap();
        let err = RunContext::open(&root, tiny_config(), "intruder").unwrap_err();
        assert!(err.to_string().contains("locked"), "{err}");
        drop(held);
        RunContext::open(&root, tiny_config(), "after").unwrap();
    }

    #[test]
    fn a_different_config_cannot_hijack_a_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run-d");
        RunContext::open(&root, tiny_config(), "a").unwrap().finish("").unwrap();
        let other = RunConfig::profile_defaults(Profile::Tiny, 6);
        let err = RunContext::open(&root, other, "b").unwrap_err();
        assert!(matches!(err, MageError::Config(_)), "{err}");
        assert!(err.to_string().contains("different configuration"), "{err}");
    }

    #[test]
    fn latest_checkpoint_picks_the_highest_step() {
        let dir = tempfile::tempdir().unwrap();
        for step in [10, 200, 30] {
            std::fs::write(checkpoint_path(dir.path(), "codec", step), b"x").unwrap();
        }
        std::fs::write(dir.path().join("flux-step-999.ckpt"), b"x").unwrap();
        std::fs::write(dir.path().join("codec-step-junk.ckpt"), b"x").unwrap();
        let best = latest_checkpoint(dir.path(), "codec").unwrap().unwrap();
        assert_eq!(best, checkpoint_path(dir.path(), "codec", 200));
        assert!(latest_checkpoint(dir.path(), "disc").unwrap().is_none());
    }
}
