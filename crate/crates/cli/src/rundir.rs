//! Run directories under the runs root, their lockfile and manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use upesv::Error;

pub const RUNS_ENV: &str = "UPESV_RUNS_DIR";
const LOCK_NAME: &str = ".lock";
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of the running executable, standing in for a code version.
pub fn code_version() -> String {
    std::env::current_exe()
        .ok()
        .and_then(|p| fs::read(p).ok())
        .map_or_else(|| "unknown".into(), |b| sha256_hex(&b))
}

/// An exclusively locked directory `runs_root()/run_id`. The lock is
/// released when the value is dropped.
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
    lock: PathBuf,
    manifest: Value,
}

impl RunDir {
    pub fn create(command: &str, run_id: Option<String>) -> Result<Self> {
        let id = run_id.unwrap_or_else(|| format!("{command}-{}-{}", unix_millis(), std::process::id()));
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::config("run-id", format!("`{id}` is not a plain directory name")).into());
        }
        let path = runs_root().join(&id);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|_| Error::config("run-id", format!("run directory {} is locked by another command", path.display())))?;
        let _ = writeln!(f, "{}", std::process::id());
        if path.join(MANIFEST_NAME).exists() {
            let _ = fs::remove_file(&lock);
            return Err(Error::config("run-id", format!("run {id} already exists")).into());
        }
        Ok(RunDir {
            id,
            path,
            lock,
            manifest: Value::Null,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Write the manifest; called before any training step.
    pub fn write_manifest(&mut self, command: &str, config: Value, datasets: Value, seeds: &[u64]) -> Result<()> {
        self.manifest = json!({
            "run_id": self.id,
            "command": command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "config": config,
            "datasets": datasets,
            "code_version": code_version(),
            "seeds": seeds,
            "started_unix_ms": unix_millis().to_string(),
            "finished_unix_ms": Value::Null,
        });
        self.save_manifest()
    }

    /// Add or replace a top-level manifest entry.
    pub fn record(&mut self, key: &str, value: Value) -> Result<()> {
        self.manifest[key] = value;
        self.save_manifest()
    }

    pub fn finish_manifest(&mut self) -> Result<()> {
        self.manifest["finished_unix_ms"] = json!(unix_millis().to_string());
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.file(MANIFEST_NAME);
        let mut f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        f.write_all(serde_json::to_string_pretty(&self.manifest)?.as_bytes())?;
        Ok(())
    }

    pub fn manifest(&self) -> &Value {
        &self.manifest
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
