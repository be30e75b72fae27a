use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `out`, or `runs/<command>` when unset.
    pub fn create(out: Option<&Path>, command: &str) -> Result<Self> {
        let path = out.map_or_else(|| PathBuf::from("runs").join(command), Path::to_path_buf);
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, header: &[&str], rows: &[T]) -> Result<PathBuf> {
        let path = self.file(name);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn write_manifest(&self, command: &str, config: &RunConfig, extra: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "command": command,
            "seed": config.seed,
            "git_revision": git_revision(),
            "config": config,
            "outputs": extra,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.file("manifest.json"), text)?;
        Ok(())
    }
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}
