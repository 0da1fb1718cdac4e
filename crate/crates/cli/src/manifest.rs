use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use patchcam::imageio::write_atomic;
use serde::{Deserialize, Serialize};

/// Record written next to every command output. `argv` plus `cwd` is
/// enough to re-run the command; `config` is the fully resolved
/// configuration for readers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            cwd: std::env::current_dir().context("reading the working directory")?,
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
        })
    }

    pub fn finish(mut self, elapsed: Duration, path: &Path) -> Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        write_atomic(path, &serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Manifest path for a directory output.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// `argv` with the value of `--out` replaced.
pub fn replace_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut v = argv.to_vec();
    let new = out.to_string_lossy().into_owned();
    for i in 0..v.len() {
        if v[i] == "--out" && i + 1 < v.len() {
            v[i + 1] = new.clone();
        } else if v[i].starts_with("--out=") {
            v[i] = format!("--out={new}");
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_replacement() {
        let argv: Vec<String> = ["gen-data", "--out", "a", "--n", "3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(replace_out(&argv, Path::new("b"))[2], "b");
        let argv = vec!["train".to_string(), "--out=x.sfm".to_string()];
        assert_eq!(replace_out(&argv, Path::new("y.sfm"))[1], "--out=y.sfm");
        assert_eq!(beside(Path::new("m.sfm")), PathBuf::from("m.sfm.manifest.json"));
    }
}
