use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "run_manifest.toml";

/// Output directory guard: refuses to replace existing files unless forced
/// and remembers what was written.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    force: bool,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Claims `name` inside the directory for writing.
    pub fn claim(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.claim(name)?;
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    outputs: &'a [String],
    inputs: &'a BTreeMap<String, String>,
    config: &'a RunConfig,
}

/// Writes `run_manifest.toml`: command, crate version, seed, inputs,
/// outputs and the resolved configuration.
pub fn write_manifest(
    out: &mut OutputDir,
    command: &str,
    config: &RunConfig,
    inputs: &BTreeMap<String, String>,
) -> Result<PathBuf> {
    let outputs = out.written().to_vec();
    let path = out.claim(MANIFEST_NAME)?;
    let text = toml::to_string(&Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.effective_seed(),
        outputs: &outputs,
        inputs,
        config,
    })
    .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
