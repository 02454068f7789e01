//! Provenance record written next to every output: the command, its
//! resolved settings, and sha256 digests of every input and output file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::settings::Settings;

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunManifest {
    command: String,
    settings: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings) -> Self {
        RunManifest {
            command: command.to_string(),
            // `force` changes no output bytes, so it stays out of the record.
            settings: settings.iter().filter(|(k, _)| *k != "force").map(|(k, v)| (k.clone(), v.clone())).collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Contains no timestamps, so identical runs give identical bytes.
    pub fn render(&self) -> CliResult<String> {
        let mut s = String::new();
        let _ = writeln!(s, "manifest=affectlm-run-v1");
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "parallel={}", affectlm::parallel::is_parallel());
        for (k, v) in &self.settings {
            let _ = writeln!(s, "setting.{k}={v}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input.{}={}", p.display(), sha256_file(p)?);
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output.{}={}", p.display(), sha256_file(p)?);
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.render()?)?;
        Ok(())
    }
}

/// Manifest path for an output file or directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.txt")
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest");
        PathBuf::from(name)
    }
}
