//! Run manifests: resolved settings plus sha256 of every input and output.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::settings::Settings;

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Hash of a dataset directory: the label index and each listed file, in order.
pub fn sha256_dataset(dir: &Path) -> io::Result<String> {
    let index = fs::read_to_string(dir.join(neupath::data::LABEL_INDEX))?;
    let mut h = Sha256::new();
    h.update(index.as_bytes());
    for line in index.lines() {
        if let Some(file) = line.split_whitespace().next().filter(|f| !f.starts_with('#')) {
            h.update(fs::read(dir.join(file))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Default)]
pub struct RunManifest {
    command: String,
    settings: Vec<(String, String)>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings) -> Self {
        RunManifest {
            command: command.to_string(),
            settings: settings.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            ..Default::default()
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.push((name.to_string(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.outputs.push((name.to_string(), path.to_path_buf()));
        self
    }

    pub fn render(&self) -> io::Result<String> {
        let mut s = format!("command={}\nversion={}\n", self.command, env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.settings {
            s.push_str(&format!("setting.{k}={v}\n"));
        }
        for (kind, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for (name, path) in list {
                let hash = if path.is_dir() { sha256_dataset(path)? } else { sha256_file(path)? };
                s.push_str(&format!("{kind}.{name}={} sha256:{hash}\n", path.display()));
            }
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.render()?)
    }
}

/// `<primary>.manifest` next to the primary output.
pub fn sidecar(primary: &Path, suffix: &str) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
