use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::Serialize;
use siu_core::text::sha256_hex;

/// Enough to reproduce a command's outputs: config hash, input and output hashes,
/// seeds and versions. No timestamps, so reruns write identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub config_path: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config_json: &str, config_path: Option<&Path>) -> Self {
        let versions = [("siu-cli", env!("CARGO_PKG_VERSION")), ("siu-core", env!("CARGO_PKG_VERSION"))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        RunManifest {
            command: command.into(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            config_path: config_path.map(|p| p.display().to_string()),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            versions,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> io::Result<&mut Self> {
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> io::Result<&mut Self> {
        self.outputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(self)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        std::fs::write(dir.join(format!("{stem}.json")), text)
    }
}

/// File hash, or a hash over the sorted (name, hash) list for a directory.
fn hash_path(path: &Path) -> io::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        let mut acc = String::new();
        for e in entries {
            acc.push_str(&e.file_name().to_string_lossy());
            acc.push('\0');
            acc.push_str(&hash_path(&e.path())?);
            acc.push('\n');
        }
        Ok(sha256_hex(acc.as_bytes()))
    } else {
        Ok(sha256_hex(&std::fs::read(path)?))
    }
}
