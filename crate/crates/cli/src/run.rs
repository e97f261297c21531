//! Run directories and the manifests that hash every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dda_core::corpus::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_DIR: &str = "manifests";
/// Key prefix for files read from outside the run directory.
const EXTERNAL: &str = "external:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub created_at: String,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    /// Consumed files, run-relative unless marked external.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// `<root>/runs/<unix-seconds>-<8 hex of the config hash>` unless `out` names
/// the directory. The root defaults to the working directory and can be
/// moved with `DDA_RUN_ROOT`.
pub fn resolve_dir(out: Option<&Path>, config_hash: &str) -> PathBuf {
    if let Some(p) = out {
        return p.to_path_buf();
    }
    let root = std::env::var_os("DDA_RUN_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    root.join("runs").join(format!("{secs}-{}", &config_hash[..8]))
}

/// Tracks what one command reads and writes inside a run directory.
pub struct Run {
    pub dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl Run {
    pub fn open(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self {
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: BTreeMap::new(),
            warnings: Vec::new(),
        })
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.dir.join(rel).is_file()
    }

    pub fn read(&mut self, rel: &str) -> Result<Vec<u8>, CliError> {
        let path = self.dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| {
            CliError::Runtime(format!("{}: {e} (run the stage that produces it first)", path.display()))
        })?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, rel: &str) -> Result<T, CliError> {
        let bytes = self.read(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Runtime(format!("{rel}: {e}")))
    }

    pub fn note_external(&mut self, path: &Path) -> Result<(), CliError> {
        let abs = std::fs::canonicalize(path).map_err(|e| io_err(path, e))?;
        let bytes = std::fs::read(&abs).map_err(|e| io_err(&abs, e))?;
        self.inputs.insert(format!("{EXTERNAL}{}", abs.display()), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &String> {
        self.outputs.keys()
    }

    /// Writes `manifests/<name>.json` and returns its path.
    pub fn finish(self, name: &str, config: &Config) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: name.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed: config.seed,
            config_echo: config.to_json(),
            input_hashes: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            details: self.details,
            warnings: self.warnings,
        };
        let path = self.dir.join(MANIFEST_DIR).join(format!("{name}.json"));
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| io_err(&path, e))?;
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// Re-hashes every file named by every manifest in `dir`. Returns the number
/// of files checked.
pub fn verify(dir: &Path) -> Result<usize, CliError> {
    let mdir = dir.join(MANIFEST_DIR);
    let Ok(entries) = std::fs::read_dir(&mdir) else {
        return Ok(0);
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut checked = 0;
    for mpath in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
        let bytes = std::fs::read(mpath).map_err(|e| io_err(mpath, e))?;
        let m: RunManifest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", mpath.display())))?;
        for (key, want) in m.input_hashes.iter().chain(&m.outputs) {
            let path = match key.strip_prefix(EXTERNAL) {
                Some(abs) => PathBuf::from(abs),
                None => dir.join(key),
            };
            let got = std::fs::read(&path).map(|b| sha256_hex(&b)).map_err(|e| {
                CliError::Runtime(format!("verify: {} recorded by {}: {e}", path.display(), m.command))
            })?;
            if &got != want {
                return Err(CliError::Runtime(format!(
                    "verify: {} changed since {} recorded it (sha256 {got}, expected {want})",
                    path.display(),
                    m.command
                )));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
