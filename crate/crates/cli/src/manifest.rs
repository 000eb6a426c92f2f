//! Run manifest and the output directory that records file digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, Engine, InputFile, Inputs, SCHEMA_VERSION};
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run: the configuration text, every
/// input file, the seed and the tool versions. Contains no timestamps so
/// reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub model_hash: String,
    pub config: String,
    pub inputs: BTreeMap<String, InputFile>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| CliError::Read { path: path.clone(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: not a run manifest: {e}", path.display())))
    }
}

/// Output directory collecting the digest of every file written.
pub struct RunOutput {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Write { path, source })?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn finish(self, inputs: &Inputs, command: &str, engine: Option<Engine>) -> Result<Manifest> {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: fxlv_core::VERSION.to_string(),
            command: command.to_string(),
            engine,
            seed: Some(inputs.seed),
            model_hash: inputs.model_hash(),
            config: inputs.config_text.clone(),
            inputs: inputs.files.clone(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|source| CliError::Write { path, source })?;
        Ok(manifest)
    }
}
