//! Checkpoint directories: `header.json` plus one raw little-endian f64
//! file per named parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use radvl_core::nn::params_hash;
use radvl_core::tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER: &str = "header.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    /// `phi`, `tokenizer`, `stage1` or `stage2`.
    pub component: String,
    pub seed: u64,
    pub config_hash: String,
    /// Content key of the stage (see `RunConfig::stage_keys`).
    pub stage_key: String,
    pub params_hash: String,
    pub hyperparameters: serde_json::Value,
    /// Hashes of the artifacts this one was trained from.
    pub lineage: BTreeMap<String, String>,
    /// End-of-training diagnostics.
    pub summary: BTreeMap<String, f64>,
    pub parameters: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamSet,
}

fn file_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' }).collect();
    format!("{safe}.bin")
}

impl Checkpoint {
    /// Builds the header's parameter table and hash from `params`.
    pub fn new(component: &str, params: ParamSet, hyperparameters: serde_json::Value) -> Self {
        let parameters = params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), file: file_name(name) })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            component: component.into(),
            seed: 0,
            config_hash: String::new(),
            stage_key: String::new(),
            params_hash: params_hash(&params),
            hyperparameters,
            lineage: BTreeMap::new(),
            summary: BTreeMap::new(),
            parameters,
        };
        Self { header, params }
    }

    pub fn params_hash(&self) -> &str {
        &self.header.params_hash
    }

    /// Decodes the hyperparameter block.
    pub fn hyper<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.hyperparameters.clone())
            .map_err(|e| CliError::Format(format!("{} checkpoint hyperparameters: {e}", self.header.component)))
    }

    /// Writes to `dir` through a sibling temporary directory, so an
    /// interrupted save never leaves a half-written checkpoint behind.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && !force {
            return Err(CliError::Exists(dir.display().to_string()));
        }
        let tmp = sibling(dir, "partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut header = serde_json::to_string_pretty(&self.header).expect("header serialises");
        header.push('\n');
        write(&tmp.join(HEADER), header.as_bytes())?;
        for (entry, (_, t)) in self.header.parameters.iter().zip(self.params.iter()) {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write(&tmp.join(&entry.file), &bytes)?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| CliError::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(HEADER);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let header: Header =
            serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CliError::Format(format!(
                "{}: format version {} (this build reads {FORMAT_VERSION})",
                path.display(),
                header.format_version
            )));
        }
        let mut params = ParamSet::new();
        for entry in &header.parameters {
            let file = dir.join(&entry.file);
            let bytes = fs::read(&file).map_err(|e| CliError::io(&file, e))?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * 8 {
                return Err(CliError::Format(format!(
                    "{}: {} bytes, shape {:?} needs {}",
                    file.display(),
                    bytes.len(),
                    entry.shape,
                    n * 8
                )));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| CliError::Format(e.to_string()))?;
            params.add(entry.name.clone(), t);
        }
        let actual = params_hash(&params);
        if actual != header.params_hash {
            return Err(CliError::Format(format!(
                "{}: parameter hash {actual} does not match header {}",
                dir.display(),
                header.params_hash
            )));
        }
        Ok(Self { header, params })
    }

    /// Checks that names and shapes agree with a freshly built reference.
    pub fn expect_layout(&self, reference: &ParamSet) -> Result<()> {
        let ours: Vec<(&str, &[usize])> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let theirs: Vec<(&str, &[usize])> = reference.iter().map(|(n, t)| (n, t.shape())).collect();
        if ours != theirs {
            return Err(CliError::Format(format!(
                "{} checkpoint parameters do not match its recorded architecture",
                self.header.component
            )));
        }
        Ok(())
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{suffix}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
