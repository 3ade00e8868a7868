//! Checkpoint directories: one tensor file per parameter plus a JSON
//! manifest holding the model configuration and each tensor's shape.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest<C> {
    pub kind: String,
    pub config: C,
    pub params: Vec<ParamEntry>,
}

pub fn save<C: Serialize>(dir: &Path, kind: &str, config: &C, params: &[(String, &Tensor)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        let file = format!("{name}.atrt");
        t.save(dir.join(&file))?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        params: entries,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(C, Vec<(String, Tensor)>)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let manifest: CheckpointManifest<C> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if manifest.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint kind `{}` where `{kind}` was expected",
            manifest.kind
        )));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let t = Tensor::load(dir.join(&e.file))?;
        t.expect_shape(&e.shape)?;
        params.push((e.name, t));
    }
    Ok((manifest.config, params))
}
