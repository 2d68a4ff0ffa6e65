//! Checkpoint directories: one CTNS file per named parameter plus a JSON manifest that also
//! carries the run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::Model;
use crate::tensor::ctns;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: RunConfig,
    pub parameters: Vec<ParamEntry>,
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = &model.store;
    let mut parameters = Vec::with_capacity(store.len());
    for (name, value) in store.names().iter().zip(store.values()) {
        let file = format!("{name}.ctns");
        ctns::write(&dir.join(&file), value)?;
        parameters.push(ParamEntry {
            name: name.clone(),
            file,
            shape: value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: 1,
        config: model.config.clone(),
        parameters,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    imageio::write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    if m.format != 1 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
    }
    m.config.validate()?;
    Ok(m)
}

/// Rebuilds the model from the stored configuration and overwrites every parameter.
pub fn load(dir: &Path) -> Result<Model> {
    let m = read_manifest(dir)?;
    let mut model = Model::new(&m.config)?;
    if m.parameters.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            m.parameters.len(),
            model.store.len()
        )));
    }
    for e in &m.parameters {
        if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with('.') {
            return Err(Error::Checkpoint(format!("invalid parameter file name {:?}", e.file)));
        }
        let t = ctns::read(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: manifest shape {:?}, file shape {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        model.store.set(&e.name, t)?;
    }
    Ok(model)
}

/// Checks that a dataset matches the checkpoint's input contract.
pub fn check_compatible(config: &RunConfig, frames: usize, height: usize, width: usize, audio_dim: usize, classes: usize) -> Result<()> {
    let want = (config.frames, config.height, config.width, config.audio_dim, config.classes);
    let got = (frames, height, width, audio_dim, classes);
    if want != got {
        return Err(Error::Checkpoint(format!(
            "model expects (T, H, W, D, K_c) = {want:?}, data has {got:?}"
        )));
    }
    Ok(())
}
