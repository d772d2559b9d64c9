//! On-disk model snapshots: `manifest.json` plus one raw little-endian f64
//! buffer per named tensor, all in one flat directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_json;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub common: usize,
    pub per_task: usize,
    pub tasks: usize,
    pub rank: usize,
    pub d_model: usize,
    /// Adapted matrices in layer order, e.g. `layer0.query`.
    pub layers: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

fn file_name(name: &str) -> String {
    format!("{name}.bin")
}

pub fn save(model: &TransformerModel, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = model.config().clone();
    let mut tensors = Vec::new();
    let frozen = model.frozen_tensors();
    let trainable_names = model.trainable_names();
    let trainable = model.adapters().flat_map(|a| {
        let mut ts: Vec<_> = a.inventory().modules().flat_map(|m| [m.down(), m.up()]).collect();
        ts.extend(a.allocation().tensors());
        ts
    });
    let all = frozen
        .iter()
        .map(|(n, t)| (n.as_str(), *t, false))
        .chain(trainable_names.iter().map(String::as_str).zip(trainable).map(|(n, t)| (n, t, true)));
    for (name, tensor, is_trainable) in all {
        let file = file_name(name);
        let bytes: Vec<u8> = tensor.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file,
            trainable: is_trainable,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        common: config.common,
        per_task: config.per_task,
        tasks: config.tasks,
        rank: config.rank,
        d_model: config.d_model,
        layers: model.adapters().map(|a| a.slot().name()).collect(),
        config,
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<TransformerModel> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Contract(format!(
            "checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut model = TransformerModel::new(manifest.config.clone())?;
    let slots = model.named_tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} tensors, model has {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for ((name, tensor), entry) in slots.into_iter().zip(&manifest.tensors) {
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Contract(format!(
                "checkpoint tensor `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() != tensor.numel() * 8 {
            return Err(Error::Contract(format!(
                "`{}` holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                tensor.numel() * 8
            )));
        }
        for (x, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RoutingVariant;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            tasks: 3,
            seed: 5,
            ..ModelConfig::default()
        }
        .with_variant(RoutingVariant::CPoly);
        let mut model = TransformerModel::new(config).unwrap();
        for (i, (_, t)) in model.named_tensors_mut().into_iter().enumerate() {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x += (i * 31 + j) as f64 * 1e-7;
            }
        }
        let manifest = save(&model, dir.path()).unwrap();
        assert_eq!(manifest.layers.len(), 6);
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded, model);
        fs::write(dir.path().join(&manifest.tensors[0].file), [0u8; 8]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
