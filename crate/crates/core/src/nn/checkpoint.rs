//! Checkpoint directory: `manifest.json` plus one flat little-endian binary
//! per tensor (`params/`, and `adam_m/`, `adam_v/` when optimizer state is
//! saved).

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{decode_le, encode_le, AdamWConfig, OptimizerState, ParamStore, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "brainsbi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    /// Free-form metadata supplied by the caller (architecture, data hashes).
    pub metadata: Value,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    optimizer: Option<&OptimizerState<T>>,
    metadata: Value,
) -> Result<()> {
    let mut subdirs = vec!["params"];
    if optimizer.is_some() {
        subdirs.extend(["adam_m", "adam_v"]);
    }
    for sub in &subdirs {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut tensors = Vec::with_capacity(store.len());
    for (i, id) in store.ids().enumerate() {
        let name = store.name(id).to_string();
        let file = file_name(&name);
        let value = store.value(id);
        fs::write(dir.join("params").join(&file), encode_le(value.iter().copied()))?;
        if let Some(opt) = optimizer {
            fs::write(dir.join("adam_m").join(&file), encode_le(opt.first[i].iter().copied()))?;
            fs::write(dir.join("adam_v").join(&file), encode_le(opt.second[i].iter().copied()))?;
        }
        tensors.push(TensorEntry {
            name,
            shape: value.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.into(),
        tensors,
        optimizer: optimizer.map(|o| OptimizerEntry {
            config: o.config,
            step: o.step,
        }),
        metadata,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_tensor<T: Scalar>(path: &Path, shape: &[usize]) -> Result<Vec<T>> {
    let bytes = fs::read(path)?;
    let data = decode_le::<T>(&bytes).ok_or_else(|| Error::artifact(path, "truncated tensor file"))?;
    if data.len() != shape.iter().product::<usize>() {
        return Err(Error::artifact(path, format!("expected shape {shape:?}")));
    }
    Ok(data)
}

pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
) -> Result<(ParamStore<T>, Option<OptimizerState<T>>, CheckpointManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::artifact(&manifest_path, "unsupported checkpoint format"));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::artifact(
            &manifest_path,
            format!("checkpoint dtype {} but {} requested", manifest.dtype, T::DTYPE),
        ));
    }
    let mut parts = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let data = read_tensor::<T>(&dir.join("params").join(&t.file), &t.shape)?;
        parts.push((t.name.clone(), t.shape.clone(), data));
    }
    let store = ParamStore::from_parts(parts)?;
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(entry) => {
            let mut state = OptimizerState::new(&store, entry.config);
            state.step = entry.step;
            for (i, t) in manifest.tensors.iter().enumerate() {
                let shape = ndarray::IxDyn(&t.shape);
                let m = read_tensor::<T>(&dir.join("adam_m").join(&t.file), &t.shape)?;
                let v = read_tensor::<T>(&dir.join("adam_v").join(&t.file), &t.shape)?;
                state.first[i] = ArrayD::from_shape_vec(shape.clone(), m).expect("size checked");
                state.second[i] = ArrayD::from_shape_vec(shape, v).expect("size checked");
            }
            Some(state)
        }
    };
    Ok((store, optimizer, manifest))
}
