//! Model parameter checkpoints.
//!
//! A checkpoint is versioned JSON holding every named tensor. Values are
//! written in the shortest decimal form that reparses to the same f64, so
//! save/load round trips are bit exact.

use aeg_core::model::ModelParams;
use aeg_core::tensor::Tensor;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    params: Vec<TensorEntry>,
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let entries = params
        .named()
        .map(|(name, tensor)| TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        })
        .collect();
    let doc = Checkpoint {
        format_version: FORMAT_VERSION,
        params: entries,
    };
    let mut json = serde_json::to_string(&doc)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let doc: Checkpoint = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    if doc.format_version != FORMAT_VERSION {
        bail!(
            "checkpoint {}: format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            doc.format_version
        );
    }
    let pairs = doc
        .params
        .into_iter()
        .map(|e| Ok((e.name, Tensor::from_vec(&e.shape, e.data)?)))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(pairs)
        .with_context(|| format!("checkpoint {}", path.display()))
}
