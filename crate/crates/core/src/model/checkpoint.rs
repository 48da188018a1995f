//! Model checkpoints: a TOML manifest next to a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec};
use super::loss::LossWeights;
use super::split::{SplitModel, Task};
use crate::{fnv1a64, Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    task: Task,
    input_dim: usize,
    input_rate: f64,
    split_layer: usize,
    frame_rate: f64,
    layers: Vec<String>,
    loss: LossWeights,
    weights: String,
    /// Start of each layer's weights, then its bias, in `f32` units.
    offsets: Vec<[usize; 2]>,
    model_hash: String,
}

fn descriptor(model: &SplitModel<f32>) -> String {
    let layers: Vec<String> = model.specs().iter().map(ToString::to_string).collect();
    format!(
        "{:?}|{}|{}|{}|{}",
        model.task(),
        model.input_dim(),
        model.input_rate(),
        layers.join(";"),
        model.split()
    )
}

fn blob(model: &SplitModel<f32>) -> Vec<u8> {
    model.parameters().iter().flat_map(|p| p.to_le_bytes()).collect()
}

/// FNV-1a over the parameter bytes followed by the architecture descriptor
/// (task, input size and rate, layers, split point).
pub fn model_hash(model: &SplitModel<f32>) -> u64 {
    let mut bytes = blob(model);
    bytes.extend_from_slice(descriptor(model).as_bytes());
    fnv1a64(&bytes)
}

fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.as_os_str().to_owned();
    name.push(".bin");
    PathBuf::from(name)
}

/// A model together with the loss weights it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SplitModel<f32>,
    pub loss: LossWeights,
}

/// Writes `path` (manifest) and `path.bin` (weights).
pub fn save_model(model: &SplitModel<f32>, loss: &LossWeights, path: &Path) -> Result<()> {
    let bin = blob_path(path);
    let mut offsets = Vec::new();
    let mut pos = 0;
    for l in model.layers() {
        offsets.push([pos, pos + l.weight.len()]);
        pos += l.weight.len() + l.bias.len();
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        task: model.task(),
        input_dim: model.input_dim(),
        input_rate: model.input_rate(),
        split_layer: model.split(),
        frame_rate: model.frame_rate(),
        layers: model.specs().iter().map(ToString::to_string).collect(),
        loss: *loss,
        offsets,
        weights: bin.file_name().unwrap().to_string_lossy().into_owned(),
        model_hash: format!("{:016x}", model_hash(model)),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&bin, blob(model))?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`], verifying its hash.
pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", m.version)));
    }
    m.loss.validate()?;
    let specs = m
        .layers
        .iter()
        .map(|s| s.parse::<LayerSpec>())
        .collect::<Result<Vec<_>>>()?;
    let layers = specs.into_iter().map(Layer::zeros).collect();
    let mut model = SplitModel::from_layers(m.task, m.input_dim, m.input_rate, layers, m.split_layer)?;
    let bin = path.parent().unwrap_or(Path::new(".")).join(&m.weights);
    let bytes = fs::read(&bin)?;
    if bytes.len() != model.parameter_count() * 4 {
        return Err(Error::framing(
            bytes.len().min(model.parameter_count() * 4),
            format!(
                "weights file holds {} bytes, the architecture needs {}",
                bytes.len(),
                model.parameter_count() * 4
            ),
        ));
    }
    let params: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_parameters(&params)?;
    let expected = u64::from_str_radix(&m.model_hash, 16)
        .map_err(|_| Error::Config(format!("bad model_hash {:?}", m.model_hash)))?;
    let found = model_hash(&model);
    if expected != found {
        return Err(Error::ModelMismatch { expected, found });
    }
    Ok(Checkpoint { model, loss: m.loss })
}
