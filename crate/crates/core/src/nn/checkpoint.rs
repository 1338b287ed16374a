//! Checkpoint format: one JSON manifest plus one little-endian f32 raw blob
//! per weight tensor, named by layer index.
//!
//! `save(load(dir))` reproduces the directory bit-exactly; loading converts
//! the stored f32 values into the engine's f64 weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerGraph, LayerKind, LayerSpec, LossKind};
use crate::error::{Error, Result};
use crate::tensor::{QuantParams, Tensor};

pub const MANIFEST_NAME: &str = "model.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shape: Vec<usize>,
    loss: LossKind,
    /// Training seed, recorded for provenance.
    seed: Option<u64>,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    quantize_activations: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_file: Option<String>,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            path.display(),
            n * 4,
            shape,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Writes `model` into `dir` (created if missing).
pub fn save(model: &LayerGraph, dir: &Path, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let weight_file = layer.weights.as_ref().map(|_| format!("layer_{i:03}_w.f32"));
        let bias_file = layer.bias.as_ref().map(|_| format!("layer_{i:03}_b.f32"));
        if let (Some(w), Some(f)) = (&layer.weights, &weight_file) {
            write_blob(&dir.join(f), w)?;
        }
        if let (Some(b), Some(f)) = (&layer.bias, &bias_file) {
            write_blob(&dir.join(f), b)?;
        }
        entries.push(LayerEntry {
            kind: layer.kind,
            window: (layer.window > 0).then_some(layer.window),
            quantize_activations: layer.quantize_activations,
            act_quant: layer.act_quant,
            weight_quant: layer.weight_quant,
            weight_shape: layer.weights.as_ref().map(|w| w.shape().to_vec()),
            weight_file,
            bias_shape: layer.bias.as_ref().map(|b| b.shape().to_vec()),
            bias_file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        loss: model.loss,
        seed,
        layers: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

/// Loads a checkpoint saved by [`save`].
pub fn load(dir: &Path) -> Result<LayerGraph> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut specs = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let spec = match e.kind {
            LayerKind::Conv2d => {
                let shape = e.weight_shape.as_ref().ok_or_else(|| {
                    Error::Format(format!("layer {i}: conv2d without weight_shape"))
                })?;
                let [oc, _, kh, _] = shape.as_slice() else {
                    return Err(Error::Format(format!(
                        "layer {i}: conv2d weight shape {shape:?}"
                    )));
                };
                LayerSpec::Conv2d {
                    out_channels: *oc,
                    kernel: *kh,
                }
            }
            LayerKind::Fc => {
                let shape = e.weight_shape.as_ref().ok_or_else(|| {
                    Error::Format(format!("layer {i}: fc without weight_shape"))
                })?;
                LayerSpec::Fc {
                    out_features: shape[0],
                }
            }
            LayerKind::Relu => LayerSpec::Relu,
            LayerKind::MaxPool => LayerSpec::MaxPool {
                window: e.window.unwrap_or(2),
            },
            LayerKind::AvgPool => LayerSpec::AvgPool {
                window: e.window.unwrap_or(2),
            },
            LayerKind::Flatten => LayerSpec::Flatten,
        };
        specs.push(spec);
    }
    let mut model = LayerGraph::build(manifest.input_shape.clone(), &specs, manifest.loss)?;
    for (i, (layer, entry)) in model.layers.iter_mut().zip(&manifest.layers).enumerate() {
        load_layer_params(dir, i, layer, entry)?;
    }
    Ok(model)
}

fn load_layer_params(dir: &Path, i: usize, layer: &mut Layer, entry: &LayerEntry) -> Result<()> {
    layer.quantize_activations = entry.quantize_activations;
    layer.act_quant = entry.act_quant;
    layer.weight_quant = entry.weight_quant;
    if let (Some(shape), Some(file)) = (&entry.weight_shape, &entry.weight_file) {
        let expected = layer.weights.as_ref().map(|w| w.shape().to_vec());
        if expected.as_deref() != Some(shape.as_slice()) {
            return Err(Error::Format(format!(
                "layer {i}: weight shape {shape:?} does not match graph {expected:?}"
            )));
        }
        layer.weights = Some(read_blob(&dir.join(file), shape)?);
    }
    if let (Some(shape), Some(file)) = (&entry.bias_shape, &entry.bias_file) {
        layer.bias = Some(read_blob(&dir.join(file), shape)?);
    }
    Ok(())
}
