//! Weight bundles: a directory of named raw arrays plus a JSON index.
//!
//! Arrays are stored as little-endian f64, which is exact for both f32
//! and f64 model parameters, so a save/load round trip is bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchitectureGraph, LayerOp, ModelError, ModelParameters};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("array file {0} has wrong size")]
    BadArraySize(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleLayer {
    pub weight_shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

/// Named parameter arrays, ordered by layer name.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct WeightBundle {
    pub layers: BTreeMap<String, BundleLayer>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    weight_shape: Vec<usize>,
    weight_len: usize,
    bias_len: usize,
    frozen: bool,
    file: String,
}

impl WeightBundle {
    /// Snapshot the parameters of a built model.
    pub fn from_params<T: Scalar>(
        graph: &ArchitectureGraph,
        params: &ModelParameters<T>,
    ) -> Self {
        let mut layers = BTreeMap::new();
        for (node, lp) in graph.nodes.iter().zip(&params.layers) {
            let Some(lp) = lp else { continue };
            let weight_shape = match &node.op {
                LayerOp::Conv(s) => vec![s.kh, s.kw, s.in_ch, s.out_ch],
                LayerOp::Dense { in_dim, out_dim } => vec![*in_dim, *out_dim],
                _ => continue,
            };
            layers.insert(
                node.name.clone(),
                BundleLayer {
                    weight_shape,
                    weights: lp.weights.iter().map(|v| v.to_f64_lossy()).collect(),
                    bias: lp.bias.iter().map(|v| v.to_f64_lossy()).collect(),
                    frozen: lp.frozen,
                },
            );
        }
        Self { layers }
    }

    /// Copy bundle arrays into matching graph layers; every bundle entry
    /// must name an existing layer with identical array sizes.
    pub fn apply_to<T: Scalar>(
        &self,
        graph: &ArchitectureGraph,
        params: &mut ModelParameters<T>,
    ) -> Result<(), ModelError> {
        for (name, layer) in &self.layers {
            let idx = graph.node_index(name).ok_or_else(|| {
                ModelError::ShapeMismatch(format!("bundle layer '{name}' not in graph"))
            })?;
            let lp = params.layers[idx].as_mut().ok_or_else(|| {
                ModelError::ShapeMismatch(format!("graph node '{name}' has no parameters"))
            })?;
            if lp.weights.len() != layer.weights.len() || lp.bias.len() != layer.bias.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "bundle layer '{name}': {}x{} arrays vs graph {}x{}",
                    layer.weights.len(),
                    layer.bias.len(),
                    lp.weights.len(),
                    lp.bias.len()
                )));
            }
            lp.weights = layer.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
            lp.bias = layer.bias.iter().map(|&v| T::from_f64_lossy(v)).collect();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        fs::create_dir_all(dir)?;
        let mut index = BTreeMap::new();
        for (name, layer) in &self.layers {
            let file = format!("{name}.f64");
            let mut buf =
                Vec::with_capacity((layer.weights.len() + layer.bias.len()) * 8);
            for v in layer.weights.iter().chain(&layer.bias) {
                buf.write_all(&v.to_le_bytes())?;
            }
            fs::write(dir.join(&file), buf)?;
            index.insert(
                name.clone(),
                IndexEntry {
                    weight_shape: layer.weight_shape.clone(),
                    weight_len: layer.weights.len(),
                    bias_len: layer.bias.len(),
                    frozen: layer.frozen,
                    file,
                },
            );
        }
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let index: BTreeMap<String, IndexEntry> =
            serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let mut layers = BTreeMap::new();
        for (name, entry) in index {
            let mut file = fs::File::open(dir.join(&entry.file))?;
            let mut buf = Vec::new();
            file.read_to_end(&mut buf)?;
            let expect = (entry.weight_len + entry.bias_len) * 8;
            if buf.len() != expect {
                return Err(BundleError::BadArraySize(entry.file));
            }
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (weights, bias) = values.split_at(entry.weight_len);
            layers.insert(
                name,
                BundleLayer {
                    weight_shape: entry.weight_shape,
                    weights: weights.to_vec(),
                    bias: bias.to_vec(),
                    frozen: entry.frozen,
                },
            );
        }
        Ok(Self { layers })
    }
}
