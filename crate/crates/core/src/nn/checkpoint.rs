//! Versioned JSON checkpoints.
//!
//! ```json
//! {"version":1,"input_width":3,"layers":[{"activation":"sigmoid","weights":[[..],..],"biases":[..]}]}
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::network::{Activation, DenseLayer, Network};
use crate::error::{dim_err, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keep: Option<Vec<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    version: u32,
    input_width: usize,
    layers: Vec<LayerRecord>,
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            version: CHECKPOINT_VERSION,
            input_width: self.input_width,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    activation: l.activation,
                    weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                    biases: l.biases.to_vec(),
                    keep: l.keep.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_str(text)?;
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Version(record.version));
        }
        let mut layers = Vec::with_capacity(record.layers.len());
        for (i, l) in record.layers.into_iter().enumerate() {
            let rows = l.weights.len();
            let cols = l.weights.first().map_or(0, Vec::len);
            if l.weights.iter().any(|r| r.len() != cols) {
                return dim_err(format!("layer {} has ragged weight rows", i + 1));
            }
            let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
            let weights = Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::Dimension(e.to_string()))?;
            let mut layer = DenseLayer::new(weights, Array1::from(l.biases), l.activation)?;
            layer.keep = l.keep;
            layers.push(layer);
        }
        Network::new(record.input_width, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
