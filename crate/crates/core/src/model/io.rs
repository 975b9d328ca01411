//! Versioned JSON checkpoints, row-major float64 like the tree documents.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use super::{DecoderLayer, FrozenFlags, Head, ModelConfig, ToyModel};
use crate::error::{HpptError, Result};
use crate::prompt_tree::{row_major, ClassId};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDocument {
    pub class_id: ClassId,
    pub weight: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    pub config: ModelConfig,
    pub encoder_proj: Vec<f64>,
    pub layers: Vec<LayerDocument>,
    pub heads: Vec<HeadDocument>,
    pub frozen_decoder: bool,
    pub frozen_heads: BTreeSet<ClassId>,
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(HpptError::Format(format!(
            "{what}: expected {rows}x{cols} values, found {}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl ToyModel {
    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            encoder_proj: row_major(&self.encoder_proj),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weight: row_major(&l.weight),
                    bias: l.bias.iter().copied().collect(),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(&c, h)| HeadDocument {
                    class_id: c,
                    weight: h.weight.iter().copied().collect(),
                    bias: h.bias,
                })
                .collect(),
            frozen_decoder: self.frozen.decoder,
            frozen_heads: self.frozen.heads.clone(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.version != CHECKPOINT_VERSION {
            return Err(HpptError::Format(format!("unsupported checkpoint version {}", doc.version)));
        }
        let cfg = doc.config.clone();
        cfg.validate()?;
        let b = cfg.b;
        let encoder_proj = from_row_major(cfg.patch_dim(), b, &doc.encoder_proj, "encoder_proj")?;
        if doc.layers.len() != cfg.layers {
            return Err(HpptError::Format(format!(
                "expected {} layers, found {}",
                cfg.layers,
                doc.layers.len()
            )));
        }
        let layers = doc
            .layers
            .iter()
            .map(|l| {
                if l.bias.len() != b {
                    return Err(HpptError::Format("layer bias has wrong width".into()));
                }
                Ok(DecoderLayer {
                    weight: from_row_major(b, b, &l.weight, "layer weight")?,
                    bias: RowDVector::from_row_slice(&l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut heads = BTreeMap::new();
        for h in &doc.heads {
            let weight = from_row_major(b, 1, &h.weight, "head weight")?;
            if heads.insert(h.class_id, Head { weight, bias: h.bias }).is_some() {
                return Err(HpptError::Format(format!("duplicate head {}", h.class_id)));
            }
        }
        Ok(ToyModel {
            config: cfg,
            encoder_proj,
            layers,
            heads,
            frozen: FrozenFlags {
                decoder: doc.frozen_decoder,
                heads: doc.frozen_heads.clone(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let mut model = ToyModel::new(ModelConfig::default(), 42).unwrap();
        model.add_head(ClassId(3), 1).unwrap();
        model.layers[1].bias[2] = 0.1 + 0.2;
        model.freeze_all();
        let back = ToyModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let model = ToyModel::new(ModelConfig::default(), 0).unwrap();
        let mut doc = model.to_document();
        doc.layers[0].weight.pop();
        assert!(matches!(ToyModel::from_document(&doc), Err(HpptError::Format(_))));
    }
}
