use std::path::Path;

use serde_json::json;

use super::ModelConfig;
use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};

/// Tensor names inside one block, in storage order.
pub const LAYER_TENSORS: [&str; 8] = [
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "ffn.up",
    "ffn.down",
    "attn_norm",
    "ffn_norm",
];

/// Parameters of one pre-norm residual block.
///
/// Projections use the row-vector convention `y = x·W`, so `query` is
/// `d_model x d_model`, `up` is `d_model x d_ff` and `down` is `d_ff x d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub up: Tensor,
    pub down: Tensor,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
}

impl LayerParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            query: Tensor::zeros(vec![d, d]),
            key: Tensor::zeros(vec![d, d]),
            value: Tensor::zeros(vec![d, d]),
            output: Tensor::zeros(vec![d, d]),
            up: Tensor::zeros(vec![d, f]),
            down: Tensor::zeros(vec![f, d]),
            attn_norm: Tensor::zeros(vec![d]),
            ffn_norm: Tensor::zeros(vec![d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.up,
            &self.down,
            &self.attn_norm,
            &self.ffn_norm,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.up,
            &mut self.down,
            &mut self.attn_norm,
            &mut self.ffn_norm,
        ]
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 8] {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, f],
            vec![f, d],
            vec![d],
            vec![d],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All values in storage order, widened to f64.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().map(|&v| v as f64))
            .collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.bit_eq(b))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// A full model: embedding, ordered blocks, final norm and output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    /// `d_model`
    pub final_norm: Tensor,
    /// `d_model x vocab_size`
    pub head: Tensor,
}

impl ModelCheckpoint {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Checks shapes and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::invalid(format!(
                "config declares {} layers, checkpoint has {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name}: non-finite value")));
            }
            Ok(())
        };
        check("embedding", &self.embedding, &[cfg.vocab_size, cfg.d_model])?;
        check("final_norm", &self.final_norm, &[cfg.d_model])?;
        check("head", &self.head, &[cfg.d_model, cfg.vocab_size])?;
        let shapes = LayerParams::expected_shapes(cfg);
        for (i, layer) in self.layers.iter().enumerate() {
            for ((t, name), shape) in layer.tensors().iter().zip(LAYER_TENSORS).zip(&shapes) {
                check(&format!("layers.{i}.{name}"), t, shape)?;
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding.bit_eq(&other.embedding)
            && self.final_norm.bit_eq(&other.final_norm)
            && self.head.bit_eq(&other.head)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(json!({
            "kind": "checkpoint",
            "config": self.config,
        }));
        f.push("embedding", self.embedding.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, name) in layer.tensors().iter().zip(LAYER_TENSORS) {
                f.push(format!("layers.{i}.{name}"), (*t).clone());
            }
        }
        f.push("final_norm", self.final_norm.clone());
        f.push("head", self.head.clone());
        f
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let cfg_value = file
            .meta
            .get("config")
            .ok_or_else(|| Error::format(8, "__meta__ has no config"))?;
        let config: ModelConfig = serde_json::from_value(cfg_value.clone())
            .map_err(|e| Error::format(8, format!("bad config in __meta__: {e}")))?;
        config
            .validate()
            .map_err(|e| Error::format(8, e.to_string()))?;

        let take = |name: &str| -> Result<Tensor> {
            file.get(name)
                .cloned()
                .ok_or_else(|| Error::format(8, format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut layer = LayerParams::zeros(&config);
            for (slot, name) in layer.tensors_mut().into_iter().zip(LAYER_TENSORS) {
                *slot = take(&format!("layers.{i}.{name}"))?;
            }
            layers.push(layer);
        }
        let expected = 3 + 8 * config.n_layers;
        if file.tensors.len() != expected {
            return Err(Error::format(
                8,
                format!(
                    "header lists {} tensors, config with {} layers implies {expected}",
                    file.tensors.len(),
                    config.n_layers
                ),
            ));
        }
        let ckpt = Self {
            embedding: take("embedding")?,
            final_norm: take("final_norm")?,
            head: take("head")?,
            layers,
            config,
        };
        ckpt.validate().map_err(|e| Error::format(8, e.to_string()))?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_tensor_file().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes)?)
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    ckpt.to_tensor_file().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_tensor_file(&TensorFile::read(path)?)
}
