//! Desk-scale pre-norm MoE transformer with hand-written backward pass.
//!
//! Block structure per layer: `h ← h + attn(RMSNorm(h))`, then
//! `h ← h + moe(RMSNorm(h))`. Attention is grouped-query with per-head
//! RMS-normalized queries and keys. Experts are SwiGLU:
//! `down(silu(gate(x)) ⊙ up(x))`. Position enters as a fixed sinusoidal
//! table added to the token embedding; the table is generated at a base
//! width and tiled cyclically across the hidden size, so duplicating hidden
//! channels duplicates the positional signal with them.

mod gradcheck;
mod pass;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, NumArray, Rng};

pub use gradcheck::{compare_gradients, gradcheck, relative_error, GradcheckReport, ParamError};
pub use pass::{
    block_forward, forward, forward_backward, moe_forward, rmsnorm_forward, Batch, Expert,
    ForwardOutput, ForwardTrace, Routing, SublayerKind, SublayerTrace,
};

/// Architecture extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_kv: usize,
    pub d_head: usize,
    pub experts: usize,
    pub top_k: usize,
    pub vocab: usize,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    /// Width at which the sinusoidal position table is generated.
    pub pos_base: usize,
    /// Amplitude of the position table.
    pub pos_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            d_ffn: 32,
            n_heads: 4,
            n_kv: 2,
            d_head: 16,
            experts: 8,
            top_k: 2,
            vocab: 64,
            tie_embeddings: true,
            norm_eps: 1e-6,
            pos_base: 64,
            pos_scale: 0.125,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("n_kv", self.n_kv),
            ("d_head", self.d_head),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("vocab", self.vocab),
            ("pos_base", self.pos_base),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be >= 1")));
        }
        if self.n_heads % self.n_kv != 0 {
            return Err(Error::config(format!(
                "n_heads ({}) must be divisible by n_kv ({})",
                self.n_heads, self.n_kv
            )));
        }
        if self.top_k > self.experts {
            return Err(Error::config(format!(
                "top_k ({}) exceeds expert count ({})",
                self.top_k, self.experts
            )));
        }
        if !(self.norm_eps >= 0.0) || !self.pos_scale.is_finite() {
            return Err(Error::config("norm_eps must be >= 0 and pos_scale finite"));
        }
        Ok(())
    }

    /// Parameter names and shapes in registry order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let hq = self.n_heads * self.d_head;
        let hkv = self.n_kv * self.d_head;
        let mut out = vec![(names::EMBED.to_string(), vec![self.vocab, d])];
        if !self.tie_embeddings {
            out.push((names::LM_HEAD.to_string(), vec![self.vocab, d]));
        }
        out.push((names::FINAL_NORM.to_string(), vec![d]));
        for l in 0..self.layers {
            out.push((names::layer(l, "attn_norm"), vec![d]));
            out.push((names::layer(l, "wq"), vec![hq, d]));
            out.push((names::layer(l, "wk"), vec![hkv, d]));
            out.push((names::layer(l, "wv"), vec![hkv, d]));
            out.push((names::layer(l, "q_norm"), vec![self.d_head]));
            out.push((names::layer(l, "k_norm"), vec![self.d_head]));
            out.push((names::layer(l, "wo"), vec![d, hq]));
            out.push((names::layer(l, "mlp_norm"), vec![d]));
            out.push((names::layer(l, "router"), vec![self.experts, d]));
            for e in 0..self.experts {
                out.push((names::expert(l, e, "up"), vec![self.d_ffn, d]));
                out.push((names::expert(l, e, "gate"), vec![self.d_ffn, d]));
                out.push((names::expert(l, e, "down"), vec![d, self.d_ffn]));
            }
        }
        out
    }
}

/// Parameter naming scheme.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const LM_HEAD: &str = "lm_head";
    pub const FINAL_NORM: &str = "final_norm";

    pub fn layer(l: usize, what: &str) -> String {
        format!("layers.{l}.{what}")
    }

    pub fn expert(l: usize, e: usize, what: &str) -> String {
        format!("layers.{l}.experts.{e}.{what}")
    }

    /// The last dotted component, e.g. `up` for `layers.0.experts.3.up`.
    pub fn kind(name: &str) -> &str {
        name.rsplit('.').next().unwrap_or(name)
    }
}

/// Name-keyed collection of arrays in sorted key order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorMap(BTreeMap<String, NumArray>);

/// Gradients, keyed exactly like the parameter registry.
pub type GradientSet = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros_like(other: &TensorMap) -> Self {
        Self(
            other
                .0
                .iter()
                .map(|(k, v)| (k.clone(), NumArray::zeros(v.shape())))
                .collect(),
        )
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) -> Option<NumArray> {
        self.0.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Result<&NumArray> {
        self.0
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NumArray> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NumArray)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut NumArray)> {
        self.0.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn element_count(&self) -> usize {
        self.0.values().map(NumArray::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(NumArray::is_finite)
    }
}

/// Parameters plus the tied-head logit compensation.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: TensorMap,
    logit_scale: f64,
}

impl Model {
    /// Fresh model with gaussian weights (std `1/sqrt(fan_in)`), unit norm
    /// gains and embedding std `1/sqrt(d_model)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = TensorMap::new();
        for (name, shape) in config.parameter_shapes() {
            let kind = names::kind(&name);
            let value = if kind.ends_with("norm") {
                NumArray::filled(&shape, 1.0)
            } else {
                let std = match kind {
                    "embed" | "lm_head" => 1.0 / (config.d_model as f64).sqrt(),
                    _ => 1.0 / (shape[1] as f64).sqrt(),
                };
                sample_gaussian(&mut Rng::derived(seed, &name), &shape, 0.0, std)?
            };
            params.insert(name, value);
        }
        Ok(Self {
            config,
            params,
            logit_scale: 1.0,
        })
    }

    /// Assembles a model from explicit parameters, checking the registry.
    pub fn from_parts(config: ModelConfig, params: TensorMap, logit_scale: f64) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let p = params.get(name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        if !logit_scale.is_finite() {
            return Err(Error::Numeric("logit scale is not finite".into()));
        }
        Ok(Self {
            config,
            params,
            logit_scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&NumArray> {
        self.params.get(name)
    }

    /// Multiplier applied to logits after the output projection.
    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn set_logit_scale(&mut self, scale: f64) {
        self.logit_scale = scale;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn into_parts(self) -> (ModelConfig, TensorMap, f64) {
        (self.config, self.params, self.logit_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_shapes() {
        let m = Model::init(ModelConfig::default(), 1).unwrap();
        let shapes = m.config().parameter_shapes();
        assert_eq!(shapes.len(), m.params().len());
        assert_eq!(m.logit_scale(), 1.0);
        assert!(!m.params().contains(names::LM_HEAD));
    }

    #[test]
    fn untied_registers_head() {
        let cfg = ModelConfig {
            tie_embeddings: false,
            ..ModelConfig::default()
        };
        let m = Model::init(cfg, 1).unwrap();
        assert_eq!(m.param(names::LM_HEAD).unwrap().shape(), &[64, 64]);
    }

    #[test]
    fn config_validation() {
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_k = ModelConfig {
            top_k: 9,
            ..ModelConfig::default()
        };
        assert!(bad_k.validate().is_err());
        let zero = ModelConfig {
            vocab: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::default(), 9).unwrap();
        let b = Model::init(ModelConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
