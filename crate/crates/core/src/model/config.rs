use serde::{Deserialize, Serialize};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `down(act(up(x)))`
    Plain,
    /// `down(act(gate(x)) ⊙ up(x))`
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

/// Missing fields take the values of the default 4-layer toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_kind: FfnKind,
    pub norm_kind: NormKind,
    pub ffn_activation: ActivationSpec,
    /// Activation inserted after both pre-sublayer norms (stage-2 surgery).
    pub post_norm_activation: Option<ActivationSpec>,
    pub tie_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 256,
            max_seq: 256,
            ffn_kind: FfnKind::Plain,
            norm_kind: NormKind::Layernorm,
            ffn_activation: ActivationSpec::Gelu,
            post_norm_activation: None,
            tie_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::config("model.vocab_size", "exceeds u32 token range"));
        }
        self.ffn_activation
            .validate()
            .map_err(|e| Error::config("model.ffn_activation", e.to_string()))?;
        if let Some(a) = &self.post_norm_activation {
            a.validate()
                .map_err(|e| Error::config("model.post_norm_activation", e.to_string()))?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn norm_params(&self) -> usize {
        match self.norm_kind {
            NormKind::Layernorm => 2 * self.d_model,
            NormKind::Rmsnorm => self.d_model,
        }
    }

    /// Closed-form parameter count.
    pub fn n_params(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ffn, self.vocab_size);
        let ffn_mats = match self.ffn_kind {
            FfnKind::Plain => 2,
            FfnKind::Gated => 3,
        };
        let per_layer = 2 * self.norm_params() + 4 * d * d + ffn_mats * d * f;
        let head = if self.tie_head { 0 } else { d * v };
        v * d + self.max_seq * d + self.n_layers * per_layer + self.norm_params() + head
    }
}
