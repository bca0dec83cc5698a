//! Model configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Swiglu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    LearnedAbsolute,
    Rotary,
}

/// Architecture description of a decoder-only transformer.
///
/// `n_kv_heads < n_heads` selects grouped-query attention: each group of
/// `n_heads / n_kv_heads` consecutive query heads shares one key/value head
/// (key/value heads are repeated in interleaved order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub model_id: Option<String>,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `n_heads` when absent.
    #[serde(default)]
    pub n_kv_heads: Option<usize>,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f32,
    pub activation: Activation,
    pub positional: Positional,
    /// Rotary base frequency; only used when `positional == Rotary`.
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
}

fn default_rope_base() -> f32 {
    10_000.0
}

impl ModelConfig {
    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads.unwrap_or(self.n_heads)
    }

    pub fn kv_group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads()
    }

    /// Graph nodes: input + one per attention head + one per MLP + output.
    pub fn node_count(&self) -> usize {
        1 + self.n_layers * self.n_heads + self.n_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("n_layers and n_heads must be positive"));
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::config(format!(
                "d_head * n_heads must equal d_model ({} * {} != {})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        let kv = self.n_kv_heads();
        if kv == 0 || self.n_heads % kv != 0 {
            return Err(Error::config(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({kv})",
                self.n_heads
            )));
        }
        if self.n_ctx < 1 {
            return Err(Error::config("n_ctx must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be a positive real"));
        }
        if self.positional == Positional::Rotary && self.d_head % 2 != 0 {
            return Err(Error::config("rotary positions require an even d_head"));
        }
        Ok(())
    }

    /// Parse a config file. Accepts the canonical schema above, or a standard
    /// GPT-2 `config.json` (detected by the `n_embd` key) which is mapped
    /// field-by-field onto the canonical one.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let cfg: ModelConfig = if value.get("n_embd").is_some() {
            Self::from_gpt2_value(&value)?
        } else {
            serde_json::from_value(value)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_gpt2_value(value: &serde_json::Value) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            value
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::config(format!("GPT-2 config missing `{key}`")))
        };
        let d_model = get("n_embd")?;
        let n_heads = get("n_head")?;
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config("GPT-2 config: n_embd not divisible by n_head"));
        }
        Ok(ModelConfig {
            model_id: value
                .get("model_type")
                .and_then(|v| v.as_str())
                .map(str::to_owned),
            n_layers: get("n_layer")?,
            n_heads,
            n_kv_heads: None,
            d_model,
            d_head: d_model / n_heads,
            d_mlp: 4 * d_model,
            vocab_size: get("vocab_size")?,
            n_ctx: get("n_positions")?,
            norm_kind: NormKind::Layernorm,
            norm_eps: value
                .get("layer_norm_epsilon")
                .and_then(|v| v.as_f64())
                .unwrap_or(1e-5) as f32,
            activation: Activation::Gelu,
            positional: Positional::LearnedAbsolute,
            rope_base: default_rope_base(),
        })
    }

    /// GPT-2 small layout (used in tests and docs).
    pub fn gpt2_small(vocab_size: usize, n_ctx: usize) -> Self {
        ModelConfig {
            model_id: Some("gpt2-small".to_owned()),
            n_layers: 12,
            n_heads: 12,
            n_kv_heads: None,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab_size,
            n_ctx,
            norm_kind: NormKind::Layernorm,
            norm_eps: 1e-5,
            activation: Activation::Gelu,
            positional: Positional::LearnedAbsolute,
            rope_base: default_rope_base(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_matches_formula() {
        let cfg = ModelConfig::gpt2_small(50_257, 1024);
        assert_eq!(cfg.node_count(), 1 + 12 * 12 + 12 + 1);
        assert_eq!(cfg.node_count(), 158);
    }

    #[test]
    fn rejects_bad_kv_head_split() {
        let mut cfg = ModelConfig::gpt2_small(50_257, 1024);
        cfg.n_kv_heads = Some(5);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn parses_gpt2_style_config() {
        let text = r#"{
            "n_embd": 768, "n_head": 12, "n_layer": 12,
            "n_positions": 1024, "vocab_size": 50257,
            "layer_norm_epsilon": 1e-5, "model_type": "gpt2"
        }"#;
        let cfg = ModelConfig::from_json_str(text).unwrap();
        assert_eq!(cfg.d_head, 64);
        assert_eq!(cfg.d_mlp, 3072);
        assert_eq!(cfg.norm_kind, NormKind::Layernorm);
    }

    #[test]
    fn rejects_head_width_mismatch() {
        let mut cfg = ModelConfig::gpt2_small(50_257, 1024);
        cfg.d_head = 63;
        assert!(cfg.validate().is_err());
    }
}
