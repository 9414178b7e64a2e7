use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Layernorm,
}

fn default_max_seq_len() -> usize {
    2048
}

/// Shape of a decoder-only transformer. SiLU models use a gated FFN
/// (`down(silu(up(x)) * gate(x))`), the others a plain two-layer FFN.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub has_lm_head: bool,
    /// Only consulted when `has_lm_head` is set.
    #[serde(default)]
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return bad("num_heads and head_dim must be >= 1".into());
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return bad(format!(
                "hidden_dim {} != num_heads {} * head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        // 16-wide N:M groups and quantization groups tile every matrix axis.
        for (name, v) in [("head_dim", self.head_dim), ("ffn_dim", self.ffn_dim)] {
            if v % 16 != 0 {
                return bad(format!("{name} = {v} is not a multiple of 16"));
            }
        }
        if self.has_lm_head && (self.vocab_size == 0 || self.vocab_size % 16 != 0) {
            return bad("lm_head requires vocab_size > 0 and a multiple of 16".into());
        }
        Ok(())
    }

    pub fn gated_ffn(&self) -> bool {
        self.activation == Activation::Silu
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// LLaMA2-7B shape.
    pub fn llama2_7b() -> Self {
        ModelConfig {
            num_layers: 32,
            hidden_dim: 4096,
            num_heads: 32,
            head_dim: 128,
            ffn_dim: 11008,
            activation: Activation::Silu,
            norm: Norm::Layernorm,
            max_seq_len: 2048,
            has_lm_head: false,
            vocab_size: 0,
        }
    }

    /// OPT-6.7B shape.
    pub fn opt_6_7b() -> Self {
        ModelConfig {
            num_layers: 32,
            hidden_dim: 4096,
            num_heads: 32,
            head_dim: 128,
            ffn_dim: 16384,
            activation: Activation::Relu,
            norm: Norm::Layernorm,
            max_seq_len: 2048,
            has_lm_head: false,
            vocab_size: 0,
        }
    }

    /// The small model used by the functional tests.
    pub fn tiny(num_layers: usize) -> Self {
        ModelConfig {
            num_layers,
            hidden_dim: 64,
            num_heads: 2,
            head_dim: 32,
            ffn_dim: 256,
            activation: Activation::Silu,
            norm: Norm::Layernorm,
            max_seq_len: 128,
            has_lm_head: false,
            vocab_size: 0,
        }
    }

    /// Number of weight parameters held by the linear layers.
    pub fn linear_params(&self) -> u64 {
        let d = self.hidden_dim as u64;
        let f = self.ffn_dim as u64;
        let ffn = if self.gated_ffn() { 3 * d * f } else { 2 * d * f };
        let mut total = self.num_layers as u64 * (4 * d * d + ffn);
        if self.has_lm_head {
            total += d * self.vocab_size as u64;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cfg = ModelConfig::tiny(1);
        cfg.hidden_dim = 60;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_uses_snake_case_keys_and_defaults() {
        let cfg = ModelConfig::from_json(
            r#"{"num_layers":1,"hidden_dim":64,"num_heads":2,"head_dim":32,
                "ffn_dim":256,"activation":"silu"}"#,
        )
        .unwrap();
        assert_eq!(cfg.max_seq_len, 2048);
        assert!(!cfg.has_lm_head);
        assert_eq!(cfg.norm, Norm::Layernorm);
    }

    #[test]
    fn llama_param_count() {
        // 32 * (4 * 4096^2 + 3 * 4096 * 11008)
        assert_eq!(ModelConfig::llama2_7b().linear_params(), 6_476_005_376);
    }
}
