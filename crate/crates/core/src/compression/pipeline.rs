//! Whole-model compression: quantize every linear weight group-wise, prune
//! the integer weights to N:M, and bundle them with the attention mask.

use std::collections::BTreeMap;

use half::f16;
use serde::{Deserialize, Serialize};

use super::container::{Container, Payload};
use super::mask::{build_attention_mask, MaskPattern};
use super::nm::{check_nm, prune_nm_blocks, BLOCK};
use super::quant::{quantize_mixed, BitPlan};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{check_weights, linear_shapes, WeightSet};

pub const WEIGHT_M: usize = 16;
pub const MASK_ENTRY: &str = "attention_mask";

fn default_n() -> u8 {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    #[serde(default)]
    pub bits: BitPlan,
    /// Kept weights per 16-group unless overridden per tensor.
    #[serde(default = "default_n")]
    pub nm_n: u8,
    /// Per-tensor bit plans.
    #[serde(default)]
    pub bit_overrides: BTreeMap<String, BitPlan>,
    /// Per-tensor N for every 16x16 block, row-major over the block grid.
    #[serde(default)]
    pub block_n: BTreeMap<String, Vec<u8>>,
    #[serde(default = "default_mask")]
    pub mask: MaskPattern,
}

fn default_mask() -> MaskPattern {
    MaskPattern::DenseCausal
}

impl Default for CompressionPlan {
    fn default() -> Self {
        CompressionPlan {
            bits: BitPlan::default(),
            nm_n: default_n(),
            bit_overrides: BTreeMap::new(),
            block_n: BTreeMap::new(),
            mask: default_mask(),
        }
    }
}

impl CompressionPlan {
    /// Dense weights (16:16) with the default bit plan.
    pub fn dense() -> Self {
        CompressionPlan { nm_n: 16, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: CompressionPlan = serde_json::from_str(text)?;
        check_nm(p.nm_n as usize, WEIGHT_M)?;
        Ok(p)
    }

    pub fn bits_for(&self, name: &str) -> &BitPlan {
        self.bit_overrides.get(name).unwrap_or(&self.bits)
    }

    pub fn block_n_for(&self, name: &str, rows: usize, cols: usize) -> Result<Vec<u8>> {
        let blocks = (rows / BLOCK) * (cols / BLOCK);
        match self.block_n.get(name) {
            Some(v) if v.len() == blocks => Ok(v.clone()),
            Some(v) => Err(Error::Config(format!("{name}: block plan has {} entries, need {blocks}", v.len()))),
            None => Ok(vec![self.nm_n; blocks]),
        }
    }
}

pub fn nm_entry(name: &str) -> String {
    format!("{name}.nm")
}

/// Compresses every linear of `cfg`. The query projection absorbs the
/// 1/sqrt(head_dim) attention scale before quantization.
pub fn compress_model(cfg: &ModelConfig, weights: &WeightSet, plan: &CompressionPlan) -> Result<Container> {
    cfg.validate()?;
    check_weights(cfg, weights)?;
    let mut c = Container::default();
    let q_scale = 1.0 / (cfg.head_dim as f32).sqrt();
    for (name, rows, cols) in linear_shapes(cfg) {
        let w = &weights[&name];
        let scaled: Vec<f16>;
        let data = if name.ends_with("q_proj.weight") {
            scaled = w.data.iter().map(|v| f16::from_f32(v.to_f32() * q_scale)).collect();
            &scaled
        } else {
            &w.data
        };
        let packed = quantize_mixed(data, rows, cols, plan.bits_for(&name))?;
        let block_n = plan.block_n_for(&name, rows, cols)?;
        let nm = prune_nm_blocks(&packed.int_values(), rows, cols, &block_n, WEIGHT_M)?;
        c.push(name.clone(), Payload::Packed(packed));
        c.push(nm_entry(&name), Payload::Nm(nm));
    }
    c.push(MASK_ENTRY, Payload::Mask(build_attention_mask(plan.mask, cfg.max_seq_len)));
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::synthesize_weights;

    #[test]
    fn tiny_model_compresses_to_plan() {
        let cfg = ModelConfig::tiny(2);
        let w = synthesize_weights(&cfg, 1);
        let c = compress_model(&cfg, &w, &CompressionPlan::default()).unwrap();
        let name = "layers.1.down_proj.weight";
        let p = c.packed(name).unwrap();
        assert!((p.average_bits() - 3.5).abs() < 1e-9);
        let nm = c.nm(&nm_entry(name)).unwrap();
        assert_eq!(nm.values.len(), 64 * 256 / 2);
        assert_eq!(c.mask().unwrap().seq_len, cfg.max_seq_len);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn plan_json_defaults() {
        let p = CompressionPlan::from_json("{}").unwrap();
        assert_eq!(p, CompressionPlan::default());
        let p = CompressionPlan::from_json(r#"{"nm_n": 4, "mask": {"kind": "local_window", "window": 128}}"#).unwrap();
        assert_eq!(p.nm_n, 4);
        assert!(CompressionPlan::from_json(r#"{"nm_n": 3}"#).is_err());
    }
}
