//! Power-of-two activation exponents from worst-case magnitude bounds.
//!
//! An int8 activation `q` with exponent `e` stands for `q * 2^e`. Each
//! exponent is the smallest `e` with `127 * 2^e >= B` for a bound `B` derived
//! from the weights alone: LayerNorm outputs satisfy `|y| <= sqrt(D)`, a
//! linear maps a bound `B` to `max_row sum |W| * B`, attention outputs are
//! convex combinations of values, and the activation functions are bounded
//! by their input bound or their minimum.

use serde::{Deserialize, Serialize};

use crate::compression::{nm_entry, Container};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerExponents {
    pub ln1: i8,
    pub q: i8,
    pub k: i8,
    pub v: i8,
    pub o: i8,
    pub ln2: i8,
    pub hidden: i8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exponents {
    pub layers: Vec<LayerExponents>,
    pub final_ln: i8,
}

/// Exponent of softmax probabilities in [0, 1].
pub const PROB_EXP: i8 = -7;

pub fn exponent_for(bound: f64) -> i8 {
    if !(bound > 0.0) || !bound.is_finite() {
        return if bound.is_finite() { -24 } else { 15 };
    }
    ((bound / 127.0).log2().ceil() as i32).clamp(-24, 15) as i8
}

/// Largest L1 norm over the output rows of a compressed weight.
pub fn max_row_l1(c: &Container, name: &str) -> Result<f64> {
    let p = c.packed(name).ok_or_else(|| Error::Data(format!("missing weight {name}")))?;
    let nm = c.nm(&nm_entry(name)).ok_or_else(|| Error::Data(format!("missing sparsity for {name}")))?;
    let groups = p.cols / 16;
    let offs = nm.row_offsets();
    let mut best = 0.0f64;
    for r in 0..p.rows {
        let mut sum = 0.0;
        let mut cur = offs[r];
        for g in 0..groups {
            let n = nm.block_n(r, g * nm.m);
            let l1: i64 = nm.values[cur..cur + n].iter().map(|&v| (v as i64).abs()).sum();
            sum += l1 as f64 * p.scales[r * groups + g].to_f64();
            cur += n;
        }
        best = best.max(sum);
    }
    Ok(best)
}

pub fn compute_exponents(cfg: &ModelConfig, c: &Container) -> Result<Exponents> {
    let b_ln = (cfg.hidden_dim as f64).sqrt();
    let e_ln = exponent_for(b_ln);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let w = |n: &str| max_row_l1(c, &format!("layers.{l}.{n}.weight"));
        let (bq, bk, bv) = (w("q_proj")? * b_ln, w("k_proj")? * b_ln, w("v_proj")? * b_ln);
        let bu = w("up_proj")? * b_ln;
        let act = match cfg.activation {
            Activation::Silu => bu.max(0.2785),
            Activation::Gelu => bu.max(0.17),
            Activation::Relu => bu,
        };
        let hidden = if cfg.gated_ffn() { act * w("gate_proj")? * b_ln } else { act };
        layers.push(LayerExponents {
            ln1: e_ln,
            q: exponent_for(bq),
            k: exponent_for(bk),
            v: exponent_for(bv),
            o: exponent_for(bv),
            ln2: e_ln,
            hidden: exponent_for(hidden),
        });
    }
    Ok(Exponents { layers, final_ln: e_ln })
}

impl Exponents {
    /// Placeholder exponents for instruction counting.
    pub fn zero(layers: usize) -> Self {
        Exponents { layers: vec![LayerExponents::default(); layers], final_ln: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{compress_model, CompressionPlan};
    use crate::model::synthesize_weights;

    #[test]
    fn exponent_covers_bound() {
        for b in [0.01, 1.0, 8.0, 127.0, 128.0, 1000.0] {
            let e = exponent_for(b);
            assert!(127.0 * 2f64.powi(e as i32) >= b);
            assert!(127.0 * 2f64.powi(e as i32 - 1) < b);
        }
        assert_eq!(exponent_for(8.0), -3);
    }

    #[test]
    fn tiny_exponents() {
        let cfg = ModelConfig::tiny(1);
        let c = compress_model(&cfg, &synthesize_weights(&cfg, 3), &CompressionPlan::default()).unwrap();
        let e = compute_exponents(&cfg, &c).unwrap();
        assert_eq!(e.layers[0].ln1, -3);
        assert!(e.layers[0].hidden >= e.layers[0].q);
    }
}
