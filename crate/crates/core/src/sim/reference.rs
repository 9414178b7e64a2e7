//! Token-by-token reference forward pass over row-major matrices.
//!
//! It shares the SFU primitives and the activation exponents with the
//! machine but none of its layout, tiling, partitioning or instruction
//! handling: weights are expanded to dense int8 matrices and every token is
//! processed on its own against a plain KV cache.

use std::collections::HashMap;

use half::f16;

use super::sfu::{self, LUT_ENTRIES, LUT_EXP, LUT_GELU, LUT_SILU};
use crate::compiler::{Exponents, PROB_EXP};
use crate::compression::{nm_entry, BlockSparseMask, Container, MASK_BLOCK};
use crate::error::{Error, Result};
use crate::model::{linear_shapes, Activation, ModelConfig};

struct DenseInt {
    rows: usize,
    cols: usize,
    vals: Vec<i8>,
    scales: Vec<f16>,
}

pub struct ReferenceModel {
    cfg: ModelConfig,
    exps: Exponents,
    mask: BlockSparseMask,
    luts: [[f16; LUT_ENTRIES]; 3],
    weights: HashMap<String, DenseInt>,
    /// Per layer, per token: `num_heads * head_dim` int8 keys and values.
    k: Vec<Vec<Vec<i8>>>,
    v: Vec<Vec<Vec<i8>>>,
}

impl ReferenceModel {
    pub fn new(cfg: &ModelConfig, c: &Container, exps: &Exponents, mask: &BlockSparseMask) -> Result<Self> {
        let mut weights = HashMap::new();
        for (name, rows, cols) in linear_shapes(cfg) {
            let p = c.packed(&name).ok_or_else(|| Error::Data(format!("container lacks {name}")))?;
            let nm = c.nm(&nm_entry(&name)).ok_or_else(|| Error::Data(format!("container lacks sparsity for {name}")))?;
            weights.insert(name, DenseInt { rows, cols, vals: nm.densify(), scales: p.scales.clone() });
        }
        Ok(ReferenceModel {
            cfg: cfg.clone(),
            exps: exps.clone(),
            mask: mask.clone(),
            luts: sfu::lut_tables(),
            weights,
            k: vec![Vec::new(); cfg.num_layers],
            v: vec![Vec::new(); cfg.num_layers],
        })
    }

    pub fn position(&self) -> usize {
        self.k.first().map_or(0, Vec::len)
    }

    fn linear(&self, name: &str, x: &[i8], shift: i8) -> Vec<f16> {
        let w = &self.weights[name];
        let groups = w.cols / 16;
        (0..w.rows)
            .map(|f| {
                let row = &w.vals[f * w.cols..(f + 1) * w.cols];
                let mut sum = 0f32;
                for g in 0..groups {
                    let acc: i64 = (0..16).map(|i| row[g * 16 + i] as i64 * x[g * 16 + i] as i64).sum();
                    sum += w.scales[f * groups + g].to_f32() * acc as f32;
                }
                f16::from_f32(sum * (shift as f32).exp2())
            })
            .collect()
    }

    fn quant(x: &[f16], e: i8) -> Vec<i8> {
        x.iter().map(|&v| sfu::quantize(v, e)).collect()
    }

    /// Processes the next token and returns its final-layer output row.
    pub fn step(&mut self, x_in: &[f16]) -> Result<Vec<f16>> {
        let cfg = self.cfg.clone();
        if x_in.len() != cfg.hidden_dim {
            return Err(Error::Data(format!("input row has {} values, model width is {}", x_in.len(), cfg.hidden_dim)));
        }
        let pos = self.position();
        if pos >= self.mask.seq_len {
            return Err(Error::Capacity { len: pos + 1, max_len: self.mask.seq_len });
        }
        let hd = cfg.head_dim;
        let mut x = x_in.to_vec();
        for l in 0..cfg.num_layers {
            let e = self.exps.layers[l];
            let name = |s: &str| format!("layers.{l}.{s}.weight");
            let a = Self::quant(&sfu::layernorm(&x), e.ln1);
            let q = Self::quant(&self.linear(&name("q_proj"), &a, e.ln1), e.q);
            let k = Self::quant(&self.linear(&name("k_proj"), &a, e.ln1), e.k);
            let v = Self::quant(&self.linear(&name("v_proj"), &a, e.ln1), e.v);
            self.k[l].push(k);
            self.v[l].push(v);
            let qb = pos / MASK_BLOCK;
            let width = (qb + 1) * MASK_BLOCK;
            let allowed = |j: usize| self.mask.attends(pos, j, pos + 1);
            let mut heads = vec![f16::ZERO; cfg.num_heads * hd];
            for h in 0..cfg.num_heads {
                let scores: Vec<f16> = (0..width)
                    .map(|j| {
                        if !allowed(j) {
                            return f16::ZERO;
                        }
                        let kj = &self.k[l][j][h * hd..(h + 1) * hd];
                        let dot: i64 = (0..hd).map(|d| q[h * hd + d] as i64 * kj[d] as i64).sum();
                        f16::from_f32(dot as f32 * ((e.q + e.k) as f32).exp2())
                    })
                    .collect();
                let probs = Self::quant(&sfu::softmax(&self.luts[LUT_EXP], &scores, allowed), PROB_EXP);
                let shift = ((PROB_EXP + e.v) as f32).exp2();
                for d in 0..hd {
                    let mut out: Option<f16> = None;
                    for b in self.mask.row_blocks(qb) {
                        let acc: i64 = (b * MASK_BLOCK..((b + 1) * MASK_BLOCK).min(pos + 1))
                            .map(|j| probs[j] as i64 * self.v[l][j][h * hd + d] as i64)
                            .sum();
                        let y = f16::from_f32(acc as f32 * shift);
                        out = Some(out.map_or(y, |o| sfu::add(o, y)));
                    }
                    heads[h * hd + d] = out.unwrap_or(f16::ZERO);
                }
            }
            let ao = Self::quant(&heads, e.o);
            let o = self.linear(&name("o_proj"), &ao, e.o);
            x = x.iter().zip(&o).map(|(&p, &q)| sfu::add(p, q)).collect();
            let a2 = Self::quant(&sfu::layernorm(&x), e.ln2);
            let up = self.linear(&name("up_proj"), &a2, e.ln2);
            let act: Vec<f16> = match cfg.activation {
                Activation::Silu => up.iter().map(|&u| sfu::act_lut(&self.luts[LUT_SILU], u)).collect(),
                Activation::Gelu => up.iter().map(|&u| sfu::act_lut(&self.luts[LUT_GELU], u)).collect(),
                Activation::Relu => up.iter().map(|&u| sfu::relu(u)).collect(),
            };
            let hidden = if cfg.gated_ffn() {
                let gate = self.linear(&name("gate_proj"), &a2, e.ln2);
                act.iter().zip(&gate).map(|(&p, &g)| sfu::mul(p, g)).collect()
            } else {
                act
            };
            let hq = Self::quant(&hidden, e.hidden);
            let down = self.linear(&name("down_proj"), &hq, e.hidden);
            x = x.iter().zip(&down).map(|(&p, &q)| sfu::add(p, q)).collect();
        }
        if cfg.has_lm_head {
            let a = Self::quant(&sfu::layernorm(&x), self.exps.final_ln);
            return Ok(self.linear("lm_head.proj.weight", &a, self.exps.final_ln));
        }
        Ok(x)
    }
}
