//! Dense fp16 weights and their file format.
//!
//! ```text
//! 0  magic "FLWT", u32 tensor count
//! per tensor: u16 name length, name bytes, u32 rows, u32 cols,
//!             rows * cols little-endian fp16 values, row-major [out, in]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLWT";

#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeight {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f16>,
}

/// Linear weights keyed by tensor name.
pub type WeightSet = BTreeMap<String, DenseWeight>;

/// Names and [out, in] shapes of every linear weight, in execution order.
pub fn linear_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let mut v = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        for name in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            v.push((format!("{p}.{name}.weight"), d, d));
        }
        v.push((format!("{p}.up_proj.weight"), f, d));
        if cfg.gated_ffn() {
            v.push((format!("{p}.gate_proj.weight"), f, d));
        }
        v.push((format!("{p}.down_proj.weight"), d, f));
    }
    if cfg.has_lm_head {
        v.push(("lm_head.proj.weight".into(), cfg.vocab_size, d));
    }
    v
}

/// Seeded uniform weights with unit output variance for unit-variance inputs.
pub fn synthesize_weights(cfg: &ModelConfig, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = WeightSet::new();
    for (name, rows, cols) in linear_shapes(cfg) {
        let a = (3.0 / cols as f32).sqrt();
        let data = (0..rows * cols).map(|_| f16::from_f32(rng.gen_range(-a..a))).collect();
        set.insert(name, DenseWeight { rows, cols, data });
    }
    set
}

pub fn write_weights(set: &WeightSet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend((set.len() as u32).to_le_bytes());
    for (name, w) in set {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((w.rows as u32).to_le_bytes());
        out.extend((w.cols as u32).to_le_bytes());
        for v in &w.data {
            out.extend(v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<WeightSet> {
    let b = std::fs::read(path)?;
    let trunc = || Error::Format("weight file truncated".into());
    if b.len() < 8 || &b[..4] != MAGIC {
        return Err(Error::Format("not a weight file".into()));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = b.get(pos..pos + n).ok_or_else(trunc)?;
        pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut set = WeightSet::new();
    for _ in 0..count {
        let nl = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nl)?.to_vec()).map_err(|_| Error::Format("weight name is not UTF-8".into()))?;
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let data = take(2 * rows * cols)?.chunks(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect();
        set.insert(name, DenseWeight { rows, cols, data });
    }
    Ok(set)
}

/// Checks that a weight set provides every linear of `cfg` with the right shape.
pub fn check_weights(cfg: &ModelConfig, set: &WeightSet) -> Result<()> {
    for (name, rows, cols) in linear_shapes(cfg) {
        match set.get(&name) {
            None => return Err(Error::Data(format!("missing weight {name}"))),
            Some(w) if w.rows != rows || w.cols != cols || w.data.len() != rows * cols => {
                return Err(Error::Data(format!("{name} is {}x{}, expected {rows}x{cols}", w.rows, w.cols)))
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_seeded_and_file_roundtrips() {
        let cfg = ModelConfig::tiny(1);
        let a = synthesize_weights(&cfg, 7);
        assert_eq!(a, synthesize_weights(&cfg, 7));
        assert_ne!(a, synthesize_weights(&cfg, 8));
        check_weights(&cfg, &a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_weights(&a, &p).unwrap();
        assert_eq!(read_weights(&p).unwrap(), a);
    }
}
