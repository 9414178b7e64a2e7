//! Per-core partitioning of the linear layers and weight-tile sizing.
//!
//! Every linear is split by output feature: core `c` owns features
//! `[c * slice, (c + 1) * slice)`, padded with zero features past the real
//! output width. Query, key and value projections are split by whole heads.
//! A core's slice is cut into tiles of `n_tile` features spanning the full
//! input width, sized so two tiles fit the weight buffer.
//!
//! A tile is a sequence of weight records, one per (feature, input group),
//! feature-major:
//!
//! ```text
//! byte 0   bits code (2,3,4,8 -> 0..3) | N code (0,1,2,4,8,16 -> 0..5) << 2
//! 1..3     fp16 group scale
//! select   N < 4: one 4-bit index per kept value; 4 <= N < 16: 16-bit bitmap;
//!          N = 16: nothing
//! values   N kept values of `bits` each, LSB first, ascending index order
//! ```

use std::collections::HashMap;

use crate::compression::quant::GROUP;
use crate::compression::{BitPlan, CompressionPlan};
use crate::compression::nm::BLOCK;
use crate::error::{Error, Result};
use crate::isa::CHANNELS_PER_CORE;
use crate::model::{linear_shapes, ModelConfig};

use super::hardware::HardwareConfig;

/// Weight tiles are padded so each of the eight channel chunks is whole lines.
pub const TILE_ALIGN: usize = CHANNELS_PER_CORE * 16;
pub const MAX_TILE_COLS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LinearRole {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
    Head,
}

impl LinearRole {
    pub fn from_name(name: &str) -> Result<Self> {
        let stem = name.trim_end_matches(".weight");
        let last = stem.rsplit('.').next().unwrap_or("");
        Ok(match last {
            "q_proj" => LinearRole::Q,
            "k_proj" => LinearRole::K,
            "v_proj" => LinearRole::V,
            "o_proj" => LinearRole::O,
            "up_proj" => LinearRole::Up,
            "gate_proj" => LinearRole::Gate,
            "down_proj" => LinearRole::Down,
            "proj" => LinearRole::Head,
            _ => return Err(Error::Compile(format!("unrecognized linear {name}"))),
        })
    }

    pub fn is_head_split(self) -> bool {
        matches!(self, LinearRole::Q | LinearRole::K | LinearRole::V)
    }
}

pub fn n_code(n: usize) -> Result<u8> {
    Ok(match n {
        0 => 0,
        1 => 1,
        2 => 2,
        4 => 3,
        8 => 4,
        16 => 5,
        _ => return Err(Error::Format(format!("N = {n} has no record code"))),
    })
}

pub fn n_from_code(code: u8) -> Result<usize> {
    [0, 1, 2, 4, 8, 16]
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("bad N code {code}")))
}

pub fn bits_code(bits: u8) -> Result<u8> {
    Ok(match bits {
        2 => 0,
        3 => 1,
        4 => 2,
        8 => 3,
        _ => return Err(Error::Format(format!("{bits}-bit weights have no record code"))),
    })
}

pub fn bits_from_code(code: u8) -> u8 {
    [2, 3, 4, 8][code as usize & 3]
}

pub fn select_bytes(n: usize) -> usize {
    match n {
        16 => 0,
        4..=15 => 2,
        _ => n.div_ceil(2),
    }
}

pub fn record_bytes(bits: u8, n: usize) -> usize {
    3 + select_bytes(n) + (n * bits as usize).div_ceil(8)
}

/// Bits of group `g` (row-major group index) without materializing the plan.
pub fn group_bits(plan: &BitPlan, g: usize) -> u8 {
    match plan {
        BitPlan::Uniform(b) => *b,
        BitPlan::RoundRobin(c) => c[g % c.len()],
        BitPlan::Explicit(v) => v[g],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LinearLayout {
    pub name: String,
    pub role: LinearRole,
    pub layer: Option<usize>,
    pub out_dim: usize,
    pub in_dim: usize,
    /// Output features per core.
    pub slice: usize,
    pub n_tile: usize,
    /// Padded bytes of tile `j`, the maximum over cores.
    pub tile_bytes: Vec<usize>,
    /// Nominal N stamped on the instructions.
    pub nm_n: u8,
}

impl LinearLayout {
    pub fn tiles(&self) -> usize {
        self.slice.div_ceil(self.n_tile)
    }

    pub fn tile_cols(&self, j: usize) -> usize {
        self.n_tile.min(self.slice - j * self.n_tile)
    }

    /// Global output feature of column `col` of core `core`'s slice.
    pub fn feature(&self, core: usize, col: usize) -> usize {
        core * self.slice + col
    }

    pub fn max_tile_bytes(&self) -> usize {
        self.tile_bytes.iter().copied().max().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> usize {
        self.tile_bytes.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelLayout {
    pub cores: usize,
    pub heads_per_core: usize,
    pub linears: Vec<LinearLayout>,
}

impl ModelLayout {
    pub fn linear(&self, name: &str) -> Result<&LinearLayout> {
        self.linears
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Compile(format!("no layout for {name}")))
    }

    /// Per-core slice width of a role (all layers share it).
    pub fn slice_of(&self, role: LinearRole) -> usize {
        self.linears.iter().find(|l| l.role == role).map(|l| l.slice).unwrap_or(0)
    }
}

struct Sizer<'a> {
    plan: &'a CompressionPlan,
    name: &'a str,
    out_dim: usize,
    in_dim: usize,
    block_n: Option<&'a Vec<u8>>,
}

impl Sizer<'_> {
    fn n_at(&self, feature: usize, g: usize) -> usize {
        match self.block_n {
            Some(v) => v[(feature / BLOCK) * (self.in_dim / BLOCK) + g * GROUP / BLOCK] as usize,
            None => self.plan.nm_n as usize,
        }
    }

    fn feature_bytes(&self, feature: usize) -> usize {
        let groups = self.in_dim / GROUP;
        if feature >= self.out_dim {
            return groups * record_bytes(2, 0);
        }
        let bits = self.plan.bits_for(self.name);
        (0..groups)
            .map(|g| record_bytes(group_bits(bits, feature * groups + g), self.n_at(feature, g)))
            .sum()
    }
}

fn tile_sizes(s: &Sizer, cores: usize, slice: usize, n_tile: usize) -> Vec<usize> {
    let tiles = slice.div_ceil(n_tile);
    (0..tiles)
        .map(|j| {
            let cols = n_tile.min(slice - j * n_tile);
            let max = (0..cores)
                .map(|c| (0..cols).map(|i| s.feature_bytes(c * slice + j * n_tile + i)).sum::<usize>())
                .max()
                .unwrap_or(0);
            max.div_ceil(TILE_ALIGN) * TILE_ALIGN
        })
        .collect()
}

/// Partitions every linear of `cfg` over the cores and sizes its tiles.
pub fn plan_layout(cfg: &ModelConfig, plan: &CompressionPlan, hw: &HardwareConfig) -> Result<ModelLayout> {
    cfg.validate()?;
    hw.validate()?;
    let cores = hw.num_cores;
    let hp = cfg.num_heads.div_ceil(cores);
    let half = hw.weight_buffer_bytes / 2;
    let mut cache: HashMap<String, (usize, Vec<usize>)> = HashMap::new();
    let mut linears = Vec::new();
    for (name, out_dim, in_dim) in linear_shapes(cfg) {
        let role = LinearRole::from_name(&name)?;
        let slice = if role.is_head_split() {
            hp * cfg.head_dim
        } else {
            out_dim.div_ceil(16 * cores) * 16
        };
        let block_n = plan.block_n.get(&name);
        if let Some(v) = block_n {
            let need = (out_dim / BLOCK) * (in_dim / BLOCK);
            if v.len() != need {
                return Err(Error::Config(format!("{name}: block plan has {} entries, need {need}", v.len())));
            }
        }
        if let BitPlan::Explicit(v) = plan.bits_for(&name) {
            if v.len() != out_dim * in_dim / GROUP {
                return Err(Error::Config(format!("{name}: explicit bit plan has wrong length")));
            }
        }
        let listed = match plan.bits_for(&name) {
            BitPlan::Uniform(b) => vec![*b],
            BitPlan::RoundRobin(c) | BitPlan::Explicit(c) => c.clone(),
        };
        if listed.is_empty() {
            return Err(Error::Config(format!("{name}: empty bit plan")));
        }
        for b in listed {
            crate::compression::quant::check_bits(b)?;
        }
        let key = match plan.bits_for(&name) {
            _ if block_n.is_some() => name.clone(),
            BitPlan::Explicit(_) => name.clone(),
            b => format!("{out_dim}/{in_dim}/{slice}/{b:?}"),
        };
        let sizer = Sizer { plan, name: &name, out_dim, in_dim, block_n };
        let (n_tile, tile_bytes) = match cache.get(&key) {
            Some(v) => v.clone(),
            None => {
                let mut n_tile = MAX_TILE_COLS.min(slice);
                let found = loop {
                    let sizes = tile_sizes(&sizer, cores, slice, n_tile);
                    if sizes.iter().all(|&b| b <= half) {
                        break Some((n_tile, sizes));
                    }
                    if n_tile <= 16 {
                        break None;
                    }
                    n_tile -= 16;
                };
                let v = found.ok_or_else(|| {
                    Error::Tiling(format!("{name}: a 16-feature tile of {in_dim} inputs exceeds half the weight buffer ({half} bytes)"))
                })?;
                cache.insert(key, v.clone());
                v
            }
        };
        let layer = name.strip_prefix("layers.").and_then(|s| s.split('.').next()).and_then(|s| s.parse().ok());
        let nm_n = block_n.map(|v| v.iter().copied().max().unwrap_or(0)).unwrap_or(plan.nm_n);
        linears.push(LinearLayout { name, role, layer, out_dim, in_dim, slice, n_tile, tile_bytes, nm_n });
    }
    Ok(ModelLayout { cores, heads_per_core: hp, linears })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_sizes() {
        // 8:16 at 3 bits: header 3, bitmap 2, 24 bits of values
        assert_eq!(record_bytes(3, 8), 8);
        assert_eq!(record_bytes(4, 8), 9);
        assert_eq!(record_bytes(4, 16), 11);
        assert_eq!(record_bytes(2, 2), 5);
        assert_eq!(record_bytes(8, 0), 3);
        for n in [0, 1, 2, 4, 8, 16] {
            assert_eq!(n_from_code(n_code(n).unwrap()).unwrap(), n);
        }
    }

    #[test]
    fn tiny_partition_over_three_cores() {
        let cfg = ModelConfig::tiny(1);
        let l = plan_layout(&cfg, &CompressionPlan::default(), &HardwareConfig::u280()).unwrap();
        assert_eq!(l.heads_per_core, 1);
        let q = l.linear("layers.0.q_proj.weight").unwrap();
        assert_eq!((q.slice, q.n_tile, q.tiles()), (32, 32, 1));
        let up = l.linear("layers.0.up_proj.weight").unwrap();
        assert_eq!(up.slice, 96);
        assert_eq!(up.tiles(), 2);
        assert_eq!(up.tile_cols(1), 32);
        // 3 and 4 bit groups alternate in pairs; 8:16 records are 8 and 9 bytes
        let per_feature: usize = (0..4).map(|g| if g % 4 < 2 { 8 } else { 9 }).sum();
        assert_eq!(up.tile_bytes[0], (64 * per_feature).div_ceil(128) * 128);
    }

    #[test]
    fn tiles_shrink_to_fit_buffer() {
        let cfg = ModelConfig::llama2_7b();
        let mut plan = CompressionPlan::dense();
        plan.bits = BitPlan::Uniform(8);
        let l = plan_layout(&cfg, &plan, &HardwareConfig::u280()).unwrap();
        let down = l.linear("layers.0.down_proj.weight").unwrap();
        assert!(down.n_tile < 64);
        assert!(down.max_tile_bytes() <= (1 << 19));
        let mut hw = HardwareConfig::u280();
        hw.weight_buffer_bytes = 4096;
        assert!(matches!(plan_layout(&cfg, &plan, &hw), Err(Error::Tiling(_))));
    }
}
