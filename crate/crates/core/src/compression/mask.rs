//! Block-sparse attention masks at 64x64 granularity.
//!
//! A query token `i` attends key token `j` when `j <= i` and the block pair
//! `(i / 64, j / 64)` is set. Window and global extents are therefore rounded
//! to whole blocks. Diagonal blocks are always set and marked partial, since
//! the causal boundary runs through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPattern {
    DenseCausal,
    /// Each query block sees the `window / 64` most recent key blocks,
    /// including its own.
    LocalWindow { window: usize },
    /// Local window plus the first `global` tokens visible to every query.
    LocalPlusGlobal { window: usize, global: usize },
}

impl MaskPattern {
    fn code(&self) -> u8 {
        match self {
            MaskPattern::DenseCausal => 0,
            MaskPattern::LocalWindow { .. } => 1,
            MaskPattern::LocalPlusGlobal { .. } => 2,
        }
    }

    fn params(&self) -> (usize, usize) {
        match *self {
            MaskPattern::DenseCausal => (0, 0),
            MaskPattern::LocalWindow { window } => (window, 0),
            MaskPattern::LocalPlusGlobal { window, global } => (window, global),
        }
    }

    fn from_code(code: u8, window: usize, global: usize) -> Result<Self> {
        Ok(match code {
            0 => MaskPattern::DenseCausal,
            1 => MaskPattern::LocalWindow { window },
            2 => MaskPattern::LocalPlusGlobal { window, global },
            c => return Err(Error::Format(format!("unknown mask pattern code {c}"))),
        })
    }

    /// Block-level rule for `bj <= bi`.
    pub fn block_allowed(&self, bi: usize, bj: usize) -> bool {
        if bj > bi {
            return false;
        }
        let local = |w: usize| bi - bj < w.div_ceil(MASK_BLOCK).max(1);
        match *self {
            MaskPattern::DenseCausal => true,
            MaskPattern::LocalWindow { window } => local(window),
            MaskPattern::LocalPlusGlobal { window, global } => local(window) || bj < global.div_ceil(MASK_BLOCK),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSparseMask {
    pub pattern: MaskPattern,
    pub seq_len: usize,
    pub blocks: usize,
    /// Row-major `blocks x blocks` flags.
    pub set: Vec<bool>,
    pub partial: Vec<bool>,
}

/// Builds the block grid. Degenerate sizes (zero length or window) collapse
/// to a single block or a diagonal-only mask.
pub fn build_attention_mask(pattern: MaskPattern, seq_len: usize) -> BlockSparseMask {
    let seq_len = seq_len.max(1);
    let blocks = seq_len.div_ceil(MASK_BLOCK);
    let mut set = vec![false; blocks * blocks];
    let mut partial = vec![false; blocks * blocks];
    for bi in 0..blocks {
        for bj in 0..=bi {
            set[bi * blocks + bj] = pattern.block_allowed(bi, bj) || bi == bj;
            partial[bi * blocks + bj] = bi == bj;
        }
    }
    BlockSparseMask { pattern, seq_len, blocks, set, partial }
}

impl BlockSparseMask {
    pub fn is_set(&self, bi: usize, bj: usize) -> bool {
        bi < self.blocks && bj < self.blocks && self.set[bi * self.blocks + bj]
    }

    pub fn is_partial(&self, bi: usize, bj: usize) -> bool {
        bi < self.blocks && bj < self.blocks && self.partial[bi * self.blocks + bj]
    }

    pub fn set_count(&self) -> usize {
        self.set.iter().filter(|&&s| s).count()
    }

    /// Set key blocks for query block `bi`, ascending.
    pub fn row_blocks(&self, bi: usize) -> Vec<usize> {
        (0..self.blocks).filter(|&bj| self.is_set(bi, bj)).collect()
    }

    /// Union of set key blocks over a range of query blocks.
    pub fn union_blocks(&self, rows: std::ops::Range<usize>) -> Vec<usize> {
        (0..self.blocks).filter(|&bj| rows.clone().any(|bi| self.is_set(bi, bj))).collect()
    }

    /// Token-level visibility; `valid_len` bounds the key side.
    pub fn attends(&self, i: usize, j: usize, valid_len: usize) -> bool {
        j <= i && j < valid_len && self.is_set(i / MASK_BLOCK, j / MASK_BLOCK)
    }

    /// Same pattern over a longer sequence.
    pub fn extended(&self, seq_len: usize) -> Self {
        build_attention_mask(self.pattern, seq_len)
    }

    /// Fraction of the causal block triangle that is set.
    pub fn density(&self) -> f64 {
        let tri = self.blocks * (self.blocks + 1) / 2;
        self.set_count() as f64 / tri as f64
    }

    /// Packed record: u8 pattern, u8 pad, u16 blocks, u32 seq_len, u32 window,
    /// u32 global, then set bits and partial bits, row-major LSB first, each
    /// bitmap padded to a whole byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (w, g) = self.pattern.params();
        let mut out = vec![self.pattern.code(), 0];
        out.extend((self.blocks as u16).to_le_bytes());
        out.extend((self.seq_len as u32).to_le_bytes());
        out.extend((w as u32).to_le_bytes());
        out.extend((g as u32).to_le_bytes());
        out.extend(pack_bits(&self.set));
        out.extend(pack_bits(&self.partial));
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 16 {
            return Err(Error::Format("mask record truncated".into()));
        }
        let rd = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let blocks = u16::from_le_bytes([b[2], b[3]]) as usize;
        let seq_len = rd(4);
        let pattern = MaskPattern::from_code(b[0], rd(8), rd(12))?;
        let n = blocks * blocks;
        let nb = n.div_ceil(8);
        if b.len() < 16 + 2 * nb || blocks != seq_len.div_ceil(MASK_BLOCK) {
            return Err(Error::Format("mask record size mismatch".into()));
        }
        Ok(BlockSparseMask {
            pattern,
            seq_len,
            blocks,
            set: unpack_bits(&b[16..16 + nb], n),
            partial: unpack_bits(&b[16 + nb..16 + 2 * nb], n),
        })
    }

    /// One query-block row as the hardware mask word: bit `bj` set when key
    /// block `bj` is visible.
    pub fn row_bits(&self, bi: usize) -> Vec<u8> {
        let row: Vec<bool> = (0..self.blocks).map(|bj| self.is_set(bi, bj)).collect();
        pack_bits(&row)
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Token-level rule written independently of the block helpers.
    fn token_rule(p: MaskPattern, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        let dist = i / 64 - j / 64;
        match p {
            MaskPattern::DenseCausal => true,
            MaskPattern::LocalWindow { window } => dist * 64 < window.max(64),
            MaskPattern::LocalPlusGlobal { window, global } => {
                dist * 64 < window.max(64) || (j / 64) * 64 < global
            }
        }
    }

    fn coarsened_count(p: MaskPattern, seq: usize) -> usize {
        let nb = seq.div_ceil(64);
        let mut hit = vec![false; nb * nb];
        for i in 0..seq {
            for j in 0..=i {
                if token_rule(p, i, j) {
                    hit[(i / 64) * nb + j / 64] = true;
                }
            }
        }
        hit.iter().filter(|&&h| h).count()
    }

    #[test]
    fn dense_causal_128() {
        let m = build_attention_mask(MaskPattern::DenseCausal, 128);
        assert_eq!(m.blocks, 2);
        assert!(m.is_set(0, 0) && m.is_set(1, 0) && m.is_set(1, 1));
        assert!(!m.is_set(0, 1));
        assert!(m.is_partial(0, 0) && m.is_partial(1, 1) && !m.is_partial(1, 0));
    }

    #[test]
    fn window_of_one_block_is_diagonal() {
        let m = build_attention_mask(MaskPattern::LocalWindow { window: 64 }, 256);
        assert_eq!(m.set_count(), 4);
        for b in 0..4 {
            assert!(m.is_set(b, b));
        }
    }

    #[test]
    fn local_plus_global_matches_token_oracle() {
        let p = MaskPattern::LocalPlusGlobal { window: 128, global: 64 };
        let m = build_attention_mask(p, 2048);
        assert_eq!(m.set_count(), coarsened_count(p, 2048));
        // 32 diagonal + 31 sub-diagonal + 30 more in column 0
        assert_eq!(m.set_count(), 32 + 31 + 30);
    }

    #[test]
    fn bytes_roundtrip() {
        let m = build_attention_mask(MaskPattern::LocalPlusGlobal { window: 256, global: 128 }, 700);
        assert_eq!(BlockSparseMask::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn degenerate_sizes_collapse() {
        assert_eq!(build_attention_mask(MaskPattern::DenseCausal, 0).blocks, 1);
        let m = build_attention_mask(MaskPattern::LocalWindow { window: 0 }, 200);
        assert_eq!(m.set_count(), m.blocks);
    }

    fn pattern() -> impl Strategy<Value = MaskPattern> {
        prop_oneof![
            Just(MaskPattern::DenseCausal),
            (1usize..6).prop_map(|w| MaskPattern::LocalWindow { window: w * 64 }),
            (1usize..6, 0usize..4).prop_map(|(w, g)| MaskPattern::LocalPlusGlobal { window: w * 64, global: g * 64 }),
        ]
    }

    proptest! {
        #[test]
        fn causal_diagonal_and_oracle(p in pattern(), seq in 1usize..600) {
            let m = build_attention_mask(p, seq);
            for bi in 0..m.blocks {
                prop_assert!(m.is_set(bi, bi));
                for bj in bi + 1..m.blocks {
                    prop_assert!(!m.is_set(bi, bj));
                }
            }
            prop_assert_eq!(m.set_count(), coarsened_count(p, seq));
        }
    }
}
