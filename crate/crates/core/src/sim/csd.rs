//! Integer datapath of a CSD chain: sparse multiplexers, DSP groups,
//! reduction nodes and the overflow-adjust unit (OAU).
//!
//! A chain is a cascade of DSP groups, two DSPs per group, each DSP doing two
//! int8 MACs per cycle. In dense mode the cascade yields one dot product. In
//! N:M mode reduction nodes split it into N sub-chains; sub-chain `i` takes
//! the `i`-th kept weight of every group and the activation its selector
//! picks out of that group's M inputs.
//!
//! The cascade carries an 18-bit partial sum. At most eight 16-bit products
//! fit in 18 bits, so after every eight products the OAU splits the lane into
//! a most significant part, accumulated separately, and an 18-bit least
//! significant part.

use crate::error::{Error, Result};

pub const LSP_BITS: u32 = 18;
/// Products that fit in the 18-bit lane without adjustment.
pub const OAU_SPAN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    Dense,
    Nm { n: usize, m: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsdChainConfig {
    pub dsp_per_group: usize,
    pub groups_per_chain: usize,
    /// Inputs each sparse multiplexer selects from (M).
    pub select_width: usize,
    pub mode: ChainMode,
    /// With the OAU disabled the lane wraps at 18 bits.
    pub oau: bool,
}

impl CsdChainConfig {
    pub fn dense(lanes: usize) -> Self {
        CsdChainConfig { dsp_per_group: 2, groups_per_chain: lanes.div_ceil(4), select_width: 1, mode: ChainMode::Dense, oau: true }
    }

    pub fn nm(n: usize, m: usize, groups: usize) -> Self {
        CsdChainConfig { dsp_per_group: 2, groups_per_chain: groups, select_width: m, mode: ChainMode::Nm { n, m }, oau: true }
    }

    /// int8 MACs per cycle of the chain.
    pub fn macs_per_cycle(&self) -> usize {
        self.groups_per_chain * self.dsp_per_group * 2
    }
}

/// Two's-complement split of `acc` into `(msp, lsp)` with `msp * 2^18 + lsp == acc`.
pub fn oau_split(acc: i64) -> (i64, i64) {
    (acc >> LSP_BITS, acc & ((1 << LSP_BITS) - 1))
}

fn wrap18(v: i64) -> i64 {
    let s = 64 - LSP_BITS;
    (v << s) >> s
}

/// Accumulates a product stream along the cascade.
pub fn chain_accumulate(products: impl IntoIterator<Item = i32>, oau: bool) -> i64 {
    let mut msp = 0i64;
    let mut lsp = 0i64;
    let mut lane = 0i64;
    let mut pending = 0;
    for p in products {
        lane += p as i64;
        pending += 1;
        if pending == OAU_SPAN {
            if oau {
                let (hi, lo) = oau_split(lane);
                msp += hi;
                lsp += lo;
                lane = 0;
            } else {
                lane = wrap18(lane);
            }
            pending = 0;
        }
    }
    if oau {
        let (hi, lo) = oau_split(lane);
        msp += hi;
        lsp += lo;
        (msp << LSP_BITS) + lsp
    } else {
        wrap18(lane)
    }
}

/// Runs one chain. Dense: `weights` and `acts` have equal length and one
/// output results. N:M: `weights` and `indices` hold N entries per group,
/// `acts` holds M per group, and N outputs result.
pub fn vpu_dot(cfg: &CsdChainConfig, weights: &[i8], acts: &[i8], indices: &[u8]) -> Result<Vec<i32>> {
    let out = |v: i64| {
        i32::try_from(v).map_err(|_| Error::Datapath(format!("chain output {v} exceeds 32 bits")))
    };
    match cfg.mode {
        ChainMode::Dense => {
            if weights.len() != acts.len() {
                return Err(Error::Datapath(format!("{} weights for {} activations", weights.len(), acts.len())));
            }
            let prods = weights.iter().zip(acts).map(|(&w, &a)| w as i32 * a as i32);
            Ok(vec![out(chain_accumulate(prods, cfg.oau))?])
        }
        ChainMode::Nm { n, m } => {
            if n == 0 || m == 0 || n > m {
                return Err(Error::Datapath(format!("invalid {n}:{m} chain")));
            }
            let groups = acts.len() / m;
            if acts.len() != groups * m || weights.len() != groups * n || indices.len() != groups * n {
                return Err(Error::Datapath(format!(
                    "lane counts {}/{}/{} do not fit {groups} groups of {n}:{m}",
                    weights.len(),
                    acts.len(),
                    indices.len()
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i as usize >= m) {
                return Err(Error::Datapath(format!("selector {bad} outside M = {m}")));
            }
            (0..n)
                .map(|i| {
                    let prods = (0..groups).map(|g| weights[g * n + i] as i32 * acts[g * m + indices[g * n + i] as usize] as i32);
                    out(chain_accumulate(prods, cfg.oau))
                })
                .collect()
        }
    }
}
