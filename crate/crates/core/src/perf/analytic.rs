//! Closed-form tiling and resource formulas.

use serde::{Deserialize, Serialize};

use crate::compiler::HardwareConfig;

/// One matrix product `[M x K] x [K x N]` on a machine with the given
/// parallelism and bandwidth (elements per cycle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileShape {
    pub m: f64,
    pub k: f64,
    pub n: f64,
    pub p_m: f64,
    pub p_k: f64,
    pub p_n: f64,
    pub bw: f64,
    /// Bytes per weight element relative to one int8 byte.
    pub weight_bytes: f64,
}

impl TileShape {
    pub fn new(m: f64, k: f64, n: f64, p_m: f64, p_k: f64, p_n: f64, bw: f64) -> Self {
        TileShape { m, k, n, p_m, p_k, p_n, bw, weight_bytes: 1.0 }
    }
}

/// `(T_mem, T_cmp)` in cycles for one tile.
pub fn t_mem_cmp(t: &TileShape) -> (f64, f64) {
    let mem = (t.m * t.k + t.k * t.n * t.weight_bytes + t.m * t.n) / t.bw;
    let cmp = t.m * t.k * t.n / (t.p_m * t.p_k * t.p_n);
    (mem, cmp)
}

/// Parallelism of the matrix-vector mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvParallelism {
    pub p_k: usize,
    pub p_n: usize,
    /// No configuration within the lane budget keeps compute under memory
    /// time; the pair is the largest one available.
    pub saturated: bool,
}

/// MAC lanes one core can devote to a matrix-vector product.
pub fn mv_lane_budget(hw: &HardwareConfig) -> usize {
    hw.macs_per_core()
}

/// Candidate degrees of parallelism along a dimension of size `dim`:
/// powers of two up to the dimension rounded up to a power of two.
fn candidates(dim: usize, budget: usize) -> impl Iterator<Item = usize> {
    let cap = dim.max(1).next_power_of_two().min(budget.max(1));
    (0..usize::BITS).map(|s| 1usize << s).take_while(move |&p| p <= cap)
}

/// Smallest-product `(p_K, p_N)` whose compute time stays within the memory
/// time of a `[1 x k] x [k x n]` product; ties go to the larger `p_K`.
pub fn search_mv_parallelism_bw(k: usize, n: usize, bw: f64, weight_bytes: f64, budget: usize) -> MvParallelism {
    let mut best: Option<(usize, usize)> = None;
    let mut largest = (1, 1);
    for pk in candidates(k, budget) {
        for pn in candidates(n, budget / pk) {
            let t = TileShape { weight_bytes, ..TileShape::new(1.0, k as f64, n as f64, 1.0, pk as f64, pn as f64, bw) };
            let (mem, cmp) = t_mem_cmp(&t);
            if pk * pn > largest.0 * largest.1 || (pk * pn == largest.0 * largest.1 && pk > largest.0) {
                largest = (pk, pn);
            }
            if cmp <= mem {
                let better = match best {
                    None => true,
                    Some((bk, bn)) => pk * pn < bk * bn || (pk * pn == bk * bn && pk > bk),
                };
                if better {
                    best = Some((pk, pn));
                }
                break;
            }
        }
    }
    match best {
        Some((p_k, p_n)) => MvParallelism { p_k, p_n, saturated: false },
        None => MvParallelism { p_k: largest.0, p_n: largest.1, saturated: true },
    }
}

/// Matrix-vector parallelism for one core at int8 element size.
pub fn search_mv_parallelism(k: usize, n: usize, hw: &HardwareConfig) -> MvParallelism {
    search_mv_parallelism_bw(k, n, core_bytes_per_cycle(hw), 1.0, mv_lane_budget(hw))
}

/// HBM bytes per cycle available to one core across its channels.
pub fn core_bytes_per_cycle(hw: &HardwareConfig) -> f64 {
    crate::isa::CHANNELS_PER_CORE as f64 * hw.channel_bytes_per_cycle()
}

const BRAM36_BYTES: usize = 36 * 1024 / 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub dsp: usize,
    pub uram: usize,
    pub bram: usize,
    /// Accelerator bandwidth demand, GB/s.
    pub peak_bw_gbps: f64,
    /// Platform HBM peak, GB/s.
    pub platform_bw_gbps: f64,
    /// Resources whose estimate exceeds the platform total.
    pub violations: Vec<String>,
}

pub fn estimate_resources(hw: &HardwareConfig) -> ResourceEstimate {
    let mpe = hw.num_cores;
    let mpu = hw.mpus_per_core;
    let dsp = hw.p_m * hw.p_k * hw.p_n * mpu * mpe;
    let uram = (hw.p_m * hw.p_k * hw.activation_width_bits).div_ceil(hw.uram_width_bits.max(1)) * mpu * mpe;
    let bram = (hw.weight_buffer_bytes + hw.global_buffer_bytes + hw.index_buffer_bytes).div_ceil(BRAM36_BYTES) * mpe;
    let peak_bw_gbps = (mpu as f64 / 8.0 + 2.0) * mpe as f64 * 14.4;
    let mut violations = Vec::new();
    for (name, used, total) in [("DSP", dsp, hw.platform_dsps), ("URAM", uram, hw.platform_urams), ("BRAM", bram, hw.platform_brams)] {
        if used > total {
            violations.push(format!("{name}: {used} exceeds platform total {total}"));
        }
    }
    ResourceEstimate { dsp, uram, bram, peak_bw_gbps, platform_bw_gbps: hw.hbm_peak_bytes_per_s() / 1e9, violations }
}
