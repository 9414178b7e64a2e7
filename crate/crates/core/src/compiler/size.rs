//! Instruction-storage accounting for naive, bucketed and merged libraries.
//!
//! The naive library holds one program per exact length, stage and core.
//! It is never built: the instruction count of an exact-length program only
//! depends on its length class (see `lower::length_class`), and it grows
//! linearly with the layer count, so one- and two-layer lowerings of one
//! representative length per class determine every count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bucket::BucketSchedule;
use super::exponents::Exponents;
use super::hardware::HardwareConfig;
use super::layout::plan_layout;
use super::library::library_targets;
use super::lower::{length_class, lower_instructions, LowerInput, Target};
use super::memory::allocate_memory;
use crate::compression::{build_attention_mask, CompressionPlan};
use crate::error::Result;
use crate::isa::{merge_program, Stage, WORD_BYTES};
use crate::model::{build_ir, optimize, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub naive_bytes: u128,
    pub bucketed_bytes: u128,
    pub merged_bytes: u128,
    pub reduction_factor: f64,
    /// Per-inference decode instruction bytes at the longest bucket.
    pub decode_program_bytes: u128,
}

/// Unmerged and merged instruction counts of one program.
struct Counter {
    models: Vec<(crate::model::IrGraph, super::layout::ModelLayout, super::memory::MemoryMap, Exponents)>,
    hw: HardwareConfig,
    mask: crate::compression::BlockSparseMask,
    layers: usize,
}

impl Counter {
    fn new(cfg: &ModelConfig, plan: &CompressionPlan, sched: &BucketSchedule, hw: &HardwareConfig) -> Result<Self> {
        let mut models = Vec::new();
        for layers in [1, 2] {
            let c = ModelConfig { num_layers: layers, ..cfg.clone() };
            let g = optimize(&build_ir(&c)?)?;
            let layout = plan_layout(&c, plan, hw)?;
            let mem = allocate_memory(&g, hw, &layout, sched.max_len)?;
            models.push((g, layout, mem, Exponents::zero(layers)));
        }
        Ok(Counter { models, hw: hw.clone(), mask: build_attention_mask(plan.mask, sched.max_len), layers: cfg.num_layers })
    }

    /// `(unmerged, merged)` counts for the full layer count.
    fn count(&self, t: Target) -> Result<(u128, u128)> {
        let mut c = [(0u128, 0u128); 2];
        for (k, (g, layout, mem, exps)) in self.models.iter().enumerate() {
            let inp = LowerInput { graph: g, hw: &self.hw, layout, mem, mask: Some(&self.mask), exps };
            let insts = lower_instructions(&inp, t)?;
            c[k] = (insts.len() as u128, merge_program(&insts).len() as u128);
        }
        let extra = (self.layers - 1) as u128;
        Ok((c[0].0 + extra * (c[1].0 - c[0].0), c[0].1 + extra * (c[1].1 - c[0].1)))
    }
}

/// Unmerged instruction count of the exact-length program for every length.
pub fn naive_counts(cfg: &ModelConfig, plan: &CompressionPlan, sched: &BucketSchedule, hw: &HardwareConfig) -> Result<BTreeMap<(Stage, usize), u128>> {
    let counter = Counter::new(cfg, plan, sched, hw)?;
    let mut reps: BTreeMap<(Stage, (usize, usize, usize)), usize> = BTreeMap::new();
    for stage in [Stage::Prefill, Stage::Decode] {
        for len in 1..=sched.max_len {
            reps.entry((stage, length_class(cfg, stage, len))).or_insert(len);
        }
    }
    let per_class: Vec<((Stage, (usize, usize, usize)), u128)> = reps
        .par_iter()
        .map(|(&key, &len)| counter.count(Target::exact(key.0, len)).map(|c| (key, c.0)))
        .collect::<Result<_>>()?;
    let per_class: BTreeMap<_, _> = per_class.into_iter().collect();
    let mut out = BTreeMap::new();
    for stage in [Stage::Prefill, Stage::Decode] {
        for len in 1..=sched.max_len {
            out.insert((stage, len), per_class[&(stage, length_class(cfg, stage, len))]);
        }
    }
    Ok(out)
}

pub fn library_size_report(cfg: &ModelConfig, plan: &CompressionPlan, sched: &BucketSchedule, hw: &HardwareConfig) -> Result<SizeReport> {
    sched.validate()?;
    let cores = hw.num_cores as u128;
    let word = WORD_BYTES as u128;
    let naive: u128 = naive_counts(cfg, plan, sched, hw)?.values().sum::<u128>() * word * cores;
    let counter = Counter::new(cfg, plan, sched, hw)?;
    let targets = library_targets(sched);
    let counts: Vec<(Target, (u128, u128))> =
        targets.into_par_iter().map(|t| counter.count(t).map(|c| (t, c))).collect::<Result<_>>()?;
    let copies = if sched.slr_sharing { 1 } else { cores };
    let bucketed: u128 = counts.iter().map(|(_, c)| c.0).sum::<u128>() * word * copies;
    let merged_count: u128 = counts.iter().map(|(_, c)| if sched.channel_merge { c.1 } else { c.0 }).sum();
    let merged = merged_count * word * copies;
    let decode_program_bytes = counts
        .iter()
        .filter(|(t, _)| t.stage == Stage::Decode)
        .map(|(_, c)| if sched.channel_merge { c.1 } else { c.0 })
        .max()
        .unwrap_or(0)
        * word;
    Ok(SizeReport {
        naive_bytes: naive,
        bucketed_bytes: bucketed,
        merged_bytes: merged,
        reduction_factor: naive as f64 / merged.max(1) as f64,
        decode_program_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::lower::lower_instructions;

    fn tiny_fixture(layers: usize) -> (ModelConfig, CompressionPlan, BucketSchedule, HardwareConfig) {
        let cfg = ModelConfig::tiny(layers);
        let sched = BucketSchedule { prefill_bucket: 16, decode_bucket: 4, ..BucketSchedule::with_max_len(64) };
        let hw = HardwareConfig { num_cores: 1, ..HardwareConfig::u280() };
        (cfg, CompressionPlan::default(), sched, hw)
    }

    fn brute(cfg: &ModelConfig, plan: &CompressionPlan, sched: &BucketSchedule, hw: &HardwareConfig, t: Target) -> (u128, u128) {
        let g = optimize(&build_ir(cfg).unwrap()).unwrap();
        let layout = plan_layout(cfg, plan, hw).unwrap();
        let mem = allocate_memory(&g, hw, &layout, sched.max_len).unwrap();
        let mask = build_attention_mask(plan.mask, sched.max_len);
        let exps = Exponents::zero(cfg.num_layers);
        let inp = LowerInput { graph: &g, hw, layout: &layout, mem: &mem, mask: Some(&mask), exps: &exps };
        let insts = lower_instructions(&inp, t).unwrap();
        (insts.len() as u128, merge_program(&insts).len() as u128)
    }

    #[test]
    fn naive_matches_exhaustive_enumeration() {
        let (cfg, plan, sched, hw) = tiny_fixture(3);
        let counts = naive_counts(&cfg, &plan, &sched, &hw).unwrap();
        for stage in [Stage::Prefill, Stage::Decode] {
            for len in 1..=64 {
                assert_eq!(counts[&(stage, len)], brute(&cfg, &plan, &sched, &hw, Target::exact(stage, len)).0, "{stage:?} {len}");
            }
        }
        let r = library_size_report(&cfg, &plan, &sched, &hw).unwrap();
        let brute_naive: u128 = counts.values().sum::<u128>() * 16;
        assert_eq!(r.naive_bytes, brute_naive);
        let lib: (u128, u128) = library_targets(&sched)
            .into_iter()
            .map(|t| brute(&cfg, &plan, &sched, &hw, t))
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        assert_eq!(r.bucketed_bytes, lib.0 * 16);
        assert_eq!(r.merged_bytes, lib.1 * 16);
        assert!((r.reduction_factor - r.naive_bytes as f64 / r.merged_bytes as f64).abs() < 1e-9);
    }

    #[test]
    fn merging_strictly_shrinks() {
        let (cfg, plan, sched, hw) = tiny_fixture(1);
        let on = library_size_report(&cfg, &plan, &sched, &hw).unwrap();
        let off = library_size_report(&cfg, &plan, &BucketSchedule { channel_merge: false, ..sched }, &hw).unwrap();
        assert!(on.merged_bytes < on.bucketed_bytes);
        assert_eq!(off.merged_bytes, off.bucketed_bytes);
    }
}
