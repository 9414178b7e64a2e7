//! Analytical performance model: tiling bounds, resource formulas and an
//! instruction-level cycle model over compiled programs.

pub mod analytic;
pub mod timing;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use analytic::{
    core_bytes_per_cycle, estimate_resources, search_mv_parallelism, search_mv_parallelism_bw, t_mem_cmp, MvParallelism, ResourceEstimate,
    TileShape,
};
pub use timing::{time_program, InstrTiming, ProgramTiming};

use crate::compiler::library::library_targets;
use crate::compiler::{
    allocate_memory, bucketize, lower_graph, plan_layout, BucketSchedule, Exponents, HardwareConfig, LowerInput, ModelLayout, Target,
};
use crate::compression::{build_attention_mask, CompressionPlan};
use crate::error::{Error, Result};
use crate::isa::{Program, Stage};
use crate::model::{build_ir, optimize, remove_views, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfOptions {
    /// Fused, always-on-chip dataflow with overlapped execution. Off selects
    /// the baseline: blocking execution with every activation moved
    /// through HBM.
    pub fused: bool,
    /// N:M sparse weights on the sparse DSP chains. Off uses dense weights.
    pub sparse: bool,
    /// Keep per-instruction timings for the CSV time series.
    pub timeline: bool,
}

impl Default for PerfOptions {
    fn default() -> Self {
        PerfOptions { fused: true, sparse: true, timeline: false }
    }
}

/// A prompt followed by token-by-token generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub model: ModelConfig,
    pub plan: CompressionPlan,
    pub schedule: BucketSchedule,
    pub prompt_len: usize,
    pub out_tokens: usize,
}

impl Workload {
    /// 512 prompt tokens and 512 generated tokens on the 7B shape.
    pub fn llama2_7b() -> Self {
        Workload {
            model: ModelConfig::llama2_7b(),
            plan: CompressionPlan::default(),
            schedule: BucketSchedule::default(),
            prompt_len: 512,
            out_tokens: 512,
        }
    }

    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.prompt_len == 0 {
            return Err(Error::Config("workload needs a non-empty prompt".into()));
        }
        let total = self.prompt_len + self.out_tokens;
        if total > self.schedule.max_len {
            return Err(Error::Capacity { len: total, max_len: self.schedule.max_len });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub cycles: u64,
    pub seconds: f64,
    pub hbm_bytes: u64,
    pub ddr_bytes: u64,
    pub weight_bytes: u64,
    pub kv_bytes: u64,
    pub activation_bytes: u64,
    pub bandwidth_utilization: f64,
    /// Program executions in this phase.
    pub programs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub hardware: String,
    pub options: PerfOptions,
    pub frequency_mhz: f64,
    pub total_cycles: u64,
    pub seconds: f64,
    pub hbm_bytes: u64,
    pub ddr_bytes: u64,
    pub bandwidth_utilization: f64,
    pub tokens_per_second: f64,
    pub prefill: PhaseReport,
    pub decode: PhaseReport,
    pub resources: ResourceEstimate,
    pub mv_parallelism: MvParallelism,
    /// `(label, timings)` of each distinct program when requested.
    #[serde(skip)]
    pub timelines: Vec<(String, Vec<InstrTiming>)>,
}

fn utilization(bytes: u64, seconds: f64, hw: &HardwareConfig) -> f64 {
    if seconds > 0.0 {
        (bytes as f64 / (seconds * hw.hbm_peak_bytes_per_s())).min(1.0)
    } else {
        0.0
    }
}

impl PhaseReport {
    fn add(&mut self, t: &ProgramTiming, times: usize, cores: u64) {
        let n = times as u64;
        self.cycles += t.cycles * n;
        self.weight_bytes += t.weight_bytes * n * cores;
        self.kv_bytes += t.kv_bytes * n * cores;
        self.activation_bytes += t.activation_bytes * n * cores;
        self.ddr_bytes += t.ddr_bytes * n * cores;
        self.hbm_bytes = self.weight_bytes + self.kv_bytes + self.activation_bytes;
        self.programs += times;
    }

    fn finish(&mut self, hw: &HardwareConfig) {
        self.seconds = self.cycles as f64 / (hw.frequency_mhz * 1e6);
        self.bandwidth_utilization = utilization(self.hbm_bytes, self.seconds, hw);
    }
}

impl PerfReport {
    fn assemble(hw: &HardwareConfig, options: PerfOptions, mut prefill: PhaseReport, mut decode: PhaseReport, mv_parallelism: MvParallelism) -> Self {
        prefill.finish(hw);
        decode.finish(hw);
        let total_cycles = prefill.cycles + decode.cycles;
        let seconds = prefill.seconds + decode.seconds;
        let hbm_bytes = prefill.hbm_bytes + decode.hbm_bytes;
        let tokens_per_second = if decode.seconds > 0.0 { decode.programs as f64 / decode.seconds } else { 0.0 };
        PerfReport {
            hardware: hw.name.clone(),
            options,
            frequency_mhz: hw.frequency_mhz,
            total_cycles,
            seconds,
            hbm_bytes,
            ddr_bytes: prefill.ddr_bytes + decode.ddr_bytes,
            bandwidth_utilization: utilization(hbm_bytes, seconds, hw),
            tokens_per_second,
            prefill,
            decode,
            resources: estimate_resources(hw),
            mv_parallelism,
            timelines: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column table.
    pub fn to_text(&self) -> String {
        let phase = |p: &PhaseReport| {
            vec![
                ("cycles", p.cycles.to_string()),
                ("seconds", format!("{:.6}", p.seconds)),
                ("hbm bytes", p.hbm_bytes.to_string()),
                ("  weights", p.weight_bytes.to_string()),
                ("  kv cache", p.kv_bytes.to_string()),
                ("  activations", p.activation_bytes.to_string()),
                ("ddr bytes", p.ddr_bytes.to_string()),
                ("bw utilization", format!("{:.1}%", 100.0 * p.bandwidth_utilization)),
                ("programs", p.programs.to_string()),
            ]
        };
        let r = &self.resources;
        let mut rows: Vec<(String, String)> = vec![
            ("hardware".into(), self.hardware.clone()),
            ("fused".into(), self.options.fused.to_string()),
            ("sparse".into(), self.options.sparse.to_string()),
            ("total cycles".into(), self.total_cycles.to_string()),
            ("seconds".into(), format!("{:.6}", self.seconds)),
            ("hbm bytes".into(), self.hbm_bytes.to_string()),
            ("ddr bytes".into(), self.ddr_bytes.to_string()),
            ("bw utilization".into(), format!("{:.1}%", 100.0 * self.bandwidth_utilization)),
            ("tokens/s".into(), format!("{:.2}", self.tokens_per_second)),
        ];
        for (name, p) in [("prefill", &self.prefill), ("decode", &self.decode)] {
            rows.extend(phase(p).into_iter().map(|(k, v)| (format!("{name} {k}"), v)));
        }
        rows.extend([
            ("DSP".into(), r.dsp.to_string()),
            ("URAM".into(), r.uram.to_string()),
            ("BRAM36".into(), r.bram.to_string()),
            ("peak bw demand".into(), format!("{:.1} GB/s", r.peak_bw_gbps)),
            ("platform bw".into(), format!("{:.1} GB/s", r.platform_bw_gbps)),
            ("mv parallelism".into(), format!("p_K {} p_N {}{}", self.mv_parallelism.p_k, self.mv_parallelism.p_n, if self.mv_parallelism.saturated { " (saturated)" } else { "" })),
        ]);
        rows.extend(r.violations.iter().map(|v| ("warning".to_string(), v.clone())));
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v}");
        }
        s
    }

    /// Per-instruction cycles of every recorded program.
    pub fn timeline_csv(&self) -> String {
        let mut s = String::from("program,pc,op,start,end,bytes\n");
        for (label, t) in &self.timelines {
            for e in t {
                let _ = writeln!(s, "{label},{},{:?},{},{},{}", e.pc, e.op, e.start, e.end, e.bytes);
            }
        }
        s
    }
}

/// Times a single program.
pub fn simulate_program(p: &Program, hw: &HardwareConfig, opts: PerfOptions) -> PerfReport {
    let t = time_program(p, hw, opts.fused, opts.timeline);
    let (mut prefill, mut decode) = (PhaseReport::default(), PhaseReport::default());
    let cores = p.header.num_slrs as u64;
    match p.header.stage {
        Stage::Prefill => prefill.add(&t, 1, cores),
        Stage::Decode => decode.add(&t, 1, cores),
    }
    let (k, n) = p
        .instructions
        .iter()
        .filter(|i| i.nm_log2m == 4)
        .map(|i| (i.k as usize, i.n as usize))
        .max_by_key(|&(k, n)| k * n)
        .unwrap_or((1, 1));
    let mut r = PerfReport::assemble(hw, opts, prefill, decode, search_mv_parallelism(k, n, hw));
    if opts.timeline {
        r.timelines.push((format!("{:?}-{}", p.header.stage, p.header.bucket).to_lowercase(), t.timeline));
    }
    r
}

/// Programs executed by a workload: the prefill program and the decode
/// program of every step, keyed by `(stage, bucket)` with execution counts.
pub fn workload_programs(w: &Workload) -> Result<BTreeMap<(Stage, usize), usize>> {
    w.validate()?;
    let mut counts = BTreeMap::new();
    counts.insert((Stage::Prefill, bucketize(w.prompt_len, Stage::Prefill, &w.schedule)?), 1);
    for s in 0..w.out_tokens {
        let b = bucketize(w.prompt_len + s + 1, Stage::Decode, &w.schedule)?;
        *counts.entry((Stage::Decode, b)).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Lowers and times a workload with an explicit layout.
pub fn simulate_with_layout(w: &Workload, layout: &ModelLayout, hw: &HardwareConfig, opts: PerfOptions) -> Result<PerfReport> {
    let counts = workload_programs(w)?;
    let ir = build_ir(&w.model)?;
    let g = if opts.fused { optimize(&ir)? } else { remove_views(&ir)? };
    let mem = allocate_memory(&g, hw, layout, w.schedule.max_len)?;
    let mask = build_attention_mask(w.plan.mask, w.schedule.max_len);
    let exps = Exponents::zero(w.model.num_layers);
    let inp = LowerInput { graph: &g, hw, layout, mem: &mem, mask: Some(&mask), exps: &exps };
    let targets: BTreeMap<(Stage, usize), Target> = library_targets(&w.schedule).into_iter().map(|t| ((t.stage, t.len), t)).collect();
    let timed: Vec<((Stage, usize), usize, ProgramTiming)> = {
        use rayon::prelude::*;
        counts
            .par_iter()
            .map(|(&key, &n)| {
                let target = targets.get(&key).copied().unwrap_or(Target::exact(key.0, key.1));
                let p = lower_graph(&inp, target, w.schedule.channel_merge)?;
                Ok((key, n, time_program(&p, hw, opts.fused, opts.timeline)))
            })
            .collect::<Result<_>>()?
    };
    let (mut prefill, mut decode) = (PhaseReport::default(), PhaseReport::default());
    let cores = hw.num_cores as u64;
    let mut timelines = Vec::new();
    for (key, n, t) in timed {
        match key.0 {
            Stage::Prefill => prefill.add(&t, n, cores),
            Stage::Decode => decode.add(&t, n, cores),
        }
        if opts.timeline {
            timelines.push((format!("{:?}-{}", key.0, key.1).to_lowercase(), t.timeline));
        }
    }
    let mv = search_mv_parallelism(w.model.hidden_dim, w.model.hidden_dim, hw);
    let mut r = PerfReport::assemble(hw, opts, prefill, decode, mv);
    r.timelines = timelines;
    Ok(r)
}

/// Weight plan used for the `sparse` option: dense weights keep the bit
/// plan but every group holds all sixteen values.
pub fn plan_for(plan: &CompressionPlan, sparse: bool) -> CompressionPlan {
    if sparse {
        plan.clone()
    } else {
        CompressionPlan { nm_n: 16, block_n: BTreeMap::new(), ..plan.clone() }
    }
}

/// Compiles and times a full workload.
pub fn simulate_performance(w: &Workload, hw: &HardwareConfig, opts: PerfOptions) -> Result<PerfReport> {
    let layout = plan_layout(&w.model, &plan_for(&w.plan, opts.sparse), hw)?;
    simulate_with_layout(w, &layout, hw, opts)
}
