//! Acceptance criteria 1-10. Every test writes one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use half::f16;
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flight_core::compiler::library::library_targets;
use flight_core::compiler::{
    bucketize, compile_library, library_size_report, lower_graph, lower_instructions, BucketSchedule, HardwareConfig, LowerInput, ProgramLibrary, Target,
};
use flight_core::compression::{compress_model, CompressionPlan, Container};
use flight_core::isa::merge::{expand_merged, expand_program, merge_channel_lds, merge_program, striped, CHANNEL_BYTES};
use flight_core::isa::{Buffer, Flags, Instruction, Opcode, Stage};
use flight_core::model::{build_ir, optimize, synthesize_weights, IrGraph, ModelConfig};
use flight_core::perf::{estimate_resources, simulate_performance, PerfOptions, PerfReport, Workload};
use flight_core::sim::{generate, reference_generate, vpu_dot, CsdChainConfig, Simulator};

// criterion 1
const DOT_CASES: usize = 10_000;
const DOT_LIMIT: Duration = Duration::from_secs(30);
const MAX_GROUPS: usize = 64;
// criterion 2
const PROMPT_LENS: [usize; 6] = [1, 7, 16, 63, 64, 65];
const DECODE_STEPS: usize = 8;
const MAX_ULP: u32 = 2;
const E2E_LIMIT: Duration = Duration::from_secs(60);
// criterion 3
const BUCKET_MAX_LEN: usize = 128;
const BUCKET_LIMIT: Duration = Duration::from_secs(300);
// criterion 4
const MIN_REDUCTION: f64 = 150.0;
const SIZE_LIMIT: Duration = Duration::from_secs(120);
// criterion 6
const FUSED_UTIL: f64 = 0.659;
const UNFUSED_UTIL: f64 = 0.356;
const UTIL_TOL: f64 = 0.08;
const MIN_FUSION_RATIO: f64 = 1.5;
const LATENCY_SCALES: [f64; 3] = [0.5, 1.0, 2.0];
// criterion 7
const VHK_TOKENS: f64 = 92.5;
const VHK_TOL: f64 = 0.25;
// criterion 8
const SPARSE_SPEEDUP: (f64, f64) = (1.05, 1.3);
const CUMULATIVE_SPEEDUP: (f64, f64) = (1.4, 2.0);
// criterion 9
const DSP: usize = 6144;
const PLATFORM_DSP: usize = 9024;
const PEAK_BW_GBPS: f64 = 172.8;
// criterion 10
const CODEC_CASES: usize = 100_000;
const MERGE_CASES: usize = 1_000;
const CODEC_LIMIT: Duration = Duration::from_secs(10);

fn report(n: u32, pass: bool, detail: String) {
    let _ = writeln!(std::io::stderr(), "criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n}: {detail}");
}

fn tiny(sched: &BucketSchedule) -> (IrGraph, ProgramLibrary, Container) {
    let cfg = ModelConfig::tiny(2);
    let c = compress_model(&cfg, &synthesize_weights(&cfg, 11), &CompressionPlan::default()).unwrap();
    let g = optimize(&build_ir(&cfg).unwrap()).unwrap();
    let lib = compile_library(&g, &c, sched, &HardwareConfig::u280()).unwrap();
    (g, lib, c)
}

fn prompt(len: usize, width: usize, seed: u64) -> Vec<Vec<f16>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| (0..width).map(|_| f16::from_f32(rng.gen_range(-1.0..1.0))).collect()).collect()
}

fn ulp(a: f16, b: f16) -> u32 {
    let key = |v: f16| {
        let bits = v.to_bits() as i32;
        if bits & 0x8000 != 0 {
            -(bits & 0x7FFF)
        } else {
            bits
        }
    };
    if a.is_nan() || b.is_nan() {
        return u32::MAX;
    }
    (key(a) - key(b)).unsigned_abs()
}

fn rows_ulp(a: &[Vec<f16>], b: &[Vec<f16>]) -> u32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| {
        assert_eq!(x.len(), y.len());
        x.iter().zip(y).map(|(&p, &q)| ulp(p, q))
    })
    .max()
    .unwrap_or(0)
}

fn extreme_i8(rng: &mut ChaCha8Rng) -> i8 {
    match rng.gen_range(0..4) {
        0 => -128,
        1 => 127,
        _ => rng.gen(),
    }
}

/// Sub-chain `i` as a dense dot product over the full M-wide groups with
/// every weight the selector does not route masked to zero.
fn masked_dense(w: &[i8], a: &[i8], idx: &[u8], n: usize, m: usize, i: usize) -> BigInt {
    let groups = a.len() / m;
    let mut dense = vec![0i8; groups * m];
    for g in 0..groups {
        dense[g * m + idx[g * n + i] as usize] = w[g * n + i];
    }
    dense.iter().zip(a).map(|(&x, &y)| BigInt::from(x) * BigInt::from(y)).sum()
}

#[test]
fn criterion_1_datapath_exactness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0usize;
    let mut cases = 0usize;
    let mut oau_cases = 0usize;
    for m in [4usize, 8, 16] {
        for n in (1..=m).filter(|n| m % n == 0) {
            for c in 0..DOT_CASES {
                let groups = if c % 8 == 0 { MAX_GROUPS } else { rng.gen_range(1..=MAX_GROUPS) };
                let a: Vec<i8> = (0..groups * m).map(|_| extreme_i8(&mut rng)).collect();
                let w: Vec<i8> = (0..groups * n).map(|_| extreme_i8(&mut rng)).collect();
                let mut idx = Vec::with_capacity(groups * n);
                for _ in 0..groups {
                    let mut pos: Vec<u8> = (0..m as u8).collect();
                    for j in 0..n {
                        let k = rng.gen_range(j..m);
                        pos.swap(j, k);
                    }
                    let mut kept = pos[..n].to_vec();
                    kept.sort_unstable();
                    idx.extend(kept);
                }
                let got = vpu_dot(&CsdChainConfig::nm(n, m, groups), &w, &a, &idx).unwrap();
                for (i, &g) in got.iter().enumerate() {
                    if BigInt::from(g) != masked_dense(&w, &a, &idx, n, m, i) {
                        failures += 1;
                    }
                }
                oau_cases += (groups > 8) as usize;
                cases += 1;
            }
        }
    }
    for _ in 0..DOT_CASES {
        let len = 4 * MAX_GROUPS;
        let w: Vec<i8> = (0..len).map(|_| extreme_i8(&mut rng)).collect();
        let a: Vec<i8> = (0..len).map(|_| extreme_i8(&mut rng)).collect();
        let reference: BigInt = w.iter().zip(&a).map(|(&x, &y)| BigInt::from(x) * BigInt::from(y)).sum();
        if BigInt::from(vpu_dot(&CsdChainConfig::dense(len), &w, &a, &[]).unwrap()[0]) != reference {
            failures += 1;
        }
        cases += 1;
    }
    let el = t.elapsed();
    report(1, failures == 0 && el < DOT_LIMIT, format!("{cases} cases ({oau_cases} with OAU splits), {failures} mismatches, {el:.1?} (limit {DOT_LIMIT:?})"));
}

#[test]
fn criterion_2_end_to_end_oracle() {
    let t = Instant::now();
    let (_, lib, c) = tiny(&BucketSchedule::with_max_len(128));
    let mut worst = 0;
    let mut exact = true;
    for (s, &len) in PROMPT_LENS.iter().enumerate() {
        let p = prompt(len, lib.config.hidden_dim, 100 + s as u64);
        let mut sim = Simulator::new(&lib, &c).unwrap();
        let got = generate(&mut sim, &p, DECODE_STEPS).unwrap();
        let want = reference_generate(&lib, &c, &p, DECODE_STEPS).unwrap();
        let d = rows_ulp(&got.prefill, &want.prefill).max(rows_ulp(&got.decode, &want.decode));
        exact &= got.prefill == want.prefill && got.decode == want.decode;
        worst = worst.max(d);
    }
    let el = t.elapsed();
    report(2, worst <= MAX_ULP && el < E2E_LIMIT, format!("prompts {PROMPT_LENS:?} + {DECODE_STEPS} decode steps: max {worst} ulp (limit {MAX_ULP}), bit-exact {exact}, {el:.1?}"));
}

#[test]
fn criterion_3_bucket_reuse() {
    let t = Instant::now();
    let (g, lib, c) = tiny(&BucketSchedule::with_max_len(BUCKET_MAX_LEN));
    let inp = LowerInput { graph: &g, hw: &lib.hardware, layout: &lib.layout, mem: &lib.memory, mask: Some(&lib.mask), exps: &lib.exponents };
    let merge = lib.schedule.channel_merge;
    let base = Simulator::new(&lib, &c).unwrap().state;
    let p = prompt(BUCKET_MAX_LEN, lib.config.hidden_dim, 3);
    let mut bad = Vec::new();
    for len in 1..=BUCKET_MAX_LEN {
        let rows = &p[..len];
        let bucketed = lib.program(Stage::Prefill, bucketize(len, Stage::Prefill, &lib.schedule).unwrap()).unwrap();
        let exact = lower_graph(&inp, Target::exact(Stage::Prefill, len), merge).unwrap();
        let mut a = Simulator { lib: &lib, state: base.clone() };
        let mut b = Simulator { lib: &lib, state: base.clone() };
        let ya = a.run_program(bucketed, rows, len).unwrap();
        let yb = b.run_program(&exact, rows, len).unwrap();
        if ya[..len] != yb[..len] {
            bad.push(format!("prefill {len}"));
        }
        if len < BUCKET_MAX_LEN {
            let x = &p[len];
            let kv = len + 1;
            let db = lib.program(Stage::Decode, bucketize(kv, Stage::Decode, &lib.schedule).unwrap()).unwrap();
            let de = lower_graph(&inp, Target::exact(Stage::Decode, kv), merge).unwrap();
            let mut s2 = Simulator { lib: &lib, state: a.state.clone() };
            let za = a.run_program(db, &[x.clone()], kv).unwrap();
            let zb = s2.run_program(&de, &[x.clone()], kv).unwrap();
            if za[0] != zb[0] {
                bad.push(format!("decode {kv}"));
            }
        }
    }
    let el = t.elapsed();
    report(3, bad.is_empty() && el < BUCKET_LIMIT, format!("lengths 1..={BUCKET_MAX_LEN}, prefill and decode: mismatches {bad:?}, {el:.1?}"));
}

#[test]
fn criterion_4_instruction_volume() {
    let t = Instant::now();
    let r = library_size_report(&ModelConfig::llama2_7b(), &CompressionPlan::default(), &BucketSchedule::default(), &HardwareConfig::u280()).unwrap();
    let el = t.elapsed();
    report(
        4,
        r.reduction_factor >= MIN_REDUCTION && el < SIZE_LIMIT,
        format!(
            "naive {:.3} TB, bucketed {:.3} GB, merged {:.3} GB, reduction {:.1}x (min {MIN_REDUCTION}), {el:.1?}",
            r.naive_bytes as f64 / 1e12,
            r.bucketed_bytes as f64 / 1e9,
            r.merged_bytes as f64 / 1e9,
            r.reduction_factor
        ),
    );
}

fn is_transfer(i: &Instruction) -> bool {
    matches!(i.op(), Opcode::Ld | Opcode::St)
}

#[test]
fn criterion_5_channel_merging() {
    let merged_sched = BucketSchedule::with_max_len(128);
    let plain_sched = BucketSchedule { channel_merge: false, ..merged_sched.clone() };
    let (g, merged, c) = tiny(&merged_sched);
    let (_, plain, _) = tiny(&plain_sched);

    let inp = LowerInput { graph: &g, hw: &merged.hardware, layout: &merged.layout, mem: &merged.memory, mask: Some(&merged.mask), exps: &merged.exponents };
    let mut exact_8x = true;
    let mut groups = 0usize;
    for target in library_targets(&merged_sched) {
        let p = merged.program(target.stage, target.len).unwrap();
        let raw = lower_instructions(&inp, target).unwrap();
        let m = merge_program(&raw);
        exact_8x &= m == p.instructions;
        exact_8x &= expand_program(&m).unwrap() == raw;
        let broadcast = m.iter().filter(|i| i.flags.merged_broadcast).count();
        let left = m.iter().filter(|i| is_transfer(i) && !i.flags.merged_broadcast).count();
        let before = raw.iter().filter(|i| is_transfer(i)).count();
        exact_8x &= before - left == 8 * broadcast;
        groups += broadcast;
    }
    let size = library_size_report(&ModelConfig::tiny(2), &CompressionPlan::default(), &merged_sched, &merged.hardware).unwrap();
    let smaller = size.merged_bytes < size.bucketed_bytes && merged.size_bytes() < plain.size_bytes();

    let mut same = true;
    for (s, &len) in [7usize, 64, 65].iter().enumerate() {
        let p = prompt(len, merged.config.hidden_dim, 50 + s as u64);
        let mut a = Simulator::new(&merged, &c).unwrap();
        let mut b = Simulator::new(&plain, &c).unwrap();
        let ta = generate(&mut a, &p, 4).unwrap();
        let tb = generate(&mut b, &p, 4).unwrap();
        same &= ta == tb && a.state.same_data(&b.state);
    }
    report(
        5,
        exact_8x && smaller && same && groups > 0,
        format!(
            "{groups} merged groups, exact 8x drop {exact_8x}; merged {} B < bucketed {} B: {smaller}; simulator states identical {same}",
            size.merged_bytes, size.bucketed_bytes
        ),
    );
}

fn run(hw: &HardwareConfig, fused: bool, sparse: bool) -> PerfReport {
    simulate_performance(&Workload::llama2_7b(), hw, PerfOptions { fused, sparse, timeline: false }).unwrap()
}

#[test]
fn criterion_6_bandwidth_utilization() {
    let base = HardwareConfig::u280();
    let fused = run(&base, true, true);
    let unfused = run(&base, false, true);
    let (fu, uu) = (fused.decode.bandwidth_utilization, unfused.decode.bandwidth_utilization);
    let mut worst_ratio = f64::INFINITY;
    for hs in LATENCY_SCALES {
        for ds in LATENCY_SCALES {
            let hw = HardwareConfig {
                hbm_latency_cycles: (base.hbm_latency_cycles as f64 * hs).round() as u64,
                ddr_latency_cycles: (base.ddr_latency_cycles as f64 * ds).round() as u64,
                ..base.clone()
            };
            let r = run(&hw, true, true).tokens_per_second / run(&hw, false, true).tokens_per_second;
            worst_ratio = worst_ratio.min(r);
        }
    }
    let pass = (fu - FUSED_UTIL).abs() <= UTIL_TOL && (uu - UNFUSED_UTIL).abs() <= UTIL_TOL && worst_ratio >= MIN_FUSION_RATIO;
    report(
        6,
        pass,
        format!(
            "decode utilization fused {:.1}% (target {:.1} +- {:.0}), unfused {:.1}% (target {:.1} +- {:.0}); worst fused/unfused ratio over latency x{LATENCY_SCALES:?} = {worst_ratio:.3} (min {MIN_FUSION_RATIO})",
            100.0 * fu,
            100.0 * FUSED_UTIL,
            100.0 * UTIL_TOL,
            100.0 * uu,
            100.0 * UNFUSED_UTIL,
            100.0 * UTIL_TOL
        ),
    );
}

#[test]
fn criterion_7_vhk158_throughput() {
    let hw = HardwareConfig::vhk158();
    let r = run(&hw, true, true);
    let tps = r.tokens_per_second;
    let (lo, hi) = (VHK_TOKENS * (1.0 - VHK_TOL), VHK_TOKENS * (1.0 + VHK_TOL));
    report(7, (lo..=hi).contains(&tps) && hw.platform_dsps == 7392 && hw.hbm_peak_bytes_per_s() > 8.0e11, format!("{tps:.1} tokens/s (target {VHK_TOKENS} in [{lo:.1}, {hi:.1}])"));
}

#[test]
fn criterion_8_breakdown() {
    let hw = HardwareConfig::u280();
    let naive = run(&hw, false, false).tokens_per_second;
    let sparse = run(&hw, false, true).tokens_per_second / naive;
    let both = run(&hw, true, true).tokens_per_second / naive;
    let pass = (SPARSE_SPEEDUP.0..=SPARSE_SPEEDUP.1).contains(&sparse) && (CUMULATIVE_SPEEDUP.0..=CUMULATIVE_SPEEDUP.1).contains(&both);
    report(8, pass, format!("sparse-only {sparse:.3}x (in {SPARSE_SPEEDUP:?}), fused+sparse {both:.3}x (in {CUMULATIVE_SPEEDUP:?})"));
}

#[test]
fn criterion_9_resource_formula() {
    let r = estimate_resources(&HardwareConfig::u280());
    let pass = r.dsp == DSP && r.dsp <= PLATFORM_DSP && (r.peak_bw_gbps - PEAK_BW_GBPS).abs() < 1e-9;
    report(9, pass, format!("DSP {} (expect {DSP}, platform {PLATFORM_DSP}), peak bw {:.1} GB/s (expect {PEAK_BW_GBPS})", r.dsp, r.peak_bw_gbps));
}

fn random_instruction(rng: &mut ChaCha8Rng) -> Instruction {
    let opcode = rng.gen_range(0..6u8);
    Instruction {
        opcode,
        flags: Flags::from_bits(rng.gen_range(0..16)),
        channel_mask: rng.gen(),
        offchip_addr: rng.gen(),
        onchip_addr: rng.gen(),
        m: rng.gen(),
        k: rng.gen(),
        n: rng.gen(),
        nm_n: rng.gen_range(0..16),
        nm_log2m: rng.gen_range(0..16),
        aux: if opcode == Opcode::Misc as u8 { rng.gen_range(0..8) } else { rng.gen() },
    }
}

fn random_group(rng: &mut ChaCha8Rng) -> Vec<Instruction> {
    let (buf, elem) = match rng.gen_range(0..3) {
        0 => (Buffer::Act, 1),
        1 => (Buffer::Weight, 1),
        _ => (Buffer::Global, 2),
    };
    let line = buf.line_bytes();
    let n = (line / elem * rng.gen_range(1..=4)) as u16;
    let m = rng.gen_range(1..=16u16);
    let op = if rng.gen() { Opcode::Ld } else { Opcode::St };
    let base = Instruction {
        k: buf as u16,
        m,
        n,
        offchip_addr: rng.gen_range(0..CHANNEL_BYTES as u32),
        onchip_addr: rng.gen_range(0..1024),
        channel_mask: 1,
        ..Instruction::new(op)
    };
    striped(base).unwrap()
}

#[test]
fn criterion_10_codec_fuzzing() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut codec_fail = 0;
    for _ in 0..CODEC_CASES {
        let i = random_instruction(&mut rng);
        match i.encode().and_then(|w| Instruction::decode(&w)) {
            Ok(d) if d == i => {}
            _ => codec_fail += 1,
        }
    }
    let mut merge_fail = 0;
    for _ in 0..MERGE_CASES {
        let group = random_group(&mut rng);
        let ok = match merge_channel_lds(&group) {
            Ok(m) => m.flags.merged_broadcast && expand_merged(&m).map(|e| e == group).unwrap_or(false) && Instruction::decode(&m.encode().unwrap()).unwrap() == m,
            Err(_) => false,
        };
        let mut broken = group.clone();
        broken[rng.gen_range(1..8)].onchip_addr ^= 1;
        merge_fail += (!ok || merge_channel_lds(&broken).is_ok()) as usize;
    }
    let el = t.elapsed();
    report(
        10,
        codec_fail == 0 && merge_fail == 0 && el < CODEC_LIMIT,
        format!("{CODEC_CASES} encode/decode round trips ({codec_fail} failures), {MERGE_CASES} merge/expand round trips ({merge_fail} failures), {el:.1?}"),
    );
}
