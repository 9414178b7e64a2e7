use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use half::f16;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use flight_core::compiler::library::plan_from_container;
use flight_core::compiler::{compile_library, library_size_report, plan_layout, BucketSchedule, HardwareConfig, ProgramLibrary};
use flight_core::compression::{compress_model, CompressionPlan, Container};
use flight_core::model::{build_ir, optimize, read_weights, synthesize_weights, ModelConfig, WeightSet};
use flight_core::perf::{estimate_resources, plan_for, search_mv_parallelism, simulate_with_layout, PerfOptions, Workload};
use flight_core::sim::{generate, reference_generate, GenerateTrace, Simulator};

const LIB_WEIGHTS: &str = "weights.flcm";
const SIZE_REPORT: &str = "size_report.json";

#[derive(Parser)]
#[command(name = "flight", version, about = "Compile, simulate and model LLM inference on the accelerator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Prune and quantize dense weights into a compressed container.
    Compress(CompressArgs),
    /// Build a length-bucketed program library from a compressed container.
    Compile(CompileArgs),
    /// Run prefill and decode on the functional simulator.
    Simulate(SimulateArgs),
    /// Estimate latency, traffic and bandwidth utilization.
    Perf(PerfArgs),
    /// Emit the resource-estimate manifest for a hardware configuration.
    Manifest(ManifestArgs),
    /// Compare the simulator against the reference forward pass.
    Verify(VerifyArgs),
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Compress(_) => "compress",
            Cmd::Compile(_) => "compile",
            Cmd::Simulate(_) => "simulate",
            Cmd::Perf(_) => "perf",
            Cmd::Manifest(_) => "manifest",
            Cmd::Verify(_) => "verify",
        }
    }
}

#[derive(Args)]
struct WeightArgs {
    /// Dense weight file.
    #[arg(long, conflicts_with = "synthesize")]
    weights: Option<PathBuf>,
    /// Use seeded random weights instead of a weight file.
    #[arg(long)]
    synthesize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompressArgs {
    /// Model config JSON, or a preset name (llama2-7b, tiny).
    #[arg(long)]
    model: String,
    #[command(flatten)]
    weights: WeightArgs,
    /// Compression plan JSON; defaults to the built-in plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    model: String,
    /// Hardware config JSON, or a preset name (u280, vhk158).
    #[arg(long, default_value = "u280")]
    hw: String,
    /// Bucket schedule JSON; defaults to the built-in schedule.
    #[arg(long)]
    sched: Option<PathBuf>,
    #[arg(long)]
    compressed: PathBuf,
    /// Library directory to create.
    #[arg(long, short)]
    out: PathBuf,
    /// Embed a timestamp in the size report.
    #[arg(long)]
    stamp: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    library: PathBuf,
    /// Prompt embeddings: little-endian f16 rows of the hidden width.
    #[arg(long, conflicts_with = "prompt_len")]
    prompt: Option<PathBuf>,
    /// Length of a seeded random prompt used when no prompt file is given.
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode steps after the prompt.
    #[arg(long, default_value_t = 0)]
    tokens: usize,
    /// Directory for trace.json and state.bin.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PerfArgs {
    /// Compiled library; its model, schedule and container define the workload.
    #[arg(long, conflicts_with = "model")]
    library: Option<PathBuf>,
    /// Model config or preset for an analytical run without a library.
    #[arg(long)]
    model: Option<String>,
    /// Compression plan for runs without a library.
    #[arg(long, requires = "model")]
    plan: Option<PathBuf>,
    /// Bucket schedule for runs without a library.
    #[arg(long, requires = "model")]
    sched: Option<PathBuf>,
    /// Defaults to the library's hardware, or u280.
    #[arg(long)]
    hw: Option<String>,
    #[arg(long, overrides_with = "no_fused")]
    fused: bool,
    #[arg(long, overrides_with = "fused")]
    no_fused: bool,
    #[arg(long, overrides_with = "no_sparse")]
    sparse: bool,
    #[arg(long, overrides_with = "sparse")]
    no_sparse: bool,
    #[arg(long, default_value_t = 512)]
    prompt_len: usize,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    /// Write the per-instruction time series as timeline.csv.
    #[arg(long)]
    csv: bool,
    /// Embed a timestamp in the report.
    #[arg(long)]
    stamp: bool,
    /// Directory for report.json and report.txt.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long, default_value = "u280")]
    hw: String,
    /// Model whose hidden width sizes the matrix-vector parallelism search.
    #[arg(long)]
    model: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Model config or preset; with --library the library's model is used.
    #[arg(long, required_unless_present = "library")]
    model: Option<String>,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "u280")]
    hw: String,
    #[arg(long)]
    sched: Option<PathBuf>,
    /// Verify an existing library instead of compiling one.
    #[arg(long, conflicts_with_all = ["model", "plan", "sched"])]
    library: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    prompt_seed: u64,
    /// Largest accepted distance in fp16 units in the last place.
    #[arg(long, default_value_t = 2)]
    max_ulp: u32,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn load_model(arg: &str) -> Result<ModelConfig> {
    match arg {
        "llama2-7b" => Ok(ModelConfig::llama2_7b()),
        "tiny" => Ok(ModelConfig::tiny(2)),
        path => Ok(ModelConfig::from_json(&read_text(Path::new(path))?).with_context(|| format!("model config {path}"))?),
    }
}

fn load_hw(arg: &str) -> Result<HardwareConfig> {
    if let Ok(hw) = HardwareConfig::preset(arg) {
        return Ok(hw);
    }
    Ok(HardwareConfig::from_json(&read_text(Path::new(arg))?).with_context(|| format!("hardware config {arg}"))?)
}

fn load_plan(path: Option<&Path>) -> Result<CompressionPlan> {
    match path {
        Some(p) => Ok(CompressionPlan::from_json(&read_text(p)?).with_context(|| format!("compression plan {}", p.display()))?),
        None => Ok(CompressionPlan::default()),
    }
}

fn load_sched(path: Option<&Path>) -> Result<BucketSchedule> {
    match path {
        Some(p) => Ok(BucketSchedule::from_json(&read_text(p)?).with_context(|| format!("bucket schedule {}", p.display()))?),
        None => Ok(BucketSchedule::default()),
    }
}

fn load_weights(cfg: &ModelConfig, w: &WeightArgs) -> Result<(WeightSet, Option<u64>)> {
    match (&w.weights, w.synthesize) {
        (Some(p), _) => Ok((read_weights(p).with_context(|| format!("weights {}", p.display()))?, None)),
        (None, true) => Ok((synthesize_weights(cfg, w.seed), Some(w.seed))),
        (None, false) => bail!("either --weights or --synthesize is required"),
    }
}

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path).with_context(|| format!("container {}", path.display()))
}

fn read_library(dir: &Path) -> Result<(ProgramLibrary, Container)> {
    let lib = ProgramLibrary::read(dir).with_context(|| format!("library {}", dir.display()))?;
    let c = read_container(&dir.join(LIB_WEIGHTS))?;
    Ok((lib, c))
}

fn timestamp() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn to_json(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn compress(a: &CompressArgs) -> Result<()> {
    let cfg = load_model(&a.model)?;
    let plan = load_plan(a.plan.as_deref())?;
    let (weights, seed) = load_weights(&cfg, &a.weights)?;
    let c = compress_model(&cfg, &weights, &plan)?;
    c.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let meta = json!({ "model": cfg, "plan": plan, "synthesized_seed": seed, "entries": c.entries.len() });
    write_file(&a.out.with_extension("json"), to_json(&meta)?)?;
    info!("compressed {} tensors into {}", c.entries.len(), a.out.display());
    Ok(())
}

fn compile(a: &CompileArgs) -> Result<()> {
    let cfg = load_model(&a.model)?;
    let hw = load_hw(&a.hw)?;
    let sched = load_sched(a.sched.as_deref())?;
    let c = read_container(&a.compressed)?;
    let g = optimize(&build_ir(&cfg)?)?;
    let lib = compile_library(&g, &c, &sched, &hw)?;
    lib.write(&a.out).with_context(|| format!("writing library {}", a.out.display()))?;
    write_file(&a.out.join(LIB_WEIGHTS), c.to_bytes()?)?;
    let plan = plan_from_container(&cfg, &c)?;
    let size = library_size_report(&cfg, &plan, &sched, &hw)?;
    let mut report = json!({
        "programs": lib.program_count(),
        "prefill_programs": lib.prefill.len(),
        "decode_programs": lib.decode.len(),
        "library_bytes": lib.size_bytes(),
        "size": size,
    });
    if a.stamp {
        report["timestamp"] = json!(timestamp());
    }
    write_file(&a.out.join(SIZE_REPORT), to_json(&report)?)?;
    info!("compiled {} programs into {}", lib.program_count(), a.out.display());
    Ok(())
}

fn read_prompt(path: &Path, width: usize) -> Result<Vec<Vec<f16>>> {
    let b = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let row = 2 * width;
    if b.is_empty() || b.len() % row != 0 {
        bail!("prompt {} holds {} bytes, not a whole number of {width}-wide f16 rows", path.display(), b.len());
    }
    Ok(b.chunks(row).map(|r| r.chunks(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect()).collect())
}

fn random_prompt(len: usize, width: usize, seed: u64) -> Vec<Vec<f16>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| (0..width).map(|_| f16::from_f32(rng.gen_range(-1.0..1.0))).collect()).collect()
}

fn rows_json(rows: &[Vec<f16>]) -> serde_json::Value {
    json!(rows.iter().map(|r| r.iter().map(|v| v.to_f32()).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn trace_json(t: &GenerateTrace, seed: Option<u64>) -> serde_json::Value {
    json!({
        "prompt_seed": seed,
        "prompt_len": t.prefill.len(),
        "tokens": t.decode.len(),
        "prefill_kv_bytes": t.prefill_kv_bytes,
        "decode_activation_bytes": t.decode_activation_bytes,
        "prefill": rows_json(&t.prefill),
        "decode": rows_json(&t.decode),
    })
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (lib, c) = read_library(&a.library)?;
    let width = lib.config.hidden_dim;
    let (prompt, seed) = match (&a.prompt, a.prompt_len) {
        (Some(p), _) => (read_prompt(p, width)?, None),
        (None, Some(len)) => (random_prompt(len, width, a.seed), Some(a.seed)),
        (None, None) => bail!("either --prompt or --prompt-len is required"),
    };
    let mut sim = Simulator::new(&lib, &c)?;
    let total = prompt.len() + a.tokens;
    if total > lib.schedule.max_len {
        bail!("prompt plus tokens is {total}, beyond the library's max_len {}", lib.schedule.max_len);
    }
    let trace = generate(&mut sim, &prompt, a.tokens)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("trace.json"), to_json(&trace_json(&trace, seed))?)?;
    write_file(&a.out.join("state.bin"), sim.state.dump())?;
    info!("simulated {} prompt tokens and {} decode steps", prompt.len(), a.tokens);
    Ok(())
}

fn perf(a: &PerfArgs) -> Result<()> {
    let opts = PerfOptions { fused: !a.no_fused, sparse: !a.no_sparse, timeline: a.csv };
    let (model, plan, schedule, lib_hw) = match (&a.library, &a.model) {
        (Some(dir), _) => {
            let (lib, c) = read_library(dir)?;
            let plan = plan_from_container(&lib.config, &c)?;
            (lib.config, plan, lib.schedule, Some(lib.hardware))
        }
        (None, Some(m)) => (load_model(m)?, load_plan(a.plan.as_deref())?, load_sched(a.sched.as_deref())?, None),
        (None, None) => bail!("either --library or --model is required"),
    };
    let hw = match (&a.hw, lib_hw) {
        (Some(arg), _) => load_hw(arg)?,
        (None, Some(hw)) => hw,
        (None, None) => HardwareConfig::u280(),
    };
    let layout = plan_layout(&model, &plan_for(&plan, opts.sparse), &hw)?;
    let w = Workload { model, plan, schedule, prompt_len: a.prompt_len, out_tokens: a.tokens };
    let r = simulate_with_layout(&w, &layout, &hw, opts)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut report = serde_json::to_value(&r)?;
    if a.stamp {
        report["timestamp"] = json!(timestamp());
    }
    write_file(&a.out.join("report.json"), to_json(&report)?)?;
    write_file(&a.out.join("report.txt"), r.to_text())?;
    if a.csv {
        write_file(&a.out.join("timeline.csv"), r.timeline_csv())?;
    }
    print!("{}", r.to_text());
    Ok(())
}

fn manifest(a: &ManifestArgs) -> Result<()> {
    let hw = load_hw(&a.hw)?;
    let hidden = match &a.model {
        Some(m) => load_model(m)?.hidden_dim,
        None => ModelConfig::llama2_7b().hidden_dim,
    };
    let m = json!({
        "hardware": hw,
        "resources": estimate_resources(&hw),
        "mv_parallelism": search_mv_parallelism(hidden, hidden, &hw),
        "mv_search_dim": hidden,
    });
    let text = to_json(&m)?;
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Largest distance between two fp16 values in units in the last place.
fn ulp_distance(a: f16, b: f16) -> u32 {
    let key = |v: f16| {
        let bits = v.to_bits() as i32;
        if bits & 0x8000 != 0 {
            -(bits & 0x7FFF)
        } else {
            bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

fn max_ulp(a: &[Vec<f16>], b: &[Vec<f16>]) -> Result<u32> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        bail!("trace shapes differ");
    }
    Ok(a.iter().flatten().zip(b.iter().flatten()).map(|(&x, &y)| if x.is_nan() || y.is_nan() { u32::MAX } else { ulp_distance(x, y) }).max().unwrap_or(0))
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let (lib, c, seed) = match &a.library {
        Some(dir) => {
            let (lib, c) = read_library(dir)?;
            (lib, c, None)
        }
        None => {
            let cfg = load_model(a.model.as_deref().unwrap_or("tiny"))?;
            let plan = load_plan(a.plan.as_deref())?;
            let sched = load_sched(a.sched.as_deref())?;
            let hw = load_hw(&a.hw)?;
            let (weights, seed) = load_weights(&cfg, &a.weights)?;
            let c = compress_model(&cfg, &weights, &plan)?;
            let g = optimize(&build_ir(&cfg)?)?;
            (compile_library(&g, &c, &sched, &hw)?, c, seed)
        }
    };
    let prompt = random_prompt(a.prompt_len, lib.config.hidden_dim, a.prompt_seed);
    let sim = flight_core::sim::run_generate(&lib, &c, &prompt, a.tokens)?;
    let reference = reference_generate(&lib, &c, &prompt, a.tokens)?;
    let prefill = max_ulp(&sim.prefill, &reference.prefill)?;
    let decode = max_ulp(&sim.decode, &reference.decode)?;
    let ok = prefill <= a.max_ulp && decode <= a.max_ulp;
    let result = json!({
        "weights_seed": seed,
        "prompt_seed": a.prompt_seed,
        "prompt_len": a.prompt_len,
        "tokens": a.tokens,
        "prefill_max_ulp": prefill,
        "decode_max_ulp": decode,
        "pass": ok,
    });
    print!("{}", to_json(&result)?);
    if !ok {
        bail!("simulator differs from the reference by {} ulp (limit {})", prefill.max(decode), a.max_ulp);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLIGHT_LOG", "error")).init();
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Compress(a) => compress(a),
        Cmd::Compile(a) => compile(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Perf(a) => perf(a),
        Cmd::Manifest(a) => manifest(a),
        Cmd::Verify(a) => verify(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flight {}: {e:#}", cli.cmd.name());
            ExitCode::FAILURE
        }
    }
}
