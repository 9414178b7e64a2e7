use std::path::Path;
use std::process::{Command, Output};

use flight_core::compiler::{compile_library, BucketSchedule, HardwareConfig, ProgramLibrary};
use flight_core::compression::{compress_model, CompressionPlan, Container};
use flight_core::model::{build_ir, optimize, synthesize_weights, ModelConfig};
use flight_core::sim::{run_generate, MachineState};
use half::f16;
use serde_json::Value;

fn flight(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flight")).current_dir(dir).args(args).output().expect("spawn flight")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = flight(dir, args);
    assert!(out.status.success(), "flight {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn compile_tiny(dir: &Path) {
    std::fs::write(dir.join("s.json"), r#"{"max_len": 128}"#).unwrap();
    ok(dir, &["compress", "--model", "tiny", "--synthesize", "--seed", "9", "-o", "c.flcm"]);
    ok(dir, &["compile", "--model", "tiny", "--sched", "s.json", "--compressed", "c.flcm", "-o", "lib"]);
}

#[test]
fn compile_lists_every_library_program() {
    let t = tempfile::tempdir().unwrap();
    compile_tiny(t.path());
    let cfg = ModelConfig::tiny(2);
    let c = compress_model(&cfg, &synthesize_weights(&cfg, 9), &CompressionPlan::default()).unwrap();
    let g = optimize(&build_ir(&cfg).unwrap()).unwrap();
    let lib = compile_library(&g, &c, &BucketSchedule::with_max_len(128), &HardwareConfig::u280()).unwrap();
    let manifest = json(&t.path().join("lib/manifest.json"));
    assert_eq!(manifest["programs"].as_array().unwrap().len(), lib.program_count());
    assert_eq!(json(&t.path().join("lib/size_report.json"))["programs"], lib.program_count());
    assert_eq!(ProgramLibrary::read(&t.path().join("lib")).unwrap(), lib);
    assert_eq!(json(&t.path().join("c.json"))["synthesized_seed"], 9);
}

#[test]
fn simulate_uses_only_emitted_files() {
    let t = tempfile::tempdir().unwrap();
    compile_tiny(t.path());
    let cfg = ModelConfig::tiny(2);
    let prompt: Vec<Vec<f16>> = (0..11).map(|r| (0..cfg.hidden_dim).map(|i| f16::from_f32(((r * 7 + i) % 13) as f32 / 13.0 - 0.5)).collect()).collect();
    let bytes: Vec<u8> = prompt.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(t.path().join("emb.bin"), bytes).unwrap();
    ok(t.path(), &["simulate", "--library", "lib", "--prompt", "emb.bin", "--tokens", "5", "-o", "run"]);

    let lib = ProgramLibrary::read(&t.path().join("lib")).unwrap();
    let c = Container::read(&t.path().join("c.flcm")).unwrap();
    let expect = run_generate(&lib, &c, &prompt, 5).unwrap();
    let trace = json(&t.path().join("run/trace.json"));
    let rows = |v: &Value| -> Vec<Vec<f32>> { serde_json::from_value(v.clone()).unwrap() };
    let f32s = |r: &[Vec<f16>]| -> Vec<Vec<f32>> { r.iter().map(|x| x.iter().map(|v| v.to_f32()).collect()).collect() };
    assert_eq!(rows(&trace["prefill"]), f32s(&expect.prefill));
    assert_eq!(rows(&trace["decode"]), f32s(&expect.decode));
    let state = std::fs::read(t.path().join("run/state.bin")).unwrap();
    MachineState::from_dump(&state, &lib.hardware).unwrap();

    ok(t.path(), &["simulate", "--library", "lib", "--prompt", "emb.bin", "--tokens", "5", "-o", "again"]);
    for f in ["trace.json", "state.bin"] {
        assert_eq!(std::fs::read(t.path().join("run").join(f)).unwrap(), std::fs::read(t.path().join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn verify_passes_on_the_tiny_model() {
    let t = tempfile::tempdir().unwrap();
    compile_tiny(t.path());
    let out = ok(t.path(), &["verify", "--library", "lib", "--prompt-len", "65", "--tokens", "8"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    ok(t.path(), &["verify", "--model", "tiny", "--synthesize", "--seed", "4", "--sched", "s.json", "--prompt-len", "7", "--tokens", "3"]);
}

#[test]
fn perf_reports_both_utilization_figures() {
    let t = tempfile::tempdir().unwrap();
    let util = |dir: &str| json(&t.path().join(dir).join("report.json"))["decode"]["bandwidth_utilization"].as_f64().unwrap();
    ok(t.path(), &["perf", "--model", "llama2-7b", "-o", "fused"]);
    ok(t.path(), &["perf", "--model", "llama2-7b", "--no-fused", "-o", "unfused"]);
    let (f, u) = (util("fused"), util("unfused"));
    assert!(f > u && (0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&u), "{f} {u}");
    assert!(std::fs::read_to_string(t.path().join("fused/report.txt")).unwrap().contains("decode bw utilization"));
    ok(t.path(), &["perf", "--model", "llama2-7b", "-o", "again"]);
    assert_eq!(std::fs::read(t.path().join("fused/report.json")).unwrap(), std::fs::read(t.path().join("again/report.json")).unwrap());

    compile_tiny(t.path());
    ok(t.path(), &["perf", "--library", "lib", "--prompt-len", "9", "--tokens", "4", "--csv", "-o", "lib_perf"]);
    let csv = std::fs::read_to_string(t.path().join("lib_perf/timeline.csv")).unwrap();
    assert!(csv.starts_with("program,pc,op,start,end,bytes\n") && csv.lines().count() > 1);
}

#[test]
fn manifest_carries_the_resource_estimate() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["manifest", "--hw", "u280", "-o", "m.json"]);
    let m = json(&t.path().join("m.json"));
    assert_eq!(m["resources"]["dsp"], 6144);
    assert_eq!(m["resources"]["peak_bw_gbps"], 172.8);
}

#[test]
fn errors_name_the_subcommand() {
    let t = tempfile::tempdir().unwrap();
    let out = flight(t.path(), &["simulate", "--library", "missing", "--prompt-len", "3", "-o", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("flight simulate:"));
    let out = flight(t.path(), &["compile", "--model", "tiny", "--compressed", "none.flcm", "-o", "lib"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("flight compile:"));
    std::fs::write(t.path().join("bad.json"), "{").unwrap();
    let out = flight(t.path(), &["manifest", "--hw", "bad.json"]);
    assert!(!out.status.success());
    let out = flight(t.path(), &["compress", "--model", "tiny", "-o", "c.flcm"]);
    assert!(!out.status.success() && String::from_utf8_lossy(&out.stderr).contains("--synthesize"));
}
