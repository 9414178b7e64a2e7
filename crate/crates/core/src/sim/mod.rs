//! Functional simulator: CSD-chain datapath, SFU, machine state, program
//! execution and the host-side generation loop.

pub mod csd;
pub mod exec;
pub mod reference;
pub mod sfu;
pub mod state;

use half::f16;

use crate::compiler::memory::{stripe_chunks, window_addr, ActRegion};
use crate::compiler::{bucketize, ProgramLibrary};
use crate::compression::{Container, MASK_BLOCK};
use crate::error::{Error, Result};
use crate::isa::{Program, Stage};

pub use csd::{oau_split, vpu_dot, ChainMode, CsdChainConfig};
pub use exec::execute_program;
pub use reference::ReferenceModel;
pub use state::{MachineState, Monitor, Traffic};

const GLOBAL_LINE_BYTES: usize = 32;

/// Final-layer outputs of a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateTrace {
    /// One row per prompt token.
    pub prefill: Vec<Vec<f16>>,
    /// One row per generated token.
    pub decode: Vec<Vec<f16>>,
    /// KV bytes stored by the prefill program.
    pub prefill_kv_bytes: usize,
    /// Activation bytes crossing the off-chip boundary inside decode programs.
    pub decode_activation_bytes: usize,
}

/// A machine loaded with a library's weights and tables.
pub struct Simulator<'a> {
    pub lib: &'a ProgramLibrary,
    pub state: MachineState,
}

impl<'a> Simulator<'a> {
    pub fn new(lib: &'a ProgramLibrary, weights: &Container) -> Result<Self> {
        let mut state = MachineState::new(&lib.hardware);
        for seg in lib.hbm_image(weights)? {
            state.hbm.write(seg.addr, &seg.data)?;
        }
        state.ddr.write(0, &lib.ddr_image())?;
        Ok(Simulator { lib, state })
    }

    fn width(&self, region: &ActRegion) -> usize {
        region.width
    }

    /// Writes rows `64t..` of a tile with `r` rows, zero padded, to every core.
    fn write_tile(&mut self, region: ActRegion, t: usize, r: usize, rows: &[Vec<f16>]) -> Result<()> {
        let w = self.width(&region);
        let panels = w.div_ceil(16);
        let mut bytes = vec![0u8; panels * r * GLOBAL_LINE_BYTES];
        for (i, row) in rows.iter().enumerate().take(r) {
            if row.len() != w {
                return Err(Error::Data(format!("row has {} values, expected {w}", row.len())));
            }
            for (c, v) in row.iter().enumerate() {
                let o = ((c / 16 * r + i) * 16 + c % 16) * 2;
                bytes[o..o + 2].copy_from_slice(&v.to_le_bytes());
            }
        }
        for base in self.lib.memory.hbm_base.clone() {
            for (ch, start, n) in stripe_chunks(panels * r) {
                let addr = base + window_addr(ch, region.tile_offset(t));
                self.state.hbm.write(addr, &bytes[start * GLOBAL_LINE_BYTES..(start + n) * GLOBAL_LINE_BYTES])?;
            }
        }
        Ok(())
    }

    /// Reads the first `count` rows of an `r`-row tile from core 0.
    fn read_tile(&self, region: ActRegion, t: usize, r: usize, count: usize) -> Result<Vec<Vec<f16>>> {
        let w = region.width;
        let panels = w.div_ceil(16);
        let mut bytes = vec![0u8; panels * r * GLOBAL_LINE_BYTES];
        let base = self.lib.memory.hbm_base[0];
        for (ch, start, n) in stripe_chunks(panels * r) {
            let addr = base + window_addr(ch, region.tile_offset(t));
            self.state.hbm.read(addr, &mut bytes[start * GLOBAL_LINE_BYTES..(start + n) * GLOBAL_LINE_BYTES])?;
        }
        Ok((0..count)
            .map(|i| {
                (0..w)
                    .map(|c| {
                        let o = ((c / 16 * r + i) * 16 + c % 16) * 2;
                        f16::from_le_bytes([bytes[o], bytes[o + 1]])
                    })
                    .collect()
            })
            .collect())
    }

    /// Runs a program over `rows` input rows padded to its length, with the
    /// given valid length. Prefill returns one row per input row, decode one.
    pub fn run_program(&mut self, p: &Program, rows: &[Vec<f16>], valid_len: usize) -> Result<Vec<Vec<f16>>> {
        let mem = self.lib.memory.clone();
        let len = p.header.bucket as usize;
        self.state.valid_len = valid_len;
        self.state.monitor.clear();
        match p.header.stage {
            Stage::Prefill => {
                if rows.len() > len {
                    return Err(Error::Capacity { len: rows.len(), max_len: len });
                }
                for t in 0..len.div_ceil(MASK_BLOCK) {
                    let r = (len - t * MASK_BLOCK).min(MASK_BLOCK);
                    let lo = (t * MASK_BLOCK).min(rows.len());
                    let hi = (t * MASK_BLOCK + r).min(rows.len());
                    self.write_tile(mem.input, t, r, &rows[lo..hi])?;
                }
                execute_program(p, &mut self.state)?;
                let mut out = Vec::with_capacity(rows.len());
                for t in 0..len.div_ceil(MASK_BLOCK) {
                    let r = (len - t * MASK_BLOCK).min(MASK_BLOCK);
                    let want = rows.len().saturating_sub(t * MASK_BLOCK).min(r);
                    if want == 0 {
                        break;
                    }
                    out.extend(self.read_tile(mem.output, t, r, want)?);
                }
                Ok(out)
            }
            Stage::Decode => {
                if rows.len() != 1 {
                    return Err(Error::Data(format!("decode takes one row, got {}", rows.len())));
                }
                self.write_tile(mem.input, 0, 1, rows)?;
                execute_program(p, &mut self.state)?;
                self.read_tile(mem.output, 0, 1, 1)
            }
        }
    }

    /// Prefill through the bucketed program for the prompt length.
    pub fn prefill(&mut self, prompt: &[Vec<f16>]) -> Result<Vec<Vec<f16>>> {
        let b = bucketize(prompt.len(), Stage::Prefill, &self.lib.schedule)?;
        let p = self.lib.program(Stage::Prefill, b)?;
        self.run_program(p, prompt, prompt.len())
    }

    /// Decodes one token given `kv_len` tokens already cached.
    pub fn decode(&mut self, x: &[f16], kv_len: usize) -> Result<Vec<f16>> {
        let b = bucketize(kv_len + 1, Stage::Decode, &self.lib.schedule)?;
        let p = self.lib.program(Stage::Decode, b)?;
        Ok(self.run_program(p, &[x.to_vec()], kv_len + 1)?.remove(0))
    }
}

/// Prefill on the prompt, then `out_tokens` decode steps, each fed the
/// previous step's final hidden state.
pub fn run_generate(lib: &ProgramLibrary, weights: &Container, prompt: &[Vec<f16>], out_tokens: usize) -> Result<GenerateTrace> {
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".into()));
    }
    let total = prompt.len() + out_tokens;
    if total > lib.schedule.max_len {
        return Err(Error::Capacity { len: total, max_len: lib.schedule.max_len });
    }
    if out_tokens > 0 && lib.config.has_lm_head {
        return Err(Error::Config("generation feeds hidden states back and needs a model without lm_head".into()));
    }
    let mut sim = Simulator::new(lib, weights)?;
    generate(&mut sim, prompt, out_tokens)
}

/// The generation loop of [`run_generate`] on a loaded simulator.
pub fn generate(sim: &mut Simulator, prompt: &[Vec<f16>], out_tokens: usize) -> Result<GenerateTrace> {
    if prompt.is_empty() {
        return Err(Error::Data("empty prompt".into()));
    }
    let prefill = sim.prefill(prompt)?;
    let prefill_kv_bytes = sim.state.monitor.bytes(Traffic::Kv, false);
    let mut decode = Vec::with_capacity(out_tokens);
    let mut decode_activation_bytes = 0;
    let mut x = prefill.last().cloned().unwrap_or_default();
    for s in 0..out_tokens {
        let y = sim.decode(&x, prompt.len() + s)?;
        decode_activation_bytes += sim.state.monitor.activation_bytes_inside();
        x = y.clone();
        decode.push(y);
    }
    Ok(GenerateTrace { prefill, decode, prefill_kv_bytes, decode_activation_bytes })
}

/// The same run on the reference forward pass.
pub fn reference_generate(lib: &ProgramLibrary, weights: &Container, prompt: &[Vec<f16>], out_tokens: usize) -> Result<GenerateTrace> {
    let mut r = ReferenceModel::new(&lib.config, weights, &lib.exponents, &lib.mask)?;
    let prefill: Vec<Vec<f16>> = prompt.iter().map(|row| r.step(row)).collect::<Result<_>>()?;
    let mut x = prefill.last().cloned().unwrap_or_default();
    let mut decode = Vec::with_capacity(out_tokens);
    for _ in 0..out_tokens {
        x = r.step(&x)?;
        decode.push(x.clone());
    }
    Ok(GenerateTrace { prefill, decode, prefill_kv_bytes: 0, decode_activation_bytes: 0 })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::compiler::{compile_library, BucketSchedule, HardwareConfig};
    use crate::compression::{compress_model, CompressionPlan, MaskPattern};
    use crate::model::{build_ir, optimize, synthesize_weights, ModelConfig};

    fn fixture(layers: usize, plan: &CompressionPlan, sched: &BucketSchedule) -> (ProgramLibrary, Container) {
        let cfg = ModelConfig::tiny(layers);
        let c = compress_model(&cfg, &synthesize_weights(&cfg, 7), plan).unwrap();
        let g = optimize(&build_ir(&cfg).unwrap()).unwrap();
        (compile_library(&g, &c, sched, &HardwareConfig::u280()).unwrap(), c)
    }

    fn prompt(len: usize, width: usize, seed: u64) -> Vec<Vec<f16>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| (0..width).map(|_| f16::from_f32(rng.gen_range(-1.0..1.0))).collect()).collect()
    }

    fn bits(rows: &[Vec<f16>]) -> Vec<Vec<u16>> {
        rows.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn generation_matches_reference_bit_exactly() {
        let (lib, c) = fixture(2, &CompressionPlan::default(), &BucketSchedule::with_max_len(128));
        let p = prompt(70, 64, 1);
        let sim = run_generate(&lib, &c, &p, 6).unwrap();
        let reference = reference_generate(&lib, &c, &p, 6).unwrap();
        assert_eq!(bits(&sim.prefill), bits(&reference.prefill));
        assert_eq!(bits(&sim.decode), bits(&reference.decode));
        assert!(sim.prefill.iter().flatten().any(|v| v.to_f32() != 0.0));
    }

    #[test]
    fn bucketed_programs_equal_exact_programs() {
        let (lib, c) = fixture(1, &CompressionPlan::default(), &BucketSchedule::with_max_len(128));
        let p = prompt(7, 64, 2);
        let mut a = Simulator::new(&lib, &c).unwrap();
        let bucketed = a.prefill(&p).unwrap();
        let inp = crate::compiler::LowerInput {
            graph: &optimize(&build_ir(&lib.config).unwrap()).unwrap(),
            hw: &lib.hardware,
            layout: &lib.layout,
            mem: &lib.memory,
            mask: Some(&lib.mask),
            exps: &lib.exponents,
        };
        let exact = crate::compiler::lower_graph(&inp, crate::compiler::Target::exact(Stage::Prefill, 7), false).unwrap();
        let mut b = Simulator::new(&lib, &c).unwrap();
        assert_eq!(bits(&b.run_program(&exact, &p, 7).unwrap()), bits(&bucketed));
        let x = bucketed.last().unwrap().clone();
        let d_bucket = a.decode(&x, 7).unwrap();
        let exact = crate::compiler::lower_graph(&inp, crate::compiler::Target::exact(Stage::Decode, 8), false).unwrap();
        assert_eq!(bits(&b.run_program(&exact, &[x], 8).unwrap()), bits(&[d_bucket]));
    }

    #[test]
    fn merged_and_unmerged_libraries_agree() {
        let sched = BucketSchedule::with_max_len(128);
        let (on, c) = fixture(1, &CompressionPlan::default(), &sched);
        let (off, _) = fixture(1, &CompressionPlan::default(), &BucketSchedule { channel_merge: false, ..sched });
        assert!(on.size_bytes() < off.size_bytes());
        let p = prompt(20, 64, 3);
        assert_eq!(run_generate(&on, &c, &p, 3).unwrap(), run_generate(&off, &c, &p, 3).unwrap());
    }

    #[test]
    fn decode_keeps_activations_on_chip_and_is_deterministic() {
        let (lib, c) = fixture(2, &CompressionPlan::default(), &BucketSchedule::with_max_len(128));
        let p = prompt(5, 64, 4);
        let a = run_generate(&lib, &c, &p, 4).unwrap();
        assert_eq!(a.decode_activation_bytes, 0);
        assert_eq!(a, run_generate(&lib, &c, &p, 4).unwrap());
    }

    #[test]
    fn prefill_only_stores_prompt_keys_and_values() {
        let (lib, c) = fixture(2, &CompressionPlan::default(), &BucketSchedule::with_max_len(128));
        let cfg = &lib.config;
        for len in [1, 9, 64, 65] {
            let t = run_generate(&lib, &c, &prompt(len, 64, 5), 0).unwrap();
            assert!(t.decode.is_empty());
            assert_eq!(t.prefill.len(), len);
            assert_eq!(t.prefill_kv_bytes, 2 * cfg.num_layers * len * lib.layout.heads_per_core * cfg.head_dim * lib.hardware.num_cores, "len {len}");
        }
    }

    #[test]
    fn local_window_equals_dense_inside_the_window() {
        let sched = BucketSchedule::with_max_len(128);
        let (dense, c) = fixture(1, &CompressionPlan::default(), &sched);
        let plan = CompressionPlan { mask: MaskPattern::LocalWindow { window: 64 }, ..Default::default() };
        let (local, c2) = fixture(1, &plan, &sched);
        let p = prompt(40, 64, 6);
        assert_eq!(run_generate(&dense, &c, &p, 2).unwrap(), run_generate(&local, &c2, &p, 2).unwrap());
        let p = prompt(100, 64, 6);
        let d = run_generate(&dense, &c, &p, 0).unwrap();
        let l = run_generate(&local, &c2, &p, 0).unwrap();
        assert_eq!(d.prefill[..64], l.prefill[..64]);
        assert_ne!(d.prefill[64..], l.prefill[64..]);
        assert_eq!(bits(&l.prefill), bits(&reference_generate(&local, &c2, &p, 0).unwrap().prefill));
    }

    #[test]
    fn generation_checks_capacity() {
        let (lib, c) = fixture(1, &CompressionPlan::default(), &BucketSchedule::with_max_len(128));
        assert!(matches!(run_generate(&lib, &c, &prompt(120, 64, 0), 9), Err(Error::Capacity { .. })));
        assert!(run_generate(&lib, &c, &[], 1).is_err());
    }
}
