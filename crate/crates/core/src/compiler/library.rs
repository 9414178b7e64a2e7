//! Length-bucketed program libraries and the off-chip images they run on.
//!
//! A library holds one program per (stage, bucket). Prefill bucket `b`
//! serves prompts of length `b - prefill_bucket + 1 ..= b`; decode bucket `b`
//! serves KV lengths `b - decode_bucket + 1 ..= b`. Programs are shared by
//! all cores, which differ only in the window base of the header table.
//!
//! Directory layout: `manifest.json` (stage, bucket, file, base table and
//! size of every program, plus model, layout, memory map and exponents),
//! `hardware.json`, `schedule.json`, and one `FLIS` file per program.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bucket::BucketSchedule;
use super::exponents::{compute_exponents, Exponents};
use super::hardware::HardwareConfig;
use super::image::encode_tile;
use super::layout::{plan_layout, ModelLayout};
use super::lower::{lower_graph, LowerInput, Target};
use super::memory::{allocate_memory, window_addr, MemoryMap, MASK_ROW_BYTES};
use crate::compression::{nm_entry, BitPlan, BlockSparseMask, CompressionPlan, Container, MaskPattern, MASK_BLOCK};
use crate::error::{Error, Result};
use crate::isa::{Program, Stage, CHANNELS_PER_CORE};
use crate::model::{linear_shapes, IrGraph, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramLibrary {
    pub config: ModelConfig,
    pub hardware: HardwareConfig,
    pub schedule: BucketSchedule,
    pub layout: ModelLayout,
    pub memory: MemoryMap,
    pub exponents: Exponents,
    pub mask: BlockSparseMask,
    pub prefill: BTreeMap<usize, Program>,
    pub decode: BTreeMap<usize, Program>,
}

/// Contiguous bytes at an absolute HBM address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HbmSegment {
    pub addr: u64,
    pub data: Vec<u8>,
}

/// Compression plan that reproduces the container exactly: explicit bit
/// widths and block sparsity for every tensor.
pub fn plan_from_container(cfg: &ModelConfig, c: &Container) -> Result<CompressionPlan> {
    let mut plan = CompressionPlan::default();
    for (name, _, _) in linear_shapes(cfg) {
        let p = c.packed(&name).ok_or_else(|| Error::Data(format!("container lacks {name}")))?;
        let nm = c.nm(&nm_entry(&name)).ok_or_else(|| Error::Data(format!("container lacks sparsity for {name}")))?;
        plan.bit_overrides.insert(name.clone(), BitPlan::Explicit(p.bits.clone()));
        plan.block_n.insert(name, nm.per_block_n.clone());
    }
    if let Some(m) = c.mask() {
        plan.mask = m.pattern;
    }
    Ok(plan)
}

/// Targets of every program in the schedule.
pub fn library_targets(sched: &BucketSchedule) -> Vec<Target> {
    let mut t: Vec<Target> = sched.buckets(Stage::Prefill).into_iter().map(|b| Target::exact(Stage::Prefill, b)).collect();
    let db = sched.decode_bucket;
    t.extend(sched.buckets(Stage::Decode).into_iter().map(|b| Target { stage: Stage::Decode, len: b, min_len: b + 1 - db }));
    t
}

/// Mask over `max_len` tokens with the container's pattern (dense causal if absent).
pub fn library_mask(c: &Container, max_len: usize) -> BlockSparseMask {
    let pattern = c.mask().map(|m| m.pattern).unwrap_or(MaskPattern::DenseCausal);
    crate::compression::build_attention_mask(pattern, max_len)
}

/// Lowers every (stage, bucket) of the schedule.
pub fn compile_programs(inp: &LowerInput, sched: &BucketSchedule) -> Result<(BTreeMap<usize, Program>, BTreeMap<usize, Program>)> {
    sched.validate()?;
    let built: Vec<(Target, Program)> = library_targets(sched)
        .into_par_iter()
        .map(|t| {
            lower_graph(inp, t, sched.channel_merge)
                .map(|p| (t, p))
                .map_err(|e| e.context(&format!("{:?} bucket {}", t.stage, t.len)))
        })
        .collect::<Result<_>>()?;
    let mut prefill = BTreeMap::new();
    let mut decode = BTreeMap::new();
    for (t, p) in built {
        match t.stage {
            Stage::Prefill => prefill.insert(t.len, p),
            Stage::Decode => decode.insert(t.len, p),
        };
    }
    Ok((prefill, decode))
}

/// Plans, allocates and lowers the whole library for a compressed model.
pub fn compile_library(g: &IrGraph, container: &Container, sched: &BucketSchedule, hw: &HardwareConfig) -> Result<ProgramLibrary> {
    let cfg = &g.config;
    sched.validate()?;
    hw.validate()?;
    if sched.max_len.div_ceil(MASK_BLOCK) > MASK_ROW_BYTES * 8 {
        return Err(Error::Config(format!("max_len {} exceeds the mask row width", sched.max_len)));
    }
    let plan = plan_from_container(cfg, container)?;
    let layout = plan_layout(cfg, &plan, hw)?;
    let memory = allocate_memory(g, hw, &layout, sched.max_len)?;
    let exponents = compute_exponents(cfg, container)?;
    let mask = library_mask(container, sched.max_len);
    let inp = LowerInput { graph: g, hw, layout: &layout, mem: &memory, mask: Some(&mask), exps: &exponents };
    let (prefill, decode) = compile_programs(&inp, sched)?;
    Ok(ProgramLibrary {
        config: cfg.clone(),
        hardware: hw.clone(),
        schedule: sched.clone(),
        layout,
        memory,
        exponents,
        mask,
        prefill,
        decode,
    })
}

impl ProgramLibrary {
    pub fn program(&self, stage: Stage, bucket: usize) -> Result<&Program> {
        let map = match stage {
            Stage::Prefill => &self.prefill,
            Stage::Decode => &self.decode,
        };
        map.get(&bucket).ok_or_else(|| Error::Compile(format!("library has no {stage:?} program for bucket {bucket}")))
    }

    pub fn program_count(&self) -> usize {
        self.prefill.len() + self.decode.len()
    }

    /// Bytes of all stored program copies.
    pub fn size_bytes(&self) -> usize {
        let copies = if self.schedule.slr_sharing { 1 } else { self.hardware.num_cores };
        self.prefill.values().chain(self.decode.values()).map(|p| p.size_bytes()).sum::<usize>() * copies
    }

    /// Weight tiles of every core, striped over its channels.
    pub fn hbm_image(&self, c: &Container) -> Result<Vec<HbmSegment>> {
        let per_linear: Vec<Vec<HbmSegment>> = self
            .layout
            .linears
            .par_iter()
            .map(|lin| {
                let packed = c.packed(&lin.name).ok_or_else(|| Error::Data(format!("container lacks {}", lin.name)))?;
                let nm = c.nm(&nm_entry(&lin.name)).ok_or_else(|| Error::Data(format!("container lacks sparsity for {}", lin.name)))?;
                let offsets = nm.row_offsets();
                let tiles = &self.memory.weights[&lin.name];
                let mut segs = Vec::new();
                for core in 0..self.layout.cores {
                    for (j, &off) in tiles.iter().enumerate() {
                        let tile = encode_tile(lin, packed, nm, &offsets, core, j)?;
                        let q = tile.len() / CHANNELS_PER_CORE;
                        for ch in 0..CHANNELS_PER_CORE {
                            segs.push(HbmSegment {
                                addr: self.memory.hbm_base[core] + window_addr(ch, off),
                                data: tile[ch * q..(ch + 1) * q].to_vec(),
                            });
                        }
                    }
                }
                Ok(segs)
            })
            .collect::<Result<_>>()?;
        Ok(per_linear.into_iter().flatten().collect())
    }

    /// Lookup tables followed by one 16-byte visibility row per query block.
    pub fn ddr_image(&self) -> Vec<u8> {
        let mut d = crate::sim::sfu::lut_bytes();
        d.resize(self.memory.mask_base as usize, 0);
        for bi in 0..self.mask.blocks {
            let mut row = self.mask.row_bits(bi);
            row.resize(MASK_ROW_BYTES, 0);
            d.extend(row);
        }
        d
    }

    fn file_name(stage: Stage, bucket: usize) -> String {
        match stage {
            Stage::Prefill => format!("prefill_{bucket:05}.flis"),
            Stage::Decode => format!("decode_{bucket:05}.flis"),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let entries = [(Stage::Prefill, &self.prefill), (Stage::Decode, &self.decode)]
            .into_iter()
            .flat_map(|(stage, map)| {
                map.iter().map(move |(&bucket, p)| ManifestEntry {
                    stage,
                    bucket,
                    file: Self::file_name(stage, bucket),
                    hbm_base: p.header.hbm_base[..p.header.num_slrs as usize].to_vec(),
                    instructions: p.instructions.len(),
                    bytes: p.size_bytes(),
                })
            })
            .collect();
        Manifest {
            model: self.config.clone(),
            layout: self.layout.clone(),
            memory: self.memory.clone(),
            exponents: self.exponents.clone(),
            mask: self.mask.pattern,
            programs: entries,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        std::fs::write(dir.join("hardware.json"), serde_json::to_string_pretty(&self.hardware)?)?;
        std::fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(&self.schedule)?)?;
        for (stage, map) in [(Stage::Prefill, &self.prefill), (Stage::Decode, &self.decode)] {
            for (&b, p) in map {
                p.write(&dir.join(Self::file_name(stage, b)))?;
            }
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rd = |f: &str| std::fs::read_to_string(dir.join(f)).map_err(|e| Error::Io(format!("{f}: {e}")));
        let m: Manifest = serde_json::from_str(&rd("manifest.json")?)?;
        let hardware: HardwareConfig = serde_json::from_str(&rd("hardware.json")?)?;
        let schedule: BucketSchedule = serde_json::from_str(&rd("schedule.json")?)?;
        let mut prefill = BTreeMap::new();
        let mut decode = BTreeMap::new();
        for e in &m.programs {
            let p = Program::read(&dir.join(&e.file)).map_err(|err| err.context(&e.file))?;
            if p.header.stage != e.stage || p.header.bucket as usize != e.bucket {
                return Err(Error::Format(format!("{} does not match its manifest entry", e.file)));
            }
            match e.stage {
                Stage::Prefill => prefill.insert(e.bucket, p),
                Stage::Decode => decode.insert(e.bucket, p),
            };
        }
        Ok(ProgramLibrary {
            mask: crate::compression::build_attention_mask(m.mask, schedule.max_len),
            config: m.model,
            hardware,
            schedule,
            layout: m.layout,
            memory: m.memory,
            exponents: m.exponents,
            prefill,
            decode,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: Stage,
    pub bucket: usize,
    pub file: String,
    pub hbm_base: Vec<u64>,
    pub instructions: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub layout: ModelLayout,
    pub memory: MemoryMap,
    pub exponents: Exponents,
    pub mask: MaskPattern,
    pub programs: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::compress_model;
    use crate::model::{build_ir, optimize, synthesize_weights};

    fn tiny_lib(sched: &BucketSchedule) -> (ProgramLibrary, Container) {
        let cfg = ModelConfig::tiny(1);
        let c = compress_model(&cfg, &synthesize_weights(&cfg, 1), &CompressionPlan::default()).unwrap();
        let g = optimize(&build_ir(&cfg).unwrap()).unwrap();
        (compile_library(&g, &c, sched, &HardwareConfig::u280()).unwrap(), c)
    }

    #[test]
    fn program_counts_follow_schedule() {
        let (lib, _) = tiny_lib(&BucketSchedule::with_max_len(256));
        assert_eq!(lib.prefill.len(), 4);
        assert_eq!(lib.decode.len(), 16);
        let sched = BucketSchedule { prefill_bucket: 256, ..BucketSchedule::with_max_len(256) };
        assert_eq!(tiny_lib(&sched).0.prefill.len(), 1);
    }

    #[test]
    fn library_round_trips_through_directory() {
        let (lib, _) = tiny_lib(&BucketSchedule::with_max_len(128));
        let dir = tempfile::tempdir().unwrap();
        lib.write(dir.path()).unwrap();
        let back = ProgramLibrary::read(dir.path()).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.manifest().programs.len(), lib.program_count());
    }

    #[test]
    fn images_cover_weights_and_mask() {
        let (lib, c) = tiny_lib(&BucketSchedule::with_max_len(128));
        let segs = lib.hbm_image(&c).unwrap();
        let bytes: usize = segs.iter().map(|s| s.data.len()).sum();
        assert_eq!(bytes as u64, lib.memory.weight_bytes(&lib.layout));
        let ddr = lib.ddr_image();
        assert_eq!(ddr.len() as u64, lib.memory.ddr_used);
    }

    #[test]
    fn layout_from_container_matches_plan() {
        let cfg = ModelConfig::tiny(1);
        let plan = CompressionPlan::default();
        let c = compress_model(&cfg, &synthesize_weights(&cfg, 1), &plan).unwrap();
        let hw = HardwareConfig::u280();
        let a = plan_layout(&cfg, &plan, &hw).unwrap();
        let b = plan_layout(&cfg, &plan_from_container(&cfg, &c).unwrap(), &hw).unwrap();
        assert_eq!(a, b);
    }
}
