//! Lowering of the transformer graph to per-core programs.
//!
//! Conventions shared with the simulator:
//!
//! * On-chip matrices are panel-major: element `(r, c)` of an `R`-row matrix
//!   at line `L` lives at line `L + (c / 16) * R + r`, lane `c % 16`. Column
//!   ranges at multiples of 16 are therefore matrices of their own.
//! * MM/MV: `onchip` = A (int8 activations), `offchip[31:16]` = B,
//!   `offchip[15:0]` = fp16 output in the global buffer, `aux` = output
//!   exponent. `nm_log2M = 4` reads compressed weight records from the weight
//!   buffer; `nm_log2M = 0` reads raw int8 from the activation buffer, with
//!   `nm_N = 0` for a `[n x k]` operand (keys) and `nm_N = 1` for `[k x n]`
//!   (values). The DDR bit accumulates into the output; `channel_mask` bit 0
//!   skips the strict upper triangle (diagonal attention blocks).
//! * MISC: `onchip` = source A, `offchip[15:0]` = source B,
//!   `offchip[31:16]` = destination; `k` is the int8 exponent when the QUANT
//!   bit is set. Softmax takes B as the first mask row line and the query
//!   block in the N:M byte.
//! * SYS with `m > 0` gathers every core's `[m x n]` slice at `onchip` into
//!   all cores at `offchip[15:0] + core * (n / 16) * m`, buffer `k`.
//!
//! Prefill walks layers outermost and 64-row tiles inside, streaming the
//! residual through HBM between layers. Decode keeps the single row on chip
//! from the first LD to the final ST.

use std::collections::HashSet;

use super::exponents::{Exponents, PROB_EXP};
use super::hardware::HardwareConfig;
use super::layout::{LinearLayout, LinearRole, ModelLayout};
use super::memory::{stripe_chunks, window_addr, ActRegion, MemoryMap, LINE, LUT_BYTES, MASK_ROW_BYTES};
use crate::compression::{BlockSparseMask, MASK_BLOCK};
use crate::error::{Error, Result};
use crate::isa::instruction::{misc, xfer};
use crate::isa::{merge_program, Buffer, Flags, Instruction, MiscOp, Opcode, Program, ProgramHeader, Stage};
use crate::model::{Activation, EltwiseOp, IrGraph, OpKind};

pub const LUT_LINES: usize = LUT_BYTES / LINE;
pub const MASK_LINE: usize = LUT_LINES;
/// Channel-mask bit of MM: leave the strict upper triangle unwritten.
pub const MM_PARTIAL: u8 = 1;
pub const KV_SLOTS: usize = 8;

/// Which program to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub stage: Stage,
    /// Longest sequence the program handles (bucket length).
    pub len: usize,
    /// Shortest valid length the program must handle (decode block range).
    pub min_len: usize,
}

impl Target {
    pub fn exact(stage: Stage, len: usize) -> Self {
        Target { stage, len, min_len: len }
    }
}

pub struct LowerInput<'a> {
    pub graph: &'a IrGraph,
    pub hw: &'a HardwareConfig,
    pub layout: &'a ModelLayout,
    pub mem: &'a MemoryMap,
    pub mask: Option<&'a BlockSparseMask>,
    pub exps: &'a Exponents,
}

/// MISC nodes folded into their producer by the fusion pass.
fn fused_misc(g: &IrGraph) -> HashSet<String> {
    let mut s = HashSet::new();
    for n in &g.nodes {
        if let OpKind::Fused(_) = n.kind {
            for p in n.parts.iter().skip(1) {
                s.insert(p.name.clone());
            }
        }
    }
    s
}

/// Checks that the graph has the layer structure this lowering implements.
fn check_structure(g: &IrGraph) -> Result<()> {
    let cfg = &g.config;
    for l in 0..cfg.num_layers {
        let mut kinds: Vec<OpKind> = Vec::new();
        for n in g.nodes.iter().filter(|n| n.layer == Some(l)) {
            for p in n.flatten() {
                if !matches!(p.kind, OpKind::View { .. }) {
                    kinds.push(p.kind.clone());
                }
            }
        }
        let mut expect = vec![
            OpKind::LayerNorm,
            OpKind::Linear,
            OpKind::Linear,
            OpKind::Linear,
            OpKind::AttentionQk,
            OpKind::Softmax,
            OpKind::AttentionSv,
            OpKind::Linear,
            OpKind::Eltwise(EltwiseOp::Add),
            OpKind::LayerNorm,
            OpKind::Linear,
            OpKind::Activation(cfg.activation),
        ];
        if cfg.gated_ffn() {
            expect.extend([OpKind::Linear, OpKind::Eltwise(EltwiseOp::Mul)]);
        }
        expect.extend([OpKind::Linear, OpKind::Eltwise(EltwiseOp::Add)]);
        if kinds != expect {
            return Err(Error::Compile(format!("layer {l} does not have the expected decoder structure")));
        }
    }
    Ok(())
}

/// On-chip line assignment for one program.
#[derive(Debug, Clone)]
struct Lines {
    rows: usize,
    // global buffer (fp16)
    gx: usize,
    gscores: usize,
    ghead: usize,
    gtile: [usize; 2],
    glin: usize,
    ggath: usize,
    // activation buffer (int8)
    aln: usize,
    aofull: usize,
    aq: usize,
    ak: usize,
    av: usize,
    aprobs: usize,
    akslot: usize,
    avslot: usize,
    aoslice: usize,
    ahslice: usize,
    aln2: usize,
    ahfull: usize,
    wbuf: [usize; 2],
}

fn plan_lines(inp: &LowerInput, rows: usize, score_cols: usize) -> Result<Lines> {
    let cfg = &inp.graph.config;
    let lay = inp.layout;
    let cores = lay.cores;
    let d = cfg.hidden_dim;
    let wq = lay.slice_of(LinearRole::Q);
    let wf = lay.slice_of(LinearRole::Up);
    let wlin = lay.slice_of(LinearRole::O).max(lay.slice_of(LinearRole::Down)).max(lay.slice_of(LinearRole::Head));
    let ntile = lay.linears.iter().map(|l| l.n_tile).max().unwrap_or(16);
    let m = |cols: usize| rows * cols.div_ceil(16);
    let mut g = 0;
    let take = |cur: &mut usize, lines: usize| {
        let at = *cur;
        *cur += lines;
        at
    };
    let gx = take(&mut g, m(d));
    let gscores = take(&mut g, m(score_cols));
    let ghead = take(&mut g, m(cfg.head_dim));
    let gtile = [take(&mut g, m(ntile)), take(&mut g, m(ntile))];
    let glin = take(&mut g, m(wlin));
    let ggath = if cores > 1 { take(&mut g, m(cores * wlin)) } else { glin };
    let global_lines = inp.hw.global_buffer_bytes / (2 * LINE);
    if g > global_lines.min(1 << 16) {
        return Err(Error::Tiling(format!("global buffer needs {} lines, has {global_lines}", g)));
    }

    let mut a = 0;
    let region0 = m(d).max(if cores > 1 { m(cores * wq) } else { 0 });
    let aln = take(&mut a, region0);
    let aofull = aln;
    let aq = take(&mut a, m(wq));
    let ak = take(&mut a, m(wq));
    let av = take(&mut a, m(wq));
    let aprobs = take(&mut a, m(score_cols));
    let kv_lines = MASK_BLOCK * cfg.head_dim / LINE;
    let akslot = take(&mut a, KV_SLOTS * kv_lines);
    let avslot = take(&mut a, KV_SLOTS * kv_lines);
    let aoslice = take(&mut a, m(wq));
    let attn_end = a;
    let mut f = 0;
    let ahslice = take(&mut f, m(wf));
    let aln2 = f;
    let ahfull = if cores > 1 { aln2 } else { ahslice };
    let ffn_end = f + m(d).max(if cores > 1 { m(cores * wf) } else { 0 });
    let aofull = if cores > 1 { aofull } else { aoslice };
    let act_lines = inp.hw.act_buffer_bytes / LINE;
    let need = attn_end.max(ffn_end);
    if need > act_lines.min(1 << 16) {
        return Err(Error::Tiling(format!("activation buffer needs {need} lines, has {act_lines}")));
    }
    let half = inp.hw.weight_buffer_bytes / 2 / LINE;
    Ok(Lines {
        rows,
        gx,
        gscores,
        ghead,
        gtile,
        glin,
        ggath,
        aln,
        aofull,
        aq,
        ak,
        av,
        aprobs,
        akslot,
        avslot,
        aoslice,
        ahslice,
        aln2,
        ahfull,
        wbuf: [0, half],
    })
}

struct Emitter<'a> {
    inp: &'a LowerInput<'a>,
    insts: Vec<Instruction>,
    stage: Stage,
    fused: HashSet<String>,
    ln: Lines,
    wsel: usize,
    sync: u8,
    kv_lines: usize,
}

fn line16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Tiling(format!("line {v} exceeds the 16-bit on-chip address")))
}

fn dim16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Compile(format!("dimension {v} exceeds the 16-bit field")))
}

fn addr32(v: u64) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Compile(format!("address {v:#x} exceeds the 32-bit field")))
}

impl<'a> Emitter<'a> {
    fn push(&mut self, i: Instruction) {
        self.insts.push(i);
    }

    /// Striped HBM transfer of `lines` buffer lines.
    fn striped(&mut self, op: Opcode, buf: Buffer, line: usize, region: u64, lines: usize) -> Result<()> {
        for (c, start, n) in stripe_chunks(lines) {
            self.push(Instruction {
                k: buf as u16,
                channel_mask: 1 << c,
                offchip_addr: addr32(window_addr(c, region))?,
                onchip_addr: line16(line + start)?,
                m: dim16(n)?,
                n: 16,
                ..Instruction::new(op)
            });
        }
        Ok(())
    }

    fn ddr_load(&mut self, line: usize, addr: u32, lines: usize) -> Result<()> {
        self.push(Instruction {
            flags: Flags { mem_target_ddr: true, ..Default::default() },
            k: Buffer::Index as u16,
            offchip_addr: addr,
            onchip_addr: line16(line)?,
            m: dim16(lines)?,
            n: 16,
            ..Instruction::new(Opcode::Ld)
        });
        Ok(())
    }

    fn act_transfer(&mut self, op: Opcode, region: &ActRegion, tile: usize, rows: usize, line: usize, width: usize) -> Result<()> {
        let lines = rows * width.div_ceil(16);
        self.striped(op, Buffer::Global, line, region.tile_offset(tile), lines)
    }

    fn misc(&mut self, op: MiscOp, a: usize, b: usize, dst: usize, rows: usize, cols: usize, quant: Option<i8>) -> Result<()> {
        self.push(Instruction {
            aux: op as u8,
            channel_mask: if quant.is_some() { misc::QUANT } else { 0 },
            onchip_addr: line16(a)?,
            offchip_addr: (line16(dst)? as u32) << 16 | line16(b)? as u32,
            m: dim16(rows)?,
            n: dim16(cols)?,
            k: quant.unwrap_or(0) as i16 as u16,
            ..Instruction::new(Opcode::Misc)
        });
        Ok(())
    }

    fn gather(&mut self, buf: Buffer, src: usize, dst: usize, rows: usize, cols: usize) -> Result<()> {
        if self.inp.layout.cores == 1 {
            return Ok(());
        }
        let id = self.next_sync();
        self.push(Instruction {
            aux: id,
            k: buf as u16,
            onchip_addr: line16(src)?,
            offchip_addr: line16(dst)? as u32,
            m: dim16(rows)?,
            n: dim16(cols)?,
            ..Instruction::new(Opcode::Sys)
        });
        Ok(())
    }

    fn next_sync(&mut self) -> u8 {
        self.sync = self.sync.wrapping_add(1);
        self.sync
    }

    fn matmul_op(&self) -> Opcode {
        match self.stage {
            Stage::Prefill => Opcode::Mm,
            Stage::Decode => Opcode::Mv,
        }
    }

    /// LD of weight tile `j` into the next half of the weight buffer, then
    /// the matmul writing `rows x cols` to `out`.
    fn weight_tile(&mut self, lin: &LinearLayout, j: usize, a: usize, out: usize, shift: i8, fused: bool) -> Result<()> {
        let half = self.ln.wbuf[self.wsel];
        self.wsel ^= 1;
        let off = self.inp.mem.weights[&lin.name][j];
        self.striped(Opcode::Ld, Buffer::Weight, half, off, lin.tile_bytes[j] / LINE)?;
        let sparse = lin.nm_n < 16;
        self.push(Instruction {
            flags: Flags { sparse_enable: sparse, fused_misc_follows: fused, ..Default::default() },
            onchip_addr: line16(a)?,
            offchip_addr: (line16(half)? as u32) << 16 | line16(out)? as u32,
            m: dim16(self.ln.rows_now())?,
            k: dim16(lin.in_dim)?,
            n: dim16(lin.tile_cols(j))?,
            nm_n: if sparse { lin.nm_n } else { 0 },
            nm_log2m: 4,
            aux: shift as u8,
            ..Instruction::new(self.matmul_op())
        });
        Ok(())
    }

    fn raw_matmul(&mut self, a: usize, b: usize, out: usize, k: usize, n: usize, value_mode: bool, shift: i8, acc: bool, partial: bool) -> Result<()> {
        self.push(Instruction {
            flags: Flags { mem_target_ddr: acc, ..Default::default() },
            channel_mask: if partial { MM_PARTIAL } else { 0 },
            onchip_addr: line16(a)?,
            offchip_addr: (line16(b)? as u32) << 16 | line16(out)? as u32,
            m: dim16(self.ln.rows_now())?,
            k: dim16(k)?,
            n: dim16(n)?,
            nm_n: value_mode as u8,
            nm_log2m: 0,
            aux: shift as u8,
            ..Instruction::new(self.matmul_op())
        });
        Ok(())
    }

    fn col(&self, base: usize, col: usize) -> usize {
        base + col / 16 * self.ln.rows_now()
    }

    /// Loads the K or V blocks of one head, eight-aligned runs first in
    /// channel order so they can merge, each followed by its matmuls.
    fn kv_blocks(&mut self, head_base: u64, blocks: &[usize], slot_base: usize, mut per_block: impl FnMut(&mut Self, usize, usize) -> Result<()>) -> Result<()> {
        let kv = self.inp.mem.kv;
        let mut i = 0;
        while i < blocks.len() {
            let run_end = (i + 1..blocks.len())
                .take_while(|&e| blocks[e] == blocks[e - 1] + 1 && blocks[e] % KV_SLOTS != 0)
                .last()
                .map_or(i + 1, |e| e + 1);
            for &b in &blocks[i..run_end] {
                let slot = slot_base + (b % KV_SLOTS) * self.kv_lines;
                self.push(Instruction {
                    k: Buffer::Act as u16,
                    aux: xfer::KV,
                    channel_mask: 1 << (b % KV_SLOTS),
                    offchip_addr: addr32(kv.block_addr(head_base, b))?,
                    onchip_addr: line16(slot)?,
                    m: dim16(self.kv_lines)?,
                    n: 16,
                    ..Instruction::new(Opcode::Ld)
                });
            }
            for &b in &blocks[i..run_end] {
                let slot = slot_base + (b % KV_SLOTS) * self.kv_lines;
                per_block(self, b, slot)?;
            }
            i = run_end;
        }
        Ok(())
    }

    /// One decoder layer on the current row tile. `tile` is the query block
    /// in prefill; decode covers `qblocks`.
    fn layer(&mut self, l: usize, tile: usize, qblocks: (usize, usize)) -> Result<()> {
        let inp = self.inp;
        let cfg = &inp.graph.config;
        let lay = inp.layout;
        let e = inp.exps.layers[l];
        let rows = self.ln.rows_now();
        let d = cfg.hidden_dim;
        let hd = cfg.head_dim;
        let wq = lay.slice_of(LinearRole::Q);
        let name = |s: &str| format!("layers.{l}.{s}");
        let ln = self.ln.clone();

        self.misc(MiscOp::LayerNorm, ln.gx, 0, ln.aln, rows, d, Some(e.ln1))?;
        for (proj, dst, ex) in [("q_proj", ln.aq, e.q), ("k_proj", ln.ak, e.k), ("v_proj", ln.av, e.v)] {
            let lin = lay.linear(&name(&format!("{proj}.weight")))?;
            for j in 0..lin.tiles() {
                self.weight_tile(lin, j, ln.aln, ln.gtile[0], e.ln1, false)?;
                let c0 = j * lin.n_tile;
                self.misc(MiscOp::Concat, ln.gtile[0], 0, self.col(dst, c0), rows, lin.tile_cols(j), Some(ex))?;
            }
        }

        let kv = inp.mem.kv;
        let runtime = self.stage == Stage::Decode;
        for h in 0..lay.heads_per_core {
            for (src, value) in [(ln.ak, false), (ln.av, true)] {
                self.push(Instruction {
                    aux: xfer::KV | if runtime { xfer::RUNTIME_POS } else { 0 },
                    channel_mask: if runtime { 0xFF } else { 1 << (tile % KV_SLOTS) },
                    k: if runtime { 0 } else { dim16(tile * MASK_BLOCK)? },
                    offchip_addr: addr32(kv.head_base(l, h, value))?,
                    onchip_addr: line16(self.col(src, h * hd))?,
                    m: dim16(rows)?,
                    n: dim16(hd)?,
                    ..Instruction::new(Opcode::St)
                });
            }
        }

        let mask = inp.mask.ok_or_else(|| Error::Compile("attention needs a block mask".into()))?;
        let blocks = mask.union_blocks(qblocks.0..qblocks.1 + 1);
        let score_cols = (qblocks.1 + 1) * MASK_BLOCK;
        let qk_shift = e.q + e.k;
        let sv_shift = PROB_EXP + e.v;
        let softmax_fused = self.fused.contains(&name("attn.softmax"));
        for h in 0..lay.heads_per_core {
            let qa = self.col(ln.aq, h * hd);
            let last = *blocks.last().unwrap_or(&0);
            self.kv_blocks(kv.head_base(l, h, false), &blocks, ln.akslot, |em, b, slot| {
                let out = em.col(ln.gscores, b * MASK_BLOCK);
                let diag = !runtime && b == tile;
                em.raw_matmul(qa, slot, out, hd, MASK_BLOCK, false, qk_shift, false, diag)?;
                if softmax_fused && b == last {
                    em.insts.last_mut().unwrap().flags.fused_misc_follows = true;
                }
                Ok(())
            })?;
            let qb = if runtime { qblocks.0 } else { tile };
            self.push(Instruction {
                aux: MiscOp::Softmax as u8,
                channel_mask: misc::QUANT | if runtime { misc::RUNTIME_POS } else { 0 },
                onchip_addr: line16(ln.gscores)?,
                offchip_addr: (line16(ln.aprobs)? as u32) << 16 | MASK_LINE as u32,
                m: dim16(rows)?,
                n: dim16(score_cols)?,
                k: PROB_EXP as i16 as u16,
                nm_n: (qb & 0xF) as u8,
                nm_log2m: (qb >> 4 & 0xF) as u8,
                ..Instruction::new(Opcode::Misc)
            });
            let mut first = true;
            self.kv_blocks(kv.head_base(l, h, true), &blocks, ln.avslot, |em, b, slot| {
                let pa = em.col(ln.aprobs, b * MASK_BLOCK);
                em.raw_matmul(pa, slot, ln.ghead, MASK_BLOCK, hd, true, sv_shift, !first, false)?;
                first = false;
                Ok(())
            })?;
            self.misc(MiscOp::Concat, ln.ghead, 0, self.col(ln.aoslice, h * hd), rows, hd, Some(e.o))?;
        }
        self.gather(Buffer::Act, ln.aoslice, ln.aofull, rows, wq)?;

        let o = lay.linear(&name("o_proj.weight"))?;
        let add1 = self.fused.contains(&name("add1"));
        for j in 0..o.tiles() {
            let last = j + 1 == o.tiles();
            self.weight_tile(o, j, ln.aofull, self.col(ln.glin, j * o.n_tile), e.o, add1 && last)?;
        }
        self.gather(Buffer::Global, ln.glin, ln.ggath, rows, o.slice)?;
        self.misc(MiscOp::Add, ln.gx, ln.ggath, ln.gx, rows, d, None)?;

        self.misc(MiscOp::LayerNorm, ln.gx, 0, ln.aln2, rows, d, Some(e.ln2))?;
        let up = lay.linear(&name("up_proj.weight"))?;
        let act_op = match cfg.activation {
            Activation::Silu => MiscOp::Silu,
            Activation::Gelu => MiscOp::Gelu,
            Activation::Relu => MiscOp::Relu,
        };
        let act_fused = self.fused.contains(&name("act"));
        if cfg.gated_ffn() {
            let gate = lay.linear(&name("gate_proj.weight"))?;
            if gate.n_tile != up.n_tile || gate.slice != up.slice {
                return Err(Error::Tiling(format!("layer {l}: gate and up projections tile differently")));
            }
            let mul_fused = self.fused.contains(&name("mul"));
            for j in 0..up.tiles() {
                let cols = up.tile_cols(j);
                self.weight_tile(up, j, ln.aln2, ln.gtile[0], e.ln2, act_fused)?;
                self.misc(act_op, ln.gtile[0], 0, ln.gtile[0], rows, cols, None)?;
                self.weight_tile(gate, j, ln.aln2, ln.gtile[1], e.ln2, mul_fused)?;
                let dst = self.col(ln.ahslice, j * up.n_tile);
                self.misc(MiscOp::Mul, ln.gtile[0], ln.gtile[1], dst, rows, cols, Some(e.hidden))?;
            }
        } else {
            for j in 0..up.tiles() {
                let cols = up.tile_cols(j);
                self.weight_tile(up, j, ln.aln2, ln.gtile[0], e.ln2, act_fused)?;
                let dst = self.col(ln.ahslice, j * up.n_tile);
                self.misc(act_op, ln.gtile[0], 0, dst, rows, cols, Some(e.hidden))?;
            }
        }
        self.gather(Buffer::Act, ln.ahslice, ln.ahfull, rows, up.slice)?;
        let down = lay.linear(&name("down_proj.weight"))?;
        let add2 = self.fused.contains(&name("add2"));
        for j in 0..down.tiles() {
            let last = j + 1 == down.tiles();
            self.weight_tile(down, j, ln.ahfull, self.col(ln.glin, j * down.n_tile), e.hidden, add2 && last)?;
        }
        self.gather(Buffer::Global, ln.glin, ln.ggath, rows, down.slice)?;
        self.misc(MiscOp::Add, ln.gx, ln.ggath, ln.gx, rows, d, None)?;
        Ok(())
    }

    /// Final norm and vocabulary projection; returns the line of the logits.
    fn lm_head(&mut self) -> Result<usize> {
        let inp = self.inp;
        let cfg = &inp.graph.config;
        let rows = self.ln.rows_now();
        let ln = self.ln.clone();
        let e = inp.exps.final_ln;
        self.misc(MiscOp::LayerNorm, ln.gx, 0, ln.aln2, rows, cfg.hidden_dim, Some(e))?;
        let head = inp.layout.linear("lm_head.proj.weight")?;
        for j in 0..head.tiles() {
            self.weight_tile(head, j, ln.aln2, self.col(ln.glin, j * head.n_tile), e, false)?;
        }
        self.gather(Buffer::Global, ln.glin, ln.ggath, rows, head.slice)?;
        Ok(ln.ggath)
    }
}

impl Lines {
    fn rows_now(&self) -> usize {
        self.rows
    }
}

/// Key that determines the instruction count of an exact-length program.
pub fn length_class(cfg: &crate::model::ModelConfig, stage: Stage, len: usize) -> (usize, usize, usize) {
    let tiles = len.div_ceil(MASK_BLOCK);
    match stage {
        Stage::Decode => (tiles, 0, 0),
        Stage::Prefill => {
            let r = len - (tiles - 1) * MASK_BLOCK;
            let out_w = if cfg.has_lm_head { cfg.vocab_size } else { cfg.hidden_dim };
            (tiles, stripe_chunks(r * cfg.hidden_dim / 16).len(), stripe_chunks(r * out_w / 16).len())
        }
    }
}

/// Builds the unmerged instruction stream of one program.
pub fn lower_instructions(inp: &LowerInput, target: Target) -> Result<Vec<Instruction>> {
    let g = inp.graph;
    let cfg = &g.config;
    check_structure(g)?;
    let mask = inp.mask.ok_or_else(|| Error::Compile("missing attention mask".into()))?;
    if target.len == 0 || target.min_len == 0 || target.min_len > target.len {
        return Err(Error::Compile(format!("bad program length range {}..={}", target.min_len, target.len)));
    }
    if target.len > inp.mem.max_len {
        return Err(Error::Capacity { len: target.len, max_len: inp.mem.max_len });
    }
    if mask.seq_len < target.len {
        return Err(Error::Compile(format!("mask covers {} tokens, program needs {}", mask.seq_len, target.len)));
    }
    if inp.exps.layers.len() != cfg.num_layers {
        return Err(Error::Compile("exponent table does not match the layer count".into()));
    }
    let nblocks = target.len.div_ceil(MASK_BLOCK);
    let rows = match target.stage {
        Stage::Prefill => target.len.min(MASK_BLOCK),
        Stage::Decode => 1,
    };
    let score_cols = nblocks * MASK_BLOCK;
    let lines = plan_lines(inp, rows, score_cols)?;
    let index_lines = inp.hw.index_buffer_bytes / LINE;
    if MASK_LINE + nblocks > index_lines {
        return Err(Error::Tiling(format!("index buffer cannot hold {nblocks} mask rows")));
    }
    let mut em = Emitter {
        inp,
        insts: Vec::new(),
        stage: target.stage,
        fused: fused_misc(g),
        ln: lines,
        wsel: 0,
        sync: 0,
        kv_lines: MASK_BLOCK * cfg.head_dim / LINE,
    };
    em.ddr_load(0, inp.mem.lut_base, LUT_LINES)?;
    em.ddr_load(MASK_LINE, inp.mem.mask_base, nblocks * MASK_ROW_BYTES / LINE)?;
    let d = cfg.hidden_dim;
    let out_w = if cfg.has_lm_head { cfg.vocab_size } else { d };
    let mem = inp.mem;
    let layers = cfg.num_layers;
    match target.stage {
        Stage::Prefill => {
            for l in 0..layers {
                let src = if l == 0 { mem.input } else { mem.ping[(l - 1) % 2] };
                let last = l + 1 == layers;
                let dst = if last { mem.output } else { mem.ping[l % 2] };
                for t in 0..nblocks {
                    let r = (target.len - t * MASK_BLOCK).min(MASK_BLOCK);
                    em.ln.rows = r;
                    em.act_transfer(Opcode::Ld, &src, t, r, em.ln.gx, d)?;
                    em.layer(l, t, (t, t))?;
                    if last && cfg.has_lm_head {
                        let at = em.lm_head()?;
                        em.act_transfer(Opcode::St, &dst, t, r, at, out_w)?;
                    } else {
                        em.act_transfer(Opcode::St, &dst, t, r, em.ln.gx, d)?;
                    }
                }
            }
        }
        Stage::Decode => {
            let qb = ((target.min_len - 1) / MASK_BLOCK, (target.len - 1) / MASK_BLOCK);
            em.act_transfer(Opcode::Ld, &mem.input, 0, 1, em.ln.gx, d)?;
            for l in 0..layers {
                em.layer(l, qb.1, qb)?;
            }
            let at = if cfg.has_lm_head { em.lm_head()? } else { em.ln.gx };
            em.act_transfer(Opcode::St, &mem.output, 0, 1, at, out_w)?;
        }
    }
    let id = em.next_sync();
    em.push(Instruction::sys(id));
    Ok(em.insts)
}

pub fn program_header(inp: &LowerInput, target: Target) -> ProgramHeader {
    let mut hbm_base = [0u64; crate::isa::program::MAX_SLRS];
    for (c, b) in inp.mem.hbm_base.iter().enumerate() {
        hbm_base[c] = *b;
    }
    ProgramHeader {
        stage: target.stage,
        num_slrs: inp.layout.cores as u8,
        bucket: target.len as u16,
        layer_start: 0,
        layer_end: inp.graph.config.num_layers as u16,
        lut_base: inp.mem.lut_base,
        ddr_base: inp.mem.mask_base,
        hbm_base,
    }
}

/// Lowers the graph to one program; `merge` folds eight-channel transfer groups.
pub fn lower_graph(inp: &LowerInput, target: Target, merge: bool) -> Result<Program> {
    let insts = lower_instructions(inp, target)?;
    let instructions = if merge { merge_program(&insts) } else { insts };
    let p = Program { header: program_header(inp, target), instructions };
    p.validate()?;
    Ok(p)
}
