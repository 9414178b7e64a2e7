//! Instruction execution. Every core runs the same program in lockstep; each
//! instruction completes on all cores before the next one starts, and SYS
//! gathers act on all cores at once. Operand conventions are documented in
//! `compiler::lower`.

use half::f16;

use super::csd::{chain_accumulate, vpu_dot, CsdChainConfig};
use super::sfu::{self, LUT_ENTRIES, LUT_EXP, LUT_GELU, LUT_SILU};
use super::state::{CoreBuffers, MachineState, Traffic, TransferRecord};
use crate::compiler::image::decode_record;
use crate::compiler::lower::MM_PARTIAL;
use crate::compression::MASK_BLOCK;
use crate::error::{Error, Result};
use crate::isa::instruction::{misc, xfer};
use crate::isa::{expand_merged, Buffer, Instruction, MiscOp, Opcode, Program, CHANNELS_PER_CORE, CHANNEL_BYTES};

const ACT_LINE: usize = 16;
const GLOBAL_LINE: usize = 16;

fn dp(msg: impl Into<String>) -> Error {
    Error::Datapath(msg.into())
}

/// Panel-major int8 view: element `(r, c)` of an `rows`-row matrix at `line`.
#[inline]
fn act_at(buf: &[u8], line: usize, rows: usize, r: usize, c: usize) -> Result<i8> {
    let a = ((line + c / 16 * rows + r) * ACT_LINE) + c % 16;
    buf.get(a).map(|&v| v as i8).ok_or_else(|| dp(format!("activation read at line {line} out of range")))
}

fn global_index(line: usize, rows: usize, r: usize, c: usize) -> usize {
    (line + c / 16 * rows + r) * GLOBAL_LINE + c % 16
}

fn read_matrix(g: &[f16], line: usize, rows: usize, cols: usize) -> Result<Vec<Vec<f16>>> {
    let end = global_index(line, rows, rows - 1, cols - 1);
    if end >= g.len() {
        return Err(dp(format!("global read of {rows}x{cols} at line {line} out of range")));
    }
    Ok((0..rows).map(|r| (0..cols).map(|c| g[global_index(line, rows, r, c)]).collect()).collect())
}

fn write_global(g: &mut [f16], line: usize, rows: usize, r: usize, c: usize, v: f16) -> Result<()> {
    let i = global_index(line, rows, r, c);
    *g.get_mut(i).ok_or_else(|| dp(format!("global write at line {line} out of range")))? = v;
    Ok(())
}

fn write_act(a: &mut [u8], line: usize, rows: usize, r: usize, c: usize, v: i8) -> Result<()> {
    let i = (line + c / 16 * rows + r) * ACT_LINE + c % 16;
    *a.get_mut(i).ok_or_else(|| dp(format!("activation write at line {line} out of range")))? = v as u8;
    Ok(())
}

fn luts(core: &CoreBuffers) -> Result<[[f16; LUT_ENTRIES]; 3]> {
    sfu::luts_from_bytes(&core.index).ok_or_else(|| dp("index buffer cannot hold the lookup tables"))
}

/// Scaled fp16 result of an integer accumulation.
fn scale_out(sum: f32, shift: i8) -> f16 {
    f16::from_f32(sum * (shift as f32).exp2())
}

struct Ctx<'a> {
    hbm_base: u64,
    valid_len: usize,
    pc: usize,
    core: usize,
    ddr: &'a mut super::state::PagedMemory,
    hbm: &'a mut super::state::PagedMemory,
    monitor: &'a mut super::state::Monitor,
}

fn classify(i: &Instruction, buf: Buffer) -> Traffic {
    if i.flags.mem_target_ddr {
        Traffic::Ddr
    } else if i.aux & xfer::KV != 0 {
        Traffic::Kv
    } else if buf == Buffer::Weight {
        Traffic::Weight
    } else {
        Traffic::Activation
    }
}

fn transfer(i: &Instruction, core: &mut CoreBuffers, cx: &mut Ctx) -> Result<()> {
    let load = i.op() == Opcode::Ld;
    if !load && i.aux & xfer::KV != 0 {
        return kv_store(i, core, cx);
    }
    let buf = i.buffer()?;
    let bytes = i.transfer_bytes()?;
    if !i.flags.mem_target_ddr && i.offchip_addr as u64 >= CHANNELS_PER_CORE as u64 * CHANNEL_BYTES {
        return Err(dp(format!("address {:#x} outside the core window", i.offchip_addr)));
    }
    let (mem, addr) = if i.flags.mem_target_ddr {
        (&mut *cx.ddr, i.offchip_addr as u64)
    } else {
        (&mut *cx.hbm, cx.hbm_base + i.offchip_addr as u64)
    };
    if load {
        let data = mem.read_vec(addr, bytes)?;
        core.store_bytes(buf, i.onchip_addr as usize, &data)?;
    } else {
        let data = core.load_bytes(buf, i.onchip_addr as usize, bytes)?;
        mem.write(addr, &data)?;
    }
    cx.monitor.records.push(TransferRecord { pc: cx.pc, core: cx.core, load, class: classify(i, buf), bytes });
    Ok(())
}

/// Writes `m` token rows of an `[m x n]` head slice into the blocked cache.
fn kv_store(i: &Instruction, core: &mut CoreBuffers, cx: &mut Ctx) -> Result<()> {
    let (m, n) = (i.m as usize, i.n as usize);
    let start = if i.aux & xfer::RUNTIME_POS != 0 {
        cx.valid_len.checked_sub(1).ok_or_else(|| dp("KV store with an empty sequence"))?
    } else {
        i.k as usize
    };
    let head_base = i.offchip_addr as u64;
    let block_bytes = (MASK_BLOCK * n) as u64;
    let mut bytes = 0;
    for r in 0..m {
        let tok = start + r;
        if tok >= cx.valid_len {
            break;
        }
        let b = tok / MASK_BLOCK;
        let block = (b % CHANNELS_PER_CORE) as u64 * CHANNEL_BYTES + head_base + (b / CHANNELS_PER_CORE) as u64 * block_bytes;
        for p in 0..n.div_ceil(16) {
            let mut line = [0u8; 16];
            for (l, v) in line.iter_mut().enumerate().take((n - p * 16).min(16)) {
                *v = act_at(&core.act, i.onchip_addr as usize, m, r, p * 16 + l)? as u8;
            }
            let within = ((p * MASK_BLOCK + tok % MASK_BLOCK) * 16) as u64;
            cx.hbm.write(cx.hbm_base + block + within, &line[..(n - p * 16).min(16)])?;
            bytes += (n - p * 16).min(16);
        }
    }
    cx.monitor.records.push(TransferRecord { pc: cx.pc, core: cx.core, load: false, class: Traffic::Kv, bytes });
    Ok(())
}

/// A compressed-weight or raw matmul, `[m x k] x [k x n]`.
fn matmul(i: &Instruction, core: &mut CoreBuffers) -> Result<()> {
    let (m, k, n) = (i.m as usize, i.k as usize, i.n as usize);
    if i.op() == Opcode::Mv && m != 1 {
        return Err(dp(format!("MV with {m} rows")));
    }
    let a_line = i.onchip_addr as usize;
    let b_line = (i.offchip_addr >> 16) as usize;
    let out = (i.offchip_addr & 0xFFFF) as usize;
    let shift = i.shift();
    let acc = i.flags.mem_target_ddr;
    let partial = i.channel_mask & MM_PARTIAL != 0;
    let mut result = vec![f16::ZERO; m * n];
    match i.nm_log2m {
        4 => {
            if k % 16 != 0 {
                return Err(dp(format!("weight matmul with k = {k}")));
            }
            let groups = k / 16;
            let mut pos = b_line * 16;
            let a_rows: Vec<Vec<i8>> = (0..m).map(|r| (0..k).map(|c| act_at(&core.act, a_line, m, r, c)).collect()).collect::<Result<_>>()?;
            for f in 0..n {
                let mut recs = Vec::with_capacity(groups);
                for _ in 0..groups {
                    let rec = decode_record(&core.weight, &mut pos)?;
                    if i.flags.sparse_enable && rec.n > i.nm_n as usize {
                        return Err(dp(format!("record keeps {} weights, instruction allows {}", rec.n, i.nm_n)));
                    }
                    recs.push(rec);
                }
                for (r, a) in a_rows.iter().enumerate() {
                    let mut sum = 0f32;
                    for (g, rec) in recs.iter().enumerate() {
                        if rec.n == 0 {
                            continue;
                        }
                        let cfg = CsdChainConfig::nm(rec.n, 16, 1);
                        let parts = vpu_dot(&cfg, &rec.vals[..rec.n], &a[g * 16..g * 16 + 16], &rec.idx[..rec.n])?;
                        let acc_g: i64 = parts.iter().map(|&p| p as i64).sum();
                        sum += rec.scale.to_f32() * acc_g as f32;
                    }
                    result[r * n + f] = scale_out(sum, shift);
                }
            }
        }
        0 => {
            let value_mode = match i.nm_n {
                0 => false,
                1 => true,
                v => return Err(dp(format!("raw matmul operand mode {v}"))),
            };
            for r in 0..m {
                let a: Vec<i8> = (0..k).map(|c| act_at(&core.act, a_line, m, r, c)).collect::<Result<_>>()?;
                for j in 0..n {
                    if partial && j > r {
                        continue;
                    }
                    let b: Vec<i8> = (0..k)
                        .map(|c| if value_mode { act_at(&core.act, b_line, k, c, j) } else { act_at(&core.act, b_line, n, j, c) })
                        .collect::<Result<_>>()?;
                    let dot = chain_accumulate(a.iter().zip(&b).map(|(&x, &y)| x as i32 * y as i32), true);
                    result[r * n + j] = scale_out(dot as f32, shift);
                }
            }
        }
        v => return Err(dp(format!("unsupported nm_log2M {v}"))),
    }
    for r in 0..m {
        for j in 0..n {
            if partial && j > r {
                continue;
            }
            let mut v = result[r * n + j];
            if acc {
                let old = core.global.get(global_index(out, m, r, j)).ok_or_else(|| dp("accumulate read out of range"))?;
                v = sfu::add(*old, v);
            }
            write_global(&mut core.global, out, m, r, j, v)?;
        }
    }
    Ok(())
}

fn misc_op(i: &Instruction, core: &mut CoreBuffers, valid_len: usize) -> Result<()> {
    let op = i.misc_op()?;
    let (m, n) = (i.m as usize, i.n as usize);
    let src = i.onchip_addr as usize;
    let b_line = (i.offchip_addr & 0xFFFF) as usize;
    let dst = (i.offchip_addr >> 16) as usize;
    let quant = i.channel_mask & misc::QUANT != 0;
    let exp = i.k as i16 as i8;
    let a = read_matrix(&core.global, src, m, n)?;
    let out: Vec<Vec<f16>> = match op {
        MiscOp::Add | MiscOp::Mul => {
            let b = read_matrix(&core.global, b_line, m, n)?;
            let f = if op == MiscOp::Add { sfu::add } else { sfu::mul };
            a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()).collect()
        }
        MiscOp::Concat => a,
        MiscOp::Relu => a.iter().map(|row| row.iter().map(|&v| sfu::relu(v)).collect()).collect(),
        MiscOp::Silu | MiscOp::Gelu => {
            let t = luts(core)?;
            let lut = &t[if op == MiscOp::Silu { LUT_SILU } else { LUT_GELU }];
            a.iter().map(|row| row.iter().map(|&v| sfu::act_lut(lut, v)).collect()).collect()
        }
        MiscOp::LayerNorm => a.iter().map(|row| sfu::layernorm(row)).collect(),
        MiscOp::Softmax => {
            let t = luts(core)?;
            let runtime = i.channel_mask & misc::RUNTIME_POS != 0;
            let qb = if runtime {
                valid_len.checked_sub(1).ok_or_else(|| dp("softmax with an empty sequence"))? / MASK_BLOCK
            } else {
                (i.nm_n as usize) | (i.nm_log2m as usize) << 4
            };
            let row = core
                .index
                .get((b_line + qb) * 16..(b_line + qb + 1) * 16)
                .ok_or_else(|| dp("mask row outside the index buffer"))?
                .to_vec();
            let block_set = |bj: usize| bj < 128 && row[bj / 8] >> (bj % 8) & 1 == 1;
            a.iter()
                .enumerate()
                .map(|(r, x)| {
                    let q_tok = if runtime { valid_len - 1 } else { qb * MASK_BLOCK + r };
                    sfu::softmax(&t[LUT_EXP], x, |j| j <= q_tok && j < valid_len && block_set(j / MASK_BLOCK))
                })
                .collect()
        }
    };
    for (r, row) in out.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if quant {
                write_act(&mut core.act, dst, m, r, c, sfu::quantize(v, exp))?;
            } else {
                write_global(&mut core.global, dst, m, r, c, v)?;
            }
        }
    }
    Ok(())
}

/// Copies every core's `[m x n]` slice into all cores, core `c` at column panel `c * n / 16`.
fn gather(i: &Instruction, cores: &mut [CoreBuffers]) -> Result<()> {
    let buf = i.buffer()?;
    let lines = (i.n as usize).div_ceil(16) * i.m as usize;
    let bytes = lines * buf.line_bytes();
    let src = i.onchip_addr as usize;
    let dst = (i.offchip_addr & 0xFFFF) as usize;
    let slices: Vec<Vec<u8>> = cores.iter_mut().map(|c| c.load_bytes(buf, src, bytes)).collect::<Result<_>>()?;
    for core in cores.iter_mut() {
        for (c, s) in slices.iter().enumerate() {
            core.store_bytes(buf, dst + c * lines, s)?;
        }
    }
    Ok(())
}

fn step(i: &Instruction, s: &mut MachineState, hbm_base: &[u64]) -> Result<()> {
    let pc = s.pc;
    let op = Opcode::from_u8(i.opcode)?;
    let fault = |core: usize, e: Error| Error::Fault { core, pc, msg: e.to_string() };
    match op {
        Opcode::Sys => {
            if i.m > 0 {
                gather(i, &mut s.cores).map_err(|e| fault(0, e))?;
            }
            s.sync.iter_mut().for_each(|v| *v = i.aux);
        }
        Opcode::Ld | Opcode::St => {
            let parts = expand_merged(i).map_err(|e| fault(0, e))?;
            for (c, core) in s.cores.iter_mut().enumerate() {
                let mut cx = Ctx {
                    hbm_base: hbm_base[c],
                    valid_len: s.valid_len,
                    pc,
                    core: c,
                    ddr: &mut s.ddr,
                    hbm: &mut s.hbm,
                    monitor: &mut s.monitor,
                };
                for p in &parts {
                    transfer(p, core, &mut cx).map_err(|e| fault(c, e))?;
                }
            }
        }
        Opcode::Mm | Opcode::Mv => {
            for (c, core) in s.cores.iter_mut().enumerate() {
                matmul(i, core).map_err(|e| fault(c, e))?;
            }
            s.monitor.compute_pcs.push(pc);
        }
        Opcode::Misc => {
            for (c, core) in s.cores.iter_mut().enumerate() {
                misc_op(i, core, s.valid_len).map_err(|e| fault(c, e))?;
            }
            s.monitor.compute_pcs.push(pc);
        }
    }
    Ok(())
}

/// Runs `p` to completion on every core of `s`.
pub fn execute_program(p: &Program, s: &mut MachineState) -> Result<()> {
    let cores = s.cores.len();
    if p.header.num_slrs as usize != cores {
        return Err(Error::Fault { core: 0, pc: 0, msg: format!("program for {} cores on a {cores}-core machine", p.header.num_slrs) });
    }
    let hbm_base: Vec<u64> = p.header.hbm_base[..cores].to_vec();
    for (pc, i) in p.instructions.iter().enumerate() {
        s.pc = pc;
        if let Some(t) = s.trace.as_mut() {
            t.push(format!("{:>10} {:>7} {}", 0, pc, i));
        }
        step(i, s, &hbm_base)?;
    }
    s.pc = p.instructions.len();
    Ok(())
}

/// Decodes raw instruction words and runs them; illegal words fault at their pc.
pub fn execute_words(header: crate::isa::ProgramHeader, words: &[[u8; 16]], s: &mut MachineState) -> Result<()> {
    let mut insts = Vec::with_capacity(words.len());
    for (pc, w) in words.iter().enumerate() {
        insts.push(Instruction::decode(w).map_err(|e| Error::Fault { core: 0, pc, msg: e.to_string() })?);
    }
    execute_program(&Program { header, instructions: insts }, s)
}
