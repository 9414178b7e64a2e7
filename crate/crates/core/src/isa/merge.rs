//! Folding eight per-channel transfers into one broadcast instruction.
//!
//! Each core sees its eight HBM channels as one 2 GiB window, channel `c`
//! starting at `c * CHANNEL_BYTES`. A merged LD/ST stands for one transfer
//! per set bit `c` of `channel_mask`, at `offchip + c * CHANNEL_BYTES` and
//! on-chip line `onchip + c * lines`, where `lines` is the per-channel
//! transfer size in buffer lines.

use super::instruction::{xfer, Instruction, Opcode};
use crate::error::{Error, Result};

pub const CHANNELS_PER_CORE: usize = 8;
pub const CHANNEL_BYTES: u64 = 1 << 28;

/// Channel index inside the core's window.
pub fn channel_of(offchip: u32) -> usize {
    (offchip as u64 / CHANNEL_BYTES) as usize
}

fn line_stride(i: &Instruction) -> Result<u32> {
    let buf = i.buffer()?;
    let bytes = i.transfer_bytes()?;
    if bytes % buf.line_bytes() != 0 {
        return Err(Error::NotMergeable(format!("{bytes}-byte transfer is not whole buffer lines")));
    }
    Ok((bytes / buf.line_bytes()) as u32)
}

fn per_channel(i: &Instruction, c: usize, stride: u32) -> Result<Instruction> {
    let off = i.offchip_addr as u64 + c as u64 * CHANNEL_BYTES;
    let on = i.onchip_addr as u64 + c as u64 * stride as u64;
    if off > u32::MAX as u64 || on > u16::MAX as u64 {
        return Err(Error::NotMergeable(format!("channel {c} address out of range")));
    }
    let mut flags = i.flags;
    flags.merged_broadcast = false;
    Ok(Instruction { flags, channel_mask: 1 << c, offchip_addr: off as u32, onchip_addr: on as u16, ..*i })
}

pub fn merge_channel_lds(group: &[Instruction]) -> Result<Instruction> {
    if group.len() != CHANNELS_PER_CORE {
        return Err(Error::NotMergeable(format!("group has {} instructions, need 8", group.len())));
    }
    let first = &group[0];
    let op = Opcode::from_u8(first.opcode)?;
    if !op.is_transfer() {
        return Err(Error::NotMergeable(format!("{op:?} is not a transfer")));
    }
    if first.flags.mem_target_ddr {
        return Err(Error::NotMergeable("DDR transfers use a single channel".into()));
    }
    if op == Opcode::St && first.aux & xfer::KV != 0 {
        return Err(Error::NotMergeable("KV stores address tokens, not lines".into()));
    }
    let stride = line_stride(first)?;
    for (c, inst) in group.iter().enumerate() {
        if inst.flags.merged_broadcast {
            return Err(Error::NotMergeable("already merged".into()));
        }
        if per_channel(first, c, stride).ok() != Some(*inst) {
            return Err(Error::NotMergeable(format!("channel {c} breaks the uniform stride pattern")));
        }
    }
    let mut merged = *first;
    merged.flags.merged_broadcast = true;
    merged.channel_mask = 0xFF;
    Ok(merged)
}

pub fn expand_merged(i: &Instruction) -> Result<Vec<Instruction>> {
    if !i.flags.merged_broadcast {
        return Ok(vec![*i]);
    }
    let stride = line_stride(i)?;
    (0..CHANNELS_PER_CORE)
        .filter(|c| i.channel_mask >> c & 1 == 1)
        .map(|c| per_channel(i, c, stride))
        .collect()
}

/// Single-channel form of a transfer: channel bit derived from the address.
pub fn single_channel(mut i: Instruction) -> Instruction {
    if Opcode::from_u8(i.opcode).map(|o| o.is_transfer()).unwrap_or(false) && !i.flags.mem_target_ddr {
        i.channel_mask = 1 << (channel_of(i.offchip_addr) % CHANNELS_PER_CORE);
    }
    i
}

/// Eight single-channel transfers striped across the window.
pub fn striped(base: Instruction) -> Result<Vec<Instruction>> {
    let stride = line_stride(&base)?;
    (0..CHANNELS_PER_CORE).map(|c| per_channel(&base, c, stride)).collect()
}

/// Greedily merges every run of eight mergeable transfers.
pub fn merge_program(insts: &[Instruction]) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(insts.len());
    let mut i = 0;
    while i < insts.len() {
        if i + CHANNELS_PER_CORE <= insts.len() {
            if let Ok(m) = merge_channel_lds(&insts[i..i + CHANNELS_PER_CORE]) {
                out.push(m);
                i += CHANNELS_PER_CORE;
                continue;
            }
        }
        out.push(insts[i]);
        i += 1;
    }
    out
}

pub fn expand_program(insts: &[Instruction]) -> Result<Vec<Instruction>> {
    let mut out = Vec::with_capacity(insts.len());
    for i in insts {
        out.extend(expand_merged(i)?);
    }
    Ok(out)
}
