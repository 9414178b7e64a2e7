//! Per-instruction cycle model of one core.
//!
//! Overlapped execution gives every engine (eight HBM channels, DDR, MPU,
//! SFU) its own in-order queue. A scoreboard over on-chip buffer chunks
//! orders dependent instructions, so weight loads run ahead of compute up to
//! the double-buffer limit. HBM latency is pipelined: a channel is busy only
//! for the data beats, and the data is usable `latency` cycles later.
//!
//! Blocking execution runs each instruction after the previous one has
//! completed and moves the input and output activations of every compute
//! instruction through HBM.

use serde::{Deserialize, Serialize};

use super::analytic::mv_lane_budget;
use crate::compiler::memory::LINE;
use crate::compiler::HardwareConfig;
use crate::isa::instruction::xfer;
use crate::isa::merge::channel_of;
use crate::isa::{Buffer, Instruction, MiscOp, Opcode, Program, CHANNELS_PER_CORE};

const CHUNK_LINES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrTiming {
    pub pc: usize,
    pub op: Opcode,
    pub start: u64,
    pub end: u64,
    pub bytes: u64,
}

/// Timing and traffic of one program on one core.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramTiming {
    pub cycles: u64,
    pub weight_bytes: u64,
    pub kv_bytes: u64,
    pub activation_bytes: u64,
    pub ddr_bytes: u64,
    /// Cycles the MPU spends computing.
    pub mpu_cycles: u64,
    pub timeline: Vec<InstrTiming>,
}

impl ProgramTiming {
    pub fn hbm_bytes(&self) -> u64 {
        self.weight_bytes + self.kv_bytes + self.activation_bytes
    }
}

#[derive(Debug, Clone, Copy)]
struct Region {
    buf: Buffer,
    line: usize,
    lines: usize,
}

fn lines_of(rows: usize, cols: usize) -> usize {
    rows * cols.div_ceil(16)
}

/// Chunked per-buffer ready times: last write completion and last read completion.
struct Board {
    write: [Vec<u64>; 4],
    read: [Vec<u64>; 4],
}

impl Board {
    fn new(hw: &HardwareConfig) -> Self {
        let lines = [
            hw.act_buffer_bytes / LINE,
            hw.weight_buffer_bytes / LINE,
            hw.global_buffer_bytes / (2 * LINE),
            hw.index_buffer_bytes / LINE,
        ];
        let chunks = lines.map(|l| l.div_ceil(CHUNK_LINES).max(1));
        Board { write: chunks.map(|c| vec![0; c]), read: chunks.map(|c| vec![0; c]) }
    }

    fn span(&self, r: &Region) -> (usize, std::ops::Range<usize>) {
        let b = r.buf as usize;
        let len = self.write[b].len();
        let lo = (r.line / CHUNK_LINES).min(len - 1);
        let hi = ((r.line + r.lines.max(1)).div_ceil(CHUNK_LINES)).clamp(lo + 1, len);
        (b, lo..hi)
    }

    fn read_ready(&self, r: &Region) -> u64 {
        let (b, s) = self.span(r);
        self.write[b][s].iter().copied().max().unwrap_or(0)
    }

    fn write_ready(&self, r: &Region) -> u64 {
        let (b, s) = self.span(r);
        self.write[b][s.clone()].iter().chain(&self.read[b][s]).copied().max().unwrap_or(0)
    }

    fn commit_read(&mut self, r: &Region, t: u64) {
        let (b, s) = self.span(r);
        self.read[b][s].iter_mut().for_each(|v| *v = (*v).max(t));
    }

    fn commit_write(&mut self, r: &Region, t: u64) {
        let (b, s) = self.span(r);
        self.write[b][s].iter_mut().for_each(|v| *v = (*v).max(t));
    }
}

/// On-chip regions an instruction reads and writes.
fn accesses(i: &Instruction, hw: &HardwareConfig) -> (Vec<Region>, Vec<Region>) {
    let (m, k, n) = (i.m as usize, i.k as usize, i.n as usize);
    let lo16 = (i.offchip_addr & 0xFFFF) as usize;
    let hi16 = (i.offchip_addr >> 16) as usize;
    match i.op() {
        Opcode::Ld | Opcode::St => {
            let kv_store = i.op() == Opcode::St && i.aux & xfer::KV != 0;
            let (buf, lines) = if kv_store {
                (Buffer::Act, lines_of(m, n))
            } else {
                let buf = i.buffer().unwrap_or(Buffer::Act);
                let bytes = i.transfer_bytes().unwrap_or(0) * i.channels();
                (buf, bytes.div_ceil(buf.line_bytes()))
            };
            let r = Region { buf, line: i.onchip_addr as usize, lines };
            if i.op() == Opcode::Ld {
                (vec![], vec![r])
            } else {
                (vec![r], vec![])
            }
        }
        Opcode::Mm | Opcode::Mv => {
            let a = Region { buf: Buffer::Act, line: i.onchip_addr as usize, lines: lines_of(m, k) };
            let b = if i.nm_log2m == 4 {
                Region { buf: Buffer::Weight, line: hi16, lines: hw.weight_buffer_bytes / 2 / LINE }
            } else if i.nm_n == 1 {
                Region { buf: Buffer::Act, line: hi16, lines: lines_of(k, n) }
            } else {
                Region { buf: Buffer::Act, line: hi16, lines: lines_of(n, k) }
            };
            let out = Region { buf: Buffer::Global, line: lo16, lines: lines_of(m, n) };
            let mut reads = vec![a, b];
            if i.flags.mem_target_ddr {
                reads.push(out);
            }
            (reads, vec![out])
        }
        Opcode::Misc => {
            let op = i.misc_op().unwrap_or(MiscOp::Concat);
            let mut reads = vec![Region { buf: Buffer::Global, line: i.onchip_addr as usize, lines: lines_of(m, n) }];
            match op {
                MiscOp::Add | MiscOp::Mul => reads.push(Region { buf: Buffer::Global, line: lo16, lines: lines_of(m, n) }),
                MiscOp::Softmax => reads.push(Region { buf: Buffer::Index, line: lo16, lines: 8 }),
                _ => {}
            }
            let quant = i.channel_mask & crate::isa::instruction::misc::QUANT != 0;
            let dst = Region { buf: if quant { Buffer::Act } else { Buffer::Global }, line: hi16, lines: lines_of(m, n) };
            (reads, vec![dst])
        }
        Opcode::Sys => (vec![], vec![]),
    }
}

/// Tile-independent cost parameters.
struct Costs<'a> {
    hw: &'a HardwareConfig,
    bpc: f64,
    budget: usize,
}

impl Costs<'_> {
    fn data_cycles(&self, bytes: u64, per_cycle: f64) -> u64 {
        (bytes as f64 / per_cycle).ceil() as u64
    }

    /// MPU cycles. Matrix-vector products spread over every MAC lane of the core.
    fn matmul(&self, i: &Instruction) -> u64 {
        let hw = self.hw;
        let (m, k, n) = (i.m as usize, i.k as usize, i.n as usize);
        if m == 0 || k == 0 || n == 0 {
            return 0;
        }
        let k_eff = if i.nm_log2m == 4 && i.flags.sparse_enable { (k * i.nm_n as usize).div_ceil(16) } else { k };
        if i.op() == Opcode::Mv {
            let p_k = k_eff.next_power_of_two().min(self.budget);
            let p_n = (self.budget / p_k).max(1);
            (k_eff.div_ceil(p_k) * n.div_ceil(p_n)) as u64
        } else {
            (m.div_ceil(hw.p_m) * k_eff.div_ceil(2 * hw.p_k) * n.div_ceil(hw.p_n * hw.mpus_per_core)) as u64
        }
    }

    fn misc(&self, i: &Instruction) -> u64 {
        let phases = match i.misc_op() {
            Ok(MiscOp::Softmax | MiscOp::LayerNorm) => 2,
            _ => 1,
        };
        phases * (i.m as usize * i.n as usize).div_ceil(self.hw.sfu_lanes) as u64
    }

    fn sys(&self, i: &Instruction) -> u64 {
        let bytes = if i.m > 0 {
            let buf = i.buffer().unwrap_or(Buffer::Global);
            (self.hw.num_cores * lines_of(i.m as usize, i.n as usize) * buf.line_bytes()) as u64
        } else {
            0
        };
        self.hw.sync_cycles + self.data_cycles(bytes, self.hw.port_bytes as f64)
    }
}

enum Port {
    Ddr,
    Hbm(Vec<usize>),
}

/// Ports and per-port bytes of a transfer.
fn transfer_ports(i: &Instruction) -> (Port, u64) {
    if i.flags.mem_target_ddr {
        return (Port::Ddr, i.transfer_bytes().unwrap_or(0) as u64);
    }
    if i.op() == Opcode::St && i.aux & xfer::KV != 0 {
        let ch = (i.channel_mask.trailing_zeros() as usize) % CHANNELS_PER_CORE;
        return (Port::Hbm(vec![ch]), i.m as u64 * i.n as u64);
    }
    let bytes = i.transfer_bytes().unwrap_or(0) as u64;
    if i.flags.merged_broadcast {
        let chans = (0..CHANNELS_PER_CORE).filter(|c| i.channel_mask >> c & 1 == 1).collect();
        (Port::Hbm(chans), bytes)
    } else {
        (Port::Hbm(vec![channel_of(i.offchip_addr) % CHANNELS_PER_CORE]), bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Weight,
    Kv,
    Activation,
    Ddr,
}

fn classify(i: &Instruction) -> Class {
    if i.flags.mem_target_ddr {
        Class::Ddr
    } else if i.aux & xfer::KV != 0 {
        Class::Kv
    } else if i.buffer().ok() == Some(Buffer::Weight) {
        Class::Weight
    } else {
        Class::Activation
    }
}

impl ProgramTiming {
    fn count(&mut self, class: Class, bytes: u64) {
        match class {
            Class::Weight => self.weight_bytes += bytes,
            Class::Kv => self.kv_bytes += bytes,
            Class::Activation => self.activation_bytes += bytes,
            Class::Ddr => self.ddr_bytes += bytes,
        }
    }
}

/// Times one program on one core; `overlap` selects scoreboard execution,
/// otherwise blocking execution with activation round trips.
pub fn time_program(p: &Program, hw: &HardwareConfig, overlap: bool, timeline: bool) -> ProgramTiming {
    if overlap {
        time_overlapped(p, hw, timeline)
    } else {
        time_blocking(p, hw, timeline)
    }
}

fn costs(hw: &HardwareConfig) -> Costs<'_> {
    Costs { hw, bpc: hw.channel_bytes_per_cycle(), budget: mv_lane_budget(hw) }
}

/// Transfer cost: port, latency, data cycles per port, total bytes.
fn transfer_cost(i: &Instruction, hw: &HardwareConfig, c: &Costs) -> (Port, u64, u64, u64) {
    let (port, per) = transfer_ports(i);
    match port {
        Port::Ddr => (Port::Ddr, hw.ddr_latency_cycles, c.data_cycles(per, hw.ddr_bytes_per_cycle()), per),
        Port::Hbm(ch) => {
            let total = per * ch.len() as u64;
            (Port::Hbm(ch), hw.hbm_latency_cycles, c.data_cycles(per, c.bpc), total)
        }
    }
}

fn time_overlapped(p: &Program, hw: &HardwareConfig, timeline: bool) -> ProgramTiming {
    let costs = costs(hw);
    let mut out = ProgramTiming::default();
    let mut board = Board::new(hw);
    let mut chan = [0u64; CHANNELS_PER_CORE];
    let (mut ddr, mut mpu, mut sfu, mut mem_issue) = (0u64, 0u64, 0u64, 0u64);
    let mut stream_end: Option<(u64, u64)> = None;
    let mut end_max = 0u64;

    for (pc, i) in p.instructions.iter().enumerate() {
        let op = i.op();
        let (reads, writes) = accesses(i, hw);
        let deps = || reads.iter().map(|r| board.read_ready(r)).chain(writes.iter().map(|r| board.write_ready(r))).max().unwrap_or(0);
        let mut bytes = 0u64;
        let (start, end) = match op {
            Opcode::Ld | Opcode::St => {
                let (port, latency, cycles, total) = transfer_cost(i, hw, &costs);
                bytes = total;
                out.count(classify(i), total);
                let port_free = match &port {
                    Port::Ddr => ddr,
                    Port::Hbm(c) => c.iter().map(|&c| chan[c]).max().unwrap_or(0),
                };
                let start = deps().max(port_free).max(mem_issue);
                mem_issue = start;
                match &port {
                    Port::Ddr => ddr = start + cycles,
                    Port::Hbm(c) => c.iter().for_each(|&c| chan[c] = start + cycles),
                }
                (start, start + latency + cycles)
            }
            Opcode::Mm | Opcode::Mv => {
                let cycles = costs.matmul(i);
                out.mpu_cycles += cycles;
                let start = deps().max(mpu);
                mpu = start + cycles;
                (start, start + cycles)
            }
            Opcode::Misc => {
                let cycles = costs.misc(i);
                let start = deps().max(sfu);
                let mut end = start + cycles;
                if let Some((mm_end, chunks)) = stream_end.take() {
                    end = end.max(mm_end + cycles.div_ceil(chunks.max(1)));
                }
                sfu = end;
                (start, end)
            }
            Opcode::Sys => {
                let cycles = costs.sys(i);
                let start = chan.iter().copied().chain([ddr, mpu, sfu, end_max]).max().unwrap_or(0);
                let end = start + cycles;
                chan.iter_mut().for_each(|c| *c = end);
                (ddr, mpu, sfu, mem_issue) = (end, end, end, end);
                (start, end)
            }
        };

        let mut ready = end;
        if matches!(op, Opcode::Mm | Opcode::Mv) && i.flags.fused_misc_follows {
            let chunks = if op == Opcode::Mv { (i.n as u64).div_ceil(16) } else { (i.m as u64).div_ceil(hw.p_m as u64) };
            ready = start + (end - start).div_ceil(chunks.max(1));
            stream_end = Some((end, chunks));
        }
        reads.iter().for_each(|r| board.commit_read(r, end));
        writes.iter().for_each(|r| board.commit_write(r, ready));
        end_max = end_max.max(end);
        if timeline {
            out.timeline.push(InstrTiming { pc, op, start, end, bytes });
        }
    }
    out.cycles = end_max;
    out
}

/// Back-to-back transfers issued between two compute instructions. They
/// share one exposed latency; each port moves its data serially.
#[derive(Default)]
struct Run {
    start: u64,
    latency: u64,
    chan: [u64; CHANNELS_PER_CORE],
    ddr: u64,
}

impl Run {
    fn add(&mut self, port: &Port, latency: u64, cycles: u64) -> u64 {
        self.latency = self.latency.max(latency);
        let busy = match port {
            Port::Ddr => {
                self.ddr += cycles;
                self.ddr
            }
            Port::Hbm(c) => {
                let t = c.iter().map(|&c| self.chan[c]).max().unwrap_or(0) + cycles;
                c.iter().for_each(|&c| self.chan[c] = t);
                t
            }
        };
        self.start + latency + busy
    }

    fn end(&self) -> u64 {
        let busy = self.chan.iter().copied().chain([self.ddr]).max().unwrap_or(0);
        if busy == 0 {
            self.start
        } else {
            self.start + self.latency + busy
        }
    }
}

/// Blocking execution: memory and compute never overlap, and every compute
/// instruction reloads its input activation and writes back its output
/// through one HBM channel.
fn time_blocking(p: &Program, hw: &HardwareConfig, timeline: bool) -> ProgramTiming {
    let costs = costs(hw);
    let act_port = Port::Hbm(vec![0]);
    let mut out = ProgramTiming::default();
    let mut run = Run::default();

    let act_trip = |run: &mut Run, out: &mut ProgramTiming, pc: usize, op: Opcode, bytes: u64| {
        let end = run.add(&act_port, hw.hbm_latency_cycles, costs.data_cycles(bytes, costs.bpc));
        out.activation_bytes += bytes;
        if timeline {
            out.timeline.push(InstrTiming { pc, op, start: run.start, end, bytes });
        }
    };

    for (pc, i) in p.instructions.iter().enumerate() {
        let op = i.op();
        match op {
            Opcode::Ld | Opcode::St => {
                let (port, latency, cycles, total) = transfer_cost(i, hw, &costs);
                out.count(classify(i), total);
                let end = run.add(&port, latency, cycles);
                if timeline {
                    out.timeline.push(InstrTiming { pc, op, start: run.start, end, bytes: total });
                }
            }
            Opcode::Mm | Opcode::Mv | Opcode::Misc | Opcode::Sys => {
                let (cycles, input, output) = match op {
                    Opcode::Mm | Opcode::Mv => {
                        let c = costs.matmul(i);
                        out.mpu_cycles += c;
                        let a = (lines_of(i.m as usize, i.k as usize) * Buffer::Act.line_bytes()) as u64;
                        (c, a, (lines_of(i.m as usize, i.n as usize) * 32) as u64)
                    }
                    Opcode::Misc => {
                        let quant = i.channel_mask & crate::isa::instruction::misc::QUANT != 0;
                        let a = (lines_of(i.m as usize, i.n as usize) * 32) as u64;
                        (costs.misc(i), a, if quant { a / 2 } else { a })
                    }
                    _ => (costs.sys(i), 0, 0),
                };
                if input > 0 {
                    act_trip(&mut run, &mut out, pc, Opcode::Ld, input);
                }
                let start = run.end();
                let end = start + cycles;
                if timeline {
                    out.timeline.push(InstrTiming { pc, op, start, end, bytes: 0 });
                }
                run = Run { start: end, ..Run::default() };
                if output > 0 {
                    act_trip(&mut run, &mut out, pc, Opcode::St, output);
                }
            }
        }
    }
    out.cycles = run.end();
    out
}
