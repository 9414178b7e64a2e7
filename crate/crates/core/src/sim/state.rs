//! Machine state: sparse off-chip memories, per-core buffers and the
//! traffic monitor.
//!
//! State dump format (little endian): magic `FLST`, u16 version, u16 cores,
//! u64 valid_len, u64 pc; per core the activation, weight, global (fp16 bit
//! patterns) and index buffers, each as u64 byte length plus bytes; then HBM
//! and DDR as u64 page count followed by `(u64 page address, PAGE bytes)`
//! pairs in ascending address order. All-zero pages are omitted.

use std::collections::BTreeMap;

use half::f16;

use crate::compiler::HardwareConfig;
use crate::error::{Error, Result};
use crate::isa::Buffer;

pub const PAGE: usize = 1 << 16;
pub const DUMP_MAGIC: &[u8; 4] = b"FLST";
pub const DUMP_VERSION: u16 = 1;

/// Byte-addressed memory that materializes pages on first write.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PagedMemory {
    pub limit: u64,
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl PagedMemory {
    pub fn new(limit: u64) -> Self {
        PagedMemory { limit, pages: BTreeMap::new() }
    }

    fn check(&self, addr: u64, len: usize) -> Result<()> {
        match addr.checked_add(len as u64) {
            Some(end) if end <= self.limit => Ok(()),
            _ => Err(Error::Datapath(format!("off-chip access {addr:#x}+{len} beyond {:#x}", self.limit))),
        }
    }

    pub fn read(&self, addr: u64, out: &mut [u8]) -> Result<()> {
        self.check(addr, out.len())?;
        let mut done = 0;
        while done < out.len() {
            let a = addr + done as u64;
            let page = a / PAGE as u64;
            let off = (a % PAGE as u64) as usize;
            let n = (PAGE - off).min(out.len() - done);
            match self.pages.get(&page) {
                Some(p) => out[done..done + n].copy_from_slice(&p[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn read_vec(&self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut v = vec![0; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.check(addr, data.len())?;
        let mut done = 0;
        while done < data.len() {
            let a = addr + done as u64;
            let page = a / PAGE as u64;
            let off = (a % PAGE as u64) as usize;
            let n = (PAGE - off).min(data.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| vec![0u8; PAGE].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    fn nonzero_pages(&self) -> impl Iterator<Item = (&u64, &Box<[u8]>)> {
        self.pages.iter().filter(|(_, p)| p.iter().any(|&b| b != 0))
    }
}

/// On-chip buffers of one core. The global buffer holds fp16 values.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreBuffers {
    pub act: Vec<u8>,
    pub weight: Vec<u8>,
    pub global: Vec<f16>,
    pub index: Vec<u8>,
}

impl CoreBuffers {
    pub fn new(hw: &HardwareConfig) -> Self {
        CoreBuffers {
            act: vec![0; hw.act_buffer_bytes],
            weight: vec![0; hw.weight_buffer_bytes],
            global: vec![f16::ZERO; hw.global_buffer_bytes / 2],
            index: vec![0; hw.index_buffer_bytes],
        }
    }

    fn byte_buffer(&mut self, b: Buffer) -> Option<&mut Vec<u8>> {
        match b {
            Buffer::Act => Some(&mut self.act),
            Buffer::Weight => Some(&mut self.weight),
            Buffer::Index => Some(&mut self.index),
            Buffer::Global => None,
        }
    }

    /// Writes raw bytes at a line address; global data is fp16 little endian.
    pub fn store_bytes(&mut self, b: Buffer, line: usize, data: &[u8]) -> Result<()> {
        let start = line * b.line_bytes();
        if let Some(buf) = self.byte_buffer(b) {
            let dst = buf
                .get_mut(start..start + data.len())
                .ok_or_else(|| Error::Datapath(format!("{b:?} buffer write at line {line} out of range")))?;
            dst.copy_from_slice(data);
            return Ok(());
        }
        let e0 = start / 2;
        let dst = self
            .global
            .get_mut(e0..e0 + data.len() / 2)
            .ok_or_else(|| Error::Datapath(format!("global buffer write at line {line} out of range")))?;
        for (i, v) in dst.iter_mut().enumerate() {
            *v = f16::from_le_bytes([data[2 * i], data[2 * i + 1]]);
        }
        Ok(())
    }

    pub fn load_bytes(&mut self, b: Buffer, line: usize, len: usize) -> Result<Vec<u8>> {
        let start = line * b.line_bytes();
        if let Some(buf) = self.byte_buffer(b) {
            return buf
                .get(start..start + len)
                .map(<[u8]>::to_vec)
                .ok_or_else(|| Error::Datapath(format!("{b:?} buffer read at line {line} out of range")));
        }
        let e0 = start / 2;
        let src = self
            .global
            .get(e0..e0 + len / 2)
            .ok_or_else(|| Error::Datapath(format!("global buffer read at line {line} out of range")))?;
        Ok(src.iter().flat_map(|v| v.to_le_bytes()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traffic {
    Weight,
    Kv,
    Activation,
    Ddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferRecord {
    pub pc: usize,
    pub core: usize,
    pub load: bool,
    pub class: Traffic,
    pub bytes: usize,
}

/// Off-chip traffic seen by the cores.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Monitor {
    pub records: Vec<TransferRecord>,
    /// pc of every MM/MV/MISC executed.
    pub compute_pcs: Vec<usize>,
}

impl Monitor {
    pub fn bytes(&self, class: Traffic, load: bool) -> usize {
        self.records.iter().filter(|r| r.class == class && r.load == load).map(|r| r.bytes).sum()
    }

    /// Activation bytes that cross the off-chip boundary between the first
    /// and the last compute instruction.
    pub fn activation_bytes_inside(&self) -> usize {
        let (Some(&first), Some(&last)) = (self.compute_pcs.first(), self.compute_pcs.last()) else {
            return 0;
        };
        self.records
            .iter()
            .filter(|r| r.class == Traffic::Activation && r.pc > first && r.pc < last)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.compute_pcs.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub hbm: PagedMemory,
    pub ddr: PagedMemory,
    pub cores: Vec<CoreBuffers>,
    /// Tokens held in the KV cache after the current step.
    pub valid_len: usize,
    pub pc: usize,
    /// Last sync id each core reached.
    pub sync: Vec<u8>,
    pub monitor: Monitor,
    /// One line per executed instruction when enabled.
    pub trace: Option<Vec<String>>,
}

impl MachineState {
    pub fn new(hw: &HardwareConfig) -> Self {
        MachineState {
            hbm: PagedMemory::new(hw.hbm_bytes),
            ddr: PagedMemory::new(hw.ddr_bytes),
            cores: (0..hw.num_cores).map(|_| CoreBuffers::new(hw)).collect(),
            valid_len: 0,
            pc: 0,
            sync: vec![0; hw.num_cores],
            monitor: Monitor::default(),
            trace: None,
        }
    }

    /// Equality of memory, buffers and sync state, ignoring the program
    /// counter, monitor and trace.
    pub fn same_data(&self, o: &MachineState) -> bool {
        self.hbm == o.hbm && self.ddr == o.ddr && self.cores == o.cores && self.valid_len == o.valid_len && self.sync == o.sync
    }

    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(DUMP_MAGIC);
        out.extend(DUMP_VERSION.to_le_bytes());
        out.extend((self.cores.len() as u16).to_le_bytes());
        out.extend((self.valid_len as u64).to_le_bytes());
        out.extend((self.pc as u64).to_le_bytes());
        let blob = |out: &mut Vec<u8>, b: &[u8]| {
            out.extend((b.len() as u64).to_le_bytes());
            out.extend(b);
        };
        for c in &self.cores {
            blob(&mut out, &c.act);
            blob(&mut out, &c.weight);
            let g: Vec<u8> = c.global.iter().flat_map(|v| v.to_le_bytes()).collect();
            blob(&mut out, &g);
            blob(&mut out, &c.index);
        }
        for m in [&self.hbm, &self.ddr] {
            let pages: Vec<_> = m.nonzero_pages().collect();
            out.extend((pages.len() as u64).to_le_bytes());
            for (a, p) in pages {
                out.extend((a * PAGE as u64).to_le_bytes());
                out.extend(p.iter());
            }
        }
        out
    }

    /// Restores a dump into a state shaped by `hw`.
    pub fn from_dump(b: &[u8], hw: &HardwareConfig) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4)? != DUMP_MAGIC {
            return Err(Error::Format("not a state dump".into()));
        }
        if r.u16()? != DUMP_VERSION {
            return Err(Error::Format("unsupported state dump version".into()));
        }
        let cores = r.u16()? as usize;
        let mut s = MachineState::new(&HardwareConfig { num_cores: cores, ..hw.clone() });
        s.valid_len = r.u64()? as usize;
        s.pc = r.u64()? as usize;
        for c in &mut s.cores {
            c.act = r.blob()?.to_vec();
            c.weight = r.blob()?.to_vec();
            c.global = r.blob()?.chunks_exact(2).map(|p| f16::from_le_bytes([p[0], p[1]])).collect();
            c.index = r.blob()?.to_vec();
        }
        for m in [&mut s.hbm, &mut s.ddr] {
            let n = r.u64()?;
            for _ in 0..n {
                let a = r.u64()?;
                let data = r.take(PAGE)?;
                m.write(a, data)?;
            }
        }
        Ok(s)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("state dump truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paged_memory_reads_back() {
        let mut m = PagedMemory::new(1 << 17);
        let data: Vec<u8> = (0..200_000u32).map(|i| i as u8).collect();
        assert!(m.write(1000, &data).is_err());
        m.write(1000, &data[..100_000]).unwrap();
        assert_eq!(m.read_vec(1000, 100_000).unwrap(), &data[..100_000]);
        assert_eq!(m.read_vec(0, 10).unwrap(), vec![0; 10]);
        assert!(m.read_vec((1 << 17) - 4, 8).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let hw = HardwareConfig::u280();
        let mut s = MachineState::new(&hw);
        s.valid_len = 7;
        s.cores[1].global[5] = f16::from_f32(2.5);
        s.cores[2].act[17] = 9;
        s.hbm.write(3 << 28, &[1, 2, 3]).unwrap();
        s.ddr.write(12, &[4]).unwrap();
        let back = MachineState::from_dump(&s.dump(), &hw).unwrap();
        assert_eq!(back.dump(), s.dump());
        assert_eq!(back.cores[1].global[5], f16::from_f32(2.5));
        assert_eq!(back.hbm.read_vec(3 << 28, 3).unwrap(), vec![1, 2, 3]);
    }
}
