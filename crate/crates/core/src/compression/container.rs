//! Binary container for compressed tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0   magic "FLCM"
//! 4   u16 version
//! 6   u16 reserved
//! 8   u32 entry count
//! 12  u32 reserved
//! 16  entry table, 64 bytes per entry:
//!       u32 id, u8 kind (0 nm, 1 mask, 2 packed), 3 pad,
//!       u64 offset, u64 length, 40-byte zero-padded UTF-8 name
//! ..  payloads at the recorded offsets
//! ```

use std::path::Path;

use half::f16;

use super::mask::BlockSparseMask;
use super::nm::NmSparseTensor;
use super::quant::PackedQuantTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLCM";
pub const VERSION: u16 = 1;
const HEADER: usize = 16;
const ENTRY: usize = 64;
const NAME_LEN: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Nm(NmSparseTensor),
    Mask(BlockSparseMask),
    Packed(PackedQuantTensor),
}

impl Payload {
    fn kind(&self) -> u8 {
        match self {
            Payload::Nm(_) => 0,
            Payload::Mask(_) => 1,
            Payload::Packed(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: u32,
    pub name: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Format("container payload truncated".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn encode_nm(t: &NmSparseTensor) -> Vec<u8> {
    let mut o = Vec::new();
    put_u32(&mut o, t.rows);
    put_u32(&mut o, t.cols);
    o.push(t.m as u8);
    o.extend([0u8; 3]);
    put_u32(&mut o, t.per_block_n.len());
    o.extend(&t.per_block_n);
    put_u32(&mut o, t.values.len());
    o.extend(t.values.iter().map(|&v| v as u8));
    // two 4-bit indices per byte, low nibble first
    for pair in t.indices.chunks(2) {
        o.push(pair[0] | pair.get(1).map_or(0, |&h| h << 4));
    }
    o
}

fn decode_nm(b: &[u8]) -> Result<NmSparseTensor> {
    let mut r = Reader { b, pos: 0 };
    let rows = r.u32()?;
    let cols = r.u32()?;
    let m = r.u8()? as usize;
    r.take(3)?;
    let nb = r.u32()?;
    let per_block_n = r.take(nb)?.to_vec();
    let nv = r.u32()?;
    let values = r.take(nv)?.iter().map(|&v| v as i8).collect();
    let packed = r.take(nv.div_ceil(2))?;
    let indices = (0..nv).map(|i| (packed[i / 2] >> (4 * (i % 2))) & 0xF).collect();
    let t = NmSparseTensor { rows, cols, m, per_block_n, values, indices };
    t.validate()?;
    Ok(t)
}

fn encode_packed(t: &PackedQuantTensor) -> Vec<u8> {
    let mut o = Vec::new();
    put_u32(&mut o, t.rows);
    put_u32(&mut o, t.cols);
    put_u32(&mut o, t.bits.len());
    o.extend(&t.bits);
    for s in &t.scales {
        o.extend(s.to_le_bytes());
    }
    put_u32(&mut o, t.payload.len());
    o.extend(&t.payload);
    o
}

fn decode_packed(b: &[u8]) -> Result<PackedQuantTensor> {
    let mut r = Reader { b, pos: 0 };
    let rows = r.u32()?;
    let cols = r.u32()?;
    let ng = r.u32()?;
    let bits = r.take(ng)?.to_vec();
    let scales = r.take(2 * ng)?.chunks(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect();
    let np = r.u32()?;
    let payload = r.take(np)?.to_vec();
    let t = PackedQuantTensor { rows, cols, bits, scales, payload };
    t.validate()?;
    Ok(t)
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, payload: Payload) -> u32 {
        let id = self.entries.len() as u32;
        self.entries.push(Entry { id, name: name.into(), payload });
        id
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.payload)
    }

    pub fn packed(&self, name: &str) -> Option<&PackedQuantTensor> {
        match self.get(name) {
            Some(Payload::Packed(t)) => Some(t),
            _ => None,
        }
    }

    pub fn nm(&self, name: &str) -> Option<&NmSparseTensor> {
        match self.get(name) {
            Some(Payload::Nm(t)) => Some(t),
            _ => None,
        }
    }

    pub fn mask(&self) -> Option<&BlockSparseMask> {
        self.entries.iter().find_map(|e| match &e.payload {
            Payload::Mask(m) => Some(m),
            _ => None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs: Vec<Vec<u8>> = self
            .entries
            .iter()
            .map(|e| match &e.payload {
                Payload::Nm(t) => encode_nm(t),
                Payload::Mask(m) => m.to_bytes(),
                Payload::Packed(t) => encode_packed(t),
            })
            .collect();
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend([0u8; 2]);
        put_u32(&mut out, self.entries.len());
        out.extend([0u8; 4]);
        let mut offset = (HEADER + ENTRY * self.entries.len()) as u64;
        for (e, blob) in self.entries.iter().zip(&blobs) {
            let name = e.name.as_bytes();
            if name.len() > NAME_LEN {
                return Err(Error::Format(format!("tensor name '{}' exceeds {NAME_LEN} bytes", e.name)));
            }
            out.extend(e.id.to_le_bytes());
            out.push(e.payload.kind());
            out.extend([0u8; 3]);
            out.extend(offset.to_le_bytes());
            out.extend((blob.len() as u64).to_le_bytes());
            let mut padded = [0u8; NAME_LEN];
            padded[..name.len()].copy_from_slice(name);
            out.extend(padded);
            offset += blob.len() as u64;
        }
        for blob in blobs {
            out.extend(blob);
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER || &b[..4] != MAGIC {
            return Err(Error::Format("not a compressed-model container".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        if b.len() < HEADER + count * ENTRY {
            return Err(Error::Format("container table truncated".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for k in 0..count {
            let e = &b[HEADER + k * ENTRY..HEADER + (k + 1) * ENTRY];
            let id = u32::from_le_bytes(e[0..4].try_into().unwrap());
            let kind = e[4];
            let off = u64::from_le_bytes(e[8..16].try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(e[16..24].try_into().unwrap()) as usize;
            let raw = &e[24..24 + NAME_LEN];
            let end = raw.iter().position(|&c| c == 0).unwrap_or(NAME_LEN);
            let name = String::from_utf8(raw[..end].to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let blob = b.get(off..off + len).ok_or_else(|| Error::Format(format!("entry '{name}' out of bounds")))?;
            let payload = match kind {
                0 => Payload::Nm(decode_nm(blob)?),
                1 => Payload::Mask(BlockSparseMask::from_bytes(blob)?),
                2 => Payload::Packed(decode_packed(blob)?),
                k => return Err(Error::Format(format!("unknown entry kind {k}"))),
            };
            entries.push(Entry { id, name, payload });
        }
        Ok(Container { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
