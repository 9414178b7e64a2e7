//! Instruction programs and the program file format.
//!
//! ```text
//! 0   magic "FLIS"
//! 4   u16 version
//! 6   u8  stage (0 prefill, 1 decode)
//! 7   u8  number of SLRs with a valid base entry
//! 8   u16 bucket length
//! 10  u16 first layer
//! 12  u16 one past last layer
//! 14  u16 reserved
//! 16  u32 instruction count
//! 20  u32 LUT base (DDR)
//! 24  u32 DDR data base
//! 28  4 x u64 HBM window base per SLR
//! 60  4 bytes padding
//! 64  instruction words, 16 bytes each
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instruction::{Instruction, Opcode, WORD_BYTES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLIS";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 64;
pub const MAX_SLRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramHeader {
    pub stage: Stage,
    pub num_slrs: u8,
    pub bucket: u16,
    pub layer_start: u16,
    pub layer_end: u16,
    pub lut_base: u32,
    pub ddr_base: u32,
    pub hbm_base: [u64; MAX_SLRS],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub header: ProgramHeader,
    pub instructions: Vec<Instruction>,
}

impl Program {
    pub fn size_bytes(&self) -> usize {
        HEADER_BYTES + WORD_BYTES * self.instructions.len()
    }

    pub fn count(&self, op: Opcode) -> usize {
        self.instructions.iter().filter(|i| i.opcode == op as u8).count()
    }

    pub fn validate(&self) -> Result<()> {
        match self.instructions.last() {
            Some(i) if i.opcode == Opcode::Sys as u8 => {}
            _ => return Err(Error::Compile("program must end with SYS".into())),
        }
        if self.header.num_slrs as usize > MAX_SLRS {
            return Err(Error::Format(format!("{} SLRs exceed the header table", self.header.num_slrs)));
        }
        for i in &self.instructions {
            i.validate()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.size_bytes());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(match h.stage {
            Stage::Prefill => 0,
            Stage::Decode => 1,
        });
        out.push(h.num_slrs);
        out.extend(h.bucket.to_le_bytes());
        out.extend(h.layer_start.to_le_bytes());
        out.extend(h.layer_end.to_le_bytes());
        out.extend([0u8; 2]);
        out.extend((self.instructions.len() as u32).to_le_bytes());
        out.extend(h.lut_base.to_le_bytes());
        out.extend(h.ddr_base.to_le_bytes());
        for b in h.hbm_base {
            out.extend(b.to_le_bytes());
        }
        out.extend([0u8; 4]);
        debug_assert_eq!(out.len(), HEADER_BYTES);
        for i in &self.instructions {
            out.extend(i.encode()?);
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES || &b[..4] != MAGIC {
            return Err(Error::Format("not an instruction program".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported program version {version}")));
        }
        let stage = match b[6] {
            0 => Stage::Prefill,
            1 => Stage::Decode,
            s => return Err(Error::Format(format!("unknown stage {s}"))),
        };
        let count = u32_at(16) as usize;
        if b.len() != HEADER_BYTES + count * WORD_BYTES {
            return Err(Error::Format(format!(
                "program is {} bytes, header promises {} instructions",
                b.len(),
                count
            )));
        }
        let mut hbm_base = [0u64; MAX_SLRS];
        for (s, base) in hbm_base.iter_mut().enumerate() {
            *base = u64::from_le_bytes(b[28 + 8 * s..36 + 8 * s].try_into().unwrap());
        }
        let header = ProgramHeader {
            stage,
            num_slrs: b[7],
            bucket: u16_at(8),
            layer_start: u16_at(10),
            layer_end: u16_at(12),
            lut_base: u32_at(20),
            ddr_base: u32_at(24),
            hbm_base,
        };
        let instructions = b[HEADER_BYTES..]
            .chunks_exact(WORD_BYTES)
            .map(|w| Instruction::decode(w.try_into().unwrap()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Program { header, instructions })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable listing, one instruction per line.
    pub fn disassemble(&self) -> String {
        let mut s = format!(
            "; {:?} bucket={} layers={}..{} slrs={}\n",
            self.header.stage, self.header.bucket, self.header.layer_start, self.header.layer_end, self.header.num_slrs
        );
        for (pc, i) in self.instructions.iter().enumerate() {
            s.push_str(&format!("{pc:6}  {i}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::instruction::Buffer;

    fn sample() -> Program {
        let ld = Instruction { k: Buffer::Act as u16, m: 1, n: 64, ..Instruction::new(Opcode::Ld) };
        Program {
            header: ProgramHeader {
                stage: Stage::Decode,
                num_slrs: 3,
                bucket: 128,
                layer_start: 0,
                layer_end: 32,
                lut_base: 0x1000,
                ddr_base: 0x2000,
                hbm_base: [0, 8 << 28, 16 << 28, 0],
            },
            instructions: vec![ld, Instruction::sys(0)],
        }
    }

    #[test]
    fn size_is_header_plus_words() {
        let p = sample();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(bytes.len(), 64 + 16 * 2);
        assert_eq!(p.size_bytes(), bytes.len());
        assert_eq!(Program::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn must_end_with_sys() {
        let mut p = sample();
        p.validate().unwrap();
        p.instructions.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Program::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Program::from_bytes(b"FLIX").is_err());
    }
}
