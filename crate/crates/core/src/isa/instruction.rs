//! 128-bit instruction word.
//!
//! ```text
//! [127:124] opcode   [123:120] flags     [119:112] channel_mask
//! [111:80]  offchip  [79:64]   onchip    [63:48] m  [47:32] k  [31:16] n
//! [15:12]   nm_N     [11:8]    nm_log2M  [7:0]   aux (misc op / sync id / shift)
//! ```
//!
//! Flag bits, from bit 120 up: merged_broadcast, mem_target (1 = DDR),
//! sparse_enable, fused_misc_follows.
//!
//! Several fields carry opcode-specific meaning; see the accessors and the
//! compiler's lowering for the conventions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Ld = 0,
    St = 1,
    Mm = 2,
    Mv = 3,
    Misc = 4,
    Sys = 5,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Opcode::Ld,
            1 => Opcode::St,
            2 => Opcode::Mm,
            3 => Opcode::Mv,
            4 => Opcode::Misc,
            5 => Opcode::Sys,
            v => return Err(Error::IllegalInstruction(v)),
        })
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, Opcode::Ld | Opcode::St)
    }

    pub fn is_matmul(self) -> bool {
        matches!(self, Opcode::Mm | Opcode::Mv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MiscOp {
    Softmax = 0,
    LayerNorm = 1,
    Silu = 2,
    Gelu = 3,
    Add = 4,
    Mul = 5,
    Concat = 6,
    Relu = 7,
}

impl MiscOp {
    pub const ALL: [MiscOp; 8] = [
        MiscOp::Softmax,
        MiscOp::LayerNorm,
        MiscOp::Silu,
        MiscOp::Gelu,
        MiscOp::Add,
        MiscOp::Mul,
        MiscOp::Concat,
        MiscOp::Relu,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        Self::ALL.get(v as usize).copied().ok_or(Error::IllegalInstruction(v))
    }

    /// Ops reading a second operand.
    pub fn is_binary(self) -> bool {
        matches!(self, MiscOp::Add | MiscOp::Mul)
    }

    /// Row-wise reductions.
    pub fn is_rowwise(self) -> bool {
        matches!(self, MiscOp::Softmax | MiscOp::LayerNorm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Flags {
    pub merged_broadcast: bool,
    /// true = DDR, false = HBM. On MM/MV this bit selects accumulate mode.
    pub mem_target_ddr: bool,
    pub sparse_enable: bool,
    pub fused_misc_follows: bool,
}

impl Flags {
    pub fn bits(self) -> u8 {
        self.merged_broadcast as u8
            | (self.mem_target_ddr as u8) << 1
            | (self.sparse_enable as u8) << 2
            | (self.fused_misc_follows as u8) << 3
    }

    pub fn from_bits(b: u8) -> Self {
        Flags {
            merged_broadcast: b & 1 != 0,
            mem_target_ddr: b & 2 != 0,
            sparse_enable: b & 4 != 0,
            fused_misc_follows: b & 8 != 0,
        }
    }
}

/// On-chip buffer ids carried in the `k` field of LD/ST/SYS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Buffer {
    /// int8 activations.
    Act = 0,
    /// Compressed weight records.
    Weight = 1,
    /// fp16 working storage.
    Global = 2,
    /// Raw bytes: mask records and other metadata.
    Index = 3,
}

impl Buffer {
    pub fn from_u16(v: u16) -> Result<Self> {
        Ok(match v {
            0 => Buffer::Act,
            1 => Buffer::Weight,
            2 => Buffer::Global,
            3 => Buffer::Index,
            v => return Err(Error::Datapath(format!("unknown buffer id {v}"))),
        })
    }

    /// Bytes per element.
    pub fn elem_bytes(self) -> usize {
        match self {
            Buffer::Global => 2,
            _ => 1,
        }
    }

    /// Bytes per addressable line (16 elements).
    pub fn line_bytes(self) -> usize {
        16 * self.elem_bytes()
    }
}

/// Transfer-only bits packed into the `aux` byte of LD/ST.
pub mod xfer {
    /// Address is a KV-cache token position: offchip is the head base and
    /// `nm_N`/`nm_log2M` are unused.
    pub const KV: u8 = 1;
    /// Token start comes from the runtime `valid_len - 1` register instead of `k`.
    pub const RUNTIME_POS: u8 = 2;
}

/// MISC bits packed into the `channel_mask` byte.
pub mod misc {
    /// Quantize the result to int8 in the activation buffer with exponent `k`.
    pub const QUANT: u8 = 1;
    /// Softmax query row taken from the runtime `valid_len - 1` register.
    pub const RUNTIME_POS: u8 = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: u8,
    pub flags: Flags,
    pub channel_mask: u8,
    pub offchip_addr: u32,
    pub onchip_addr: u16,
    pub m: u16,
    pub k: u16,
    pub n: u16,
    pub nm_n: u8,
    pub nm_log2m: u8,
    pub aux: u8,
}

pub const WORD_BYTES: usize = 16;

impl Instruction {
    pub fn new(op: Opcode) -> Self {
        Instruction { opcode: op as u8, ..Default::default() }
    }

    pub fn op(&self) -> Opcode {
        // constructors and decode only admit valid opcodes
        Opcode::from_u8(self.opcode).expect("validated opcode")
    }

    pub fn sys(sync_id: u8) -> Self {
        Instruction { aux: sync_id, ..Self::new(Opcode::Sys) }
    }

    pub fn misc_op(&self) -> Result<MiscOp> {
        MiscOp::from_u8(self.aux)
    }

    /// Signed exponent applied to MM/MV outputs.
    pub fn shift(&self) -> i8 {
        self.aux as i8
    }

    pub fn buffer(&self) -> Result<Buffer> {
        Buffer::from_u16(self.k)
    }

    /// Bytes moved by an LD/ST on one channel.
    pub fn transfer_bytes(&self) -> Result<usize> {
        Ok(self.m as usize * self.n as usize * self.buffer()?.elem_bytes())
    }

    /// Number of channels an instruction touches.
    pub fn channels(&self) -> usize {
        if self.flags.merged_broadcast {
            self.channel_mask.count_ones() as usize
        } else {
            1
        }
    }

    /// Zero-length transfer or compute.
    pub fn is_degenerate(&self) -> bool {
        match Opcode::from_u8(self.opcode) {
            Ok(Opcode::Ld | Opcode::St) => self.m == 0 || self.n == 0,
            Ok(Opcode::Mm | Opcode::Mv) => self.m == 0 || self.k == 0 || self.n == 0,
            Ok(Opcode::Misc) => self.m == 0 || self.n == 0,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = Opcode::from_u8(self.opcode)?;
        let enc = |field: &'static str, value: u64, bits: u32| {
            if value >= 1u64 << bits {
                Err(Error::Encoding { field, value, bits })
            } else {
                Ok(())
            }
        };
        enc("nm_N", self.nm_n as u64, 4)?;
        enc("nm_log2M", self.nm_log2m as u64, 4)?;
        if op == Opcode::Misc {
            MiscOp::from_u8(self.aux)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<[u8; WORD_BYTES]> {
        self.validate()?;
        let w: u128 = (self.opcode as u128) << 124
            | (self.flags.bits() as u128) << 120
            | (self.channel_mask as u128) << 112
            | (self.offchip_addr as u128) << 80
            | (self.onchip_addr as u128) << 64
            | (self.m as u128) << 48
            | (self.k as u128) << 32
            | (self.n as u128) << 16
            | (self.nm_n as u128) << 12
            | (self.nm_log2m as u128) << 8
            | self.aux as u128;
        Ok(w.to_le_bytes())
    }

    pub fn decode(bytes: &[u8; WORD_BYTES]) -> Result<Self> {
        let w = u128::from_le_bytes(*bytes);
        let i = Instruction {
            opcode: (w >> 124) as u8 & 0xF,
            flags: Flags::from_bits((w >> 120) as u8 & 0xF),
            channel_mask: (w >> 112) as u8,
            offchip_addr: (w >> 80) as u32,
            onchip_addr: (w >> 64) as u16,
            m: (w >> 48) as u16,
            k: (w >> 32) as u16,
            n: (w >> 16) as u16,
            nm_n: (w >> 12) as u8 & 0xF,
            nm_log2m: (w >> 8) as u8 & 0xF,
            aux: w as u8,
        };
        i.validate()?;
        Ok(i)
    }
}

pub fn encode_instruction(i: &Instruction) -> Result<[u8; WORD_BYTES]> {
    i.encode()
}

pub fn decode_instruction(w: &[u8; WORD_BYTES]) -> Result<Instruction> {
    Instruction::decode(w)
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match Opcode::from_u8(self.opcode) {
            Ok(op) => format!("{op:?}").to_uppercase(),
            Err(_) => format!("OP{}", self.opcode),
        };
        write!(f, "{name:<4}")?;
        match Opcode::from_u8(self.opcode) {
            Ok(Opcode::Sys) => write!(f, " sync={} src={} dst={} m={} n={} buf={}", self.aux, self.onchip_addr, self.offchip_addr & 0xFFFF, self.m, self.n, self.k),
            Ok(Opcode::Misc) => write!(
                f,
                " {:?} a={} b={} dst={} m={} n={} k={} ctl={:#x}",
                self.misc_op().map_err(|_| fmt::Error)?,
                self.onchip_addr,
                self.offchip_addr & 0xFFFF,
                self.offchip_addr >> 16,
                self.m,
                self.n,
                self.k as i16,
                self.channel_mask
            ),
            _ => write!(
                f,
                " off={:#010x} on={} m={} k={} n={} nm={}:{} aux={} mask={:#04x} fl={:#x}",
                self.offchip_addr,
                self.onchip_addr,
                self.m,
                self.k,
                self.n,
                self.nm_n,
                1u32 << self.nm_log2m,
                self.aux,
                self.channel_mask,
                self.flags.bits()
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sys_word_has_only_opcode() {
        let w = Instruction::sys(0).encode().unwrap();
        let v = u128::from_le_bytes(w);
        assert_eq!(v >> 124, 5);
        assert_eq!(v & !(0xFu128 << 124), 0);
    }

    #[test]
    fn zero_word_is_degenerate_load() {
        let i = Instruction::decode(&[0u8; 16]).unwrap();
        assert_eq!(i.op(), Opcode::Ld);
        assert!(i.is_degenerate());
    }

    #[test]
    fn illegal_opcode_rejected() {
        let mut w = [0u8; 16];
        w[15] = 0xF0;
        assert!(matches!(Instruction::decode(&w), Err(Error::IllegalInstruction(15))));
    }

    #[test]
    fn large_matmul_encodes() {
        let i = Instruction { m: 64, k: 4096, n: 4096, ..Instruction::new(Opcode::Mm) };
        assert_eq!(Instruction::decode(&i.encode().unwrap()).unwrap(), i);
    }

    #[test]
    fn nm_overflow_is_encoding_error() {
        let i = Instruction { nm_n: 16, nm_log2m: 4, ..Instruction::new(Opcode::Mm) };
        assert!(matches!(i.encode(), Err(Error::Encoding { field: "nm_N", value: 16, bits: 4 })));
    }

    #[test]
    fn field_positions() {
        let i = Instruction {
            flags: Flags { sparse_enable: true, ..Default::default() },
            channel_mask: 0xAB,
            offchip_addr: 0x1234_5678,
            onchip_addr: 0x9ABC,
            m: 1,
            k: 2,
            n: 3,
            nm_n: 8,
            nm_log2m: 4,
            aux: 0x7F,
            ..Instruction::new(Opcode::Mv)
        };
        let v = u128::from_le_bytes(i.encode().unwrap());
        assert_eq!(v >> 124, 3);
        assert_eq!((v >> 120) & 0xF, 4);
        assert_eq!((v >> 112) & 0xFF, 0xAB);
        assert_eq!((v >> 80) & 0xFFFF_FFFF, 0x1234_5678);
        assert_eq!((v >> 64) & 0xFFFF, 0x9ABC);
        assert_eq!((v >> 48) & 0xFFFF, 1);
        assert_eq!((v >> 32) & 0xFFFF, 2);
        assert_eq!((v >> 16) & 0xFFFF, 3);
        assert_eq!((v >> 12) & 0xF, 8);
        assert_eq!((v >> 8) & 0xF, 4);
        assert_eq!(v & 0xFF, 0x7F);
    }

    pub(crate) fn arb_instruction() -> impl Strategy<Value = Instruction> {
        (
            0u8..6,
            0u8..16,
            any::<u8>(),
            any::<u32>(),
            any::<u16>(),
            (any::<u16>(), any::<u16>(), any::<u16>()),
            (0u8..16, 0u8..16),
            any::<u8>(),
        )
            .prop_map(|(op, fl, cm, off, on, (m, k, n), (nn, nl), aux)| Instruction {
                opcode: op,
                flags: Flags::from_bits(fl),
                channel_mask: cm,
                offchip_addr: off,
                onchip_addr: on,
                m,
                k,
                n,
                nm_n: nn,
                nm_log2m: nl,
                aux: if op == 4 { aux % 8 } else { aux },
            })
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(i in arb_instruction()) {
            let w = i.encode().unwrap();
            prop_assert_eq!(Instruction::decode(&w).unwrap(), i);
        }

        #[test]
        fn decode_encode_roundtrip(bytes in any::<[u8; 16]>()) {
            if let Ok(i) = Instruction::decode(&bytes) {
                prop_assert_eq!(i.encode().unwrap(), bytes);
            }
        }
    }
}
