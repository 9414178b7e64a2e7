//! Group-wise mixed-precision weight quantization.
//!
//! Every row of a [out, in] weight matrix is split into groups of 16 input
//! channels. A group gets a bit width from {2, 3, 4, 8} and one fp16 scale;
//! values are symmetric two's-complement integers in
//! [-(2^(b-1) - 1), 2^(b-1) - 1].

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GROUP: usize = 16;
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported weight bit width {bits}")))
    }
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Bytes one packed group occupies.
pub fn group_bytes(bits: u8) -> usize {
    GROUP * bits as usize / 8
}

/// Rounds half away from zero.
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

/// How bit widths are assigned to groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitPlan {
    Uniform(u8),
    /// Cycles through the list over groups in row-major order.
    RoundRobin(Vec<u8>),
    /// One entry per group.
    Explicit(Vec<u8>),
}

impl Default for BitPlan {
    fn default() -> Self {
        BitPlan::RoundRobin(vec![3, 3, 4, 4])
    }
}

impl BitPlan {
    pub fn materialize(&self, groups: usize) -> Result<Vec<u8>> {
        let plan = match self {
            BitPlan::Uniform(b) => vec![*b; groups],
            BitPlan::RoundRobin(cycle) => {
                if cycle.is_empty() {
                    return Err(Error::Config("empty round-robin bit plan".into()));
                }
                (0..groups).map(|g| cycle[g % cycle.len()]).collect()
            }
            BitPlan::Explicit(v) => {
                if v.len() != groups {
                    return Err(Error::Config(format!("bit plan has {} entries, need {groups}", v.len())));
                }
                v.clone()
            }
        };
        for &b in &plan {
            check_bits(b)?;
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedQuantTensor {
    pub rows: usize,
    pub cols: usize,
    /// Bit width per group, row-major over (row, group).
    pub bits: Vec<u8>,
    pub scales: Vec<f16>,
    /// Groups packed back to back, each `group_bytes(bits)` long, LSB first.
    pub payload: Vec<u8>,
}

/// Packs 16 values of `bits` width, little-endian bit order.
pub fn pack_group(q: &[i8; GROUP], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; group_bytes(bits)];
    let mask = (1u32 << bits) - 1;
    for (i, &v) in q.iter().enumerate() {
        let field = (v as i32 as u32) & mask;
        let bit = i * bits as usize;
        for k in 0..bits as usize {
            if field >> k & 1 == 1 {
                out[(bit + k) / 8] |= 1 << ((bit + k) % 8);
            }
        }
    }
    out
}

/// Inverse of [`pack_group`] for `count` values, with sign extension.
pub fn unpack_values(bytes: &[u8], bits: u8, count: usize) -> Vec<i8> {
    (0..count)
        .map(|i| {
            let bit = i * bits as usize;
            let mut field = 0u32;
            for k in 0..bits as usize {
                let b = bit + k;
                field |= ((bytes[b / 8] >> (b % 8)) as u32 & 1) << k;
            }
            let shift = 32 - bits as u32;
            (((field << shift) as i32) >> shift) as i8
        })
        .collect()
}

impl PackedQuantTensor {
    pub fn groups_per_row(&self) -> usize {
        self.cols / GROUP
    }

    pub fn num_groups(&self) -> usize {
        self.bits.len()
    }

    pub fn group_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.bits.len() + 1);
        let mut acc = 0;
        for &b in &self.bits {
            offs.push(acc);
            acc += group_bytes(b);
        }
        offs.push(acc);
        offs
    }

    /// Integer values of every group, row-major.
    pub fn int_values(&self) -> Vec<i8> {
        let offs = self.group_offsets();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for (g, &b) in self.bits.iter().enumerate() {
            out.extend(unpack_values(&self.payload[offs[g]..], b, GROUP));
        }
        out
    }

    pub fn average_bits(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let q = self.int_values();
        q.iter()
            .enumerate()
            .map(|(i, &v)| v as f32 * self.scales[i / GROUP].to_f32())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols % GROUP != 0 || self.bits.len() != self.rows * self.groups_per_row() {
            return Err(Error::Format(format!("packed tensor {}x{} has {} groups", self.rows, self.cols, self.bits.len())));
        }
        if self.scales.len() != self.bits.len() {
            return Err(Error::Format("scale count does not match group count".into()));
        }
        for &b in &self.bits {
            check_bits(b)?;
        }
        let need = self.group_offsets()[self.bits.len()];
        if self.payload.len() != need {
            return Err(Error::Format(format!("payload is {} bytes, layout needs {need}", self.payload.len())));
        }
        Ok(())
    }
}

/// Integer values and scale of group `g`.
pub fn dequantize_group(t: &PackedQuantTensor, g: usize) -> Result<([i8; GROUP], f16)> {
    if g >= t.bits.len() || t.scales.len() != t.bits.len() {
        return Err(Error::Format(format!("group {g} out of range for {} groups", t.bits.len())));
    }
    check_bits(t.bits[g]).map_err(|e| Error::Format(e.to_string()))?;
    let off: usize = t.bits[..g].iter().map(|&b| group_bytes(b)).sum();
    let end = off + group_bytes(t.bits[g]);
    if end > t.payload.len() {
        return Err(Error::Format(format!("payload of {} bytes too short for group {g}", t.payload.len())));
    }
    let vals = unpack_values(&t.payload[off..end], t.bits[g], GROUP);
    let mut q = [0i8; GROUP];
    q.copy_from_slice(&vals);
    Ok((q, t.scales[g]))
}

/// Quantizes one group; returns the integer values and the scale.
pub fn quantize_group(x: &[f16], bits: u8) -> ([i8; GROUP], f16) {
    let lim = qmax(bits);
    let amax = x.iter().map(|v| v.to_f32().abs()).fold(0.0f32, f32::max);
    let mut q = [0i8; GROUP];
    if amax == 0.0 {
        return (q, f16::ONE);
    }
    // round the scale up so |x| / scale never exceeds the integer range
    let ideal = amax / lim as f32;
    let mut scale = f16::from_f32(ideal);
    if scale.to_f32() < ideal {
        scale = f16::from_bits(scale.to_bits() + 1);
    }
    let s = scale.to_f32();
    for (dst, v) in q.iter_mut().zip(x) {
        *dst = round_half_away(v.to_f32() / s).clamp(-lim as f32, lim as f32) as i8;
    }
    (q, scale)
}

pub fn quantize_mixed(dense: &[f16], rows: usize, cols: usize, plan: &BitPlan) -> Result<PackedQuantTensor> {
    if cols % GROUP != 0 {
        return Err(Error::Config(format!("input dimension {cols} is not a multiple of {GROUP}")));
    }
    if dense.len() != rows * cols {
        return Err(Error::Data(format!("expected {} weights, got {}", rows * cols, dense.len())));
    }
    if let Some(i) = dense.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite weight at flat index {i}")));
    }
    let groups = rows * cols / GROUP;
    let bits = plan.materialize(groups)?;
    let mut scales = Vec::with_capacity(groups);
    let mut payload = Vec::new();
    for (g, &b) in bits.iter().enumerate() {
        let (q, s) = quantize_group(&dense[g * GROUP..(g + 1) * GROUP], b);
        scales.push(s);
        payload.extend(pack_group(&q, b));
    }
    Ok(PackedQuantTensor { rows, cols, bits, scales, payload })
}
