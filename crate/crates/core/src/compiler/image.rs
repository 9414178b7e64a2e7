//! Encoding and decoding of weight tiles (see `layout` for the record format).

use half::f16;

use super::layout::{bits_code, bits_from_code, n_code, n_from_code, select_bytes, LinearLayout};
use crate::compression::quant::{unpack_values, GROUP};
use crate::compression::{NmSparseTensor, PackedQuantTensor};
use crate::error::{Error, Result};

/// One decoded weight record: `n` kept values at ascending positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub bits: u8,
    pub n: usize,
    pub scale: f16,
    pub idx: [u8; GROUP],
    pub vals: [i8; GROUP],
}

fn pack_values(vals: &[i8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; (vals.len() * bits as usize).div_ceil(8)];
    let mask = (1u32 << bits) - 1;
    for (i, &v) in vals.iter().enumerate() {
        let field = (v as i32 as u32) & mask;
        for k in 0..bits as usize {
            let b = i * bits as usize + k;
            if field >> k & 1 == 1 {
                out[b / 8] |= 1 << (b % 8);
            }
        }
    }
    out
}

pub fn encode_record(out: &mut Vec<u8>, bits: u8, scale: f16, idx: &[u8], vals: &[i8]) -> Result<()> {
    let n = idx.len();
    if vals.len() != n || idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i as usize >= GROUP) {
        return Err(Error::Data(format!("record selectors {idx:?} are not ascending positions")));
    }
    out.push(bits_code(bits)? | n_code(n)? << 2);
    out.extend(scale.to_le_bytes());
    match n {
        16 => {}
        4..=15 => {
            let map: u16 = idx.iter().fold(0, |m, &i| m | 1 << i);
            out.extend(map.to_le_bytes());
        }
        _ => {
            let mut sel = vec![0u8; n.div_ceil(2)];
            for (k, &i) in idx.iter().enumerate() {
                sel[k / 2] |= i << (4 * (k % 2));
            }
            out.extend(sel);
        }
    }
    out.extend(pack_values(vals, bits));
    Ok(())
}

/// Decodes the record at `*pos` and advances past it.
pub fn decode_record(b: &[u8], pos: &mut usize) -> Result<Record> {
    let trunc = || Error::Datapath(format!("weight record at byte {pos} runs past the tile", pos = *pos));
    let head = *b.get(*pos).ok_or_else(trunc)?;
    let bits = bits_from_code(head & 3);
    let n = n_from_code(head >> 2).map_err(|e| Error::Datapath(e.to_string()))?;
    let scale_bytes = b.get(*pos + 1..*pos + 3).ok_or_else(trunc)?;
    let scale = f16::from_le_bytes([scale_bytes[0], scale_bytes[1]]);
    let mut p = *pos + 3;
    let mut idx = [0u8; GROUP];
    let sel = b.get(p..p + select_bytes(n)).ok_or_else(trunc)?;
    match n {
        16 => {
            for (i, v) in idx.iter_mut().enumerate() {
                *v = i as u8;
            }
        }
        4..=15 => {
            let map = u16::from_le_bytes([sel[0], sel[1]]);
            if map.count_ones() as usize != n {
                return Err(Error::Datapath(format!("bitmap {map:#06x} does not select {n} values")));
            }
            let mut k = 0;
            for i in 0..GROUP {
                if map >> i & 1 == 1 {
                    idx[k] = i as u8;
                    k += 1;
                }
            }
        }
        _ => {
            for (k, v) in idx.iter_mut().take(n).enumerate() {
                *v = sel[k / 2] >> (4 * (k % 2)) & 0xF;
            }
        }
    }
    p += select_bytes(n);
    let vb = (n * bits as usize).div_ceil(8);
    let raw = b.get(p..p + vb).ok_or_else(trunc)?;
    let mut vals = [0i8; GROUP];
    vals[..n].copy_from_slice(&unpack_values(raw, bits, n));
    *pos = p + vb;
    Ok(Record { bits, n, scale, idx, vals })
}

/// Kept values and positions of one weight row, group by group.
pub struct RowGroups<'a> {
    nm: &'a NmSparseTensor,
    cursor: usize,
    row: usize,
    g: usize,
}

impl<'a> RowGroups<'a> {
    pub fn new(nm: &'a NmSparseTensor, row: usize, offsets: &[usize]) -> Self {
        RowGroups { nm, cursor: offsets[row], row, g: 0 }
    }
}

impl<'a> Iterator for RowGroups<'a> {
    type Item = (&'a [u8], &'a [i8]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.g * self.nm.m >= self.nm.cols {
            return None;
        }
        let n = self.nm.block_n(self.row, self.g * self.nm.m);
        let s = self.cursor;
        self.cursor += n;
        self.g += 1;
        Some((&self.nm.indices[s..s + n], &self.nm.values[s..s + n]))
    }
}

/// Encodes tile `j` of `core`'s slice, zero padded to the layout size.
pub fn encode_tile(
    lin: &LinearLayout,
    packed: &PackedQuantTensor,
    nm: &NmSparseTensor,
    offsets: &[usize],
    core: usize,
    j: usize,
) -> Result<Vec<u8>> {
    if packed.rows != lin.out_dim || packed.cols != lin.in_dim || nm.rows != lin.out_dim || nm.cols != lin.in_dim {
        return Err(Error::Data(format!("{}: tensor shape does not match the layout", lin.name)));
    }
    let groups = lin.in_dim / GROUP;
    let mut out = Vec::with_capacity(lin.tile_bytes[j]);
    for i in 0..lin.tile_cols(j) {
        let f = lin.feature(core, j * lin.n_tile + i);
        if f >= lin.out_dim {
            for _ in 0..groups {
                encode_record(&mut out, 2, f16::ZERO, &[], &[])?;
            }
            continue;
        }
        for (g, (idx, vals)) in RowGroups::new(nm, f, offsets).enumerate() {
            let gi = f * groups + g;
            encode_record(&mut out, packed.bits[gi], packed.scales[gi], idx, vals)?;
        }
    }
    if out.len() > lin.tile_bytes[j] {
        return Err(Error::Compile(format!(
            "{} tile {j} encodes to {} bytes, layout reserved {}",
            lin.name,
            out.len(),
            lin.tile_bytes[j]
        )));
    }
    out.resize(lin.tile_bytes[j], 0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn record_roundtrip(bits in prop::sample::select(vec![2u8, 3, 4, 8]),
                            n in prop::sample::select(vec![0usize, 1, 2, 4, 8, 16]),
                            seed in any::<u64>(), scale in 0u16..0x7C00) {
            use rand::{seq::index::sample, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<u8> = sample(&mut rng, 16, n).into_iter().map(|i| i as u8).collect();
            idx.sort();
            let lim = crate::compression::quant::qmax(bits);
            let vals: Vec<i8> = (0..n).map(|_| rng.gen_range(-lim..=lim) as i8).collect();
            let mut buf = vec![0xAA];
            encode_record(&mut buf, bits, f16::from_bits(scale), &idx, &vals).unwrap();
            prop_assert_eq!(buf.len() - 1, super::super::layout::record_bytes(bits, n));
            let mut pos = 1;
            let r = decode_record(&buf, &mut pos).unwrap();
            prop_assert_eq!(pos, buf.len());
            prop_assert_eq!(r.n, n);
            prop_assert_eq!(r.bits, bits);
            prop_assert_eq!(r.scale.to_bits(), scale);
            prop_assert_eq!(&r.idx[..n], &idx[..]);
            prop_assert_eq!(&r.vals[..n], &vals[..]);
        }
    }

    #[test]
    fn truncated_record_faults() {
        let mut buf = Vec::new();
        encode_record(&mut buf, 4, f16::ONE, &[0, 3, 5, 9], &[1, -2, 3, -4]).unwrap();
        let mut pos = 0;
        assert!(matches!(decode_record(&buf[..buf.len() - 1], &mut pos), Err(Error::Datapath(_))));
    }
}
