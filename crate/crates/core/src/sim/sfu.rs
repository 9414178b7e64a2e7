//! Special function unit: fp16 element-wise and row-wise operations.
//!
//! Every primitive operation rounds to fp16 (nearest even). Row reductions
//! (softmax sum, LayerNorm mean and variance) use a pairwise tree. SiLU,
//! GELU and exp read 256-entry fp16 tables with linear interpolation; the
//! tables live in DDR and are loaded into the index buffer by each program.

use half::f16;

use crate::compression::quant::round_half_away;

pub const LUT_ENTRIES: usize = 256;
/// Table order in the DDR image.
pub const LUT_SILU: usize = 0;
pub const LUT_GELU: usize = 1;
pub const LUT_EXP: usize = 2;
pub const LN_EPS: f32 = 1e-5;

/// Range of the SiLU/GELU tables: `x_i = -8 + i / 16`.
const ACT_LO: f32 = -8.0;
const ACT_STEPS_PER_UNIT: f32 = 16.0;
/// Range of the exp table: `x_i = -16 + i * 16 / 255`.
const EXP_LO: f32 = -16.0;
const EXP_STEPS_PER_UNIT: f32 = 255.0 / 16.0;

fn h(x: f32) -> f16 {
    f16::from_f32(x)
}

pub fn add(a: f16, b: f16) -> f16 {
    h(a.to_f32() + b.to_f32())
}

pub fn sub(a: f16, b: f16) -> f16 {
    h(a.to_f32() - b.to_f32())
}

pub fn mul(a: f16, b: f16) -> f16 {
    h(a.to_f32() * b.to_f32())
}

pub fn div(a: f16, b: f16) -> f16 {
    h(a.to_f32() / b.to_f32())
}

fn silu_exact(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

/// The three tables in DDR order.
pub fn lut_tables() -> [[f16; LUT_ENTRIES]; 3] {
    let mut t = [[f16::ZERO; LUT_ENTRIES]; 3];
    for i in 0..LUT_ENTRIES {
        let x = ACT_LO as f64 + i as f64 / ACT_STEPS_PER_UNIT as f64;
        t[LUT_SILU][i] = f16::from_f64(silu_exact(x));
        t[LUT_GELU][i] = f16::from_f64(gelu_exact(x));
        let e = EXP_LO as f64 + i as f64 / EXP_STEPS_PER_UNIT as f64;
        t[LUT_EXP][i] = f16::from_f64(if i == LUT_ENTRIES - 1 { 1.0 } else { e.exp() });
    }
    t
}

/// Little-endian fp16 bytes of the three tables.
pub fn lut_bytes() -> Vec<u8> {
    lut_tables().iter().flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes())).collect()
}

/// Parses tables from the bytes `lut_bytes` produces.
pub fn luts_from_bytes(b: &[u8]) -> Option<[[f16; LUT_ENTRIES]; 3]> {
    if b.len() < 3 * LUT_ENTRIES * 2 {
        return None;
    }
    let mut t = [[f16::ZERO; LUT_ENTRIES]; 3];
    for (k, table) in t.iter_mut().enumerate() {
        for (i, v) in table.iter_mut().enumerate() {
            let o = (k * LUT_ENTRIES + i) * 2;
            *v = f16::from_le_bytes([b[o], b[o + 1]]);
        }
    }
    Some(t)
}

/// Interpolates `lut` at fractional position `t` (already in fp16).
fn interp(lut: &[f16; LUT_ENTRIES], t: f16) -> f16 {
    let idx = t.to_f32().floor() as usize;
    let frac = sub(t, h(idx as f32));
    let lo = lut[idx];
    add(lo, mul(frac, sub(lut[idx + 1], lo)))
}

/// SiLU or GELU through a table: zero below the range, identity above it.
pub fn act_lut(lut: &[f16; LUT_ENTRIES], x: f16) -> f16 {
    if x.is_nan() {
        return x;
    }
    let t = mul(add(x, h(-ACT_LO)), h(ACT_STEPS_PER_UNIT));
    if t.to_f32() < 0.0 {
        return f16::ZERO;
    }
    if t.to_f32() >= (LUT_ENTRIES - 1) as f32 {
        return x;
    }
    interp(lut, t)
}

/// exp of a non-positive argument through a table.
pub fn exp_lut(lut: &[f16; LUT_ENTRIES], x: f16) -> f16 {
    if x.is_nan() {
        return x;
    }
    let t = mul(add(x, h(-EXP_LO)), h(EXP_STEPS_PER_UNIT));
    if t.to_f32() < 0.0 {
        return f16::ZERO;
    }
    if t.to_f32() >= (LUT_ENTRIES - 1) as f32 {
        return lut[LUT_ENTRIES - 1];
    }
    interp(lut, t)
}

pub fn relu(x: f16) -> f16 {
    if x.to_f32() < 0.0 {
        f16::ZERO
    } else {
        x
    }
}

/// Pairwise fp16 sum: adjacent pairs are added level by level.
pub fn tree_sum(v: &[f16]) -> f16 {
    if v.is_empty() {
        return f16::ZERO;
    }
    let mut cur = v.to_vec();
    while cur.len() > 1 {
        cur = cur.chunks(2).map(|c| if c.len() == 2 { add(c[0], c[1]) } else { c[0] }).collect();
    }
    cur[0]
}

/// Softmax over the entries where `allowed` holds; the others become zero.
pub fn softmax(lut_exp: &[f16; LUT_ENTRIES], x: &[f16], allowed: impl Fn(usize) -> bool) -> Vec<f16> {
    let mut max: Option<f16> = None;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && max.map_or(true, |m| v.to_f32() > m.to_f32() || v.is_nan()) {
            max = Some(v);
        }
    }
    let Some(max) = max else {
        return vec![f16::ZERO; x.len()];
    };
    let e: Vec<f16> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| if allowed(j) { exp_lut(lut_exp, sub(v, max)) } else { f16::ZERO })
        .collect();
    let sum = tree_sum(&e);
    e.iter().enumerate().map(|(j, &v)| if allowed(j) { div(v, sum) } else { f16::ZERO }).collect()
}

/// Normalization without affine terms.
pub fn layernorm(x: &[f16]) -> Vec<f16> {
    let n = h(x.len() as f32);
    let mean = div(tree_sum(x), n);
    let d: Vec<f16> = x.iter().map(|&v| sub(v, mean)).collect();
    let sq: Vec<f16> = d.iter().map(|&v| mul(v, v)).collect();
    let var = div(tree_sum(&sq), n);
    let root = h(add(var, h(LN_EPS)).to_f32().sqrt());
    let inv = div(f16::ONE, root);
    d.iter().map(|&v| mul(v, inv)).collect()
}

/// int8 activation with exponent `e`: `clamp(round(x * 2^-e), -127, 127)`.
pub fn quantize(x: f16, e: i8) -> i8 {
    if x.is_nan() {
        return 0;
    }
    let s = x.to_f32() * (-(e as f32)).exp2();
    round_half_away(s).clamp(-127.0, 127.0) as i8
}

pub fn dequantize(q: i8, e: i8) -> f32 {
    q as f32 * (e as f32).exp2()
}
