//! N:M structured sparsity over int8 matrices.
//!
//! A matrix is cut into 16x16 blocks. Inside a block every row is split
//! into groups of `m` consecutive input channels, and exactly `n` entries
//! survive per group, where `n` may differ from block to block.

use crate::error::{Error, Result};

pub const BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmSparseTensor {
    pub rows: usize,
    pub cols: usize,
    pub m: usize,
    /// Kept entries per group, one value per 16x16 block (row-major grid).
    pub per_block_n: Vec<u8>,
    /// Kept values in (row, group, position) order.
    pub values: Vec<i8>,
    /// Position of each kept value inside its group, strictly increasing
    /// within a group.
    pub indices: Vec<u8>,
}

pub fn check_nm(n: usize, m: usize) -> Result<()> {
    if m == 0 || !m.is_power_of_two() || m > BLOCK {
        return Err(Error::Config(format!("M = {m} must be a power of two no larger than {BLOCK}")));
    }
    if n != 0 && (n > m || m % n != 0) {
        return Err(Error::Config(format!("N = {n} must be 0 or divide M = {m}")));
    }
    Ok(())
}

impl NmSparseTensor {
    pub fn block_cols(&self) -> usize {
        self.cols / BLOCK
    }

    pub fn block_n(&self, row: usize, col: usize) -> usize {
        self.per_block_n[(row / BLOCK) * self.block_cols() + col / BLOCK] as usize
    }

    /// Expands back to a dense row-major matrix with zeros at dropped positions.
    pub fn densify(&self) -> Vec<i8> {
        let mut out = vec![0i8; self.rows * self.cols];
        let mut cursor = 0;
        for r in 0..self.rows {
            for g0 in (0..self.cols).step_by(self.m) {
                let n = self.block_n(r, g0);
                for _ in 0..n {
                    let c = g0 + self.indices[cursor] as usize;
                    out[r * self.cols + c] = self.values[cursor];
                    cursor += 1;
                }
            }
        }
        out
    }

    /// Offsets into `values`/`indices` where each row starts.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.rows + 1);
        let mut acc = 0;
        for r in 0..self.rows {
            offs.push(acc);
            for bc in 0..self.block_cols() {
                acc += self.block_n(r, bc * BLOCK) * (BLOCK / self.m);
            }
        }
        offs.push(acc);
        offs
    }

    pub fn validate(&self) -> Result<()> {
        check_nm(0, self.m)?;
        let expect = self.row_offsets()[self.rows];
        if self.values.len() != expect || self.indices.len() != expect {
            return Err(Error::Format(format!(
                "N:M payload holds {} values / {} indices, layout needs {expect}",
                self.values.len(),
                self.indices.len()
            )));
        }
        let mut cursor = 0;
        for r in 0..self.rows {
            for g0 in (0..self.cols).step_by(self.m) {
                let n = self.block_n(r, g0);
                check_nm(n, self.m)?;
                let idx = &self.indices[cursor..cursor + n];
                if idx.iter().any(|&i| i as usize >= self.m) || idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Format(format!("bad index run {idx:?} at row {r}, col {g0}")));
                }
                cursor += n;
            }
        }
        Ok(())
    }
}

fn check_shape(rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows % BLOCK != 0 || cols % BLOCK != 0 {
        return Err(Error::Config(format!("matrix {rows}x{cols} is not a multiple of {BLOCK}x{BLOCK}")));
    }
    if len != rows * cols {
        return Err(Error::Data(format!("expected {} elements, got {len}", rows * cols)));
    }
    Ok(())
}

/// Uniform N:M pruning keeping the `n` largest magnitudes per group.
pub fn prune_nm(dense: &[i8], rows: usize, cols: usize, n: usize, m: usize) -> Result<NmSparseTensor> {
    check_nm(n, m)?;
    check_shape(rows, cols, dense.len())?;
    let blocks = (rows / BLOCK) * (cols / BLOCK);
    prune_nm_blocks(dense, rows, cols, &vec![n as u8; blocks], m)
}

/// N:M pruning with an individual `n` for every 16x16 block. Ties in
/// magnitude keep the lower index.
pub fn prune_nm_blocks(dense: &[i8], rows: usize, cols: usize, per_block_n: &[u8], m: usize) -> Result<NmSparseTensor> {
    check_nm(0, m)?;
    check_shape(rows, cols, dense.len())?;
    let bcols = cols / BLOCK;
    if per_block_n.len() != (rows / BLOCK) * bcols {
        return Err(Error::Config(format!(
            "block plan has {} entries, matrix has {} blocks",
            per_block_n.len(),
            (rows / BLOCK) * bcols
        )));
    }
    for &n in per_block_n {
        check_nm(n as usize, m)?;
    }
    let mut values = Vec::new();
    let mut indices = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for r in 0..rows {
        for g0 in (0..cols).step_by(m) {
            let n = per_block_n[(r / BLOCK) * bcols + g0 / BLOCK] as usize;
            let group = &dense[r * cols + g0..r * cols + g0 + m];
            order.clear();
            order.extend(0..m);
            // stable sort keeps the lower index first among equal magnitudes
            order.sort_by_key(|&i| std::cmp::Reverse(group[i].unsigned_abs()));
            let mut kept: Vec<usize> = order[..n].to_vec();
            kept.sort_unstable();
            for i in kept {
                values.push(group[i]);
                indices.push(i as u8);
            }
        }
    }
    Ok(NmSparseTensor { rows, cols, m, per_block_n: per_block_n.to_vec(), values, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_first_group(group: &[i8]) -> Vec<i8> {
        let mut d = vec![0i8; 16 * 16];
        d[..group.len()].copy_from_slice(group);
        d
    }

    /// Entry i survives iff fewer than n entries outrank it, where j outranks
    /// i on larger magnitude or equal magnitude at a lower index.
    fn oracle_keep(group: &[i8], n: usize) -> Vec<usize> {
        let mag = |k: usize| group[k].unsigned_abs() as i32;
        (0..group.len())
            .filter(|&i| {
                let beaten = (0..group.len()).filter(|&j| mag(j) > mag(i) || (mag(j) == mag(i) && j < i)).count();
                beaten < n
            })
            .collect()
    }

    #[test]
    fn two_of_four_keeps_largest_magnitudes() {
        let d = with_first_group(&[1, -5, 2, 0]);
        let t = prune_nm(&d, 16, 16, 2, 4).unwrap();
        assert_eq!(oracle_keep(&[1, -5, 2, 0], 2), vec![1, 2]);
        assert_eq!(&t.values[..2], &[-5, 2]);
        assert_eq!(&t.indices[..2], &[1, 2]);
    }

    #[test]
    fn dense_case_is_identity() {
        let d: Vec<i8> = (0..256).map(|i| (i * 37 % 255) as i8).collect();
        let t = prune_nm(&d, 16, 16, 16, 16).unwrap();
        assert_eq!(t.densify(), d);
    }

    #[test]
    fn n_zero_drops_everything() {
        let d: Vec<i8> = (0..256).map(|i| (i % 7) as i8 - 3).collect();
        let t = prune_nm(&d, 16, 16, 0, 16).unwrap();
        assert!(t.values.is_empty());
        assert!(t.densify().iter().all(|&v| v == 0));
    }

    #[test]
    fn bad_nm_pairs_rejected() {
        let d = vec![0i8; 256];
        assert!(matches!(prune_nm(&d, 16, 16, 3, 16), Err(Error::Config(_))));
        assert!(matches!(prune_nm(&d, 16, 16, 2, 12), Err(Error::Config(_))));
        assert!(matches!(prune_nm(&d[..255], 15, 17, 2, 4), Err(Error::Config(_))));
    }

    fn nm_pair() -> impl Strategy<Value = (usize, usize)> {
        prop_oneof![Just(4usize), Just(8), Just(16)].prop_flat_map(|m| {
            let ns: Vec<usize> = (0..=m).filter(|n| *n == 0 || m % n == 0).collect();
            (proptest::sample::select(ns), Just(m))
        })
    }

    proptest! {
        #[test]
        fn matches_bruteforce_and_is_idempotent(
            data in proptest::collection::vec(any::<i8>(), 16 * 32),
            (n, m) in nm_pair(),
        ) {
            let t = prune_nm(&data, 16, 32, n, m).unwrap();
            t.validate().unwrap();
            let dense = t.densify();
            for r in 0..16 {
                for g0 in (0..32).step_by(m) {
                    let group = &data[r * 32 + g0..r * 32 + g0 + m];
                    let keep = oracle_keep(group, n);
                    for i in 0..m {
                        let expect = if keep.contains(&i) { group[i] } else { 0 };
                        prop_assert_eq!(dense[r * 32 + g0 + i], expect);
                    }
                }
            }
            // re-pruning a pruned matrix reproduces the encoding, except where
            // kept zeros tie with dropped zeros
            let again = prune_nm(&dense, 16, 32, n, m).unwrap();
            prop_assert_eq!(again.densify(), dense);
            if data.iter().all(|&v| v != 0) {
                prop_assert_eq!(again, t);
            }
        }
    }
}
