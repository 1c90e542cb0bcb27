//! Streaming first and second moments of diff vectors.
//!
//! Records are f32; every sum is carried in f64 so that `scatter/N − μμᵀ`
//! does not cancel catastrophically. Only the upper triangle of the scatter
//! buffer is maintained; [`MomentAccumulator::scatter`] mirrors it.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataio::EmbeddingDiffDataset;
use crate::error::{DrmError, Result};

/// Chunks at least this tall go through a dense `ZᵀZ` product instead of
/// per-record rank-1 updates.
const GEMM_MIN_ROWS: usize = 32;

/// Records per shard in [`accumulate_parallel`]. Fixed so that the merge
/// tree, and therefore the rounding, does not depend on the thread count.
const SHARD_RECORDS: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    d: usize,
    count: u64,
    sum: Vec<f64>,
    scatter: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            count: 0,
            sum: vec![0.0; d],
            scatter: vec![0.0; d * d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// Σ z_i z_iᵀ as a full symmetric matrix.
    pub fn scatter(&self) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_fn(d, d, |i, j| {
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            self.scatter[r * d + c]
        })
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d {
            return Err(DrmError::Validation(format!(
                "record of length {} in a stream of dimension {}",
                len, self.d
            )));
        }
        Ok(())
    }

    pub fn push(&mut self, z: &[f32]) -> Result<()> {
        self.check_dim(z.len())?;
        let d = self.d;
        let z: Vec<f64> = z.iter().map(|&x| x as f64).collect();
        for (s, x) in self.sum.iter_mut().zip(&z) {
            *s += x;
        }
        for i in 0..d {
            let zi = z[i];
            let row = &mut self.scatter[i * d + i..(i + 1) * d];
            for (s, zj) in row.iter_mut().zip(&z[i..]) {
                *s += zi * zj;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Adds a row-major block of `rows.len() / d` records.
    pub fn add_chunk(&mut self, rows: &[f32]) -> Result<()> {
        let d = self.d;
        if !rows.len().is_multiple_of(d) {
            return Err(DrmError::Validation(format!(
                "chunk of {} values is not a multiple of d = {}",
                rows.len(),
                d
            )));
        }
        let m = rows.len() / d;
        if m < GEMM_MIN_ROWS {
            return rows.chunks_exact(d).try_for_each(|z| self.push(z));
        }
        let z = DMatrix::from_row_iterator(m, d, rows.iter().map(|&x| x as f64));
        // the explicit transpose routes through the blocked gemm kernel
        let gram = z.transpose() * &z;
        for (j, col) in z.column_iter().enumerate() {
            self.sum[j] += col.sum();
        }
        for i in 0..d {
            for j in i..d {
                self.scatter[i * d + j] += gram[(i, j)];
            }
        }
        self.count += m as u64;
        Ok(())
    }

    /// Adds another accumulator's statistics into this one.
    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        self.check_dim(other.d)?;
        self.count += other.count;
        self.sum
            .iter_mut()
            .zip(&other.sum)
            .for_each(|(a, b)| *a += b);
        self.scatter
            .iter_mut()
            .zip(&other.scatter)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Consumes a record stream `chunk_size` records at a time.
pub fn accumulate<I, R>(d: usize, records: I, chunk_size: usize) -> Result<MomentAccumulator>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f32]>,
{
    if chunk_size == 0 {
        return Err(DrmError::Validation("chunk_size must be at least 1".into()));
    }
    let mut acc = MomentAccumulator::new(d);
    let mut buf: Vec<f32> = Vec::with_capacity(chunk_size * d);
    let mut rows = 0;
    for rec in records {
        let z = rec.as_ref();
        acc.check_dim(z.len())?;
        buf.extend_from_slice(z);
        rows += 1;
        if rows == chunk_size {
            acc.add_chunk(&buf)?;
            buf.clear();
            rows = 0;
        }
    }
    if rows > 0 {
        acc.add_chunk(&buf)?;
    }
    Ok(acc)
}

/// Shards the dataset, accumulates shards on the rayon pool and merges them
/// in shard order. Output is independent of the number of threads.
pub fn accumulate_parallel(
    dataset: &EmbeddingDiffDataset,
    chunk_size: usize,
) -> Result<MomentAccumulator> {
    if chunk_size == 0 {
        return Err(DrmError::Validation("chunk_size must be at least 1".into()));
    }
    let d = dataset.d();
    let shard = SHARD_RECORDS.div_ceil(chunk_size) * chunk_size;
    let parts: Vec<MomentAccumulator> = dataset
        .as_flat()
        .par_chunks(shard * d)
        .map(|block| accumulate(d, block.chunks_exact(d), chunk_size))
        .collect::<Result<_>>()?;
    let mut total = MomentAccumulator::new(d);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}
