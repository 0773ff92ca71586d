//! Dense row-major kernels and keyed random streams.
//!
//! Everything here is deterministic: matrix products accumulate each output
//! cell left to right over the shared dimension, and random draws come from
//! ChaCha streams keyed by `(seed, domain, lane)` with the stream counter as
//! the word position, so the draw sequence for a given key never depends on
//! which worker asks for it or when.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norm floor used by [`l2_normalize_columns`] throughout the crate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Builds a `dim x n` matrix whose columns are the given vectors.
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if let Some(bad) = columns.iter().find(|c| c.len() != dim) {
            return Err(Error::Shape {
                op: "Matrix::from_columns",
                left: (dim, columns.len()),
                right: (bad.len(), 1),
            });
        }
        Ok(Self::from_fn(dim, columns.len(), |r, c| columns[c][r]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = *v;
        }
    }

    /// Copies the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::Shape {
                op: "hstack",
                left: (rows, 0),
                right: bad.shape(),
            });
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for b in blocks {
                out.data[r * cols + offset..r * cols + offset + b.cols].copy_from_slice(b.row(r));
                offset += b.cols;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| self[(r, c)] * self[(r, c)])
            .sum::<f64>()
            .sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Standard product `a * b`. Each output cell sums over the shared index in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ * b` without the caller materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(&a.transpose(), b)
}

/// Scales every column to unit Euclidean norm. Columns with norm below `eps`
/// are divided by `eps` instead, so an all-zero column stays zero.
pub fn l2_normalize_columns(m: &Matrix, eps: f64) -> Matrix {
    debug_assert!(eps > 0.0);
    let norms = column_norms(m);
    let mut out = m.clone();
    for r in 0..m.rows {
        for (c, n) in norms.iter().enumerate() {
            out[(r, c)] /= n.max(eps);
        }
    }
    out
}

pub fn column_norms(m: &Matrix) -> Vec<f64> {
    let mut sq = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in sq.iter_mut().zip(m.row(r)) {
            *acc += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// `log Σ exp(v)` with max subtraction.
pub fn stable_logsumexp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |m| m.max(x))))
        .ok_or_else(|| Error::contract("logsumexp of an empty vector"))?;
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// A ChaCha8 stream identified by a 64-bit seed and a 64-bit stream id.
///
/// The stream id is the ChaCha nonce; the key is derived from the seed plus
/// an optional `(domain, lane)` pair so independent consumers (shards,
/// shuffles, data generators) never share a stream.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::keyed(seed, 0, 0, stream_id)
    }

    /// Stream for `(seed, domain, lane)` at position `stream_id`.
    pub fn keyed(seed: u64, domain: u64, lane: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        key[16..24].copy_from_slice(&lane.to_le_bytes());
        key[24..32].copy_from_slice(b"pfc-sim\0");
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// The per-(shard, iteration) negative-sampling stream.
    pub fn for_shard(seed: u64, shard: usize, iteration: u64) -> Self {
        Self::keyed(seed, domain::SAMPLER, shard as u64, iteration)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

/// Key domains for [`SeededRng::keyed`].
pub mod domain {
    pub const SAMPLER: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SYNTH: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CORRUPT: u64 = 5;
    pub const SPLIT: u64 = 6;
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws `k` distinct indices uniformly from `population` minus `exclude`.
///
/// The result order is the draw order.
pub fn sample_without_replacement(
    rng: &mut SeededRng,
    population: Range<usize>,
    exclude: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = if exclude.is_empty() {
        population.collect()
    } else {
        let excluded: HashSet<usize> = exclude.iter().copied().collect();
        population.filter(|i| !excluded.contains(i)).collect()
    };
    if k > candidates.len() {
        return Err(Error::Capacity {
            requested: k,
            available: candidates.len(),
        });
    }
    Ok(rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}
