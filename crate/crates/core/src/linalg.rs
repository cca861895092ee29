//! Dense and sparsity-aware vector/matrix primitives with MAC accounting.
//!
//! Weights are stored input-major: row `i` of a [`DenseMatrix`] holds the
//! outgoing weights of input `i`, so a zero input entry lets a kernel skip one
//! contiguous row.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix with `rows` = input dimension, `cols` = output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from `scale * N(0, 1)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// A vector together with the ordered set of entries considered nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    dim: usize,
    values: Vec<f64>,
    active: Vec<usize>,
}

impl SparseVec {
    /// Builds a sparse vector from explicit parts. Inactive entries must be
    /// exactly zero and `active` must be strictly increasing.
    pub fn new(values: Vec<f64>, active: Vec<usize>) -> Result<Self> {
        let dim = values.len();
        let mut is_active = vec![false; dim];
        let mut prev: Option<usize> = None;
        for &i in &active {
            if i >= dim {
                return Err(Error::IndexOutOfRange { index: i, dim });
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::input("active indices must be strictly increasing"));
            }
            prev = Some(i);
            is_active[i] = true;
        }
        if values
            .iter()
            .zip(&is_active)
            .any(|(&v, &a)| !a && v != 0.0)
        {
            return Err(Error::input("inactive entries must be exactly zero"));
        }
        Ok(Self { dim, values, active })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn nnz(&self) -> usize {
        self.active.len()
    }

    pub fn densify(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// Per-site multiply-accumulate and row-load tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    macs: BTreeMap<String, u64>,
    row_loads: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_macs(&mut self, site: &str, n: u64) {
        *self.macs.entry(site.to_string()).or_default() += n;
    }

    pub fn add_row_loads(&mut self, site: &str, n: u64) {
        *self.row_loads.entry(site.to_string()).or_default() += n;
    }

    pub fn macs(&self, site: &str) -> u64 {
        self.macs.get(site).copied().unwrap_or(0)
    }

    pub fn row_loads(&self, site: &str) -> u64 {
        self.row_loads.get(site).copied().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn sites(&self) -> impl Iterator<Item = (&str, u64)> {
        self.macs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Additive merge; order-independent.
    pub fn merge(&mut self, other: &MacCounter) {
        for (k, v) in &other.macs {
            *self.macs.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.row_loads {
            *self.row_loads.entry(k.clone()).or_default() += v;
        }
    }
}

/// `y[j] = Σ_i x[i]·W[i,j]`, charging `rows × cols` MACs to `site`.
pub fn matvec_dense(w: &DenseMatrix, x: &[f64], macs: &mut MacCounter, site: &str) -> Result<Vec<f64>> {
    if x.len() != w.rows {
        return Err(Error::DimensionMismatch {
            expected: w.rows,
            found: x.len(),
        });
    }
    let mut y = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, w.row(i), &mut y);
    }
    macs.add_macs(site, (w.rows * w.cols) as u64);
    macs.add_row_loads(site, w.rows as u64);
    Ok(y)
}

/// Row-skipping product: only rows listed in `x.active()` are read.
pub fn matvec_sparse(w: &DenseMatrix, x: &SparseVec, macs: &mut MacCounter, site: &str) -> Result<Vec<f64>> {
    if x.dim != w.rows {
        return Err(Error::DimensionMismatch {
            expected: w.rows,
            found: x.dim,
        });
    }
    let mut y = vec![0.0; w.cols];
    for &i in &x.active {
        if i >= w.rows {
            return Err(Error::IndexOutOfRange { index: i, dim: w.rows });
        }
        axpy(x.values[i], w.row(i), &mut y);
    }
    macs.add_macs(site, (x.active.len() * w.cols) as u64);
    macs.add_row_loads(site, x.active.len() as u64);
    Ok(y)
}

/// Keeps entries with `|v[i]| > tau`; everything else becomes exactly zero.
pub fn sparsify(v: &[f64], tau: f64) -> SparseVec {
    let mut values = v.to_vec();
    let mut active = Vec::new();
    for (i, x) in values.iter_mut().enumerate() {
        if x.abs() > tau {
            active.push(i);
        } else {
            *x = 0.0;
        }
    }
    SparseVec {
        dim: v.len(),
        values,
        active,
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Batched `X · W` for `x` holding `n` rows of length `w.rows()`.
/// Zero inputs skip their weight row.
pub(crate) fn matmul(x: &[f64], w: &DenseMatrix) -> Vec<f64> {
    let n = x.len() / w.rows;
    let mut y = vec![0.0; n * w.cols];
    for (xr, yr) in x.chunks_exact(w.rows).zip(y.chunks_exact_mut(w.cols)) {
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, w.row(i), yr);
            }
        }
    }
    y
}

/// `dX = dY · Wᵀ`
pub(crate) fn matmul_grad_input(dy: &[f64], w: &DenseMatrix) -> Vec<f64> {
    let n = dy.len() / w.cols;
    let mut dx = vec![0.0; n * w.rows];
    for (dyr, dxr) in dy.chunks_exact(w.cols).zip(dx.chunks_exact_mut(w.rows)) {
        for (i, d) in dxr.iter_mut().enumerate() {
            *d = dot(dyr, w.row(i));
        }
    }
    dx
}

/// `dW += Xᵀ · dY`
pub(crate) fn matmul_grad_weight(x: &[f64], dy: &[f64], dw: &mut DenseMatrix) {
    let (rows, cols) = (dw.rows, dw.cols);
    for (xr, dyr) in x.chunks_exact(rows).zip(dy.chunks_exact(cols)) {
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, dyr, dw.row_mut(i));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; w.cols()];
        for j in 0..w.cols() {
            for i in 0..w.rows() {
                y[j] += x[i] * w.get(i, j);
            }
        }
        y
    }

    #[test]
    fn identity_and_scalar() {
        let mut c = MacCounter::new();
        let y = matvec_dense(&DenseMatrix::identity(2), &[3.0, -1.0], &mut c, "id").unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
        let w = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let y = matvec_dense(&w, &[5.0], &mut c, "s").unwrap();
        assert_eq!(y, vec![10.0]);
        assert_eq!(c.macs("s"), 1);
    }

    #[test]
    fn dense_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DenseMatrix::random_normal(8, 4, 1.0, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let y = matvec_dense(&w, &x, &mut MacCounter::new(), "w").unwrap();
        for (a, b) in y.iter().zip(naive(&w, &x)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let w = DenseMatrix::zeros(3, 2);
        let mut c = MacCounter::new();
        assert!(matches!(
            matvec_dense(&w, &[1.0], &mut c, "w"),
            Err(Error::DimensionMismatch { .. })
        ));
        let x = sparsify(&[1.0, 2.0], 0.0);
        assert!(matvec_sparse(&w, &x, &mut c, "w").is_err());
    }

    #[test]
    fn sparse_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DenseMatrix::random_normal(16, 8, 1.0, &mut rng);
        let mut c = MacCounter::new();
        let zero = sparsify(&[0.0; 16], 0.0);
        assert_eq!(matvec_sparse(&w, &zero, &mut c, "z").unwrap(), vec![0.0; 8]);
        assert_eq!(c.macs("z"), 0);

        let full: Vec<f64> = (0..16).map(|i| i as f64 + 1.0).collect();
        let sv = sparsify(&full, 0.0);
        let ys = matvec_sparse(&w, &sv, &mut c, "full").unwrap();
        let yd = matvec_dense(&w, &full, &mut c, "dense").unwrap();
        assert_eq!(ys, yd);
        assert_eq!(c.macs("full"), c.macs("dense"));

        let mut x = vec![0.0; 16];
        x[2] = 0.5;
        x[7] = -1.5;
        x[11] = 2.0;
        let sv = sparsify(&x, 0.0);
        let ys = matvec_sparse(&w, &sv, &mut c, "three").unwrap();
        assert_eq!(ys, naive(&w, &x));
        assert_eq!(c.macs("three"), 24);
        assert_eq!(c.row_loads("three"), 3);
    }

    #[test]
    fn sparse_vec_validation() {
        assert!(matches!(
            SparseVec::new(vec![0.0, 1.0], vec![1, 2]),
            Err(Error::IndexOutOfRange { index: 2, dim: 2 })
        ));
        assert!(SparseVec::new(vec![1.0, 1.0], vec![1]).is_err());
        assert!(SparseVec::new(vec![1.0, 1.0], vec![1, 0]).is_err());
        assert!(SparseVec::new(vec![0.0, 1.0], vec![1]).is_ok());
    }

    #[test]
    fn sparsify_examples() {
        assert_eq!(sparsify(&[0.0, 1.0, 0.0, -2.0], 0.0).active(), &[1, 3]);
        let s = sparsify(&[1e-9, 0.5], 1e-6);
        assert_eq!(s.active(), &[1]);
        assert_eq!(s.values()[0], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let relu: Vec<f64> = (0..1024)
            .map(|_| rng.sample::<f64, _>(StandardNormal).max(0.0))
            .collect();
        let frac = sparsify(&relu, 0.0).nnz() as f64 / 1024.0;
        assert!((0.44..=0.56).contains(&frac), "{frac}");
    }

    #[test]
    fn softmax_and_hadamard() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let v = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        let (a, b) = (softmax(&v), softmax(&shifted));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(hadamard(&[2.0, 0.0, 3.0], &[1.0, 5.0, 0.0]).unwrap(), vec![2.0, 0.0, 0.0]);
        assert!(hadamard(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn batched_helpers_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DenseMatrix::random_normal(5, 3, 1.0, &mut rng);
        let x: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let y = matmul(&x, &w);
        for t in 0..2 {
            assert_eq!(&y[t * 3..t * 3 + 3], naive(&w, &x[t * 5..t * 5 + 5]).as_slice());
        }
        let dy: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let dx = matmul_grad_input(&dy, &w);
        let mut dw = DenseMatrix::zeros(5, 3);
        matmul_grad_weight(&x, &dy, &mut dw);
        for t in 0..2 {
            for i in 0..5 {
                let e: f64 = (0..3).map(|j| dy[t * 3 + j] * w.get(i, j)).sum();
                assert!((dx[t * 5 + i] - e).abs() < 1e-12);
            }
        }
        for i in 0..5 {
            for j in 0..3 {
                let e: f64 = (0..2).map(|t| x[t * 5 + i] * dy[t * 3 + j]).sum();
                assert!((dw.get(i, j) - e).abs() < 1e-12);
            }
        }
    }
}
