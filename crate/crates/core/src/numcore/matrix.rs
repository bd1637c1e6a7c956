use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Dense row-major matrix of `f64` with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Input(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite(format!("matrix constructor (index {pos})")));
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for kernels whose output length is correct by construction.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Input("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self::from_parts(rows, cols, data)
    }

    /// Marks the matrix as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(LabError::Shape {
                op: "accumulate_grad",
                lhs: self.shape(),
                rhs: (delta.len(), 1),
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LabError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_parts(m, n, out))
    }

    /// Elementwise `alpha * self + beta * other`.
    pub fn affine_mix(&self, other: &Matrix, alpha: f64, beta: f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LabError::Shape {
                op: "affine_mix",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// SHA-256 over shape and the raw bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.feed_hasher(&mut hasher);
        hex_digest(hasher)
    }

    pub(crate) fn feed_hasher(&self, hasher: &mut Sha256) {
        hasher.update((self.rows as u64).to_le_bytes());
        hasher.update((self.cols as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::randn(3, 2, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap().data(), m.data());
        let z = Matrix::zeros(2, 4).matmul(&Matrix::randn(4, 3, 1.0, &mut rng)).unwrap();
        assert_eq!(z.shape(), (2, 3));
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_small_case_matches_triple_loop() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let expected = brute_matmul(&a, &b);
        assert_eq!(expected.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), expected.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            LabError::Shape {
                lhs: (2, 3),
                rhs: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn affine_mix_cases() {
        let x = Matrix::from_rows(&[&[4.0, 0.0]]).unwrap();
        let y = Matrix::from_rows(&[&[0.0, 8.0]]).unwrap();
        assert_eq!(x.affine_mix(&y, 1.0, 0.0).unwrap().data(), x.data());
        assert_eq!(x.affine_mix(&y, 0.0, 1.0).unwrap().data(), y.data());
        assert_eq!(x.affine_mix(&y, 0.75, 0.25).unwrap().data(), &[3.0, 2.0]);
        assert!(x.affine_mix(&Matrix::zeros(2, 1), 1.0, 1.0).is_err());
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LabError::NonFinite(_))
        ));
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut m = Matrix::zeros(1, 2).with_grad();
        m.accumulate_grad(&[1.0, 2.0]).unwrap();
        m.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(m.grad().unwrap(), &[1.5, 2.5]);
        m.zero_grad();
        assert_eq!(m.grad().unwrap(), &[0.0, 0.0]);
    }
}
