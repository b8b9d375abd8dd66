//! The matrix-multiplication coefficient tensor.
//!
//! For a base case `<M,K,N>` (an `MxK` by `KxN` block product) the tensor `T`
//! has shape `MK x KN x MN` and satisfies
//! `vec(C) = T x_1 vec(A) x_2 vec(B)` for every conformable `A`, `B`, with
//! row-major vectorization throughout. Entries are 0/1 and there are exactly
//! `M*K*N` ones, so entries are computed on demand; dense materialization is
//! reserved for small cases.

use thiserror::Error;

use crate::matrix::ShapeError;

/// Dense materialization is refused above this many entries.
pub const DENSE_ENTRY_LIMIT: usize = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("index ({i}, {j}, {k}) out of range for tensor of shape {shape:?}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        shape: (usize, usize, usize),
    },
    #[error("dense tensor of shape {shape:?} has {entries} entries, over the {limit} limit")]
    TooLargeForDense {
        shape: (usize, usize, usize),
        entries: usize,
        limit: usize,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Coefficient tensor of the `<M,K,N>` matrix multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatMulTensor {
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulTensor {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        assert!(m >= 1 && k >= 1 && n >= 1, "base-case dims must be positive");
        MatMulTensor { m, k, n }
    }

    pub fn base_dims(&self) -> (usize, usize, usize) {
        (self.m, self.k, self.n)
    }

    /// Logical shape `(MK, KN, MN)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.m * self.k, self.k * self.n, self.m * self.n)
    }

    /// Number of nonzero entries, always `M*K*N`.
    pub fn nnz(&self) -> usize {
        self.m * self.k * self.n
    }

    /// Entry `T[i,j,k]` with 0-based indices.
    ///
    /// Index `i` addresses `vec(A)` (an `MxK` matrix), `j` addresses `vec(B)`
    /// (`KxN`), and `k` addresses `vec(C)` (`MxN`). The entry is 1 exactly
    /// when the `A` element's column matches the `B` element's row, and both
    /// map onto the `C` element's position.
    pub fn entry(&self, i: usize, j: usize, k: usize) -> Result<u8, TensorError> {
        let shape = self.shape();
        if i >= shape.0 || j >= shape.1 || k >= shape.2 {
            return Err(TensorError::IndexOutOfRange { i, j, k, shape });
        }
        Ok(self.entry_unchecked(i, j, k))
    }

    #[inline]
    pub(crate) fn entry_unchecked(&self, i: usize, j: usize, k: usize) -> u8 {
        let inner_match = i % self.k == j / self.n;
        let col_match = j % self.n == k % self.n;
        let row_match = i / self.k == k / self.n;
        u8::from(inner_match && col_match && row_match)
    }

    /// All `(i, j, k)` positions of 1-entries, enumerated as
    /// `(A row, A col = B row, B col)` triples.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (m, k, n) = (self.m, self.k, self.n);
        (0..m).flat_map(move |ar| {
            (0..k).flat_map(move |ac| {
                (0..n).map(move |bc| (ar * k + ac, ac * n + bc, ar * n + bc))
            })
        })
    }

    /// `c_k = sum_ij T[i,j,k] a_i b_j`. For `a = vec(A)`, `b = vec(B)` the
    /// result is `vec(A*B)`.
    pub fn contract(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>, TensorError> {
        let (ni, nj, nk) = self.shape();
        if a.len() != ni {
            return Err(ShapeError::new("contract: mode-1 length", a.len(), ni).into());
        }
        if b.len() != nj {
            return Err(ShapeError::new("contract: mode-2 length", b.len(), nj).into());
        }
        let mut c = vec![0.0; nk];
        for (i, j, k) in self.nonzeros() {
            c[k] += a[i] * b[j];
        }
        Ok(c)
    }

    /// Frontal slices as dense `MK x KN` matrices, `T_k = T[:,:,k]`.
    pub fn dense_slices(&self) -> Result<Vec<Vec<f64>>, TensorError> {
        let (ni, nj, nk) = self.shape();
        let entries = ni * nj * nk;
        if entries > DENSE_ENTRY_LIMIT {
            return Err(TensorError::TooLargeForDense {
                shape: (ni, nj, nk),
                entries,
                limit: DENSE_ENTRY_LIMIT,
            });
        }
        let mut slices = vec![vec![0.0; ni * nj]; nk];
        for (i, j, k) in self.nonzeros() {
            slices[k][i * nj + j] = 1.0;
        }
        Ok(slices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn printed_2x2x2_frontal_slices() {
        let t = MatMulTensor::new(2, 2, 2);
        let slices = t.dense_slices().unwrap();
        // C11 = A11*B11 + A12*B21; C12 = A11*B12 + A22... spelled as the four
        // frontal slices of the 4x4x4 tensor.
        let expected: [[f64; 16]; 4] = [
            [
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
            [
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
            [
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
            [
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        ];
        for (k, want) in expected.iter().enumerate() {
            assert_eq!(slices[k].as_slice(), want.as_slice(), "slice {k}");
        }
    }

    #[test]
    fn a21_b11_contributes_to_c21() {
        let t = MatMulTensor::new(2, 2, 2);
        assert_eq!(t.entry(2, 0, 2).unwrap(), 1);
        assert_eq!(t.entry(2, 1, 2).unwrap(), 0);
    }

    #[test]
    fn out_of_range_entry_is_an_error() {
        let t = MatMulTensor::new(2, 2, 2);
        assert!(matches!(
            t.entry(4, 0, 0),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nnz_equals_mkn_by_enumeration() {
        for m in 1..=3 {
            for k in 1..=3 {
                for n in 1..=3 {
                    let t = MatMulTensor::new(m, k, n);
                    let (ni, nj, nk) = t.shape();
                    let mut count = 0;
                    for i in 0..ni {
                        for j in 0..nj {
                            for l in 0..nk {
                                count += t.entry(i, j, l).unwrap() as usize;
                            }
                        }
                    }
                    assert_eq!(count, m * k * n);
                    assert_eq!(t.nonzeros().count(), m * k * n);
                }
            }
        }
    }

    #[test]
    fn contract_identity() {
        let t = MatMulTensor::new(2, 2, 2);
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(t.contract(&eye, &eye).unwrap(), eye.to_vec());
    }

    #[test]
    fn contract_matches_direct_multiply() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (m, k, n) in [(2, 2, 2), (2, 3, 4), (4, 4, 4), (1, 3, 2)] {
            let t = MatMulTensor::new(m, k, n);
            for _ in 0..100 {
                let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = t.contract(&a, &b).unwrap();
                let want = naive_matmul(&a, &b, m, k, n);
                for (x, y) in c.iter().zip(&want) {
                    let denom = y.abs().max(1.0);
                    assert!((x - y).abs() / denom <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn contract_shape_mismatch() {
        let t = MatMulTensor::new(2, 2, 2);
        assert!(t.contract(&[1.0; 3], &[1.0; 4]).is_err());
    }

    #[test]
    fn dense_refused_above_limit() {
        // 54^3 base case: 2916 * 2916 * 2916 entries.
        let t = MatMulTensor::new(54, 54, 54);
        assert!(matches!(
            t.dense_slices(),
            Err(TensorError::TooLargeForDense { .. })
        ));
        // Entry queries still work lazily.
        assert_eq!(t.entry(0, 0, 0).unwrap(), 1);
    }
}
