//! Dense row-major matrix storage and lightweight submatrix views.
//!
//! Recursive block algorithms work almost entirely on views: a view borrows a
//! rectangular window of a parent buffer through an explicit leading
//! dimension, so forming `A_11` or the trailing peel strip of `C` never
//! copies. Mutable views can be split into disjoint pieces (rows, columns, or
//! a full block grid), which is how assembly phases and parallel workers get
//! non-overlapping write access to one output matrix.

use std::fmt;
use std::marker::PhantomData;

use thiserror::Error;

/// Shape mismatch reported by operations that combine matrices.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch: {context}: {left} vs {right}")]
pub struct ShapeError {
    pub context: &'static str,
    pub left: String,
    pub right: String,
}

impl ShapeError {
    pub fn new(context: &'static str, left: impl fmt::Display, right: impl fmt::Display) -> Self {
        ShapeError {
            context,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}

/// Owned row-major matrix of `f64` with leading dimension equal to `cols`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Takes ownership of a row-major buffer. `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length mismatch");
        DenseMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index out of range");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index out of range");
        self.data[i * self.cols + j] = v;
    }

    /// Row-major vectorization: `vec(A)[i*cols + j] = A[i,j]`.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> MatView<'_> {
        MatView {
            ptr: self.data.as_ptr(),
            rows: self.rows,
            cols: self.cols,
            ld: self.cols,
            _marker: PhantomData,
        }
    }

    pub fn view_mut(&mut self) -> MatViewMut<'_> {
        MatViewMut {
            ptr: self.data.as_mut_ptr(),
            rows: self.rows,
            cols: self.cols,
            ld: self.cols,
            _marker: PhantomData,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `||self - other||_F / ||other||_F`, with an absolute fallback when
    /// `other` is zero.
    pub fn rel_frobenius_error(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            diff += (a - b) * (a - b);
            norm += b * b;
        }
        if norm == 0.0 {
            diff.sqrt()
        } else {
            (diff / norm).sqrt()
        }
    }
}

/// Immutable window into a row-major buffer.
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    ptr: *const f64,
    rows: usize,
    cols: usize,
    ld: usize,
    _marker: PhantomData<&'a f64>,
}

// A view only permits reads of the borrowed region.
unsafe impl Send for MatView<'_> {}
unsafe impl Sync for MatView<'_> {}

impl<'a> MatView<'a> {
    /// Wraps a slice as an `rows x cols` view with leading dimension `cols`.
    pub fn from_slice(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatView {
            ptr: data.as_ptr(),
            rows,
            cols,
            ld: cols,
            _marker: PhantomData,
        }
    }

    /// Builds a view over raw memory. Caller guarantees the region stays
    /// valid and unaliased by writers for the view's lifetime.
    pub(crate) unsafe fn from_raw_parts(ptr: *const f64, rows: usize, cols: usize, ld: usize) -> Self {
        MatView {
            ptr,
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    pub fn as_ptr(&self) -> *const f64 {
        self.ptr
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        unsafe { *self.ptr.add(i * self.ld + j) }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        debug_assert!(i < self.rows);
        unsafe { std::slice::from_raw_parts(self.ptr.add(i * self.ld), self.cols) }
    }

    /// Sub-window starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> MatView<'a> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        MatView {
            ptr: unsafe { self.ptr.add(r0 * self.ld + c0) },
            rows,
            cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    /// The `grid_rows x grid_cols` blocks of this view, row-major order.
    /// Dimensions must divide evenly.
    pub fn split_grid(&self, grid_rows: usize, grid_cols: usize) -> Vec<MatView<'a>> {
        assert_eq!(self.rows % grid_rows, 0);
        assert_eq!(self.cols % grid_cols, 0);
        let br = self.rows / grid_rows;
        let bc = self.cols / grid_cols;
        let mut out = Vec::with_capacity(grid_rows * grid_cols);
        for i in 0..grid_rows {
            for j in 0..grid_cols {
                out.push(self.block(i * br, j * bc, br, bc));
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self.at(i, j))
    }
}

/// Mutable window into a row-major buffer. Disjoint views may coexist and be
/// sent to different workers; all splitting constructors guarantee
/// disjointness.
pub struct MatViewMut<'a> {
    ptr: *mut f64,
    rows: usize,
    cols: usize,
    ld: usize,
    _marker: PhantomData<&'a mut f64>,
}

// Distinct MatViewMut values never alias; the split constructors enforce it.
unsafe impl Send for MatViewMut<'_> {}

impl<'a> MatViewMut<'a> {
    pub fn from_slice(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatViewMut {
            ptr: data.as_mut_ptr(),
            rows,
            cols,
            ld: cols,
            _marker: PhantomData,
        }
    }

    /// Builds a mutable view over raw memory. Caller guarantees validity and
    /// exclusive write access for the view's lifetime.
    pub(crate) unsafe fn from_raw_parts(ptr: *mut f64, rows: usize, cols: usize, ld: usize) -> Self {
        MatViewMut {
            ptr,
            rows,
            cols,
            ld,
            _marker: PhantomData,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    pub fn as_mut_ptr(&mut self) -> *mut f64 {
        self.ptr
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        unsafe { *self.ptr.add(i * self.ld + j) }
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        unsafe { &mut *self.ptr.add(i * self.ld + j) }
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        unsafe { std::slice::from_raw_parts_mut(self.ptr.add(i * self.ld), self.cols) }
    }

    pub fn fill(&mut self, v: f64) {
        for i in 0..self.rows {
            self.row_mut(i).fill(v);
        }
    }

    /// Reborrows with a shorter lifetime so a view can be split repeatedly.
    pub fn reborrow(&mut self) -> MatViewMut<'_> {
        MatViewMut {
            ptr: self.ptr,
            rows: self.rows,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    pub fn as_const(&self) -> MatView<'_> {
        MatView {
            ptr: self.ptr,
            rows: self.rows,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    /// Consumes the view and returns the disjoint `(top, bottom)` halves split
    /// before row `r`.
    pub fn split_at_row(self, r: usize) -> (MatViewMut<'a>, MatViewMut<'a>) {
        assert!(r <= self.rows);
        let top = MatViewMut {
            ptr: self.ptr,
            rows: r,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        };
        let bottom = MatViewMut {
            ptr: unsafe { self.ptr.add(r * self.ld) },
            rows: self.rows - r,
            cols: self.cols,
            ld: self.ld,
            _marker: PhantomData,
        };
        (top, bottom)
    }

    /// Consumes the view and returns the disjoint `(left, right)` halves split
    /// before column `c`.
    pub fn split_at_col(self, c: usize) -> (MatViewMut<'a>, MatViewMut<'a>) {
        assert!(c <= self.cols);
        let left = MatViewMut {
            ptr: self.ptr,
            rows: self.rows,
            cols: c,
            ld: self.ld,
            _marker: PhantomData,
        };
        let right = MatViewMut {
            ptr: unsafe { self.ptr.add(c) },
            rows: self.rows,
            cols: self.cols - c,
            ld: self.ld,
            _marker: PhantomData,
        };
        (left, right)
    }

    /// Consumes the view and returns the sub-window at `(r0, c0)`; the rest of
    /// the parent becomes inaccessible through this borrow.
    pub fn into_block(self, r0: usize, c0: usize, rows: usize, cols: usize) -> MatViewMut<'a> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        MatViewMut {
            ptr: unsafe { self.ptr.add(r0 * self.ld + c0) },
            rows,
            cols,
            ld: self.ld,
            _marker: PhantomData,
        }
    }

    /// Splits into a `grid_rows x grid_cols` grid of disjoint mutable blocks,
    /// row-major order. Dimensions must divide evenly.
    pub fn split_grid(self, grid_rows: usize, grid_cols: usize) -> Vec<MatViewMut<'a>> {
        assert_eq!(self.rows % grid_rows, 0);
        assert_eq!(self.cols % grid_cols, 0);
        let br = self.rows / grid_rows;
        let bc = self.cols / grid_cols;
        let mut out = Vec::with_capacity(grid_rows * grid_cols);
        for i in 0..grid_rows {
            for j in 0..grid_cols {
                out.push(MatViewMut {
                    ptr: unsafe { self.ptr.add(i * br * self.ld + j * bc) },
                    rows: br,
                    cols: bc,
                    ld: self.ld,
                    _marker: PhantomData,
                });
            }
        }
        out
    }

    /// Splits into `n` disjoint row bands of near-equal height (for static
    /// range splitting across workers). Bands may be empty when
    /// `n > rows`.
    pub fn split_rows_evenly(self, n: usize) -> Vec<MatViewMut<'a>> {
        assert!(n >= 1);
        let base = self.rows / n;
        let extra = self.rows % n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for band in 0..n {
            let h = base + usize::from(band < extra);
            out.push(MatViewMut {
                ptr: unsafe { self.ptr.add(start * self.ld) },
                rows: h,
                cols: self.cols,
                ld: self.ld,
                _marker: PhantomData,
            });
            start += h;
        }
        out
    }
}

/// Evenly divides `0..total` into `n` contiguous ranges (first `total % n`
/// ranges get one extra element).
pub fn even_ranges(total: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    assert!(n >= 1);
    let base = total / n;
    let extra = total % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_views_alias_parent() {
        let m = DenseMatrix::from_fn(4, 6, |i, j| (i * 10 + j) as f64);
        let v = m.view().block(1, 2, 2, 3);
        assert_eq!(v.at(0, 0), 12.0);
        assert_eq!(v.at(1, 2), 24.0);
        assert_eq!(v.row(1), &[22.0, 23.0, 24.0]);
    }

    #[test]
    fn mutable_grid_split_is_disjoint() {
        let mut m = DenseMatrix::zeros(4, 4);
        {
            let blocks = m.view_mut().split_grid(2, 2);
            for (idx, mut b) in blocks.into_iter().enumerate() {
                b.fill(idx as f64);
            }
        }
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 3), 1.0);
        assert_eq!(m.get(3, 0), 2.0);
        assert_eq!(m.get(3, 3), 3.0);
    }

    #[test]
    fn row_bands_cover_and_do_not_overlap() {
        let mut m = DenseMatrix::zeros(7, 3);
        {
            let bands = m.view_mut().split_rows_evenly(3);
            assert_eq!(bands.iter().map(|b| b.rows()).sum::<usize>(), 7);
            for (idx, mut b) in bands.into_iter().enumerate() {
                b.fill(idx as f64 + 1.0);
            }
        }
        assert!(m.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn vectorization_round_trip() {
        let m = DenseMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        let v = m.to_row_major();
        let back = DenseMatrix::from_vec(3, 5, v);
        assert_eq!(m, back);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn out_of_range_access_panics() {
        let m = DenseMatrix::zeros(2, 2);
        m.get(2, 0);
    }

    #[test]
    fn even_ranges_partition() {
        let r = even_ranges(10, 4);
        assert_eq!(r, vec![0..3, 3..6, 6..8, 8..10]);
    }
}
