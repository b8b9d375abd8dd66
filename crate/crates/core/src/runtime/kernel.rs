#![allow(clippy::needless_range_loop)]

//! Classical base-case multiplication kernels.
//!
//! The runtime calls leaf multiplies through [`BaseKernel`], so an external
//! optimized classical-multiply library can be substituted without touching
//! the recursion. The default [`BlockedKernel`] packs panels of `B`, blocks
//! for cache, and runs a 4x8 register tile; on x86-64 it dispatches to an
//! AVX2+FMA specialization at runtime.

use std::sync::OnceLock;

use crate::matrix::{MatView, MatViewMut};

/// A classical matrix-multiply provider: `C = alpha * A * B`, or
/// `C += alpha * A * B` when `accumulate` is set.
pub trait BaseKernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn multiply(&self, a: MatView, b: MatView, c: MatViewMut, alpha: f64, accumulate: bool);
}

fn check_dims(a: &MatView, b: &MatView, c: &MatViewMut) {
    assert_eq!(a.cols(), b.rows(), "inner dimensions");
    assert_eq!(a.rows(), c.rows(), "output rows");
    assert_eq!(b.cols(), c.cols(), "output cols");
}

/// Reference triple loop. Slow; used as the correctness baseline for
/// spot checks.
#[derive(Debug, Default, Clone, Copy)]
pub struct NaiveKernel;

impl BaseKernel for NaiveKernel {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn multiply(&self, a: MatView, b: MatView, mut c: MatViewMut, alpha: f64, accumulate: bool) {
        check_dims(&a, &b, &c);
        let (m, q, n) = (a.rows(), a.cols(), b.cols());
        for i in 0..m {
            let crow = c.row_mut(i);
            if !accumulate {
                crow.fill(0.0);
            }
            for l in 0..q {
                let av = alpha * a.at(i, l);
                if av == 0.0 {
                    continue;
                }
                let brow = b.row(l);
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
}

const MC: usize = 64;
const KC: usize = 256;
const NC: usize = 1024;

/// Cache-blocked kernel with a packed `B` panel and a 4x8 register tile.
#[derive(Debug, Default, Clone, Copy)]
pub struct BlockedKernel;

impl BaseKernel for BlockedKernel {
    fn name(&self) -> &'static str {
        "blocked"
    }

    fn multiply(&self, a: MatView, b: MatView, mut c: MatViewMut, alpha: f64, accumulate: bool) {
        check_dims(&a, &b, &c);
        let (m, q, n) = (a.rows(), a.cols(), b.cols());
        if m == 0 || n == 0 {
            return;
        }
        if q == 0 || alpha == 0.0 {
            if !accumulate {
                c.fill(0.0);
            }
            return;
        }
        let mut pack = vec![0.0f64; KC.min(q) * NC.min(n)];
        for jc in (0..n).step_by(NC) {
            let ncb = NC.min(n - jc);
            for (kci, kc) in (0..q).step_by(KC).enumerate() {
                let kcb = KC.min(q - kc);
                // Pack the B panel contiguously (kcb rows of ncb).
                for l in 0..kcb {
                    let src = &b.row(kc + l)[jc..jc + ncb];
                    pack[l * ncb..(l + 1) * ncb].copy_from_slice(src);
                }
                // First k-panel writes when not accumulating.
                let merge_add = accumulate || kci > 0;
                for ic in (0..m).step_by(MC) {
                    let mcb = MC.min(m - ic);
                    unsafe {
                        let a_ptr = a.as_ptr().add(ic * a.ld() + kc);
                        let c_ptr = c.as_mut_ptr().add(ic * c.ld() + jc);
                        dispatch_block(
                            a_ptr,
                            a.ld(),
                            pack.as_ptr(),
                            c_ptr,
                            c.ld(),
                            mcb,
                            kcb,
                            ncb,
                            alpha,
                            merge_add,
                        );
                    }
                }
            }
        }
    }
}

type BlockFn = unsafe fn(*const f64, usize, *const f64, *mut f64, usize, usize, usize, usize, f64, bool);

#[inline]
unsafe fn dispatch_block(
    a: *const f64,
    lda: usize,
    bp: *const f64,
    c: *mut f64,
    ldc: usize,
    mc: usize,
    kc: usize,
    nc: usize,
    alpha: f64,
    merge_add: bool,
) {
    static IMPL: OnceLock<BlockFn> = OnceLock::new();
    let f = IMPL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
            {
                return block_avx2;
            }
        }
        block_portable
    });
    f(a, lda, bp, c, ldc, mc, kc, nc, alpha, merge_add)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn block_avx2(
    a: *const f64,
    lda: usize,
    bp: *const f64,
    c: *mut f64,
    ldc: usize,
    mc: usize,
    kc: usize,
    nc: usize,
    alpha: f64,
    merge_add: bool,
) {
    block_impl::<true>(a, lda, bp, c, ldc, mc, kc, nc, alpha, merge_add)
}

unsafe fn block_portable(
    a: *const f64,
    lda: usize,
    bp: *const f64,
    c: *mut f64,
    ldc: usize,
    mc: usize,
    kc: usize,
    nc: usize,
    alpha: f64,
    merge_add: bool,
) {
    block_impl::<false>(a, lda, bp, c, ldc, mc, kc, nc, alpha, merge_add)
}

/// `C[0..mc, 0..nc] (+)= alpha * A[0..mc, 0..kc] * Bp` where `Bp` is the
/// packed `kc x nc` panel. `FMA` selects `mul_add` (fused under the AVX2+FMA
/// target feature, a libm call otherwise).
#[inline(always)]
unsafe fn block_impl<const FMA: bool>(
    a: *const f64,
    lda: usize,
    bp: *const f64,
    c: *mut f64,
    ldc: usize,
    mc: usize,
    kc: usize,
    nc: usize,
    alpha: f64,
    merge_add: bool,
) {
    #[inline(always)]
    fn fmadd<const FMA: bool>(x: f64, y: f64, acc: f64) -> f64 {
        if FMA {
            x.mul_add(y, acc)
        } else {
            acc + x * y
        }
    }

    let mut i = 0;
    while i + 4 <= mc {
        let mut j = 0;
        while j + 8 <= nc {
            let mut acc = [[0.0f64; 8]; 4];
            for k in 0..kc {
                let brow = bp.add(k * nc + j);
                let mut bv = [0.0f64; 8];
                for (col, b) in bv.iter_mut().enumerate() {
                    *b = *brow.add(col);
                }
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = alpha * *a.add((i + r) * lda + k);
                    for col in 0..8 {
                        accr[col] = fmadd::<FMA>(av, bv[col], accr[col]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = c.add((i + r) * ldc + j);
                if merge_add {
                    for col in 0..8 {
                        *crow.add(col) += accr[col];
                    }
                } else {
                    for col in 0..8 {
                        *crow.add(col) = accr[col];
                    }
                }
            }
            j += 8;
        }
        // Column tail, still four rows at a time.
        if j < nc {
            let w = nc - j;
            let mut acc = [[0.0f64; 8]; 4];
            for k in 0..kc {
                let brow = bp.add(k * nc + j);
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = alpha * *a.add((i + r) * lda + k);
                    for col in 0..w {
                        accr[col] = fmadd::<FMA>(av, *brow.add(col), accr[col]);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = c.add((i + r) * ldc + j);
                if merge_add {
                    for col in 0..w {
                        *crow.add(col) += accr[col];
                    }
                } else {
                    for col in 0..w {
                        *crow.add(col) = accr[col];
                    }
                }
            }
        }
        i += 4;
    }
    // Row tail.
    while i < mc {
        let mut j = 0;
        while j < nc {
            let w = 8.min(nc - j);
            let mut acc = [0.0f64; 8];
            for k in 0..kc {
                let av = alpha * *a.add(i * lda + k);
                let brow = bp.add(k * nc + j);
                for col in 0..w {
                    acc[col] = fmadd::<FMA>(av, *brow.add(col), acc[col]);
                }
            }
            let crow = c.add(i * ldc + j);
            if merge_add {
                for col in 0..w {
                    *crow.add(col) += acc[col];
                }
            } else {
                for col in 0..w {
                    *crow.add(col) = acc[col];
                }
            }
            j += w;
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use rand::Rng;
    use rand::SeedableRng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_by_one_with_alpha() {
        let a = DenseMatrix::from_vec(1, 1, vec![2.0]);
        let b = DenseMatrix::from_vec(1, 1, vec![3.0]);
        let mut c = DenseMatrix::zeros(1, 1);
        BlockedKernel.multiply(a.view(), b.view(), c.view_mut(), -1.0, false);
        assert_eq!(c.get(0, 0), -6.0);
    }

    #[test]
    fn blocked_matches_naive_on_odd_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for (m, q, n) in [(50, 50, 50), (1, 7, 13), (65, 3, 9), (33, 260, 17), (4, 8, 8)] {
            let a = random(m, q, &mut rng);
            let b = random(q, n, &mut rng);
            let mut c = DenseMatrix::zeros(m, n);
            let mut want = DenseMatrix::zeros(m, n);
            BlockedKernel.multiply(a.view(), b.view(), c.view_mut(), 1.0, false);
            NaiveKernel.multiply(a.view(), b.view(), want.view_mut(), 1.0, false);
            assert!(c.rel_frobenius_error(&want) <= 1e-13, "({m},{q},{n})");
        }
    }

    #[test]
    fn accumulate_adds_onto_existing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let a = random(23, 31, &mut rng);
        let b = random(31, 19, &mut rng);
        let base = random(23, 19, &mut rng);
        let mut c = base.clone();
        let mut want = base.clone();
        BlockedKernel.multiply(a.view(), b.view(), c.view_mut(), 0.5, true);
        NaiveKernel.multiply(a.view(), b.view(), want.view_mut(), 0.5, true);
        assert!(c.rel_frobenius_error(&want) <= 1e-13);
    }

    #[test]
    fn strided_views_multiply_correctly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let a = random(40, 40, &mut rng);
        let b = random(40, 40, &mut rng);
        let mut c = DenseMatrix::zeros(40, 40);
        let mut want = DenseMatrix::zeros(17, 11);
        let av = a.view().block(3, 5, 17, 21);
        let bv = b.view().block(9, 2, 21, 11);
        NaiveKernel.multiply(av, bv, want.view_mut(), 1.0, false);
        {
            let cv = c.view_mut().into_block(1, 1, 17, 11);
            BlockedKernel.multiply(av, bv, cv, 1.0, false);
        }
        let got = c.view().block(1, 1, 17, 11).to_dense();
        assert!(got.rel_frobenius_error(&want) <= 1e-13);
        // Untouched region stays zero.
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(39, 39), 0.0);
    }

    #[test]
    fn zero_inner_dim_writes_zeros() {
        let a = DenseMatrix::zeros(3, 0);
        let b = DenseMatrix::zeros(0, 4);
        let mut c = DenseMatrix::from_fn(3, 4, |_, _| 5.0);
        BlockedKernel.multiply(a.view(), b.view(), c.view_mut(), 1.0, false);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }
}
