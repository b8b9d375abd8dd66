//! Fast-algorithm objects: `<U,V,W>` tensor decompositions of the matmul
//! tensor, with exact-rational validation, statistics, transforms,
//! composition, and a text file format.
//!
//! An algorithm for base case `<M,K,N>` with rank `R` holds factor matrices
//! `U` (`MK x R`), `V` (`KN x R`), `W` (`MN x R`). Column `r` of `U`/`V`
//! defines the linear combinations `S_r` of `A`-blocks and `T_r` of
//! `B`-blocks; row `i` of `W` assembles output block `i` from the products
//! `M_r = S_r * T_r`.

mod format;
mod transform;

pub use format::{parse_algorithm, serialize_algorithm, ParseError};
pub use transform::{
    compose, equivalence_transform, permute_cyclic, permute_transpose, EquivalenceSpec,
    RationalMatrix, TransformError,
};

use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::coeff::{default_lambda, rational_to_f64, Coeff, CoeffMatrix};
use crate::tensor::MatMulTensor;

/// Whether the decomposition reconstructs the tensor exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exactness {
    /// Validates with residual exactly zero in rational arithmetic.
    Exact,
    /// Approximate algorithm parameterized by lambda; approaches the tensor
    /// as lambda tends to zero.
    Apa,
    /// Numeric candidate (e.g. from search) without an exactness certificate.
    Numeric,
}

impl Exactness {
    pub fn as_str(&self) -> &'static str {
        match self {
            Exactness::Exact => "exact",
            Exactness::Apa => "apa",
            Exactness::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("factor {factor} has {got} rows, expected {expected}")]
    FactorRows {
        factor: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("factor {factor} has {got} columns, expected rank {expected}")]
    FactorCols {
        factor: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("rank {rank} exceeds the classical multiply count {mkn}")]
    RankTooHigh { rank: usize, mkn: usize },
    #[error("exact algorithm contains lambda-dependent coefficients")]
    LambdaInExact,
    #[error("problem dims {dims:?} not divisible by base case {base:?} through {levels} levels")]
    NotDivisible {
        dims: (usize, usize, usize),
        base: (usize, usize, usize),
        levels: u32,
    },
}

/// A fast matrix multiplication algorithm as a rank-`R` decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastAlgorithm {
    m: usize,
    k: usize,
    n: usize,
    rank: usize,
    u: CoeffMatrix,
    v: CoeffMatrix,
    w: CoeffMatrix,
    exactness: Exactness,
}

impl FastAlgorithm {
    pub fn new(
        m: usize,
        k: usize,
        n: usize,
        u: CoeffMatrix,
        v: CoeffMatrix,
        w: CoeffMatrix,
        exactness: Exactness,
    ) -> Result<Self, AlgorithmError> {
        assert!(m >= 1 && k >= 1 && n >= 1);
        let rank = u.cols();
        for (name, f, rows) in [("U", &u, m * k), ("V", &v, k * n), ("W", &w, m * n)] {
            if f.rows() != rows {
                return Err(AlgorithmError::FactorRows {
                    factor: name,
                    got: f.rows(),
                    expected: rows,
                });
            }
            if f.cols() != rank {
                return Err(AlgorithmError::FactorCols {
                    factor: name,
                    got: f.cols(),
                    expected: rank,
                });
            }
        }
        if rank > m * k * n {
            return Err(AlgorithmError::RankTooHigh { rank, mkn: m * k * n });
        }
        if exactness == Exactness::Exact && !(u.is_exact() && v.is_exact() && w.is_exact()) {
            return Err(AlgorithmError::LambdaInExact);
        }
        Ok(FastAlgorithm {
            m,
            k,
            n,
            rank,
            u,
            v,
            w,
            exactness,
        })
    }

    pub fn base_dims(&self) -> (usize, usize, usize) {
        (self.m, self.k, self.n)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn u(&self) -> &CoeffMatrix {
        &self.u
    }

    pub fn v(&self) -> &CoeffMatrix {
        &self.v
    }

    pub fn w(&self) -> &CoeffMatrix {
        &self.w
    }

    pub fn exactness(&self) -> Exactness {
        self.exactness
    }

    pub fn tensor(&self) -> MatMulTensor {
        MatMulTensor::new(self.m, self.k, self.n)
    }

    pub fn is_apa(&self) -> bool {
        self.exactness == Exactness::Apa
    }

    /// Effective lambda for numeric rendering: the supplied value, or
    /// `sqrt(machine epsilon)` for APA algorithms, or 1 for exact ones (where
    /// it is unused).
    pub fn effective_lambda(&self, lambda: Option<f64>) -> f64 {
        lambda.unwrap_or_else(|| if self.is_apa() { default_lambda() } else { 1.0 })
    }
}

/// The classical rank-`MKN` indicator decomposition: each column of `U`, `V`,
/// `W` holds a single 1. Column order follows the output: for each `C` block
/// (row-major) the `K` inner products in order.
pub fn classical_algorithm(m: usize, k: usize, n: usize) -> FastAlgorithm {
    let rank = m * k * n;
    let mut u = CoeffMatrix::zeros(m * k, rank);
    let mut v = CoeffMatrix::zeros(k * n, rank);
    let mut w = CoeffMatrix::zeros(m * n, rank);
    let mut r = 0;
    for ar in 0..m {
        for bc in 0..n {
            for ac in 0..k {
                u.set(ar * k + ac, r, Coeff::one());
                v.set(ac * n + bc, r, Coeff::one());
                w.set(ar * n + bc, r, Coeff::one());
                r += 1;
            }
        }
    }
    FastAlgorithm::new(m, k, n, u, v, w, Exactness::Exact).expect("classical construction")
}

/// How a validation residual was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMethod {
    /// Every tensor entry checked; exact algorithms in rational arithmetic.
    Dense,
    /// Randomized contraction probes (used when the dense check is too big).
    Randomized,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub valid: bool,
    pub max_residual: f64,
    /// True when the residual is exactly zero in rational arithmetic.
    pub exact_zero: bool,
    pub method: ValidationMethod,
}

/// Entry-count budget above which dense validation switches to randomized
/// contraction probes.
const DENSE_VALIDATE_LIMIT: usize = 20_000_000;

/// Checks `sum_r U[i,r] V[j,r] W[k,r] == T[i,j,k]` over all entries.
///
/// Exact algorithms are verified in rational arithmetic and must have
/// residual exactly zero regardless of `tolerance`. APA and numeric
/// algorithms are rendered at `lambda` and compared within `tolerance`.
pub fn validate(
    alg: &FastAlgorithm,
    tolerance: f64,
    lambda: Option<f64>,
) -> ValidationReport {
    let t = alg.tensor();
    let (ni, nj, nk) = t.shape();
    let work = ni
        .saturating_mul(nj)
        .saturating_mul(nk)
        .saturating_mul(alg.rank().max(1));
    if work > DENSE_VALIDATE_LIMIT {
        return validate_randomized(alg, tolerance.max(1e-10), lambda, 50, 0xfa57);
    }
    let all_exact = alg.u.is_exact() && alg.v.is_exact() && alg.w.is_exact();
    if all_exact {
        let mut max = BigRational::zero();
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let mut sum = BigRational::zero();
                    for r in 0..alg.rank {
                        let u = alg.u.at(i, r);
                        if u.is_zero() {
                            continue;
                        }
                        let v = alg.v.at(j, r);
                        if v.is_zero() {
                            continue;
                        }
                        let w = alg.w.at(k, r);
                        if w.is_zero() {
                            continue;
                        }
                        sum += &u.value * &v.value * &w.value;
                    }
                    let target = BigRational::from_integer(t.entry_unchecked(i, j, k).into());
                    let resid = (sum - target).abs();
                    if resid > max {
                        max = resid;
                    }
                }
            }
        }
        let exact_zero = max.is_zero();
        ValidationReport {
            valid: exact_zero || rational_to_f64(&max) <= tolerance,
            max_residual: rational_to_f64(&max),
            exact_zero,
            method: ValidationMethod::Dense,
        }
    } else {
        let lam = alg.effective_lambda(lambda);
        let u = alg.u.to_f64(lam);
        let v = alg.v.to_f64(lam);
        let w = alg.w.to_f64(lam);
        let r = alg.rank;
        let mut max: f64 = 0.0;
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let mut sum = 0.0;
                    for c in 0..r {
                        sum += u[i * r + c] * v[j * r + c] * w[k * r + c];
                    }
                    let resid = (sum - t.entry_unchecked(i, j, k) as f64).abs();
                    max = max.max(resid);
                }
            }
        }
        ValidationReport {
            valid: max <= tolerance,
            max_residual: max,
            exact_zero: false,
            method: ValidationMethod::Dense,
        }
    }
}

/// Validation by random contraction: for random `(a, b)` vector pairs the
/// fast evaluation `W (U^T a . V^T b)` must match the tensor contraction.
pub fn validate_randomized(
    alg: &FastAlgorithm,
    tolerance: f64,
    lambda: Option<f64>,
    trials: usize,
    seed: u64,
) -> ValidationReport {
    let t = alg.tensor();
    let (ni, nj, _) = t.shape();
    let lam = alg.effective_lambda(lambda);
    let u = alg.u.to_f64(lam);
    let v = alg.v.to_f64(lam);
    let w = alg.w.to_f64(lam);
    let r = alg.rank;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..ni).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..nj).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = t.contract(&a, &b).expect("shapes fixed");
        let mut s = vec![0.0; r];
        let mut tt = vec![0.0; r];
        for i in 0..ni {
            let ai = a[i];
            if ai == 0.0 {
                continue;
            }
            for c in 0..r {
                s[c] += u[i * r + c] * ai;
            }
        }
        for j in 0..nj {
            let bj = b[j];
            for c in 0..r {
                tt[c] += v[j * r + c] * bj;
            }
        }
        let m: Vec<f64> = s.iter().zip(&tt).map(|(x, y)| x * y).collect();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (k, wk) in want.iter().enumerate() {
            let mut got = 0.0;
            for c in 0..r {
                got += w[k * r + c] * m[c];
            }
            diff += (got - wk) * (got - wk);
            norm += wk * wk;
        }
        let rel = if norm == 0.0 { diff.sqrt() } else { (diff / norm).sqrt() };
        max_rel = max_rel.max(rel);
    }
    ValidationReport {
        valid: max_rel <= tolerance,
        max_residual: max_rel,
        exact_zero: false,
        method: ValidationMethod::Randomized,
    }
}

/// Headline statistics of an algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmStats {
    pub rank: usize,
    /// Multiplies the classical algorithm would use: `M*K*N`.
    pub classical_multiplies: usize,
    /// `MKN/R - 1`: the per-step multiply reduction if additions were free.
    pub speedup_per_step: f64,
    pub nnz_u: usize,
    pub nnz_v: usize,
    pub nnz_w: usize,
    pub nnz_total: usize,
    /// `(nnz(U)-R) + (nnz(V)-R) + (nnz(W)-MN)`: block additions per
    /// recursive step.
    pub addition_count: usize,
    /// `log_M R` for square base cases (`M == K == N`), else `None`.
    pub exponent: Option<f64>,
}

pub fn stats(alg: &FastAlgorithm) -> AlgorithmStats {
    let (m, k, n) = alg.base_dims();
    let r = alg.rank();
    let mkn = m * k * n;
    let nnz_u = alg.u().nnz();
    let nnz_v = alg.v().nnz();
    let nnz_w = alg.w().nnz();
    let addition_count = (nnz_u - r) + (nnz_v - r) + (nnz_w - m * n);
    let exponent = (m == k && k == n && m > 1).then(|| (r as f64).ln() / (m as f64).ln());
    AlgorithmStats {
        rank: r,
        classical_multiplies: mkn,
        speedup_per_step: mkn as f64 / r as f64 - 1.0,
        nnz_u,
        nnz_v,
        nnz_w,
        nnz_total: nnz_u + nnz_v + nnz_w,
        addition_count,
        exponent,
    }
}

/// Exact scalar operation count of `levels` recursive steps on a
/// `(P, Q, R)` problem: classical leaves cost `2mqn - mn` flops and each
/// internal node performs its block additions element-wise.
///
/// Requires dims divisible by the base case through all levels (peeling
/// costs are runtime instrumentation, not closed form).
pub fn flop_count(
    alg: &FastAlgorithm,
    levels: u32,
    dims: (usize, usize, usize),
) -> Result<u128, AlgorithmError> {
    let (m, k, n) = alg.base_dims();
    let (mut p, mut q, mut r) = dims;
    // Check divisibility up front.
    for _ in 0..levels {
        if p % m != 0 || q % k != 0 || r % n != 0 {
            return Err(AlgorithmError::NotDivisible {
                dims,
                base: (m, k, n),
                levels,
            });
        }
        p /= m;
        q /= k;
        r /= n;
    }
    let adds_u = (alg.u().nnz() - alg.rank()) as u128;
    let adds_v = (alg.v().nnz() - alg.rank()) as u128;
    let adds_w = (alg.w().nnz() - m * n) as u128;

    fn rec(
        alg: &FastAlgorithm,
        level: u32,
        p: u128,
        q: u128,
        r: u128,
        adds: (u128, u128, u128),
    ) -> u128 {
        if level == 0 {
            return 2 * p * q * r - p * r;
        }
        let (m, k, n) = alg.base_dims();
        let (bp, bq, br) = (p / m as u128, q / k as u128, r / n as u128);
        let node_adds = adds.0 * bp * bq + adds.1 * bq * br + adds.2 * bp * br;
        alg.rank() as u128 * rec(alg, level - 1, bp, bq, br, adds) + node_adds
    }

    Ok(rec(
        alg,
        levels,
        dims.0 as u128,
        dims.1 as u128,
        dims.2 as u128,
        (adds_u, adds_v, adds_w),
    ))
}

/// The bundled Strassen `<2,2,2>` rank-7 coefficient file.
pub const STRASSEN_TEXT: &str = include_str!("../../data/strassen.alg");

/// Strassen's algorithm, parsed from the bundled coefficient file.
pub fn strassen() -> FastAlgorithm {
    parse_algorithm(STRASSEN_TEXT).expect("bundled Strassen file parses")
}
