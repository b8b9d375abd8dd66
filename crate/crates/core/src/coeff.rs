//! Exact coefficients: arbitrary-precision rationals with an optional power
//! of the APA parameter lambda.
//!
//! Every coefficient is `value * lambda^e` with `e` in `{-1, 0, 1}`. Exact
//! algorithms use `e = 0` throughout; approximate (APA) algorithms carry
//! `lambda` symbolically and are instantiated numerically at a chosen value.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Default lambda for APA instantiation: sqrt of machine epsilon.
pub fn default_lambda() -> f64 {
    f64::EPSILON.sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coeff {
    pub value: BigRational,
    /// Power of lambda: -1, 0, or 1.
    pub lambda_exp: i8,
}

impl Coeff {
    pub fn zero() -> Self {
        Coeff {
            value: BigRational::zero(),
            lambda_exp: 0,
        }
    }

    pub fn one() -> Self {
        Coeff {
            value: BigRational::one(),
            lambda_exp: 0,
        }
    }

    pub fn from_int(n: i64) -> Self {
        Coeff {
            value: BigRational::from_integer(BigInt::from(n)),
            lambda_exp: 0,
        }
    }

    pub fn from_ratio(p: i64, q: i64) -> Self {
        assert!(q != 0);
        Coeff {
            value: BigRational::new(BigInt::from(p), BigInt::from(q)),
            lambda_exp: 0,
        }
    }

    pub fn rational(value: BigRational) -> Self {
        Coeff { value, lambda_exp: 0 }
    }

    pub fn with_lambda(value: BigRational, lambda_exp: i8) -> Self {
        assert!((-1..=1).contains(&lambda_exp));
        Coeff { value, lambda_exp }
    }

    pub fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    pub fn is_exact(&self) -> bool {
        self.lambda_exp == 0
    }

    pub fn neg(&self) -> Self {
        Coeff {
            value: -self.value.clone(),
            lambda_exp: self.lambda_exp,
        }
    }

    /// Numeric rendering at a given lambda. Exact coefficients ignore it.
    pub fn to_f64(&self, lambda: f64) -> f64 {
        let base = rational_to_f64(&self.value);
        match self.lambda_exp {
            0 => base,
            1 => base * lambda,
            -1 => base / lambda,
            _ => unreachable!(),
        }
    }
}

/// Exact conversion of an `f64` to its binary rational value.
pub fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite float")
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Fall back to a division of the parts for values outside f64 range.
        let n = r.numer().to_f64().unwrap_or(f64::INFINITY * r.numer().signum().to_f64().unwrap_or(1.0));
        let d = r.denom().to_f64().unwrap_or(f64::INFINITY);
        n / d
    })
}

/// Renders a rational in the coefficient-file form: `p` or `p/q` reduced.
pub fn format_rational(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

impl std::fmt::Display for Coeff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", format_rational(&self.value))?;
        match self.lambda_exp {
            0 => Ok(()),
            1 => write!(f, "*L"),
            -1 => write!(f, "/L"),
            _ => unreachable!(),
        }
    }
}

/// Dense row-major matrix of coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoeffMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Coeff>,
}

impl CoeffMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoeffMatrix {
            rows,
            cols,
            data: vec![Coeff::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Coeff) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CoeffMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> &Coeff {
        assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, c: Coeff) {
        assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = c;
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|c| !c.is_zero()).count()
    }

    pub fn col_nnz(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| !self.at(i, j).is_zero()).count()
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        (0..self.cols).filter(|&j| !self.at(i, j).is_zero()).count()
    }

    pub fn is_exact(&self) -> bool {
        self.data.iter().all(|c| c.is_exact())
    }

    /// Numeric rendering of the whole matrix at a given lambda, row-major.
    pub fn to_f64(&self, lambda: f64) -> Vec<f64> {
        self.data.iter().map(|c| c.to_f64(lambda)).collect()
    }

    /// Nonzero `(row, coeff)` pairs of one column.
    pub fn col_entries(&self, j: usize) -> Vec<(usize, Coeff)> {
        (0..self.rows)
            .filter_map(|i| {
                let c = self.at(i, j);
                (!c.is_zero()).then(|| (i, c.clone()))
            })
            .collect()
    }

    /// Nonzero `(col, coeff)` pairs of one row.
    pub fn row_entries(&self, i: usize) -> Vec<(usize, Coeff)> {
        (0..self.cols)
            .filter_map(|j| {
                let c = self.at(i, j);
                (!c.is_zero()).then(|| (j, c.clone()))
            })
            .collect()
    }
}
