//! Coefficient file format.
//!
//! UTF-8 text; `#` starts a comment line. The first data line is the header
//! `M K N R exact|apa|numeric`, followed by `MK` rows of `R` entries for `U`,
//! a blank line, `KN` rows for `V`, a blank line, and `MN` rows for `W`.
//! Entries are rationals (`3`, `-1/2`), decimal literals (`0.25`, parsed
//! exactly), or lambda-tagged rationals for APA algorithms (`1/2*L` for
//! `(1/2)*lambda`, `1/2/L` for `(1/2)/lambda`). The serializer emits the
//! canonical form: reduced rationals, single spaces, blank section
//! separators.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{pow::Pow, Zero};
use thiserror::Error;

use super::{AlgorithmError, Exactness, FastAlgorithm};
use crate::coeff::{Coeff, CoeffMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: expected header \"M K N R exact|apa|numeric\", found {found:?}")]
    BadHeader { line: usize, found: String },
    #[error("line {line}: duplicate header")]
    DuplicateHeader { line: usize },
    #[error("line {line}: cannot parse coefficient {token:?}")]
    BadCoefficient { line: usize, token: String },
    #[error("line {line}: row has {got} entries, expected {expected}")]
    RowLength {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("line {line}: lambda coefficient in an exact algorithm")]
    LambdaInExact { line: usize },
    #[error("unexpected end of file: factor {factor} needs {expected} rows, found {got}")]
    UnexpectedEof {
        factor: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: unexpected trailing content")]
    TrailingContent { line: usize },
    #[error("inconsistent dimensions: {0}")]
    Inconsistent(String),
}

impl From<AlgorithmError> for ParseError {
    fn from(e: AlgorithmError) -> Self {
        ParseError::Inconsistent(e.to_string())
    }
}

/// Parses a single coefficient token.
fn parse_coeff(token: &str, line: usize) -> Result<Coeff, ParseError> {
    let bad = || ParseError::BadCoefficient {
        line,
        token: token.to_string(),
    };
    // Split off a lambda suffix first.
    let (body, lambda_exp) = if let Some(stripped) = token.strip_suffix("*L") {
        (stripped, 1i8)
    } else if let Some(stripped) = token.strip_suffix("/L") {
        (stripped, -1i8)
    } else {
        (token, 0i8)
    };
    if body.is_empty() {
        return Err(bad());
    }
    let value = if let Some((p, q)) = body.split_once('/') {
        let p: BigInt = p.parse().map_err(|_| bad())?;
        let q: BigInt = q.parse().map_err(|_| bad())?;
        if q.is_zero() {
            return Err(bad());
        }
        BigRational::new(p, q)
    } else if let Some((int_part, frac_part)) = body.split_once('.') {
        // Decimal literal, converted exactly: d.f = (d*10^len(f) +/- f) / 10^len(f).
        if frac_part.is_empty() || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let negative = int_part.starts_with('-');
        let int_digits = int_part.strip_prefix(['-', '+']).unwrap_or(int_part);
        if !int_digits.bytes().all(|b| b.is_ascii_digit()) || int_digits.is_empty() {
            return Err(bad());
        }
        let scale = BigInt::from(10u32).pow(frac_part.len() as u32);
        let whole: BigInt = int_digits.parse().map_err(|_| bad())?;
        let frac: BigInt = frac_part.parse().map_err(|_| bad())?;
        let numer = whole * &scale + frac;
        let signed = if negative { -numer } else { numer };
        BigRational::new(signed, scale)
    } else {
        let p: BigInt = body.parse().map_err(|_| bad())?;
        BigRational::from_integer(p)
    };
    Ok(Coeff::with_lambda(value, lambda_exp))
}

fn looks_like_header(tokens: &[&str]) -> bool {
    tokens.len() == 5
        && matches!(tokens[4], "exact" | "apa" | "numeric")
        && tokens[..4].iter().all(|t| t.parse::<usize>().is_ok())
}

/// Parses the coefficient-file format into a [`FastAlgorithm`].
pub fn parse_algorithm(text: &str) -> Result<FastAlgorithm, ParseError> {
    // Data lines with their original 1-based line numbers; comments and
    // blank lines are separators only.
    let data: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .filter_map(|(idx, raw)| {
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some((idx + 1, trimmed.split_whitespace().collect()))
            }
        })
        .collect();

    let Some((header_line, header)) = data.first() else {
        return Err(ParseError::UnexpectedEof {
            factor: "header",
            expected: 1,
            got: 0,
        });
    };
    if !looks_like_header(header) {
        return Err(ParseError::BadHeader {
            line: *header_line,
            found: header.join(" "),
        });
    }
    let m: usize = header[0].parse().unwrap();
    let k: usize = header[1].parse().unwrap();
    let n: usize = header[2].parse().unwrap();
    let rank: usize = header[3].parse().unwrap();
    let exactness = match header[4] {
        "exact" => Exactness::Exact,
        "apa" => Exactness::Apa,
        "numeric" => Exactness::Numeric,
        _ => unreachable!(),
    };
    if m == 0 || k == 0 || n == 0 || rank == 0 {
        return Err(ParseError::BadHeader {
            line: *header_line,
            found: header.join(" "),
        });
    }

    let mut rows = data[1..].iter();
    let mut read_factor = |factor: &'static str,
                           nrows: usize|
     -> Result<CoeffMatrix, ParseError> {
        let mut mat = CoeffMatrix::zeros(nrows, rank);
        for i in 0..nrows {
            let Some((line, tokens)) = rows.next() else {
                return Err(ParseError::UnexpectedEof {
                    factor,
                    expected: nrows,
                    got: i,
                });
            };
            if looks_like_header(tokens) {
                return Err(ParseError::DuplicateHeader { line: *line });
            }
            if tokens.len() != rank {
                return Err(ParseError::RowLength {
                    line: *line,
                    got: tokens.len(),
                    expected: rank,
                });
            }
            for (j, token) in tokens.iter().enumerate() {
                let c = parse_coeff(token, *line)?;
                if exactness == Exactness::Exact && !c.is_exact() {
                    return Err(ParseError::LambdaInExact { line: *line });
                }
                mat.set(i, j, c);
            }
        }
        Ok(mat)
    };

    let u = read_factor("U", m * k)?;
    let v = read_factor("V", k * n)?;
    let w = read_factor("W", m * n)?;
    if let Some((line, tokens)) = rows.next() {
        if looks_like_header(tokens) {
            return Err(ParseError::DuplicateHeader { line: *line });
        }
        return Err(ParseError::TrailingContent { line: *line });
    }

    Ok(FastAlgorithm::new(m, k, n, u, v, w, exactness)?)
}

/// Emits the canonical form of the coefficient-file format.
pub fn serialize_algorithm(alg: &FastAlgorithm) -> String {
    let (m, k, n) = alg.base_dims();
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {} {} {}\n",
        m,
        k,
        n,
        alg.rank(),
        alg.exactness().as_str()
    ));
    for (idx, factor) in [alg.u(), alg.v(), alg.w()].into_iter().enumerate() {
        if idx > 0 {
            out.push('\n');
        }
        for i in 0..factor.rows() {
            let row: Vec<String> = (0..factor.cols())
                .map(|j| factor.at(i, j).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::{classical_algorithm, strassen};
    use num_traits::One;

    #[test]
    fn strassen_file_parses() {
        let alg = strassen();
        assert_eq!(alg.base_dims(), (2, 2, 2));
        assert_eq!(alg.rank(), 7);
        assert_eq!(alg.exactness(), Exactness::Exact);
        // Spot-check a few printed entries.
        assert_eq!(alg.u().at(0, 5), &Coeff::from_int(-1));
        assert_eq!(alg.v().at(3, 2), &Coeff::from_int(-1));
        assert_eq!(alg.w().at(3, 1), &Coeff::from_int(-1));
    }

    #[test]
    fn serialize_parse_round_trip_is_canonical() {
        let alg = strassen();
        let text = serialize_algorithm(&alg);
        let reparsed = parse_algorithm(&text).unwrap();
        assert_eq!(&alg, &reparsed);
        assert_eq!(text, serialize_algorithm(&reparsed));

        let c = classical_algorithm(2, 3, 4);
        let text = serialize_algorithm(&c);
        assert_eq!(parse_algorithm(&text).unwrap(), c);
    }

    #[test]
    fn wrong_column_count_is_an_error() {
        // Header claims rank 7 but the first U row has 6 entries.
        let mut text = String::from("2 2 2 7 exact\n");
        text.push_str("1 0 1 0 1 -1\n");
        let err = parse_algorithm(&text).unwrap_err();
        assert_eq!(
            err,
            ParseError::RowLength {
                line: 2,
                got: 6,
                expected: 7
            }
        );
    }

    #[test]
    fn duplicate_header_is_detected() {
        let mut text = String::new();
        text.push_str("1 1 1 1 exact\n1\n1\n1\n");
        text.push_str("1 1 1 1 exact\n");
        let err = parse_algorithm(&text).unwrap_err();
        assert_eq!(err, ParseError::DuplicateHeader { line: 5 });
    }

    #[test]
    fn bad_token_names_its_line() {
        let text = "1 1 1 1 exact\n1\nx\n1\n";
        let err = parse_algorithm(text).unwrap_err();
        assert_eq!(
            err,
            ParseError::BadCoefficient {
                line: 3,
                token: "x".into()
            }
        );
    }

    #[test]
    fn truncated_file_is_an_error() {
        let text = "2 2 2 7 exact\n1 0 1 0 1 -1 0\n";
        let err = parse_algorithm(text).unwrap_err();
        assert!(matches!(err, ParseError::UnexpectedEof { factor: "U", .. }));
    }

    #[test]
    fn decimal_and_rational_coefficients_parse_exactly() {
        assert_eq!(parse_coeff("0.5", 1).unwrap(), Coeff::from_ratio(1, 2));
        assert_eq!(parse_coeff("-0.25", 1).unwrap(), Coeff::from_ratio(-1, 4));
        assert_eq!(parse_coeff("-3/6", 1).unwrap(), Coeff::from_ratio(-1, 2));
        assert_eq!(parse_coeff("7", 1).unwrap(), Coeff::from_int(7));
    }

    #[test]
    fn lambda_coefficients_require_apa_header() {
        let text = "1 1 1 1 exact\n1*L\n1\n1\n";
        assert_eq!(
            parse_algorithm(text).unwrap_err(),
            ParseError::LambdaInExact { line: 2 }
        );
        let text = "1 1 1 1 apa\n1*L\n1\n1\n";
        let alg = parse_algorithm(text).unwrap();
        assert_eq!(alg.exactness(), Exactness::Apa);
        let c = alg.u().at(0, 0);
        assert_eq!(c.lambda_exp, 1);
        assert!(c.value.is_one());
    }

    #[test]
    fn lambda_round_trip() {
        let text = "1 1 1 1 apa\n-1/2/L\n1\n2*L\n";
        let alg = parse_algorithm(text).unwrap();
        let canon = serialize_algorithm(&alg);
        assert_eq!(canon, "1 1 1 1 apa\n-1/2/L\n\n1\n\n2*L\n");
        assert_eq!(parse_algorithm(&canon).unwrap(), alg);
    }
}
