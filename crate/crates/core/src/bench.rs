//! Benchmark harness: suite specs, median-of-5 timing, effective GFLOPS,
//! and CSV emission.
//!
//! Effective GFLOPS normalizes wall time by the classical operation count
//! `2PQR - PR`, giving an inverse-time scale comparable across algorithms
//! with different true flop counts (it is the true rate only for the
//! classical algorithm).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{classical_algorithm, parse_algorithm, strassen, FastAlgorithm};
use crate::matrix::DenseMatrix;
use crate::parallel::ParallelMode;
use crate::planner::AdditionStrategy;
use crate::runtime::{fast_multiply, BlockedKernel, Counters, ExecutionConfig, StepPolicy};
use crate::runtime::BaseKernel;

/// `(2PQR - PR) / seconds * 1e-9`.
pub fn effective_gflops(p: usize, q: usize, r: usize, seconds: f64) -> f64 {
    assert!(seconds > 0.0, "elapsed time must be positive");
    assert!(p >= 1 && q >= 1 && r >= 1);
    let flops = 2.0 * (p as f64) * (q as f64) * (r as f64) - (p as f64) * (r as f64);
    flops / seconds * 1e-9
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot parse shape spec {spec:?}: {reason}")]
    BadShape { spec: String, reason: &'static str },
    #[error("unknown algorithm source {0:?} (expected builtin:strassen, classical:M,K,N, or a file path)")]
    BadSource(String),
    #[error("suite file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("algorithm file {path}: {message}")]
    AlgorithmFile { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loads an algorithm from a source string: `builtin:strassen`,
/// `classical:M,K,N`, or a coefficient file path.
pub fn load_algorithm_source(source: &str) -> Result<FastAlgorithm, SuiteError> {
    if let Some(name) = source.strip_prefix("builtin:") {
        return match name {
            "strassen" => Ok(strassen()),
            _ => Err(SuiteError::BadSource(source.to_string())),
        };
    }
    if let Some(dims) = source.strip_prefix("classical:") {
        let parts: Vec<usize> = dims
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| SuiteError::BadSource(source.to_string()))?;
        if parts.len() != 3 || parts.contains(&0) {
            return Err(SuiteError::BadSource(source.to_string()));
        }
        return Ok(classical_algorithm(parts[0], parts[1], parts[2]));
    }
    let text = std::fs::read_to_string(Path::new(source)).map_err(|e| SuiteError::AlgorithmFile {
        path: source.to_string(),
        message: e.to_string(),
    })?;
    parse_algorithm(&text).map_err(|e| SuiteError::AlgorithmFile {
        path: source.to_string(),
        message: e.to_string(),
    })
}

/// One dimension of a shape pattern: the running size or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    N,
    Fixed(usize),
}

/// Parses the shape grammar: a pattern like `NxNxN`, `Nx1600xN`, or
/// `Nx800x800` (either `x` or the multiplication sign), optionally followed
/// by `, N in {a,b,...}` listing the sizes. Returns one `(P,Q,R)` cell per
/// size.
pub fn parse_shape_spec(spec: &str) -> Result<Vec<(usize, usize, usize)>, SuiteError> {
    let bad = |reason: &'static str| SuiteError::BadShape {
        spec: spec.to_string(),
        reason,
    };
    let normalized = spec.replace('\u{d7}', "x").replace('\u{2208}', "in");
    let (pattern, sizes_part) = match normalized.split_once(',') {
        Some((p, rest)) => (p.trim(), Some(rest.trim())),
        None => (normalized.trim(), None),
    };
    let dims: Vec<Dim> = pattern
        .split('x')
        .map(|t| {
            let t = t.trim();
            if t == "N" {
                Ok(Dim::N)
            } else {
                t.parse::<usize>().map(Dim::Fixed).map_err(|_| bad("dimension must be N or an integer"))
            }
        })
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(bad("expected three dimensions"));
    }
    let sizes: Vec<usize> = match sizes_part {
        None => {
            if dims.contains(&Dim::N) {
                return Err(bad("pattern uses N but no sizes were given"));
            }
            vec![0]
        }
        Some(rest) => {
            let rest = rest.trim_start_matches("N").trim_start().trim_start_matches("in").trim();
            let inner = rest
                .strip_prefix('{')
                .and_then(|r| r.strip_suffix('}'))
                .ok_or_else(|| bad("sizes must be written as N in {a,b,...}"))?;
            inner
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| bad("size must be an integer")))
                .collect::<Result<_, _>>()?
        }
    };
    Ok(sizes
        .into_iter()
        .map(|n| {
            let pick = |d: &Dim| match d {
                Dim::N => n,
                Dim::Fixed(v) => *v,
            };
            (pick(&dims[0]), pick(&dims[1]), pick(&dims[2]))
        })
        .collect())
}

#[derive(Debug, Clone, Deserialize)]
pub struct AlgorithmEntry {
    pub name: String,
    pub source: String,
    /// Recursion depths to run; falls back to the suite default.
    pub steps: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ShapeEntry {
    /// Full shape grammar string, e.g. `"Nx1600xN, N in {2000,4000}"`.
    pub spec: Option<String>,
    /// Alternative split form: pattern plus explicit size list.
    pub pattern: Option<String>,
    pub sizes: Option<Vec<usize>>,
}

fn default_steps() -> Vec<u32> {
    vec![1]
}

fn default_samples() -> usize {
    5
}

fn default_warmup() -> bool {
    true
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunEntry {
    #[serde(default = "default_steps")]
    pub steps: Vec<u32>,
    #[serde(default)]
    pub best_of_steps: bool,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub cse: bool,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub check: bool,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_warmup")]
    pub warmup: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for RunEntry {
    fn default() -> Self {
        RunEntry {
            steps: default_steps(),
            best_of_steps: false,
            strategy: None,
            cse: false,
            mode: None,
            workers: 0,
            check: false,
            samples: default_samples(),
            warmup: default_warmup(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SuiteSpec {
    #[serde(rename = "algorithm", default)]
    pub algorithms: Vec<AlgorithmEntry>,
    #[serde(rename = "shape", default)]
    pub shapes: Vec<ShapeEntry>,
    #[serde(default)]
    pub run: Option<RunEntry>,
}

pub fn load_suite(text: &str) -> Result<SuiteSpec, SuiteError> {
    Ok(toml::from_str(text)?)
}

/// One CSV row. Field order is the schema; fields are never reordered
/// within a major version. Error rows carry the message in `error` and
/// empty metrics.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub algorithm: String,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub steps: u32,
    pub strategy: String,
    pub cse: bool,
    pub mode: String,
    pub workers: usize,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub t3: Option<f64>,
    pub t4: Option<f64>,
    pub t5: Option<f64>,
    pub median_seconds: Option<f64>,
    pub effective_gflops: Option<f64>,
    pub leaf_multiplies: Option<u64>,
    pub peel_fixup_multiplies: Option<u64>,
    pub element_additions: Option<u64>,
    pub submatrix_reads: Option<u64>,
    pub submatrix_writes: Option<u64>,
    pub max_rel_error: Option<f64>,
    pub error: Option<String>,
}

impl BenchRecord {
    fn error_row(algorithm: &str, message: String) -> Self {
        BenchRecord {
            algorithm: algorithm.to_string(),
            p: 0,
            q: 0,
            r: 0,
            steps: 0,
            strategy: String::new(),
            cse: false,
            mode: String::new(),
            workers: 0,
            t1: None,
            t2: None,
            t3: None,
            t4: None,
            t5: None,
            median_seconds: None,
            effective_gflops: None,
            leaf_multiplies: None,
            peel_fixup_multiplies: None,
            element_additions: None,
            submatrix_reads: None,
            submatrix_writes: None,
            max_rel_error: None,
            error: Some(message),
        }
    }
}

fn median_of(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[sorted.len() / 2]
}

struct CellResult {
    samples: Vec<f64>,
    counters: Counters,
    max_rel_error: Option<f64>,
}

fn run_cell(
    alg: &FastAlgorithm,
    dims: (usize, usize, usize),
    steps: u32,
    run: &RunEntry,
    config: &ExecutionConfig,
) -> Result<CellResult, String> {
    let (p, q, r) = dims;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run.seed);
    let a = DenseMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
    let b = DenseMatrix::from_fn(q, r, |_, _| rng.random_range(-1.0..1.0));
    let mut config = config.clone();
    config.steps = StepPolicy::Fixed(steps);

    if run.warmup {
        fast_multiply(&a, &b, alg, &config).map_err(|e| e.to_string())?;
    }
    let mut samples = Vec::with_capacity(run.samples);
    let mut last = None;
    for _ in 0..run.samples.max(1) {
        let start = Instant::now();
        let out = fast_multiply(&a, &b, alg, &config).map_err(|e| e.to_string())?;
        samples.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (c, counters) = last.expect("at least one sample");
    let max_rel_error = run.check.then(|| {
        let mut baseline = DenseMatrix::zeros(p, r);
        BlockedKernel.multiply(a.view(), b.view(), baseline.view_mut(), 1.0, false);
        c.rel_frobenius_error(&baseline)
    });
    Ok(CellResult {
        samples,
        counters,
        max_rel_error,
    })
}

/// Runs every `(algorithm, shape, steps)` cell of the suite: optional
/// warm-up, `samples` timed runs, median, effective GFLOPS, and an optional
/// correctness check against the classical kernel on the same data.
/// A broken algorithm entry becomes one error row; the suite continues.
pub fn run_suite(suite: &SuiteSpec) -> Vec<BenchRecord> {
    let run = suite.run.clone().unwrap_or_default();
    let strategy: AdditionStrategy = run
        .strategy
        .as_deref()
        .and_then(|s| s.parse().ok())
        .unwrap_or(AdditionStrategy::WriteOnce);
    let mode: ParallelMode = run
        .mode
        .as_deref()
        .and_then(|s| s.parse().ok())
        .unwrap_or(ParallelMode::Sequential);
    let base_config = ExecutionConfig {
        strategy,
        cse: run.cse,
        mode,
        workers: run.workers,
        ..ExecutionConfig::default()
    };

    // Expand shapes first; shape errors poison the whole suite definition.
    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    let mut records = Vec::new();
    for shape in &suite.shapes {
        let expanded = match (&shape.spec, &shape.pattern, &shape.sizes) {
            (Some(spec), _, _) => parse_shape_spec(spec),
            (None, Some(pattern), Some(sizes)) => {
                let joined = format!(
                    "{pattern}, N in {{{}}}",
                    sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
                );
                parse_shape_spec(&joined)
            }
            (None, Some(pattern), None) => parse_shape_spec(pattern),
            _ => Err(SuiteError::BadShape {
                spec: String::new(),
                reason: "shape entry needs spec or pattern",
            }),
        };
        match expanded {
            Ok(mut v) => cells.append(&mut v),
            Err(e) => records.push(BenchRecord::error_row("<shape>", e.to_string())),
        }
    }

    for entry in &suite.algorithms {
        let alg = match load_algorithm_source(&entry.source) {
            Ok(a) => a,
            Err(e) => {
                records.push(BenchRecord::error_row(&entry.name, e.to_string()));
                continue;
            }
        };
        let steps_list = entry.steps.clone().unwrap_or_else(|| run.steps.clone());
        for &dims in &cells {
            let mut best: Option<(u32, CellResult)> = None;
            for &steps in &steps_list {
                match run_cell(&alg, dims, steps, &run, &base_config) {
                    Ok(result) => {
                        if run.best_of_steps {
                            let better = best.as_ref().is_none_or(|(_, b)| {
                                median_of(&result.samples) < median_of(&b.samples)
                            });
                            if better {
                                best = Some((steps, result));
                            }
                        } else {
                            records.push(make_record(entry, dims, steps, &run, strategy, mode, result));
                        }
                    }
                    Err(message) => {
                        records.push(BenchRecord::error_row(&entry.name, message));
                    }
                }
            }
            if run.best_of_steps {
                if let Some((steps, result)) = best {
                    records.push(make_record(entry, dims, steps, &run, strategy, mode, result));
                }
            }
        }
    }
    records
}

fn make_record(
    entry: &AlgorithmEntry,
    dims: (usize, usize, usize),
    steps: u32,
    run: &RunEntry,
    strategy: AdditionStrategy,
    mode: ParallelMode,
    result: CellResult,
) -> BenchRecord {
    let (p, q, r) = dims;
    let median = median_of(&result.samples);
    let sample = |i: usize| result.samples.get(i).copied();
    BenchRecord {
        algorithm: entry.name.clone(),
        p,
        q,
        r,
        steps,
        strategy: strategy.as_str().to_string(),
        cse: run.cse,
        mode: mode.as_str().to_string(),
        workers: run.workers,
        t1: sample(0),
        t2: sample(1),
        t3: sample(2),
        t4: sample(3),
        t5: sample(4),
        median_seconds: Some(median),
        effective_gflops: Some(effective_gflops(p, q, r, median)),
        leaf_multiplies: Some(result.counters.leaf_multiplies),
        peel_fixup_multiplies: Some(result.counters.peel_fixup_multiplies),
        element_additions: Some(result.counters.element_additions),
        submatrix_reads: Some(result.counters.total_reads()),
        submatrix_writes: Some(result.counters.total_writes()),
        max_rel_error: result.max_rel_error,
        error: None,
    }
}

/// Writes records as CSV with the stable schema header.
pub fn write_csv<W: Write>(records: &[BenchRecord], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        // Header-only CSV for an empty suite.
        w.write_record([
            "algorithm",
            "p",
            "q",
            "r",
            "steps",
            "strategy",
            "cse",
            "mode",
            "workers",
            "t1",
            "t2",
            "t3",
            "t4",
            "t5",
            "median_seconds",
            "effective_gflops",
            "leaf_multiplies",
            "peel_fixup_multiplies",
            "element_additions",
            "submatrix_reads",
            "submatrix_writes",
            "max_rel_error",
            "error",
        ])?;
    }
    for record in records {
        w.serialize(record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_gflops_examples() {
        let g = effective_gflops(1000, 1000, 1000, 1.0);
        assert!((g - 1.999).abs() < 1e-9);
        assert!((effective_gflops(1, 1, 1, 1.0) - 1e-9).abs() < 1e-24);
        // Half the time doubles the rate exactly.
        let fast = effective_gflops(640, 320, 480, 0.5);
        let slow = effective_gflops(640, 320, 480, 1.0);
        assert_eq!(fast, 2.0 * slow);
    }

    #[test]
    #[should_panic(expected = "positive")]
    fn zero_seconds_is_a_contract_violation() {
        effective_gflops(10, 10, 10, 0.0);
    }

    #[test]
    fn shape_grammar_parses_paper_forms() {
        assert_eq!(
            parse_shape_spec("NxNxN, N in {1024,2048}").unwrap(),
            vec![(1024, 1024, 1024), (2048, 2048, 2048)]
        );
        assert_eq!(
            parse_shape_spec("Nx1600xN, N in {2000,4000}").unwrap(),
            vec![(2000, 1600, 2000), (4000, 1600, 4000)]
        );
        assert_eq!(
            parse_shape_spec("N\u{d7}1600\u{d7}N, N \u{2208} {2000,4000}").unwrap(),
            vec![(2000, 1600, 2000), (4000, 1600, 4000)]
        );
        assert_eq!(
            parse_shape_spec("Nx2400x2400, N in {3000}").unwrap(),
            vec![(3000, 2400, 2400)]
        );
        assert_eq!(parse_shape_spec("100x80x60").unwrap(), vec![(100, 80, 60)]);
        assert!(parse_shape_spec("NxN").is_err());
        assert!(parse_shape_spec("NxNxN").is_err());
    }

    #[test]
    fn algorithm_sources_resolve() {
        assert_eq!(load_algorithm_source("builtin:strassen").unwrap().rank(), 7);
        assert_eq!(
            load_algorithm_source("classical:2,3,4").unwrap().base_dims(),
            (2, 3, 4)
        );
        assert!(load_algorithm_source("classical:2,3").is_err());
        assert!(load_algorithm_source("/nonexistent/file.alg").is_err());
    }

    #[test]
    fn empty_suite_gives_header_only_csv() {
        let suite = load_suite("").unwrap();
        let records = run_suite(&suite);
        assert!(records.is_empty());
        let mut out = Vec::new();
        write_csv(&records, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("algorithm,p,q,r,steps,"));
    }

    #[test]
    fn small_suite_produces_twelve_checked_rows() {
        let toml = r#"
            [[algorithm]]
            name = "classical-kernel"
            source = "classical:2,2,2"
            steps = [0]

            [[algorithm]]
            name = "strassen"
            source = "builtin:strassen"
            steps = [1, 2, 3]

            [[shape]]
            spec = "NxNxN, N in {32,48,64}"

            [run]
            check = true
            samples = 5
        "#;
        let suite = load_suite(toml).unwrap();
        let records = run_suite(&suite);
        assert_eq!(records.len(), 12);
        for rec in &records {
            assert!(rec.error.is_none(), "{:?}", rec.error);
            assert!(rec.max_rel_error.unwrap() <= 1e-9);
            // The reported GFLOPS is recomputable from the row.
            let again = effective_gflops(rec.p, rec.q, rec.r, rec.median_seconds.unwrap());
            assert!((again - rec.effective_gflops.unwrap()).abs() < 1e-12);
        }
        let mut out = Vec::new();
        write_csv(&records, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 13);
    }

    #[test]
    fn missing_algorithm_becomes_error_row_and_suite_continues() {
        let toml = r#"
            [[algorithm]]
            name = "broken"
            source = "/nope/missing.alg"

            [[algorithm]]
            name = "ok"
            source = "classical:1,1,1"
            steps = [0]

            [[shape]]
            spec = "8x8x8"
        "#;
        let suite = load_suite(toml).unwrap();
        let records = run_suite(&suite);
        assert_eq!(records.len(), 2);
        assert!(records[0].error.is_some());
        assert!(records[1].error.is_none());
    }

    #[test]
    fn best_of_steps_reduces_rows() {
        let toml = r#"
            [[algorithm]]
            name = "strassen"
            source = "builtin:strassen"
            steps = [1, 2]

            [[shape]]
            spec = "NxNxN, N in {48}"

            [run]
            best_of_steps = true
            samples = 5
        "#;
        let suite = load_suite(toml).unwrap();
        let records = run_suite(&suite);
        assert_eq!(records.len(), 1);
        assert!(records[0].steps == 1 || records[0].steps == 2);
    }
}
