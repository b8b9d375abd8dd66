//! `fastmm`: validate, transform, execute, search, and benchmark fast
//! matrix multiplication algorithms given as `<U,V,W>` coefficient files.
//!
//! Algorithm arguments accept a file path, `builtin:strassen`, or
//! `classical:M,K,N`. Exit code is 0 on success, 1 on validation failure or
//! runtime error, 2 on usage errors.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fastmm_core::algorithm::{
    compose, equivalence_transform, permute_cyclic, permute_transpose,
    serialize_algorithm, stats, validate, EquivalenceSpec, FastAlgorithm, RationalMatrix,
};
use fastmm_core::bench::{load_algorithm_source, load_suite, run_suite, write_csv};
use fastmm_core::matrix::DenseMatrix;
use fastmm_core::planner::{eliminate_cse, AdditionStrategy, Phase};
use fastmm_core::runtime::{fast_multiply, BlockedKernel, ExecutionConfig, StepPolicy};
use fastmm_core::runtime::BaseKernel;
use fastmm_core::search::{search, SearchConfig};
use fastmm_core::{effective_gflops, ParallelMode};

#[derive(Parser)]
#[command(name = "fastmm", version, about = "Fast (Strassen-like) matrix multiplication toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that an algorithm reconstructs the matmul tensor.
    Validate {
        /// Coefficient file, builtin:strassen, or classical:M,K,N.
        algorithm: String,
        /// Residual tolerance (exact algorithms must reach exactly zero).
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        /// APA parameter for lambda-tagged algorithms.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Print rank, nonzeros, additions, speedup per step, and exponent.
    Stats { algorithm: String },
    /// Apply a base-case permutation or equivalence transform.
    Transform(TransformArgs),
    /// Compose two algorithms into one for the product base case.
    Compose {
        first: String,
        second: String,
        /// Write the composed algorithm here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply random matrices with an algorithm and report performance.
    Multiply(MultiplyArgs),
    /// Run a benchmark suite and emit CSV.
    Bench {
        /// Suite description (TOML).
        #[arg(long)]
        suite: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report greedy length-two common-subexpression elimination savings.
    Cse { algorithm: String },
    /// Search for algorithms by regularized alternating least squares.
    Search(SearchArgs),
}

#[derive(Args)]
struct TransformArgs {
    algorithm: String,
    /// cyclic, transpose, permcols, scale, or basis.
    #[arg(long)]
    op: String,
    /// Column permutation for permcols, e.g. "3,1,4,0,6,2,5".
    #[arg(long)]
    perm: Option<String>,
    /// Column scales for scale, rationals like "2,1/2,-1" (dz is derived).
    #[arg(long)]
    dx: Option<String>,
    #[arg(long)]
    dy: Option<String>,
    /// Seed for randomly drawn permutations/scales/bases.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MultiplyArgs {
    #[arg(long)]
    alg: String,
    /// Problem dims "P,Q,R".
    #[arg(long)]
    dims: String,
    /// Recursion depth; omitted = cutoff rule (threshold 1500, max 3).
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long, default_value = "writeonce")]
    strategy: AdditionStrategy,
    #[arg(long)]
    cse: bool,
    #[arg(long, default_value = "seq")]
    mode: ParallelMode,
    /// Worker count; 0 uses FASTMM_WORKERS or hardware concurrency.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// APA parameter.
    #[arg(long)]
    lambda: Option<f64>,
    /// Compare against the classical kernel on the same data.
    #[arg(long)]
    check: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Target "M,K,N,R".
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 20)]
    starts: usize,
    #[arg(long, default_value_t = 500)]
    sweeps: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// Directory for candidate coefficient files.
    #[arg(long, default_value = "candidates")]
    out_dir: PathBuf,
    /// JSON-lines log of (start, iteration, residual).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn load(source: &str) -> Result<FastAlgorithm> {
    Ok(load_algorithm_source(source)?)
}

fn emit_algorithm(alg: &FastAlgorithm, out: &Option<PathBuf>) -> Result<()> {
    let text = serialize_algorithm(alg);
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate {
            algorithm,
            tolerance,
            lambda,
        } => {
            let alg = load(&algorithm)?;
            let report = validate(&alg, tolerance, lambda);
            let (m, k, n) = alg.base_dims();
            println!(
                "<{m},{k},{n}> rank {}: {} (max residual {:.3e}{}, {} check)",
                alg.rank(),
                if report.valid { "VALID" } else { "INVALID" },
                report.max_residual,
                if report.exact_zero { ", exactly zero" } else { "" },
                match report.method {
                    fastmm_core::algorithm::ValidationMethod::Dense => "dense",
                    fastmm_core::algorithm::ValidationMethod::Randomized => "randomized",
                }
            );
            Ok(if report.valid { 0 } else { 1 })
        }
        Command::Stats { algorithm } => {
            let alg = load(&algorithm)?;
            let s = stats(&alg);
            let (m, k, n) = alg.base_dims();
            println!("base case        <{m},{k},{n}>");
            println!("rank             {}", s.rank);
            println!("classical count  {}", s.classical_multiplies);
            println!("speedup per step {:.1}%", s.speedup_per_step * 100.0);
            println!(
                "nnz              U {} + V {} + W {} = {}",
                s.nnz_u, s.nnz_v, s.nnz_w, s.nnz_total
            );
            println!("additions        {}", s.addition_count);
            match s.exponent {
                Some(e) => println!("exponent         {e:.6}"),
                None => println!("exponent         n/a (rectangular base case)"),
            }
            Ok(0)
        }
        Command::Transform(args) => {
            let alg = load(&args.algorithm)?;
            let transformed = apply_transform(&alg, &args)?;
            emit_algorithm(&transformed, &args.out)?;
            Ok(0)
        }
        Command::Compose { first, second, out } => {
            let a = load(&first)?;
            let b = load(&second)?;
            let composed = compose(&a, &b)?;
            emit_algorithm(&composed, &out)?;
            Ok(0)
        }
        Command::Multiply(args) => run_multiply(args),
        Command::Bench { suite, out } => {
            let text = std::fs::read_to_string(&suite)
                .with_context(|| format!("reading {}", suite.display()))?;
            let spec = load_suite(&text)?;
            let records = run_suite(&spec);
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    write_csv(&records, file)?;
                    eprintln!("{} rows -> {}", records.len(), path.display());
                }
                None => write_csv(&records, std::io::stdout().lock())?,
            }
            Ok(0)
        }
        Command::Cse { algorithm } => {
            let alg = load(&algorithm)?;
            let s_phase = Phase::from_factor_columns(alg.u());
            let t_phase = Phase::from_factor_columns(alg.v());
            let original = s_phase.addition_count() + t_phase.addition_count();
            let (s2, rs) = eliminate_cse(&s_phase);
            let (t2, rt) = eliminate_cse(&t_phase);
            let after = s2.addition_count() + t2.addition_count();
            let eliminated = rs.subexpressions_eliminated + rt.subexpressions_eliminated;
            let saved = rs.additions_saved + rt.additions_saved;
            let (m, k, n) = alg.base_dims();
            println!("base case                 <{m},{k},{n}> rank {}", alg.rank());
            println!("original additions (S,T)  {original}");
            println!("after CSE                 {after}");
            println!("subexpressions eliminated {eliminated}");
            println!("additions saved           {saved}");
            Ok(0)
        }
        Command::Search(args) => run_search(args),
    }
}

/// Accepts "p" or "p/q".
fn parse_rational(token: &str) -> Result<BigRational> {
    let int = |t: &str| -> Result<i64> { t.trim().parse().context("rational entry") };
    Ok(match token.split_once('/') {
        Some((p, q)) => BigRational::new(int(p)?.into(), int(q)?.into()),
        None => BigRational::from_integer(int(token)?.into()),
    })
}

fn parse_rational_list(text: &str, expected: usize) -> Result<Vec<BigRational>> {
    let values: Vec<BigRational> = text
        .split(',')
        .map(parse_rational)
        .collect::<Result<_>>()?;
    if values.len() != expected {
        bail!("expected {expected} entries, got {}", values.len());
    }
    Ok(values)
}

fn apply_transform(alg: &FastAlgorithm, args: &TransformArgs) -> Result<FastAlgorithm> {
    let rank = alg.rank();
    let (m, k, n) = alg.base_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(1));
    match args.op.as_str() {
        "cyclic" => Ok(permute_cyclic(alg)),
        "transpose" => Ok(permute_transpose(alg)),
        "permcols" => {
            let perm: Vec<usize> = match &args.perm {
                Some(p) => p
                    .split(',')
                    .map(|t| t.trim().parse().context("permutation entry"))
                    .collect::<Result<_>>()?,
                None => {
                    let mut p: Vec<usize> = (0..rank).collect();
                    p.shuffle(&mut rng);
                    p
                }
            };
            Ok(equivalence_transform(alg, &EquivalenceSpec::ColumnPermutation(perm))?)
        }
        "scale" => {
            let (dx, dy) = match (&args.dx, &args.dy) {
                (Some(dx), Some(dy)) => (
                    parse_rational_list(dx, rank)?,
                    parse_rational_list(dy, rank)?,
                ),
                _ => {
                    let pool: [BigRational; 4] = [
                        BigRational::from_integer(2.into()),
                        BigRational::new(1.into(), 2.into()),
                        BigRational::from_integer((-1).into()),
                        BigRational::from_integer(1.into()),
                    ];
                    let draw = |rng: &mut ChaCha8Rng| -> Vec<BigRational> {
                        (0..rank).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
                    };
                    (draw(&mut rng), draw(&mut rng))
                }
            };
            if dx.iter().chain(&dy).any(|v| v == &BigRational::from_integer(0.into())) {
                bail!("scale entries must be nonzero");
            }
            let dz: Vec<BigRational> = dx
                .iter()
                .zip(&dy)
                .map(|(x, y)| BigRational::from_integer(1.into()) / (x * y))
                .collect();
            Ok(equivalence_transform(alg, &EquivalenceSpec::DiagonalScale { dx, dy, dz })?)
        }
        "basis" => {
            let random_basis = |rng: &mut ChaCha8Rng, dim: usize| loop {
                let mat = RationalMatrix::from_fn(dim, dim, |_, _| {
                    BigRational::from_integer(rng.random_range(-2..=2i64).into())
                });
                if mat.inverse().is_some() {
                    return mat;
                }
            };
            let x = random_basis(&mut rng, m);
            let y = random_basis(&mut rng, k);
            let z = random_basis(&mut rng, n);
            Ok(equivalence_transform(alg, &EquivalenceSpec::BasisChange { x, y, z })?)
        }
        other => bail!("unknown transform op {other:?} (cyclic|transpose|permcols|scale|basis)"),
    }
}

fn run_multiply(args: MultiplyArgs) -> Result<i32> {
    let alg = load(&args.alg)?;
    let dims: Vec<usize> = args
        .dims
        .split(',')
        .map(|t| t.trim().parse().context("dims"))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims.contains(&0) {
        bail!("--dims needs three positive integers P,Q,R");
    }
    let (p, q, r) = (dims[0], dims[1], dims[2]);
    let config = ExecutionConfig {
        steps: match args.steps {
            Some(l) => StepPolicy::Fixed(l),
            None => StepPolicy::default(),
        },
        strategy: args.strategy,
        cse: args.cse,
        mode: args.mode,
        workers: args.workers,
        lambda: args.lambda,
        ..ExecutionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let a = DenseMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
    let b = DenseMatrix::from_fn(q, r, |_, _| rng.random_range(-1.0..1.0));
    let start = Instant::now();
    let (c, counters) = fast_multiply(&a, &b, &alg, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    println!("dims             {p}x{q}x{r}");
    println!("time             {seconds:.6} s");
    println!("effective GFLOPS {:.3}", effective_gflops(p, q, r, seconds));
    println!("leaf multiplies  {}", counters.leaf_multiplies);
    println!("peel fixups      {}", counters.peel_fixup_multiplies);
    println!("element adds     {}", counters.element_additions);
    println!(
        "submatrix r/w    {} / {}",
        counters.total_reads(),
        counters.total_writes()
    );
    println!("temp high-water  {} bytes", counters.temp_bytes_high_water);
    println!("workers active   {}", counters.worker_high_water);
    if args.check {
        let mut baseline = DenseMatrix::zeros(p, r);
        BlockedKernel.multiply(a.view(), b.view(), baseline.view_mut(), 1.0, false);
        let err = c.rel_frobenius_error(&baseline);
        println!("max rel error    {err:.3e}");
        if err > 1e-9 {
            println!("correctness check FAILED");
            return Ok(1);
        }
    }
    Ok(0)
}

fn run_search(args: SearchArgs) -> Result<i32> {
    let target: Vec<usize> = args
        .target
        .split(',')
        .map(|t| t.trim().parse().context("target"))
        .collect::<Result<_>>()?;
    if target.len() != 4 {
        bail!("--target needs M,K,N,R");
    }
    let mut config = SearchConfig::new(target[0], target[1], target[2], target[3]);
    config.starts = args.starts;
    config.max_sweeps = args.sweeps;
    config.seed = args.seed;
    let outcome = search(&config)?;

    if let Some(path) = &args.log {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        outcome.write_log(std::io::BufWriter::new(file))?;
    }
    if outcome.candidates.is_empty() {
        println!(
            "no candidates below residual {:.1e} over {} starts",
            config.candidate_tol, config.starts
        );
        return Ok(0);
    }
    std::fs::create_dir_all(&args.out_dir)?;
    for cand in &outcome.candidates {
        let kind = if cand.exact { "exact" } else { "numeric" };
        let name = format!(
            "{}x{}x{}_r{}_start{}_{}.alg",
            target[0], target[1], target[2], target[3], cand.start, kind
        );
        let path = args.out_dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        file.write_all(serialize_algorithm(&cand.algorithm).as_bytes())?;
        println!(
            "start {:3}  residual {:.3e}  {}  -> {}",
            cand.start,
            cand.residual,
            kind,
            path.display()
        );
    }
    Ok(0)
}
