//! Data-driven fast matrix multiplication.
//!
//! Recursive bilinear (Strassen-like) algorithms given as low-rank tensor
//! decompositions `<U,V,W>`: a coefficient file format with exact-rational
//! validation, base-case transforms and composition, an addition planner
//! with optional common-subexpression elimination, a recursive runtime with
//! dynamic peeling and three parallel execution policies, an ALS search for
//! new algorithms, and an effective-GFLOPS benchmark harness.

pub mod algorithm;
pub mod bench;
pub mod coeff;
pub mod matrix;
pub mod parallel;
pub mod planner;
pub mod runtime;
pub mod search;
pub mod tensor;

pub use algorithm::{
    classical_algorithm, compose, equivalence_transform, flop_count, parse_algorithm,
    permute_cyclic, permute_transpose, serialize_algorithm, stats, strassen, validate,
    AlgorithmStats, EquivalenceSpec, Exactness, FastAlgorithm, RationalMatrix,
};
pub use bench::{
    effective_gflops, load_algorithm_source, load_suite, parse_shape_spec, run_suite, write_csv,
    BenchRecord, SuiteSpec,
};
pub use coeff::{Coeff, CoeffMatrix};
pub use matrix::{DenseMatrix, MatView, MatViewMut, ShapeError};
pub use parallel::{make_schedule, resolve_workers, ParallelMode, SchedulePlan};
pub use planner::{build_plan, cost_delta_cse, eliminate_cse, AdditionPlan, AdditionStrategy};
pub use runtime::{
    classical_base_multiply, decide_steps, dynamic_peel, fast_multiply, BaseKernel, BlockedKernel,
    Counters, ExecutionConfig, NaiveKernel, RuntimeError, StepPolicy,
};
pub use search::{als_step, search, SearchConfig, SearchOutcome, Tensor3};
pub use tensor::MatMulTensor;
