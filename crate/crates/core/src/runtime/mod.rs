//! Recursive execution of fast algorithms.
//!
//! One recursive step splits the (peeled) core into the base-case block
//! grid, forms the `S_r`/`T_r` linear combinations per the addition plan,
//! recurses on `M_r = S_r * T_r`, and assembles the output from the `W`
//! rows. Dynamic peeling handles arbitrary dimensions at every level: the
//! divisible core recurses and three classical strip fixups cover the rest.
//! Singleton `U`/`V` columns never materialize a temporary; their scalar is
//! piped through the recursion into the leaf kernel's `alpha`.

mod arena;
mod exec;
pub mod kernel;

pub use arena::{MemTracker, TempArena, TempBuf};
pub use kernel::{BaseKernel, BlockedKernel, NaiveKernel};

use std::sync::Arc;

use thiserror::Error;

use crate::algorithm::FastAlgorithm;
use crate::matrix::{DenseMatrix, ShapeError};
use crate::parallel::{make_schedule, resolve_workers, ParallelMode, ScheduleError};
use crate::planner::{build_plan, AdditionStrategy};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(
        "temporaries need {required} bytes (limit {limit}); the {strategy} strategy keeps \
         {slots} S/T temporaries alive per step for rank {rank}"
    )]
    Resource {
        required: u64,
        limit: u64,
        strategy: &'static str,
        slots: usize,
        rank: usize,
    },
}

/// How many recursive steps to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPolicy {
    /// Exactly this many levels (peeling still applies per level).
    Fixed(u32),
    /// Recurse while every sub-dimension stays at or above `threshold`,
    /// capped at `max_levels`.
    Cutoff { threshold: usize, max_levels: u32 },
}

impl Default for StepPolicy {
    fn default() -> Self {
        // Sequential kernels flatten out around dimension 1500; more than
        // three steps has not shown further benefit.
        StepPolicy::Cutoff {
            threshold: 1500,
            max_levels: 3,
        }
    }
}

/// Largest `L` such that after `L` splits every sub-dimension is still at
/// least `threshold`, capped at `max_levels`. Sub-dimensions shrink by
/// floored division, matching what peeling leaves for the core.
pub fn decide_steps(
    dims: (usize, usize, usize),
    alg: &FastAlgorithm,
    threshold: usize,
    max_levels: u32,
) -> u32 {
    assert!(threshold >= 1);
    let (m, k, n) = alg.base_dims();
    let (mut p, mut q, mut r) = dims;
    let mut levels = 0;
    while levels < max_levels {
        let next = (p / m, q / k, r / n);
        if next.0 < threshold || next.1 < threshold || next.2 < threshold {
            break;
        }
        (p, q, r) = next;
        levels += 1;
    }
    levels
}

/// The classical strip multiplies that complete a peeled step; each entry
/// holds the `(rows, inner, cols)` of one classical multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StripJobs {
    /// `C_core += A[:, Q'..] * B[Q'.., :R']`: rank update of the core.
    pub rank_update: Option<(usize, usize, usize)>,
    /// Last `P - P'` rows of `C`, full inner dimension.
    pub bottom_rows: Option<(usize, usize, usize)>,
    /// Last `R - R'` columns of the first `P'` rows.
    pub right_cols: Option<(usize, usize, usize)>,
}

/// Splits a `(P, Q, R)` problem over base case `(M, K, N)` into the largest
/// divisible core plus classical strip jobs. The union of core and strips
/// covers every output entry exactly once (the rank update accumulates onto
/// the core region).
pub fn dynamic_peel(
    dims: (usize, usize, usize),
    base: (usize, usize, usize),
) -> ((usize, usize, usize), StripJobs) {
    let (p, q, r) = dims;
    let (m, k, n) = base;
    let core = (m * (p / m), k * (q / k), n * (r / n));
    let (cp, cq, cr) = core;
    let mut jobs = StripJobs::default();
    if cp > 0 && cr > 0 && q > cq {
        jobs.rank_update = Some((cp, q - cq, cr));
    }
    if p > cp {
        jobs.bottom_rows = Some((p - cp, q, r));
    }
    if r > cr && cp > 0 {
        jobs.right_cols = Some((cp, q, r - cr));
    }
    (core, jobs)
}

/// Execution knobs for [`fast_multiply`].
#[derive(Clone)]
pub struct ExecutionConfig {
    pub steps: StepPolicy,
    pub strategy: AdditionStrategy,
    pub cse: bool,
    pub mode: ParallelMode,
    /// 0 resolves via `FASTMM_WORKERS` or hardware concurrency.
    pub workers: usize,
    /// APA instantiation parameter; defaults to sqrt(machine epsilon) for
    /// APA algorithms.
    pub lambda: Option<f64>,
    /// Refuse to run when predicted temporary memory exceeds this.
    pub temp_limit_bytes: Option<u64>,
    pub kernel: Arc<dyn BaseKernel>,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig {
            steps: StepPolicy::default(),
            strategy: AdditionStrategy::WriteOnce,
            cse: false,
            mode: ParallelMode::Sequential,
            workers: 1,
            lambda: None,
            temp_limit_bytes: None,
            kernel: Arc::new(BlockedKernel),
        }
    }
}

impl std::fmt::Debug for ExecutionConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecutionConfig")
            .field("steps", &self.steps)
            .field("strategy", &self.strategy)
            .field("cse", &self.cse)
            .field("mode", &self.mode)
            .field("workers", &self.workers)
            .field("lambda", &self.lambda)
            .field("kernel", &self.kernel.name())
            .finish()
    }
}

impl ExecutionConfig {
    pub fn with_steps(mut self, levels: u32) -> Self {
        self.steps = StepPolicy::Fixed(levels);
        self
    }

    pub fn with_strategy(mut self, strategy: AdditionStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_mode(mut self, mode: ParallelMode, workers: usize) -> Self {
        self.mode = mode;
        self.workers = workers;
        self
    }
}

/// Instrumentation gathered by one [`fast_multiply`] call.
///
/// Submatrix read/write counts follow the per-strategy accounting of the
/// addition plan (axpy calls for pairwise, fused passes for write-once,
/// operand streams for streaming) and are attributed to the recursion level
/// performing them. `kernel_flops + element_additions` is the total scalar
/// operation count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    /// Base-case multiplies reached through recursion (`R^L` on divisible
    /// problems).
    pub leaf_multiplies: u64,
    /// Classical fixup multiplies performed by dynamic peeling.
    pub peel_fixup_multiplies: u64,
    /// Scalar multiply/add operations inside kernel calls (leaves and
    /// peel fixups).
    pub kernel_flops: u64,
    /// Scalar additions performed by addition passes (`terms - 1` per chain
    /// per element).
    pub element_additions: u64,
    /// Submatrix reads per recursion level (index = level).
    pub submatrix_reads: Vec<u64>,
    /// Submatrix writes per recursion level.
    pub submatrix_writes: Vec<u64>,
    /// High-water mark of live temporary memory.
    pub temp_bytes_high_water: u64,
    /// Most task bodies ever active at once.
    pub worker_high_water: usize,
}

impl Counters {
    pub(crate) fn add_traffic(&mut self, level: usize, reads: u64, writes: u64) {
        if self.submatrix_reads.len() <= level {
            self.submatrix_reads.resize(level + 1, 0);
            self.submatrix_writes.resize(level + 1, 0);
        }
        self.submatrix_reads[level] += reads;
        self.submatrix_writes[level] += writes;
    }

    pub fn total_reads(&self) -> u64 {
        self.submatrix_reads.iter().sum()
    }

    pub fn total_writes(&self) -> u64 {
        self.submatrix_writes.iter().sum()
    }

    /// Total scalar operations: kernel flops plus addition-pass additions.
    pub fn total_element_ops(&self) -> u64 {
        self.kernel_flops + self.element_additions
    }

    pub fn merge(&mut self, other: &Counters) {
        self.leaf_multiplies += other.leaf_multiplies;
        self.peel_fixup_multiplies += other.peel_fixup_multiplies;
        self.kernel_flops += other.kernel_flops;
        self.element_additions += other.element_additions;
        for (level, (r, w)) in other
            .submatrix_reads
            .iter()
            .zip(&other.submatrix_writes)
            .enumerate()
        {
            self.add_traffic(level, *r, *w);
        }
        self.temp_bytes_high_water = self.temp_bytes_high_water.max(other.temp_bytes_high_water);
        self.worker_high_water = self.worker_high_water.max(other.worker_high_water);
    }

    /// Equality of the deterministic arithmetic/traffic counters; memory and
    /// worker high-water marks legitimately vary across modes.
    pub fn same_arithmetic(&self, other: &Counters) -> bool {
        self.leaf_multiplies == other.leaf_multiplies
            && self.peel_fixup_multiplies == other.peel_fixup_multiplies
            && self.kernel_flops == other.kernel_flops
            && self.element_additions == other.element_additions
            && self.submatrix_reads == other.submatrix_reads
            && self.submatrix_writes == other.submatrix_writes
    }
}

/// Multiplies `a * b` with `alg` under `config`.
pub fn fast_multiply(
    a: &DenseMatrix,
    b: &DenseMatrix,
    alg: &FastAlgorithm,
    config: &ExecutionConfig,
) -> Result<(DenseMatrix, Counters), RuntimeError> {
    if a.cols() != b.rows() {
        return Err(ShapeError::new("fast_multiply inner dims", a.cols(), b.rows()).into());
    }
    let dims = (a.rows(), a.cols(), b.cols());
    let levels = match config.steps {
        StepPolicy::Fixed(l) => l,
        StepPolicy::Cutoff {
            threshold,
            max_levels,
        } => decide_steps(dims, alg, threshold, max_levels),
    };
    let workers = match config.mode {
        ParallelMode::Sequential => 1,
        _ => resolve_workers(config.workers),
    };
    // BFS/HYBRID need a recursion tree to schedule tasks over.
    let effective_mode = if levels == 0 && matches!(config.mode, ParallelMode::Bfs | ParallelMode::Hybrid)
    {
        ParallelMode::Dfs
    } else {
        config.mode
    };
    let schedule = make_schedule(alg.rank(), levels, workers, effective_mode)?;
    let plan = build_plan(alg, config.strategy, config.cse);
    let lambda = alg.effective_lambda(config.lambda);
    exec::run(a, b, alg, &plan, lambda, levels, schedule, config)
}

/// Classical multiply with the default blocked kernel:
/// `C = alpha * A * B`, or `C += alpha * A * B` when `accumulate` is set.
pub fn classical_base_multiply(
    a: crate::matrix::MatView,
    b: crate::matrix::MatView,
    c: crate::matrix::MatViewMut,
    alpha: f64,
    accumulate: bool,
) {
    BlockedKernel.multiply(a, b, c, alpha, accumulate);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::strassen;

    #[test]
    fn decide_steps_examples() {
        let s = strassen();
        assert_eq!(decide_steps((8192, 8192, 8192), &s, 1500, 3), 2);
        assert_eq!(decide_steps((100, 100, 100), &s, 1500, 3), 0);
        assert_eq!(decide_steps((8192, 8192, 8192), &s, 1, 3), 3);
    }

    #[test]
    fn peel_divisible_has_no_strips() {
        let (core, jobs) = dynamic_peel((8, 8, 8), (2, 2, 2));
        assert_eq!(core, (8, 8, 8));
        assert_eq!(jobs, StripJobs::default());
    }

    #[test]
    fn peel_odd_dims() {
        let (core, jobs) = dynamic_peel((5, 5, 5), (2, 2, 2));
        assert_eq!(core, (4, 4, 4));
        assert_eq!(jobs.rank_update, Some((4, 1, 4)));
        assert_eq!(jobs.bottom_rows, Some((1, 5, 5)));
        assert_eq!(jobs.right_cols, Some((4, 5, 1)));
    }

    #[test]
    fn peel_mixed_base() {
        let (core, jobs) = dynamic_peel((7, 11, 13), (3, 2, 3));
        assert_eq!(core, (6, 10, 12));
        assert_eq!(jobs.rank_update, Some((6, 1, 12)));
        assert_eq!(jobs.bottom_rows, Some((1, 11, 13)));
        assert_eq!(jobs.right_cols, Some((6, 11, 1)));
    }

    #[test]
    fn peel_smaller_than_base() {
        let (core, jobs) = dynamic_peel((1, 5, 5), (2, 2, 2));
        assert_eq!(core, (0, 4, 4));
        assert_eq!(jobs.rank_update, None);
        assert_eq!(jobs.bottom_rows, Some((1, 5, 5)));
        assert_eq!(jobs.right_cols, None);
    }
}
