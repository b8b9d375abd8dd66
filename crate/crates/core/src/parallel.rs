//! Parallel execution policies over the recursion tree.
//!
//! Three modes share one worker pool of exactly `P` threads:
//!
//! * DFS    - leaves run in sequence; every addition pass and every base-case
//!   multiply is split across all `P` workers.
//! * BFS    - each leaf multiply is an independent task (with its operand
//!   additions), scheduled over the pool with per-level barriers; the
//!   first-level output assembly uses all workers.
//! * HYBRID - task parallelism for the first `R^L - (R^L mod P)` leaves,
//!   one synchronization point, then the remaining `R^L mod P` leaves each
//!   use all `P` workers.
//!
//! An [`ActivityProbe`] counts concurrently active task bodies so tests can
//! assert that no schedule oversubscribes the pool.

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

/// Execution policy for the recursion tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParallelMode {
    Sequential,
    Dfs,
    Bfs,
    Hybrid,
}

impl ParallelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParallelMode::Sequential => "seq",
            ParallelMode::Dfs => "dfs",
            ParallelMode::Bfs => "bfs",
            ParallelMode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for ParallelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq" | "sequential" => Ok(ParallelMode::Sequential),
            "dfs" => Ok(ParallelMode::Dfs),
            "bfs" => Ok(ParallelMode::Bfs),
            "hybrid" => Ok(ParallelMode::Hybrid),
            _ => Err(format!("unknown parallel mode {s:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("{mode:?} scheduling requires at least one recursion level")]
    NeedsRecursion { mode: ParallelMode },
    #[error("worker count must be at least 1")]
    NoWorkers,
}

/// How the `R^L` leaf multiplies are divided between task parallelism and
/// all-worker execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePlan {
    pub mode: ParallelMode,
    pub depth: u32,
    pub workers: usize,
    pub total_leaves: u64,
    /// Leaves executed as independent tasks.
    pub bfs_count: u64,
    /// Leaves executed with all workers after the tasks complete.
    pub dfs_count: u64,
}

/// Scheduling arithmetic for `rank^levels` leaves over `workers` threads.
pub fn make_schedule(
    rank: usize,
    levels: u32,
    workers: usize,
    mode: ParallelMode,
) -> Result<SchedulePlan, ScheduleError> {
    if workers == 0 {
        return Err(ScheduleError::NoWorkers);
    }
    if levels == 0 && matches!(mode, ParallelMode::Bfs | ParallelMode::Hybrid) {
        return Err(ScheduleError::NeedsRecursion { mode });
    }
    let total_leaves = (rank as u64).pow(levels);
    let (bfs_count, dfs_count) = match mode {
        ParallelMode::Sequential | ParallelMode::Dfs => (0, total_leaves),
        ParallelMode::Bfs => (total_leaves, 0),
        ParallelMode::Hybrid => {
            if workers == 1 {
                // Degenerate: everything on the single worker.
                (0, total_leaves)
            } else {
                let rem = total_leaves % workers as u64;
                (total_leaves - rem, rem)
            }
        }
    };
    Ok(SchedulePlan {
        mode,
        depth: levels,
        workers,
        total_leaves,
        bfs_count,
        dfs_count,
    })
}

/// High-water counter of concurrently active worker threads.
///
/// A worker that blocks at a scope join and steals nested tasks is still one
/// thread, so activity nests per thread: only the outermost guard on a
/// thread counts it active.
#[derive(Debug, Default)]
pub struct ActivityProbe {
    active: AtomicUsize,
    high: AtomicUsize,
}

thread_local! {
    static PROBE_DEPTH: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

impl ActivityProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks the current thread active until the guard drops.
    pub fn enter(&self) -> ProbeGuard<'_> {
        let depth = PROBE_DEPTH.with(|d| {
            let v = d.get();
            d.set(v + 1);
            v
        });
        if depth == 0 {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.high.fetch_max(now, Ordering::SeqCst);
        }
        ProbeGuard { probe: self }
    }

    pub fn high_water(&self) -> usize {
        self.high.load(Ordering::SeqCst)
    }
}

pub struct ProbeGuard<'a> {
    probe: &'a ActivityProbe,
}

impl Drop for ProbeGuard<'_> {
    fn drop(&mut self) {
        let depth = PROBE_DEPTH.with(|d| {
            let v = d.get() - 1;
            d.set(v);
            v
        });
        if depth == 0 {
            self.probe.active.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "FASTMM_WORKERS";

/// Resolves a worker count: explicit value, else `FASTMM_WORKERS`, else
/// hardware concurrency.
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
