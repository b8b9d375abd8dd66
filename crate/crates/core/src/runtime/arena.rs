//! Bump-style arena for the recursion's temporary matrices, with shared
//! live-byte accounting.
//!
//! Each executing recursion path owns one arena (parallel tasks create their
//! own), sized in advance from the plan's per-level temporary footprint.
//! Allocation bumps a cursor; a node saves a mark before allocating its
//! `S_r`/`T_r` scratch and restores it once the product is computed, so
//! memory follows the addition strategy's lifetime model. All arenas report
//! live bytes into one [`MemTracker`], whose high-water mark feeds the
//! instrumentation counters.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::matrix::{MatView, MatViewMut};

/// Shared live-temporary accounting across all arenas of one execution.
#[derive(Debug, Default)]
pub struct MemTracker {
    current: AtomicU64,
    high: AtomicU64,
}

impl MemTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.high.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn high_water_bytes(&self) -> u64 {
        self.high.load(Ordering::Relaxed)
    }
}

/// A matrix-shaped slice of arena memory. Valid until the owning arena
/// restores past its allocation mark.
#[derive(Clone, Copy, Debug)]
pub struct TempBuf {
    ptr: *mut f64,
    rows: usize,
    cols: usize,
}

unsafe impl Send for TempBuf {}
unsafe impl Sync for TempBuf {}

impl TempBuf {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn view(&self) -> MatView<'_> {
        unsafe { MatView::from_raw_parts(self.ptr, self.rows, self.cols, self.cols) }
    }

    pub fn view_mut(&self) -> MatViewMut<'_> {
        unsafe { MatViewMut::from_raw_parts(self.ptr, self.rows, self.cols, self.cols) }
    }
}

/// Rollback point for [`TempArena::restore`].
#[derive(Debug, Clone, Copy)]
pub struct ArenaMark {
    chunk: usize,
    offset: usize,
    live: u64,
}

pub struct TempArena<'t> {
    tracker: &'t MemTracker,
    chunks: Vec<Box<[f64]>>,
    chunk: usize,
    offset: usize,
    /// Doubles currently allocated from this arena.
    live: u64,
}

impl<'t> TempArena<'t> {
    /// Preallocates `capacity_doubles` up front; later overflow grows by
    /// whole extra chunks so existing allocations never move.
    pub fn new(tracker: &'t MemTracker, capacity_doubles: usize) -> Self {
        let first = vec![0.0f64; capacity_doubles.max(1)].into_boxed_slice();
        TempArena {
            tracker,
            chunks: vec![first],
            chunk: 0,
            offset: 0,
            live: 0,
        }
    }

    /// Allocates a `rows x cols` matrix buffer (zeroing is the caller's
    /// concern; every plan pass assigns on first touch).
    pub fn alloc(&mut self, rows: usize, cols: usize) -> TempBuf {
        let need = rows * cols;
        loop {
            let cap = self.chunks[self.chunk].len();
            if self.offset + need <= cap {
                let ptr = unsafe { self.chunks[self.chunk].as_mut_ptr().add(self.offset) };
                self.offset += need;
                self.live += need as u64;
                self.tracker.add(need as u64 * 8);
                return TempBuf { ptr, rows, cols };
            }
            if self.chunk + 1 == self.chunks.len() {
                let grow = need.max(cap);
                self.chunks.push(vec![0.0f64; grow].into_boxed_slice());
            }
            self.chunk += 1;
            self.offset = 0;
        }
    }

    pub fn mark(&self) -> ArenaMark {
        ArenaMark {
            chunk: self.chunk,
            offset: self.offset,
            live: self.live,
        }
    }

    /// Frees everything allocated since `mark`. Buffers handed out after the
    /// mark must no longer be used.
    pub fn restore(&mut self, mark: ArenaMark) {
        debug_assert!(mark.live <= self.live);
        let freed = self.live - mark.live;
        self.tracker.sub(freed * 8);
        self.live = mark.live;
        self.chunk = mark.chunk;
        self.offset = mark.offset;
    }
}

impl Drop for TempArena<'_> {
    fn drop(&mut self) {
        self.tracker.sub(self.live * 8);
    }
}
