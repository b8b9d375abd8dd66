#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

//! The recursive executor. One set of pass primitives implements all three
//! addition strategies; sequential, DFS, BFS, and hybrid walkers drive them
//! over the recursion tree.
//!
//! Counter semantics: submatrix reads/writes are incremented as each pass
//! executes, using the owning strategy's accounting (a pairwise axpy is two
//! reads and a write, a fused write-once pass is one read per term and one
//! write, a streaming pass reads each operand stream once and writes each
//! materialized target once). Piped singleton chains count the one read
//! their operand contributes; the recursion consumes the block directly.

use std::sync::Mutex;

use crate::matrix::{DenseMatrix, MatView, MatViewMut};
use crate::parallel::{ActivityProbe, ParallelMode, SchedulePlan};
use crate::planner::{AdditionPlan, AdditionStrategy, Operand};

use super::arena::{MemTracker, TempArena, TempBuf};
use super::kernel::BaseKernel;
use super::{dynamic_peel, Counters, ExecutionConfig, RuntimeError};

// ---------------------------------------------------------------------------
// Compiled plan: rational chains rendered to f64 at the configured lambda.

#[derive(Debug, Clone)]
struct CompiledChain {
    terms: Vec<(Operand, f64)>,
}

#[derive(Debug, Clone)]
enum CompiledSlot {
    /// Singleton chain: no temporary, the scalar rides into the recursion.
    Pipe { op: Operand, scale: f64 },
    Chain(CompiledChain),
}

#[derive(Debug)]
struct OperandPhase {
    aux: Vec<CompiledChain>,
    slots: Vec<CompiledSlot>,
    num_inputs: usize,
}

#[derive(Debug)]
struct OutputPhase {
    aux: Vec<CompiledChain>,
    chains: Vec<CompiledChain>,
    num_inputs: usize,
}

#[derive(Debug)]
pub(super) struct CompiledPlan {
    m: usize,
    k: usize,
    n: usize,
    rank: usize,
    strategy: AdditionStrategy,
    s: OperandPhase,
    t: OperandPhase,
    c: OutputPhase,
}

fn compile_chain(chain: &crate::planner::AdditionChain, lambda: f64) -> CompiledChain {
    CompiledChain {
        terms: chain
            .terms
            .iter()
            .map(|(op, c)| (*op, c.to_f64(lambda)))
            .collect(),
    }
}

fn compile_operand_phase(
    phase: &crate::planner::Phase,
    lambda: f64,
    pipe_singletons: bool,
) -> OperandPhase {
    let slots = phase
        .outputs
        .iter()
        .map(|chain| {
            if pipe_singletons && chain.is_singleton() {
                let (op, c) = &chain.terms[0];
                CompiledSlot::Pipe {
                    op: *op,
                    scale: c.to_f64(lambda),
                }
            } else {
                CompiledSlot::Chain(compile_chain(chain, lambda))
            }
        })
        .collect();
    OperandPhase {
        aux: phase.aux.iter().map(|c| compile_chain(c, lambda)).collect(),
        slots,
        num_inputs: phase.num_inputs,
    }
}

fn compile(plan: &AdditionPlan, lambda: f64) -> CompiledPlan {
    let pipe = plan.strategy != AdditionStrategy::Pairwise;
    CompiledPlan {
        m: plan.base_dims.0,
        k: plan.base_dims.1,
        n: plan.base_dims.2,
        rank: plan.rank,
        strategy: plan.strategy,
        s: compile_operand_phase(&plan.s_phase, lambda, pipe),
        t: compile_operand_phase(&plan.t_phase, lambda, pipe),
        c: OutputPhase {
            aux: plan.c_phase.aux.iter().map(|c| compile_chain(c, lambda)).collect(),
            chains: plan
                .c_phase
                .outputs
                .iter()
                .map(|c| compile_chain(c, lambda))
                .collect(),
            num_inputs: plan.c_phase.num_inputs,
        },
    }
}

// ---------------------------------------------------------------------------
// Execution context and temp-memory sizing.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WalkMode {
    /// Plain sequential recursion (also the body of a BFS task).
    Seq,
    /// Sequential recursion order, every pass and leaf split over workers.
    Par,
    /// Spawn child subtrees as tasks at every internal node.
    BfsTasks,
}

struct Ctx<'a> {
    plan: &'a CompiledPlan,
    kernel: &'a dyn BaseKernel,
    levels: u32,
    schedule: SchedulePlan,
    pool: Option<&'a rayon::ThreadPool>,
    workers: usize,
    probe: &'a ActivityProbe,
    tracker: &'a MemTracker,
    counters: Mutex<Counters>,
}

impl Ctx<'_> {
    fn traffic(&self, depth: usize, reads: u64, writes: u64, additions: u64) {
        let mut c = self.counters.lock().unwrap();
        c.add_traffic(depth, reads, writes);
        c.element_additions += additions;
    }

    fn kernel_call(&self, m: usize, q: usize, n: usize, accumulate: bool, fixup: bool) {
        let (m, q, n) = (m as u64, q as u64, n as u64);
        // 2mqn - mn scalar ops; accumulation keeps the mn merge additions.
        let flops = if accumulate {
            2 * m * q * n
        } else {
            (2 * m * q * n).saturating_sub(m * n)
        };
        let mut c = self.counters.lock().unwrap();
        c.kernel_flops += flops;
        if fixup {
            c.peel_fixup_multiplies += 1;
        } else {
            c.leaf_multiplies += 1;
        }
    }
}

/// Temporary doubles one node allocates, given its block dims.
fn node_temp_doubles(plan: &CompiledPlan, bp: usize, bq: usize, br: usize, all_slots: bool) -> u64 {
    let r = plan.rank as u64;
    let s_block = (bp * bq) as u64;
    let t_block = (bq * br) as u64;
    let m_block = (bp * br) as u64;
    let mat = |phase: &OperandPhase| {
        phase
            .slots
            .iter()
            .filter(|s| matches!(s, CompiledSlot::Chain(_)))
            .count() as u64
    };
    let st = if plan.strategy == AdditionStrategy::Streaming || all_slots {
        mat(&plan.s) * s_block + mat(&plan.t) * t_block
    } else {
        s_block + t_block
    };
    r * m_block + st + plan.s.aux.len() as u64 * s_block + plan.t.aux.len() as u64 * t_block
}

/// Temp doubles along one sequential recursion path.
fn path_temp_doubles(plan: &CompiledPlan, level: u32, p: usize, q: usize, r: usize) -> u64 {
    if level == 0 {
        return 0;
    }
    let core = (
        plan.m * (p / plan.m),
        plan.k * (q / plan.k),
        plan.n * (r / plan.n),
    );
    if core.0 == 0 || core.1 == 0 || core.2 == 0 {
        return 0;
    }
    let (bp, bq, br) = (core.0 / plan.m, core.1 / plan.k, core.2 / plan.n);
    node_temp_doubles(plan, bp, bq, br, false) + path_temp_doubles(plan, level - 1, bp, bq, br)
}

/// Temp doubles if the whole tree ran concurrently (BFS bound).
fn tree_temp_doubles(plan: &CompiledPlan, level: u32, p: usize, q: usize, r: usize) -> u64 {
    if level == 0 {
        return 0;
    }
    let core = (
        plan.m * (p / plan.m),
        plan.k * (q / plan.k),
        plan.n * (r / plan.n),
    );
    if core.0 == 0 || core.1 == 0 || core.2 == 0 {
        return 0;
    }
    let (bp, bq, br) = (core.0 / plan.m, core.1 / plan.k, core.2 / plan.n);
    node_temp_doubles(plan, bp, bq, br, true)
        + plan.rank as u64 * tree_temp_doubles(plan, level - 1, bp, bq, br)
}

// ---------------------------------------------------------------------------
// Operand references: a piped view with scale, or a materialized buffer.

#[derive(Clone, Copy)]
enum OpRef<'a> {
    Mat(MatView<'a>, f64),
    Buf(TempBuf),
}

impl<'a> OpRef<'a> {
    fn view(&self) -> MatView<'_> {
        match self {
            OpRef::Mat(v, _) => *v,
            OpRef::Buf(b) => b.view(),
        }
    }

    fn scale(&self) -> f64 {
        match self {
            OpRef::Mat(_, s) => *s,
            OpRef::Buf(_) => 1.0,
        }
    }
}

fn resolve<'a>(op: Operand, inputs: &[MatView<'a>], aux: &'a [TempBuf]) -> MatView<'a> {
    match op {
        Operand::Input(i) => inputs[i],
        Operand::Aux(t) => aux[t].view(),
    }
}

// ---------------------------------------------------------------------------
// Pass primitives.

/// Runs `f(band, row_offset)` over the rows of `out`, split across workers
/// when `par` is set.
fn run_banded<F>(ctx: &Ctx, par: bool, out: MatViewMut, f: F)
where
    F: Fn(MatViewMut, usize) + Send + Sync,
{
    let rows = out.rows();
    if !par || ctx.pool.is_none() || ctx.workers < 2 || rows < 2 {
        f(out, 0);
        return;
    }
    let bands = out.split_rows_evenly(ctx.workers.min(rows));
    rayon::scope(|s| {
        let mut offset = 0;
        for band in bands {
            let start = offset;
            offset += band.rows();
            let f = &f;
            let probe = ctx.probe;
            s.spawn(move |_| {
                let _g = probe.enter();
                f(band, start);
            });
        }
    });
}

/// Single-write fused combination: `out[i,j] = sum coeff * term[i,j]`.
fn fused_rows(mut out: MatViewMut, row0: usize, terms: &[(MatView, f64)]) {
    let cols = out.cols();
    for i in 0..out.rows() {
        let src = row0 + i;
        let orow = out.row_mut(i);
        match terms {
            [] => orow.fill(0.0),
            [(x, a)] => {
                let xr = &x.row(src)[..cols];
                for j in 0..cols {
                    orow[j] = a * xr[j];
                }
            }
            [(x, a), (y, b)] => {
                let xr = &x.row(src)[..cols];
                let yr = &y.row(src)[..cols];
                for j in 0..cols {
                    orow[j] = a * xr[j] + b * yr[j];
                }
            }
            [(x, a), (y, b), (z, c)] => {
                let xr = &x.row(src)[..cols];
                let yr = &y.row(src)[..cols];
                let zr = &z.row(src)[..cols];
                for j in 0..cols {
                    orow[j] = a * xr[j] + b * yr[j] + c * zr[j];
                }
            }
            many => {
                let (x0, a0) = &many[0];
                let xr = &x0.row(src)[..cols];
                for j in 0..cols {
                    orow[j] = a0 * xr[j];
                }
                for (x, a) in &many[1..] {
                    let xr = &x.row(src)[..cols];
                    for j in 0..cols {
                        orow[j] += a * xr[j];
                    }
                }
            }
        }
    }
}

/// `out = alpha * x` / `out += alpha * x` row passes for the pairwise path.
fn axpy_rows(mut out: MatViewMut, row0: usize, x: MatView, alpha: f64, assign: bool) {
    let cols = out.cols();
    for i in 0..out.rows() {
        let xr = &x.row(row0 + i)[..cols];
        let orow = out.row_mut(i);
        if assign {
            for j in 0..cols {
                orow[j] = alpha * xr[j];
            }
        } else {
            for j in 0..cols {
                orow[j] += alpha * xr[j];
            }
        }
    }
}

/// Materializes one chain into `out` under the plan's strategy accounting.
/// `inputs`/`aux` resolve the operands.
fn materialize_chain(
    ctx: &Ctx,
    par: bool,
    depth: usize,
    chain: &CompiledChain,
    inputs: &[MatView],
    aux: &[TempBuf],
    out: MatViewMut,
    pairwise: bool,
) {
    let elems = (out.rows() * out.cols()) as u64;
    let t = chain.terms.len() as u64;
    if chain.terms.is_empty() {
        run_banded(ctx, par, out, |band, _| {
            let mut band = band;
            band.fill(0.0);
        });
        ctx.traffic(depth, 0, 1, 0);
        return;
    }
    let resolved: Vec<(MatView, f64)> = chain
        .terms
        .iter()
        .map(|(op, c)| (resolve(*op, inputs, aux), *c))
        .collect();
    if pairwise {
        // Copy, then one axpy per remaining term.
        for (idx, (x, a)) in resolved.iter().enumerate() {
            let o = unsafe {
                MatViewMut::from_raw_parts(
                    out.as_const().as_ptr() as *mut f64,
                    out.rows(),
                    out.cols(),
                    out.ld(),
                )
            };
            let assign = idx == 0;
            run_banded(ctx, par, o, |band, row0| axpy_rows(band, row0, *x, *a, assign));
        }
        ctx.traffic(depth, 2 * t - 1, t, (t - 1) * elems);
    } else {
        run_banded(ctx, par, out, |band, row0| fused_rows(band, row0, &resolved));
        ctx.traffic(depth, t, 1, (t - 1) * elems);
    }
}

/// One streamed operand pass: `targets[u] (+)= coeff * src` for each update,
/// interleaved element-wise so `src` is read once.
fn stream_rows(src: MatView, updates: &[(usize, f64, bool)], targets: &mut [MatViewMut], row0: usize) {
    for i in 0..targets.first().map_or(0, |t| t.rows()) {
        let srow = src.row(row0 + i);
        for (tidx, coeff, assign) in updates {
            let cols = targets[*tidx].cols();
            let trow = targets[*tidx].row_mut(i);
            if *assign {
                for j in 0..cols {
                    trow[j] = coeff * srow[j];
                }
            } else {
                for j in 0..cols {
                    trow[j] += coeff * srow[j];
                }
            }
        }
    }
}

/// Streams `src` into several targets, banded over workers when `par`.
fn stream_pass(
    ctx: &Ctx,
    par: bool,
    src: MatView,
    updates: &[(usize, f64, bool)],
    targets: &mut [MatViewMut],
) {
    if updates.is_empty() {
        return;
    }
    let rows = targets[0].rows();
    if !par || ctx.pool.is_none() || ctx.workers < 2 || rows < 2 {
        stream_rows(src, updates, targets, 0);
        return;
    }
    let nbands = ctx.workers.min(rows);
    let mut per_target: Vec<std::vec::IntoIter<MatViewMut>> = targets
        .iter_mut()
        .map(|t| t.reborrow().split_rows_evenly(nbands).into_iter())
        .collect();
    let mut bands: Vec<(usize, Vec<MatViewMut>)> = Vec::with_capacity(nbands);
    let mut offset = 0;
    for _ in 0..nbands {
        let group: Vec<MatViewMut> = per_target.iter_mut().map(|it| it.next().unwrap()).collect();
        let h = group[0].rows();
        bands.push((offset, group));
        offset += h;
    }
    rayon::scope(|s| {
        for (row0, mut group) in bands {
            let probe = ctx.probe;
            s.spawn(move |_| {
                let _g = probe.enter();
                stream_rows(src, updates, &mut group, row0);
            });
        }
    });
}

// ---------------------------------------------------------------------------
// Streaming operand phase: materialize all S (or T) temporaries at once.

fn stream_operand_phase<'a>(
    ctx: &Ctx,
    par: bool,
    depth: usize,
    phase: &OperandPhase,
    inputs: &[MatView<'a>],
    rows: usize,
    cols: usize,
    arena: &mut TempArena,
) -> Vec<OpRef<'a>> {
    let num_aux = phase.aux.len();
    let aux_bufs: Vec<TempBuf> = (0..num_aux).map(|_| arena.alloc(rows, cols)).collect();
    // Target table: auxiliaries first, then materialized slots.
    let slot_buf: Vec<Option<TempBuf>> = phase
        .slots
        .iter()
        .map(|slot| matches!(slot, CompiledSlot::Chain(_)).then(|| arena.alloc(rows, cols)))
        .collect();
    let mut targets: Vec<MatViewMut> = aux_bufs.iter().map(|b| b.view_mut()).collect();
    targets.extend(slot_buf.iter().flatten().map(|b| b.view_mut()));

    // Which inputs are referenced at all (pipes included): one read each.
    let mut referenced = vec![false; phase.num_inputs];
    fn chain_of(slot: &CompiledSlot) -> Option<&CompiledChain> {
        match slot {
            CompiledSlot::Chain(c) => Some(c),
            CompiledSlot::Pipe { .. } => None,
        }
    }
    for chain in phase.aux.iter().chain(phase.slots.iter().filter_map(chain_of)) {
        for (op, _) in &chain.terms {
            if let Operand::Input(i) = op {
                referenced[*i] = true;
            }
        }
    }
    for slot in &phase.slots {
        if let CompiledSlot::Pipe {
            op: Operand::Input(i),
            ..
        } = slot
        {
            referenced[*i] = true;
        }
    }

    // Terms of each target chain, in target-table order.
    let target_chains: Vec<&CompiledChain> = phase
        .aux
        .iter()
        .chain(phase.slots.iter().filter_map(chain_of))
        .collect();
    let mut touched = vec![false; targets.len()];
    let mut additions = 0u64;
    let elems = (rows * cols) as u64;

    // Stage 1: stream every referenced input once.
    let mut reads = 0u64;
    for (i, input) in inputs.iter().enumerate() {
        if !referenced[i] {
            continue;
        }
        reads += 1;
        let mut updates = Vec::new();
        for (tidx, chain) in target_chains.iter().enumerate() {
            for (op, coeff) in &chain.terms {
                if *op == Operand::Input(i) {
                    let assign = !touched[tidx];
                    touched[tidx] = true;
                    if !assign {
                        additions += elems;
                    }
                    updates.push((tidx, *coeff, assign));
                }
            }
        }
        stream_pass(ctx, par, *input, &updates, &mut targets);
    }
    // Stage 2: stream each auxiliary into its dependents, in order.
    for t in 0..num_aux {
        reads += 1;
        let src = aux_bufs[t].view();
        let mut updates = Vec::new();
        for (tidx, chain) in target_chains.iter().enumerate() {
            if tidx == t {
                continue;
            }
            for (op, coeff) in &chain.terms {
                if *op == Operand::Aux(t) {
                    let assign = !touched[tidx];
                    touched[tidx] = true;
                    if !assign {
                        additions += elems;
                    }
                    updates.push((tidx, *coeff, assign));
                }
            }
        }
        stream_pass(ctx, par, src, &updates, &mut targets);
    }
    // Untouched materialized targets come from empty chains: zero them.
    for (tidx, done) in touched.iter().enumerate() {
        if !done {
            targets[tidx].fill(0.0);
        }
    }
    let writes = targets.len() as u64;
    drop(targets);
    ctx.traffic(depth, reads, writes, additions);

    phase
        .slots
        .iter()
        .enumerate()
        .map(|(r, slot)| match slot {
            CompiledSlot::Pipe { op, scale } => match op {
                Operand::Input(i) => OpRef::Mat(inputs[*i], *scale),
                Operand::Aux(t) => OpRef::Buf(aux_bufs[*t]).scaled(*scale),
            },
            CompiledSlot::Chain(_) => OpRef::Buf(slot_buf[r].unwrap()),
        })
        .collect()
}

impl OpRef<'_> {
    /// Piped auxiliaries carry their scale on a raw view of the buffer.
    fn scaled(self, scale: f64) -> Self {
        match self {
            OpRef::Buf(b) => {
                let v = unsafe {
                    MatView::from_raw_parts(b.view().as_ptr(), b.rows(), b.cols(), b.cols())
                };
                OpRef::Mat(v, scale)
            }
            OpRef::Mat(v, s) => OpRef::Mat(v, s * scale),
        }
    }
}

// ---------------------------------------------------------------------------
// Output assembly.

fn assemble_outputs(
    ctx: &Ctx,
    par: bool,
    depth: usize,
    m_ops: &[OpRef],
    c_blocks: Vec<MatViewMut>,
    arena: &mut TempArena,
) {
    let phase = &ctx.plan.c;
    let m_views: Vec<MatView> = m_ops.iter().map(|op| op.view()).collect();
    let m_scales: Vec<f64> = m_ops.iter().map(|op| op.scale()).collect();
    let mark = arena.mark();
    let (rows, cols) = (c_blocks[0].rows(), c_blocks[0].cols());
    let aux_bufs: Vec<TempBuf> = (0..phase.aux.len()).map(|_| arena.alloc(rows, cols)).collect();
    let scale_chain = |chain: &CompiledChain| CompiledChain {
        terms: chain
            .terms
            .iter()
            .map(|(op, c)| match op {
                Operand::Input(i) => (*op, c * m_scales[*i]),
                Operand::Aux(_) => (*op, *c),
            })
            .collect(),
    };
    for (t, chain) in phase.aux.iter().enumerate() {
        let scaled = scale_chain(chain);
        materialize_chain(
            ctx,
            par,
            depth,
            &scaled,
            &m_views,
            &aux_bufs,
            aux_bufs[t].view_mut(),
            ctx.plan.strategy == AdditionStrategy::Pairwise,
        );
    }
    match ctx.plan.strategy {
        AdditionStrategy::Streaming => {
            let mut targets: Vec<MatViewMut> = c_blocks;
            let mut touched = vec![false; targets.len()];
            let mut reads = 0u64;
            let mut additions = 0u64;
            let elems = (rows * cols) as u64;
            // Stream each referenced product (and auxiliary) once.
            let referenced: Vec<bool> = {
                let mut seen = vec![false; phase.num_inputs];
                for chain in phase.aux.iter().chain(&phase.chains) {
                    for (op, _) in &chain.terms {
                        if let Operand::Input(i) = op {
                            seen[*i] = true;
                        }
                    }
                }
                seen
            };
            for (r, is_ref) in referenced.iter().enumerate() {
                if !is_ref {
                    continue;
                }
                reads += 1;
                let mut updates = Vec::new();
                for (cidx, chain) in phase.chains.iter().enumerate() {
                    for (op, coeff) in &chain.terms {
                        if *op == Operand::Input(r) {
                            let assign = !touched[cidx];
                            touched[cidx] = true;
                            if !assign {
                                additions += elems;
                            }
                            updates.push((cidx, coeff * m_scales[r], assign));
                        }
                    }
                }
                stream_pass(ctx, par, m_views[r], &updates, &mut targets);
            }
            for (t, buf) in aux_bufs.iter().enumerate() {
                reads += 1;
                let mut updates = Vec::new();
                for (cidx, chain) in phase.chains.iter().enumerate() {
                    for (op, coeff) in &chain.terms {
                        if *op == Operand::Aux(t) {
                            let assign = !touched[cidx];
                            touched[cidx] = true;
                            if !assign {
                                additions += elems;
                            }
                            updates.push((cidx, *coeff, assign));
                        }
                    }
                }
                stream_pass(ctx, par, buf.view(), &updates, &mut targets);
            }
            for (cidx, done) in touched.iter().enumerate() {
                if !done {
                    targets[cidx].fill(0.0);
                }
            }
            ctx.traffic(depth, reads, targets.len() as u64, additions);
        }
        strategy => {
            for (chain, out) in phase.chains.iter().zip(c_blocks) {
                let scaled = scale_chain(chain);
                materialize_chain(
                    ctx,
                    par,
                    depth,
                    &scaled,
                    &m_views,
                    &aux_bufs,
                    out,
                    strategy == AdditionStrategy::Pairwise,
                );
            }
        }
    }
    arena.restore(mark);
}

// ---------------------------------------------------------------------------
// Recursion walkers.

fn leaf_multiply(ctx: &Ctx, a: MatView, b: MatView, c: MatViewMut, alpha: f64, par: bool) {
    ctx.kernel_call(a.rows(), a.cols(), b.cols(), false, false);
    kernel_split(ctx, a, b, c, alpha, false, par);
}

/// Kernel call, row-split over workers when `par`.
fn kernel_split(
    ctx: &Ctx,
    a: MatView,
    b: MatView,
    c: MatViewMut,
    alpha: f64,
    accumulate: bool,
    par: bool,
) {
    let rows = c.rows();
    if !par || ctx.pool.is_none() || ctx.workers < 2 || rows < 2 {
        ctx.kernel.multiply(a, b, c, alpha, accumulate);
        return;
    }
    let bands = c.split_rows_evenly(ctx.workers.min(rows));
    rayon::scope(|s| {
        let mut row0 = 0;
        for band in bands {
            let h = band.rows();
            let a_band = a.block(row0, 0, h, a.cols());
            row0 += h;
            let probe = ctx.probe;
            let kernel = ctx.kernel;
            s.spawn(move |_| {
                let _g = probe.enter();
                kernel.multiply(a_band, b, band, alpha, accumulate);
            });
        }
    });
}

/// Peel fixups after the fast core: rank update, bottom rows, right columns.
fn run_strips(
    ctx: &Ctx,
    a: MatView,
    b: MatView,
    c: MatViewMut,
    core: (usize, usize, usize),
    alpha: f64,
    par: bool,
) {
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let (cp, cq, cr) = core;
    let (top, bottom) = c.split_at_row(cp);
    if cp > 0 && cr > 0 && q > cq {
        let (core_c, right) = top.split_at_col(cr);
        ctx.kernel_call(cp, q - cq, cr, true, true);
        kernel_split(
            ctx,
            a.block(0, cq, cp, q - cq),
            b.block(cq, 0, q - cq, cr),
            core_c,
            alpha,
            true,
            par,
        );
        if r > cr {
            ctx.kernel_call(cp, q, r - cr, false, true);
            kernel_split(ctx, a.block(0, 0, cp, q), b.block(0, cr, q, r - cr), right, alpha, false, par);
        }
    } else if cp > 0 && r > cr {
        let (_, right) = top.split_at_col(cr);
        ctx.kernel_call(cp, q, r - cr, false, true);
        kernel_split(ctx, a.block(0, 0, cp, q), b.block(0, cr, q, r - cr), right, alpha, false, par);
    }
    if p > cp {
        ctx.kernel_call(p - cp, q, r, false, true);
        kernel_split(ctx, a.block(cp, 0, p - cp, q), b, bottom, alpha, false, par);
    }
}

fn exec_recursive(
    ctx: &Ctx,
    a: MatView,
    b: MatView,
    c: MatViewMut,
    level: u32,
    alpha: f64,
    arena: &mut TempArena,
    walk: WalkMode,
) {
    let par = walk == WalkMode::Par;
    if level == 0 {
        leaf_multiply(ctx, a, b, c, alpha, par);
        return;
    }
    let dims = (a.rows(), a.cols(), b.cols());
    let base = (ctx.plan.m, ctx.plan.k, ctx.plan.n);
    let (core, _) = dynamic_peel(dims, base);
    let (cp, cq, cr) = core;
    if cp > 0 && cr > 0 {
        let c_core = unsafe {
            MatViewMut::from_raw_parts(c.as_const().as_ptr() as *mut f64, cp, cr, c.ld())
        };
        if cq > 0 {
            fast_step(
                ctx,
                a.block(0, 0, cp, cq),
                b.block(0, 0, cq, cr),
                c_core,
                level,
                alpha,
                arena,
                walk,
            );
        } else {
            let mut c_core = c_core;
            c_core.fill(0.0);
        }
    }
    run_strips(ctx, a, b, c, core, alpha, par);
}

/// One fast recursive step on a divisible core.
fn fast_step(
    ctx: &Ctx,
    a_core: MatView,
    b_core: MatView,
    c_core: MatViewMut,
    level: u32,
    alpha: f64,
    arena: &mut TempArena,
    walk: WalkMode,
) {
    let plan = ctx.plan;
    let depth = (ctx.levels - level) as usize;
    let a_blocks = a_core.split_grid(plan.m, plan.k);
    let b_blocks = b_core.split_grid(plan.k, plan.n);
    let (bp, bq, br) = (
        a_core.rows() / plan.m,
        a_core.cols() / plan.k,
        b_core.cols() / plan.n,
    );
    let c_blocks = c_core.split_grid(plan.m, plan.n);

    match walk {
        WalkMode::BfsTasks => node_bfs(
            ctx, &a_blocks, &b_blocks, c_blocks, (bp, bq, br), level, depth, alpha, arena,
        ),
        _ => node_seq(
            ctx,
            &a_blocks,
            &b_blocks,
            c_blocks,
            (bp, bq, br),
            level,
            depth,
            alpha,
            arena,
            walk,
        ),
    }
}

/// Builds the operand for child `r` under write-once/pairwise: pipe or
/// materialize into a per-iteration buffer.
fn operand_for<'a>(
    ctx: &Ctx,
    par: bool,
    depth: usize,
    slot: &CompiledSlot,
    inputs: &[MatView<'a>],
    aux: &[TempBuf],
    rows: usize,
    cols: usize,
    arena: &mut TempArena,
) -> OpRef<'a> {
    match slot {
        CompiledSlot::Pipe { op, scale } => {
            ctx.traffic(depth, 1, 0, 0);
            match op {
                Operand::Input(i) => OpRef::Mat(inputs[*i], *scale),
                Operand::Aux(t) => OpRef::Buf(aux[*t]).scaled(*scale),
            }
        }
        CompiledSlot::Chain(chain) => {
            let buf = arena.alloc(rows, cols);
            materialize_chain(
                ctx,
                par,
                depth,
                chain,
                inputs,
                aux,
                buf.view_mut(),
                ctx.plan.strategy == AdditionStrategy::Pairwise,
            );
            OpRef::Buf(buf)
        }
    }
}

fn materialize_phase_aux(
    ctx: &Ctx,
    par: bool,
    depth: usize,
    phase: &OperandPhase,
    inputs: &[MatView],
    rows: usize,
    cols: usize,
    arena: &mut TempArena,
) -> Vec<TempBuf> {
    let bufs: Vec<TempBuf> = (0..phase.aux.len()).map(|_| arena.alloc(rows, cols)).collect();
    for (t, chain) in phase.aux.iter().enumerate() {
        materialize_chain(
            ctx,
            par,
            depth,
            chain,
            inputs,
            &bufs,
            bufs[t].view_mut(),
            ctx.plan.strategy == AdditionStrategy::Pairwise,
        );
    }
    bufs
}

#[allow(clippy::too_many_arguments)]
fn node_seq(
    ctx: &Ctx,
    a_blocks: &[MatView],
    b_blocks: &[MatView],
    c_blocks: Vec<MatViewMut>,
    (bp, bq, br): (usize, usize, usize),
    level: u32,
    depth: usize,
    alpha: f64,
    arena: &mut TempArena,
    walk: WalkMode,
) {
    let plan = ctx.plan;
    let par = walk == WalkMode::Par;
    let node_mark = arena.mark();
    let m_bufs: Vec<TempBuf> = (0..plan.rank).map(|_| arena.alloc(bp, br)).collect();

    if plan.strategy == AdditionStrategy::Streaming {
        let stream_mark = arena.mark();
        let s_ops = stream_operand_phase(ctx, par, depth, &plan.s, a_blocks, bp, bq, arena);
        let t_ops = stream_operand_phase(ctx, par, depth, &plan.t, b_blocks, bq, br, arena);
        for r in 0..plan.rank {
            let child_alpha = alpha * s_ops[r].scale() * t_ops[r].scale();
            let child_mark = arena.mark();
            exec_recursive(
                ctx,
                s_ops[r].view(),
                t_ops[r].view(),
                m_bufs[r].view_mut(),
                level - 1,
                child_alpha,
                arena,
                walk,
            );
            arena.restore(child_mark);
        }
        arena.restore(stream_mark);
    } else {
        let s_aux = materialize_phase_aux(ctx, par, depth, &plan.s, a_blocks, bp, bq, arena);
        let t_aux = materialize_phase_aux(ctx, par, depth, &plan.t, b_blocks, bq, br, arena);
        for r in 0..plan.rank {
            let r_mark = arena.mark();
            let s_op = operand_for(ctx, par, depth, &plan.s.slots[r], a_blocks, &s_aux, bp, bq, arena);
            let t_op = operand_for(ctx, par, depth, &plan.t.slots[r], b_blocks, &t_aux, bq, br, arena);
            let child_alpha = alpha * s_op.scale() * t_op.scale();
            exec_recursive(
                ctx,
                s_op.view(),
                t_op.view(),
                m_bufs[r].view_mut(),
                level - 1,
                child_alpha,
                arena,
                walk,
            );
            arena.restore(r_mark);
        }
    }

    let m_ops: Vec<OpRef> = m_bufs.iter().map(|b| OpRef::Buf(*b)).collect();
    assemble_outputs(ctx, par, depth, &m_ops, c_blocks, arena);
    arena.restore(node_mark);
}

#[allow(clippy::too_many_arguments)]
fn node_bfs(
    ctx: &Ctx,
    a_blocks: &[MatView],
    b_blocks: &[MatView],
    c_blocks: Vec<MatViewMut>,
    (bp, bq, br): (usize, usize, usize),
    level: u32,
    depth: usize,
    alpha: f64,
    arena: &mut TempArena,
) {
    let plan = ctx.plan;
    let par_edge = depth == 0;
    let node_mark = arena.mark();
    let m_bufs: Vec<TempBuf> = (0..plan.rank).map(|_| arena.alloc(bp, br)).collect();

    if plan.strategy == AdditionStrategy::Streaming {
        // Streaming forms all S/T in cross-product sweeps; do it at the node,
        // then spawn the multiplies as tasks.
        let s_ops = stream_operand_phase(ctx, par_edge, depth, &plan.s, a_blocks, bp, bq, arena);
        let t_ops = stream_operand_phase(ctx, par_edge, depth, &plan.t, b_blocks, bq, br, arena);
        rayon::scope(|scope| {
            for r in 0..plan.rank {
                let s_raw = RawOp::of(&s_ops[r]);
                let t_raw = RawOp::of(&t_ops[r]);
                let m_buf = m_bufs[r];
                let child_alpha = alpha * s_ops[r].scale() * t_ops[r].scale();
                let child_doubles = tree_temp_doubles(plan, level - 1, bp, bq, br);
                scope.spawn(move |_| {
                    let _g = ctx.probe.enter();
                    let mut child_arena = TempArena::new(ctx.tracker, child_doubles as usize);
                    exec_recursive(
                        ctx,
                        s_raw.view(),
                        t_raw.view(),
                        m_buf.view_mut(),
                        level - 1,
                        child_alpha,
                        &mut child_arena,
                        WalkMode::BfsTasks,
                    );
                });
            }
        });
    } else {
        let s_aux = materialize_phase_aux(ctx, par_edge, depth, &plan.s, a_blocks, bp, bq, arena);
        let t_aux = materialize_phase_aux(ctx, par_edge, depth, &plan.t, b_blocks, bq, br, arena);
        // Every child task owns its S/T buffers; allocate them up front so
        // all R pairs are alive concurrently (the BFS memory profile).
        let pre: Vec<(Option<TempBuf>, Option<TempBuf>)> = (0..plan.rank)
            .map(|r| {
                let s = matches!(plan.s.slots[r], CompiledSlot::Chain(_))
                    .then(|| arena.alloc(bp, bq));
                let t = matches!(plan.t.slots[r], CompiledSlot::Chain(_))
                    .then(|| arena.alloc(bq, br));
                (s, t)
            })
            .collect();
        let s_aux_ref = &s_aux;
        let t_aux_ref = &t_aux;
        rayon::scope(|scope| {
            for r in 0..plan.rank {
                let (s_buf, t_buf) = pre[r];
                let m_buf = m_bufs[r];
                let child_doubles = tree_temp_doubles(plan, level - 1, bp, bq, br);
                scope.spawn(move |_| {
                    let _g = ctx.probe.enter();
                    // Operand additions are part of the task.
                    let s_op = task_operand(ctx, depth, &plan.s.slots[r], a_blocks, s_aux_ref, s_buf);
                    let t_op = task_operand(ctx, depth, &plan.t.slots[r], b_blocks, t_aux_ref, t_buf);
                    let child_alpha = alpha * s_op.scale() * t_op.scale();
                    let mut child_arena = TempArena::new(ctx.tracker, child_doubles as usize);
                    exec_recursive(
                        ctx,
                        s_op.view(),
                        t_op.view(),
                        m_buf.view_mut(),
                        level - 1,
                        child_alpha,
                        &mut child_arena,
                        WalkMode::BfsTasks,
                    );
                });
            }
        });
    }

    let m_ops: Vec<OpRef> = m_bufs.iter().map(|b| OpRef::Buf(*b)).collect();
    assemble_outputs(ctx, par_edge, depth, &m_ops, c_blocks, arena);
    arena.restore(node_mark);
}

/// In-task operand materialization for BFS.
fn task_operand<'a>(
    ctx: &Ctx,
    depth: usize,
    slot: &CompiledSlot,
    inputs: &[MatView<'a>],
    aux: &[TempBuf],
    buf: Option<TempBuf>,
) -> OpRef<'a> {
    match slot {
        CompiledSlot::Pipe { op, scale } => {
            ctx.traffic(depth, 1, 0, 0);
            match op {
                Operand::Input(i) => OpRef::Mat(inputs[*i], *scale),
                Operand::Aux(t) => OpRef::Buf(aux[*t]).scaled(*scale),
            }
        }
        CompiledSlot::Chain(chain) => {
            let buf = buf.expect("buffer preallocated for materialized slot");
            materialize_chain(
                ctx,
                false,
                depth,
                chain,
                inputs,
                aux,
                buf.view_mut(),
                ctx.plan.strategy == AdditionStrategy::Pairwise,
            );
            OpRef::Buf(buf)
        }
    }
}

// ---------------------------------------------------------------------------
// Hybrid: BFS bulk, one barrier, all-worker remainder, deferred assembly.

/// Raw Send-able snapshot of an operand reference.
#[derive(Clone, Copy)]
struct RawOp {
    ptr: *const f64,
    rows: usize,
    cols: usize,
    ld: usize,
    scale: f64,
}

unsafe impl Send for RawOp {}
unsafe impl Sync for RawOp {}

impl RawOp {
    fn of(op: &OpRef) -> Self {
        let v = op.view();
        RawOp {
            ptr: v.as_ptr(),
            rows: v.rows(),
            cols: v.cols(),
            ld: v.ld(),
            scale: op.scale(),
        }
    }

    fn view(&self) -> MatView<'_> {
        unsafe { MatView::from_raw_parts(self.ptr, self.rows, self.cols, self.ld) }
    }
}

#[derive(Clone, Copy)]
struct RawOut {
    ptr: *mut f64,
    rows: usize,
    cols: usize,
    ld: usize,
}

unsafe impl Send for RawOut {}

impl RawOut {
    fn of(v: &MatViewMut) -> Self {
        RawOut {
            ptr: v.as_const().as_ptr() as *mut f64,
            rows: v.rows(),
            cols: v.cols(),
            ld: v.ld(),
        }
    }

    fn view_mut(&self) -> MatViewMut<'_> {
        unsafe { MatViewMut::from_raw_parts(self.ptr, self.rows, self.cols, self.ld) }
    }
}

/// A leaf-side multiply deferred to the all-worker phase.
struct LeafJob {
    s: RawOp,
    t: RawOp,
    m: TempBuf,
    level: u32,
    alpha: f64,
}

/// A classical strip fixup deferred until after its node's assembly.
struct StripFixups {
    a: RawOp,
    b: RawOp,
    c: RawOut,
    core: (usize, usize, usize),
    alpha: f64,
}

/// Assembly of a straddling node, run bottom-up after all leaves finish.
struct NodeFinish {
    m_ops: Vec<RawOp>,
    c_core: RawOut,
    depth: usize,
    strips: Option<StripFixups>,
}

#[allow(clippy::too_many_arguments)]
fn hybrid_walk(
    ctx: &Ctx,
    a: MatView,
    b: MatView,
    c: MatViewMut,
    level: u32,
    alpha: f64,
    leaf_base: u64,
    arena: &mut TempArena,
    leaves: &mut Vec<LeafJob>,
    finishes: &mut Vec<NodeFinish>,
) {
    debug_assert!(level >= 1);
    let plan = ctx.plan;
    let depth = (ctx.levels - level) as usize;
    let dims = (a.rows(), a.cols(), b.cols());
    let base = (plan.m, plan.k, plan.n);
    let (core, _) = dynamic_peel(dims, base);
    let (cp, cq, cr) = core;
    if cp == 0 || cr == 0 || cq == 0 {
        // No fast core: the whole node is classical fixups; nothing here
        // depends on BFS tasks, run it now.
        if cp > 0 && cr > 0 {
            let c_core = unsafe {
                MatViewMut::from_raw_parts(c.as_const().as_ptr() as *mut f64, cp, cr, c.ld())
            };
            let mut c_core = c_core;
            c_core.fill(0.0);
        }
        run_strips(ctx, a, b, c, core, alpha, true);
        return;
    }

    let a_core = a.block(0, 0, cp, cq);
    let b_core = b.block(0, 0, cq, cr);
    let c_core = unsafe {
        MatViewMut::from_raw_parts(c.as_const().as_ptr() as *mut f64, cp, cr, c.ld())
    };
    let a_blocks = a_core.split_grid(plan.m, plan.k);
    let b_blocks = b_core.split_grid(plan.k, plan.n);
    let (bp, bq, br) = (cp / plan.m, cq / plan.k, cr / plan.n);

    let m_bufs: Vec<TempBuf> = (0..plan.rank).map(|_| arena.alloc(bp, br)).collect();
    // Form all child operands at this node, with all workers.
    let s_ops: Vec<OpRef>;
    let t_ops: Vec<OpRef>;
    if plan.strategy == AdditionStrategy::Streaming {
        s_ops = stream_operand_phase(ctx, true, depth, &plan.s, &a_blocks, bp, bq, arena);
        t_ops = stream_operand_phase(ctx, true, depth, &plan.t, &b_blocks, bq, br, arena);
    } else {
        let s_aux = materialize_phase_aux(ctx, true, depth, &plan.s, &a_blocks, bp, bq, arena);
        let t_aux = materialize_phase_aux(ctx, true, depth, &plan.t, &b_blocks, bq, br, arena);
        s_ops = plan
            .s
            .slots
            .iter()
            .map(|slot| operand_for(ctx, true, depth, slot, &a_blocks, &s_aux, bp, bq, arena))
            .collect();
        t_ops = plan
            .t
            .slots
            .iter()
            .map(|slot| operand_for(ctx, true, depth, slot, &b_blocks, &t_aux, bq, br, arena))
            .collect();
    }

    let sub_leaves = (plan.rank as u64).pow(level - 1);
    let cut = ctx.schedule.bfs_count;
    rayon::scope(|scope| {
        for r in 0..plan.rank {
            let start = leaf_base + r as u64 * sub_leaves;
            let end = start + sub_leaves;
            let s_raw = RawOp::of(&s_ops[r]);
            let t_raw = RawOp::of(&t_ops[r]);
            let m_buf = m_bufs[r];
            let child_alpha = alpha * s_ops[r].scale() * t_ops[r].scale();
            if end <= cut {
                // Entirely in the task-parallel bulk.
                let child_doubles = tree_temp_doubles(plan, level - 1, bp, bq, br);
                scope.spawn(move |_| {
                    let _g = ctx.probe.enter();
                    let mut child_arena = TempArena::new(ctx.tracker, child_doubles as usize);
                    exec_recursive(
                        ctx,
                        s_raw.view(),
                        t_raw.view(),
                        m_buf.view_mut(),
                        level - 1,
                        child_alpha,
                        &mut child_arena,
                        WalkMode::BfsTasks,
                    );
                });
            } else if start >= cut {
                leaves.push(LeafJob {
                    s: s_raw,
                    t: t_raw,
                    m: m_buf,
                    level: level - 1,
                    alpha: child_alpha,
                });
            } else {
                hybrid_walk(
                    ctx,
                    s_raw.view(),
                    t_raw.view(),
                    m_buf.view_mut(),
                    level - 1,
                    child_alpha,
                    start,
                    arena,
                    leaves,
                    finishes,
                );
            }
        }
    });

    finishes.push(NodeFinish {
        m_ops: m_bufs
            .iter()
            .map(|b| RawOp::of(&OpRef::Buf(*b)))
            .collect(),
        c_core: RawOut::of(&c_core),
        depth,
        strips: Some(StripFixups {
            a: RawOp {
                ptr: a.as_ptr(),
                rows: a.rows(),
                cols: a.cols(),
                ld: a.ld(),
                scale: 1.0,
            },
            b: RawOp {
                ptr: b.as_ptr(),
                rows: b.rows(),
                cols: b.cols(),
                ld: b.ld(),
                scale: 1.0,
            },
            c: RawOut::of(&c),
            core,
            alpha,
        }),
    });
}

fn hybrid_run(
    ctx: &Ctx,
    a: MatView,
    b: MatView,
    c: MatViewMut,
    levels: u32,
    arena: &mut TempArena,
) {
    let mut leaves = Vec::new();
    let mut finishes = Vec::new();
    hybrid_walk(ctx, a, b, c, levels, 1.0, 0, arena, &mut leaves, &mut finishes);
    // All BFS tasks have joined; run the remainder with every worker.
    for job in leaves {
        exec_recursive(
            ctx,
            job.s.view(),
            job.t.view(),
            job.m.view_mut(),
            job.level,
            job.alpha,
            arena,
            WalkMode::Par,
        );
    }
    // Assemble straddling nodes bottom-up, then their strips.
    for fin in finishes {
        let m_ops: Vec<OpRef> = fin
            .m_ops
            .iter()
            .map(|raw| OpRef::Mat(raw.view(), raw.scale))
            .collect();
        let c_core = fin.c_core.view_mut();
        let c_blocks = c_core.split_grid(ctx.plan.m, ctx.plan.n);
        assemble_outputs(ctx, true, fin.depth, &m_ops, c_blocks, arena);
        if let Some(strips) = fin.strips {
            run_strips(
                ctx,
                strips.a.view(),
                strips.b.view(),
                strips.c.view_mut(),
                strips.core,
                strips.alpha,
                true,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Entry.

#[allow(clippy::too_many_arguments)]
pub(super) fn run(
    a: &DenseMatrix,
    b: &DenseMatrix,
    alg: &crate::algorithm::FastAlgorithm,
    plan: &AdditionPlan,
    lambda: f64,
    levels: u32,
    schedule: SchedulePlan,
    config: &ExecutionConfig,
) -> Result<(DenseMatrix, Counters), RuntimeError> {
    let compiled = compile(plan, lambda);
    let dims = (a.rows(), a.cols(), b.cols());

    let seq_doubles = path_temp_doubles(&compiled, levels, dims.0, dims.1, dims.2);
    let concurrent = matches!(schedule.mode, ParallelMode::Bfs | ParallelMode::Hybrid);
    let estimate_doubles = if concurrent {
        tree_temp_doubles(&compiled, levels, dims.0, dims.1, dims.2)
    } else {
        seq_doubles
    };
    if let Some(limit) = config.temp_limit_bytes {
        let required = estimate_doubles * 8;
        if required > limit {
            return Err(RuntimeError::Resource {
                required,
                limit,
                strategy: plan.strategy.as_str(),
                slots: plan.concurrent_temp_slots,
                rank: alg.rank(),
            });
        }
    }

    let tracker = MemTracker::new();
    let probe = ActivityProbe::new();
    let mut c = DenseMatrix::zeros(dims.0, dims.2);

    let pool = match schedule.mode {
        ParallelMode::Sequential => None,
        _ => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(schedule.workers)
                .build()
                .expect("worker pool"),
        ),
    };

    let ctx = Ctx {
        plan: &compiled,
        kernel: config.kernel.as_ref(),
        levels,
        schedule,
        pool: pool.as_ref(),
        workers: schedule.workers,
        probe: &probe,
        tracker: &tracker,
        counters: Mutex::new(Counters::default()),
    };

    {
        let c_view = c.view_mut();
        let mut arena = TempArena::new(&tracker, seq_doubles as usize);
        match (schedule.mode, ctx.pool) {
            (ParallelMode::Sequential, _) | (_, None) => {
                let _g = probe.enter();
                exec_recursive(&ctx, a.view(), b.view(), c_view, levels, 1.0, &mut arena, WalkMode::Seq);
            }
            (mode, Some(pool)) => pool.install(|| match mode {
                ParallelMode::Dfs => {
                    exec_recursive(&ctx, a.view(), b.view(), c_view, levels, 1.0, &mut arena, WalkMode::Par)
                }
                ParallelMode::Bfs => {
                    exec_recursive(&ctx, a.view(), b.view(), c_view, levels, 1.0, &mut arena, WalkMode::BfsTasks)
                }
                ParallelMode::Hybrid => hybrid_run(&ctx, a.view(), b.view(), c_view, levels, &mut arena),
                ParallelMode::Sequential => unreachable!(),
            }),
        }
    }

    let mut counters = ctx.counters.into_inner().unwrap();
    counters.temp_bytes_high_water = tracker.high_water_bytes();
    counters.worker_high_water = probe.high_water().max(1);
    Ok((c, counters))
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::algorithm::{classical_algorithm, compose, flop_count, strassen};
    use crate::matrix::DenseMatrix;
    use crate::parallel::ParallelMode;
    use crate::planner::AdditionStrategy;
    use rand::Rng;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn oracle(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut c = DenseMatrix::zeros(a.rows(), b.cols());
        NaiveKernel.multiply(a.view(), b.view(), c.view_mut(), 1.0, false);
        c
    }

    fn config(strategy: AdditionStrategy, levels: u32) -> ExecutionConfig {
        ExecutionConfig {
            steps: StepPolicy::Fixed(levels),
            strategy,
            ..ExecutionConfig::default()
        }
    }

    #[test]
    fn identity_times_identity() {
        let a = DenseMatrix::identity(8);
        let (c, counters) = fast_multiply(&a, &a, &strassen(), &config(AdditionStrategy::WriteOnce, 1)).unwrap();
        assert_eq!(c, DenseMatrix::identity(8));
        assert_eq!(counters.leaf_multiplies, 7);
    }

    #[test]
    fn oracle_equivalence_strategies_and_levels() {
        let algs = [
            ("strassen", strassen()),
            ("classical222", classical_algorithm(2, 2, 2)),
            ("classical234", classical_algorithm(2, 3, 4)),
        ];
        let a = random(64, 64, 1);
        let b = random(64, 64, 2);
        let want = oracle(&a, &b);
        for (name, alg) in &algs {
            for strategy in AdditionStrategy::ALL {
                for levels in 0..=3u32 {
                    for cse in [false, true] {
                        let mut cfg = config(strategy, levels);
                        cfg.cse = cse;
                        let (c, _) = fast_multiply(&a, &b, alg, &cfg).unwrap();
                        let err = c.rel_frobenius_error(&want);
                        assert!(
                            err <= 1e-12,
                            "{name} {strategy:?} L={levels} cse={cse}: err {err}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn peeling_handles_arbitrary_dims() {
        let cases = [(5usize, 5usize, 5usize), (101, 67, 89), (7, 11, 13), (1, 5, 3)];
        for (p, q, r) in cases {
            let a = random(p, q, p as u64);
            let b = random(q, r, r as u64);
            let want = oracle(&a, &b);
            for alg in [strassen(), classical_algorithm(3, 2, 3)] {
                for levels in 1..=2u32 {
                    let (c, _) =
                        fast_multiply(&a, &b, &alg, &config(AdditionStrategy::WriteOnce, levels)).unwrap();
                    let err = c.rel_frobenius_error(&want);
                    assert!(err <= 1e-12, "({p},{q},{r}) L={levels}: err {err}");
                }
            }
        }
    }

    #[test]
    fn counter_conformance_per_level() {
        // Strassen on a divisible problem, cse off: level counters equal the
        // closed forms per strategy; level 1 has 7 nodes.
        let a = random(64, 64, 3);
        let b = random(64, 64, 4);
        let expect = [
            (AdditionStrategy::Pairwise, 54u64, 36u64),
            (AdditionStrategy::WriteOnce, 36, 14),
            (AdditionStrategy::Streaming, 15, 14),
        ];
        for (strategy, reads, writes) in expect {
            let (_, counters) = fast_multiply(&a, &b, &strassen(), &config(strategy, 2)).unwrap();
            assert_eq!(counters.submatrix_reads[0], reads, "{strategy:?} level 0 reads");
            assert_eq!(counters.submatrix_writes[0], writes, "{strategy:?} level 0 writes");
            assert_eq!(counters.submatrix_reads[1], 7 * reads, "{strategy:?} level 1 reads");
            assert_eq!(counters.submatrix_writes[1], 7 * writes, "{strategy:?} level 1 writes");
            if strategy != AdditionStrategy::Pairwise {
                assert!(writes <= 2 * 7 + 4);
            }
            assert_eq!(counters.leaf_multiplies, 49);
            assert_eq!(counters.peel_fixup_multiplies, 0);
        }
    }

    #[test]
    fn flop_conformance_full_depth() {
        let a = random(8, 8, 5);
        let b = random(8, 8, 6);
        let s = strassen();
        let (_, counters) = fast_multiply(&a, &b, &s, &config(AdditionStrategy::WriteOnce, 3)).unwrap();
        assert_eq!(counters.total_element_ops(), 2017);
        assert_eq!(
            counters.total_element_ops() as u128,
            flop_count(&s, 3, (8, 8, 8)).unwrap()
        );
        let c222 = classical_algorithm(2, 2, 2);
        let (_, counters) = fast_multiply(&a, &b, &c222, &config(AdditionStrategy::WriteOnce, 3)).unwrap();
        assert_eq!(counters.total_element_ops(), 960);
    }

    #[test]
    fn strategies_agree_pairwise() {
        let a = random(48, 60, 7);
        let b = random(60, 36, 8);
        let alg = classical_algorithm(2, 3, 4);
        let results: Vec<DenseMatrix> = AdditionStrategy::ALL
            .iter()
            .map(|s| fast_multiply(&a, &b, &alg, &config(*s, 2)).unwrap().0)
            .collect();
        for i in 0..results.len() {
            for j in i + 1..results.len() {
                assert!(results[i].rel_frobenius_error(&results[j]) <= 1e-12);
            }
        }
    }

    #[test]
    fn parallel_modes_match_sequential() {
        let a = random(48, 48, 9);
        let b = random(48, 48, 10);
        let s = strassen();
        for strategy in AdditionStrategy::ALL {
            let seq_cfg = config(strategy, 2);
            let (want, seq_counters) = fast_multiply(&a, &b, &s, &seq_cfg).unwrap();
            for mode in [ParallelMode::Dfs, ParallelMode::Bfs, ParallelMode::Hybrid] {
                let mut cfg = config(strategy, 2);
                cfg.mode = mode;
                cfg.workers = 3;
                let (got, counters) = fast_multiply(&a, &b, &s, &cfg).unwrap();
                let err = got.rel_frobenius_error(&want);
                assert!(err <= 1e-12, "{strategy:?} {mode:?}: err {err}");
                assert!(
                    counters.same_arithmetic(&seq_counters),
                    "{strategy:?} {mode:?}: counters diverge"
                );
                assert!(counters.worker_high_water <= 3, "{mode:?} oversubscribed");
            }
        }
    }

    #[test]
    fn parallel_peeled_dims_match_sequential() {
        let a = random(101, 67, 11);
        let b = random(67, 89, 12);
        let s = strassen();
        let want = oracle(&a, &b);
        for mode in [ParallelMode::Dfs, ParallelMode::Bfs, ParallelMode::Hybrid] {
            let mut cfg = config(AdditionStrategy::WriteOnce, 2);
            cfg.mode = mode;
            cfg.workers = 4;
            let (got, _) = fast_multiply(&a, &b, &s, &cfg).unwrap();
            let err = got.rel_frobenius_error(&want);
            assert!(err <= 1e-12, "{mode:?}: err {err}");
        }
    }

    #[test]
    fn bfs_uses_more_temporary_memory() {
        let a = random(256, 256, 13);
        let b = random(256, 256, 14);
        let s = strassen();
        let (_, seq) = fast_multiply(&a, &b, &s, &config(AdditionStrategy::WriteOnce, 1)).unwrap();
        let mut cfg = config(AdditionStrategy::WriteOnce, 1);
        cfg.mode = ParallelMode::Bfs;
        cfg.workers = 4;
        let (_, bfs) = fast_multiply(&a, &b, &s, &cfg).unwrap();
        let ratio = bfs.temp_bytes_high_water as f64 / seq.temp_bytes_high_water as f64;
        assert!(ratio >= 1.5, "BFS/seq memory ratio {ratio}");
    }

    #[test]
    fn streaming_resource_limit_is_reported() {
        let a = random(64, 64, 15);
        let b = random(64, 64, 16);
        let mut cfg = config(AdditionStrategy::Streaming, 2);
        cfg.temp_limit_bytes = Some(1024);
        let err = fast_multiply(&a, &b, &strassen(), &cfg).unwrap_err();
        match err {
            RuntimeError::Resource { strategy, slots, rank, .. } => {
                assert_eq!(strategy, "streaming");
                assert_eq!(slots, 14);
                assert_eq!(rank, 7);
            }
            other => panic!("expected resource error, got {other}"),
        }
    }

    #[test]
    fn composed_algorithm_runs() {
        let s = strassen();
        let ss = compose(&s, &s).unwrap();
        let a = random(32, 32, 17);
        let b = random(32, 32, 18);
        let want = oracle(&a, &b);
        let (c, counters) = fast_multiply(&a, &b, &ss, &config(AdditionStrategy::WriteOnce, 1)).unwrap();
        assert!(c.rel_frobenius_error(&want) <= 1e-12);
        assert_eq!(counters.leaf_multiplies, 49);
    }

    #[test]
    fn injected_kernel_is_used() {
        #[derive(Debug)]
        struct CountingKernel(std::sync::atomic::AtomicU64);
        impl BaseKernel for CountingKernel {
            fn name(&self) -> &'static str {
                "counting"
            }
            fn multiply(
                &self,
                a: crate::matrix::MatView,
                b: crate::matrix::MatView,
                c: crate::matrix::MatViewMut,
                alpha: f64,
                accumulate: bool,
            ) {
                self.0.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                NaiveKernel.multiply(a, b, c, alpha, accumulate);
            }
        }
        let kernel = Arc::new(CountingKernel(Default::default()));
        let mut cfg = config(AdditionStrategy::WriteOnce, 1);
        cfg.kernel = kernel.clone();
        let a = random(16, 16, 19);
        let b = random(16, 16, 20);
        let (c, _) = fast_multiply(&a, &b, &strassen(), &cfg).unwrap();
        assert!(c.rel_frobenius_error(&oracle(&a, &b)) <= 1e-12);
        assert_eq!(kernel.0.load(std::sync::atomic::Ordering::Relaxed), 7);
    }

    #[test]
    fn cutoff_policy_limits_depth() {
        let a = random(64, 64, 21);
        let b = random(64, 64, 22);
        let mut cfg = config(AdditionStrategy::WriteOnce, 0);
        cfg.steps = StepPolicy::Cutoff {
            threshold: 16,
            max_levels: 3,
        };
        let (_, counters) = fast_multiply(&a, &b, &strassen(), &cfg).unwrap();
        // 64 -> 32 -> 16: two levels keep blocks at 16.
        assert_eq!(counters.leaf_multiplies, 49);
    }
}
