//! Addition plans: the linear-combination schedules that form the `S_r`,
//! `T_r`, and output blocks of one recursive step.
//!
//! A plan extracts one addition chain per `U`/`V` column and per `W` row,
//! optionally rewrites the chains by greedy length-two common-subexpression
//! elimination, and predicts the submatrix read/write traffic of the chosen
//! addition strategy. Predictions use the same per-pass accounting the
//! executor instruments, so measured counters match them exactly:
//!
//! * pairwise   - every chain is a copy plus one axpy per remaining term;
//!   each axpy counts two reads and a write, the copy one read and a write.
//! * write-once - one fused pass per chain: one read per term, one write;
//!   singleton `S`/`T` chains materialize nothing (the scalar is piped into
//!   the recursive call) and count one read only.
//! * streaming  - every referenced input block is streamed exactly once,
//!   updating all dependent targets; reads count distinct operands, writes
//!   count materialized targets.

mod cse;

pub use cse::{cost_delta_cse, eliminate_cse, CseReport};

use num_rational::BigRational;
use num_traits::Zero;

use crate::algorithm::FastAlgorithm;
use crate::coeff::Coeff;

/// The three implementations of addition chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdditionStrategy {
    Pairwise,
    WriteOnce,
    Streaming,
}

impl AdditionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdditionStrategy::Pairwise => "pairwise",
            AdditionStrategy::WriteOnce => "writeonce",
            AdditionStrategy::Streaming => "streaming",
        }
    }

    pub const ALL: [AdditionStrategy; 3] = [
        AdditionStrategy::Pairwise,
        AdditionStrategy::WriteOnce,
        AdditionStrategy::Streaming,
    ];
}

impl std::str::FromStr for AdditionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairwise" => Ok(AdditionStrategy::Pairwise),
            "writeonce" | "write-once" => Ok(AdditionStrategy::WriteOnce),
            "streaming" => Ok(AdditionStrategy::Streaming),
            _ => Err(format!("unknown addition strategy {s:?}")),
        }
    }
}

/// Operand of a chain term: a phase input block or an auxiliary chain value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operand {
    /// `A`-block, `B`-block, or `M_r` index depending on the phase.
    Input(usize),
    /// Auxiliary subexpression introduced by CSE.
    Aux(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainTarget {
    /// `S_r` / `T_r` / output block index.
    Output(usize),
    Aux(usize),
}

/// One linear combination: `target = sum coeff * operand`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdditionChain {
    pub target: ChainTarget,
    pub terms: Vec<(Operand, Coeff)>,
}

impl AdditionChain {
    /// Exactly one term: the combination is a scaled copy of one operand.
    pub fn is_singleton(&self) -> bool {
        self.terms.len() == 1
    }
}

/// The chains of a single phase (S, T, or output assembly).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    /// One chain per phase output, in output order.
    pub outputs: Vec<AdditionChain>,
    /// Auxiliary chains in evaluation order (each references only inputs and
    /// lower-indexed auxiliaries).
    pub aux: Vec<AdditionChain>,
    /// Number of distinct input operands the phase draws from.
    pub num_inputs: usize,
}

impl Phase {
    /// Chains of the `S` phase (one per `U` column) or `T` phase (per `V`
    /// column).
    pub fn from_factor_columns(factor: &crate::coeff::CoeffMatrix) -> Phase {
        let outputs = (0..factor.cols())
            .map(|r| AdditionChain {
                target: ChainTarget::Output(r),
                terms: factor
                    .col_entries(r)
                    .into_iter()
                    .map(|(i, c)| (Operand::Input(i), c))
                    .collect(),
            })
            .collect();
        Phase {
            outputs,
            aux: Vec::new(),
            num_inputs: factor.rows(),
        }
    }

    /// Chains of the output-assembly phase (one per `W` row).
    pub fn from_factor_rows(factor: &crate::coeff::CoeffMatrix) -> Phase {
        let outputs = (0..factor.rows())
            .map(|i| AdditionChain {
                target: ChainTarget::Output(i),
                terms: factor
                    .row_entries(i)
                    .into_iter()
                    .map(|(r, c)| (Operand::Input(r), c))
                    .collect(),
            })
            .collect();
        Phase {
            outputs,
            aux: Vec::new(),
            num_inputs: factor.cols(),
        }
    }

    pub fn all_chains(&self) -> impl Iterator<Item = &AdditionChain> {
        self.aux.iter().chain(self.outputs.iter())
    }

    /// Element-wise additions performed per block element: `terms - 1` for
    /// every chain evaluated.
    pub fn addition_count(&self) -> usize {
        self.all_chains()
            .map(|c| c.terms.len().saturating_sub(1))
            .sum()
    }

    /// Evaluates the phase on rational inputs (exact coefficients only);
    /// the independent reference for CSE semantics preservation.
    pub fn evaluate(&self, inputs: &[BigRational]) -> Vec<BigRational> {
        assert!(inputs.len() >= self.num_inputs);
        let mut aux_vals: Vec<BigRational> = Vec::with_capacity(self.aux.len());
        let eval_chain = |chain: &AdditionChain, aux_vals: &[BigRational]| {
            let mut acc = BigRational::zero();
            for (op, coeff) in &chain.terms {
                assert!(coeff.is_exact(), "evaluate requires exact coefficients");
                let v = match op {
                    Operand::Input(i) => &inputs[*i],
                    Operand::Aux(t) => &aux_vals[*t],
                };
                acc += &coeff.value * v;
            }
            acc
        };
        for chain in &self.aux {
            let v = eval_chain(chain, &aux_vals);
            aux_vals.push(v);
        }
        self.outputs.iter().map(|c| eval_chain(c, &aux_vals)).collect()
    }
}

/// Which phase a cost is computed for; output blocks are always
/// materialized, `S`/`T` temporaries are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Operand,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseCost {
    pub reads: u64,
    pub writes: u64,
}

/// Predicted submatrix traffic of one phase under a strategy. The executor
/// increments its counters with exactly these rules as it performs each pass.
pub fn phase_cost(phase: &Phase, strategy: AdditionStrategy, kind: PhaseKind) -> PhaseCost {
    let mut cost = PhaseCost::default();
    match strategy {
        AdditionStrategy::Pairwise => {
            // Copy + axpy per chain; singletons are materialized copies.
            for chain in phase.all_chains() {
                let t = chain.terms.len() as u64;
                cost.reads += 2 * t - 1;
                cost.writes += t;
            }
        }
        AdditionStrategy::WriteOnce => {
            for chain in phase.all_chains() {
                let t = chain.terms.len() as u64;
                let piped = kind == PhaseKind::Operand
                    && chain.is_singleton()
                    && matches!(chain.target, ChainTarget::Output(_));
                cost.reads += t;
                if !piped {
                    cost.writes += 1;
                }
            }
        }
        AdditionStrategy::Streaming => {
            // Each referenced input streamed once, plus each materialized
            // auxiliary streamed once into its dependents.
            let mut seen = vec![false; phase.num_inputs];
            for chain in phase.all_chains() {
                for (op, _) in &chain.terms {
                    if let Operand::Input(i) = op {
                        if !seen[*i] {
                            seen[*i] = true;
                            cost.reads += 1;
                        }
                    }
                }
            }
            cost.reads += phase.aux.len() as u64;
            cost.writes += phase.aux.len() as u64;
            for chain in &phase.outputs {
                let piped = kind == PhaseKind::Operand && chain.is_singleton();
                if !piped {
                    cost.writes += 1;
                }
            }
        }
    }
    cost
}

/// Compiled addition schedule for one recursive step of an algorithm.
#[derive(Debug, Clone)]
pub struct AdditionPlan {
    pub strategy: AdditionStrategy,
    pub cse: bool,
    pub base_dims: (usize, usize, usize),
    pub rank: usize,
    pub s_phase: Phase,
    pub t_phase: Phase,
    pub c_phase: Phase,
    pub s_cost: PhaseCost,
    pub t_cost: PhaseCost,
    pub c_cost: PhaseCost,
    /// CSE outcome over the S and T phases, when enabled.
    pub cse_report: Option<CseReport>,
    /// S/T temporary slots alive simultaneously: 2 for pairwise/write-once
    /// (one S and one T slot reused per product), `2R` for streaming.
    pub concurrent_temp_slots: usize,
}

impl AdditionPlan {
    pub fn predicted_reads(&self) -> u64 {
        self.s_cost.reads + self.t_cost.reads + self.c_cost.reads
    }

    pub fn predicted_writes(&self) -> u64 {
        self.s_cost.writes + self.t_cost.writes + self.c_cost.writes
    }

    /// Block additions per recursive step after any CSE rewrites.
    pub fn addition_count(&self) -> usize {
        self.s_phase.addition_count()
            + self.t_phase.addition_count()
            + self.c_phase.addition_count()
    }
}

/// Builds the addition plan for one recursive step of `alg`.
///
/// With `cse` enabled, greedy length-two elimination runs on the S and T
/// phases (operand kinds differ across phases, so chains never unify across
/// them); output assembly is left as written by `W`.
pub fn build_plan(alg: &FastAlgorithm, strategy: AdditionStrategy, cse: bool) -> AdditionPlan {
    let mut s_phase = Phase::from_factor_columns(alg.u());
    let mut t_phase = Phase::from_factor_columns(alg.v());
    let c_phase = Phase::from_factor_rows(alg.w());
    let cse_report = cse.then(|| {
        let (s2, rs) = eliminate_cse(&s_phase);
        let (t2, rt) = eliminate_cse(&t_phase);
        s_phase = s2;
        t_phase = t2;
        CseReport {
            subexpressions_eliminated: rs.subexpressions_eliminated
                + rt.subexpressions_eliminated,
            additions_saved: rs.additions_saved + rt.additions_saved,
        }
    });
    let s_cost = phase_cost(&s_phase, strategy, PhaseKind::Operand);
    let t_cost = phase_cost(&t_phase, strategy, PhaseKind::Operand);
    let c_cost = phase_cost(&c_phase, strategy, PhaseKind::Output);
    let concurrent_temp_slots = match strategy {
        AdditionStrategy::Streaming => 2 * alg.rank(),
        _ => 2,
    };
    AdditionPlan {
        strategy,
        cse,
        base_dims: alg.base_dims(),
        rank: alg.rank(),
        s_phase,
        t_phase,
        c_phase,
        s_cost,
        t_cost,
        c_cost,
        cse_report,
        concurrent_temp_slots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::{classical_algorithm, stats, strassen};

    #[test]
    fn strassen_write_once_costs() {
        let plan = build_plan(&strassen(), AdditionStrategy::WriteOnce, false);
        // nnz(U,V,W) = 36 reads; 2R + MN = 18 bounds the writes; the four
        // singleton chains S3, S4, T2, T5 materialize nothing.
        assert_eq!(plan.predicted_reads(), 36);
        assert_eq!(plan.predicted_writes(), 14);
        assert!(plan.predicted_writes() <= 18);
    }

    #[test]
    fn strassen_pairwise_costs() {
        let plan = build_plan(&strassen(), AdditionStrategy::Pairwise, false);
        // 2*nnz - 2R - MN reads, nnz writes.
        assert_eq!(plan.predicted_reads(), 2 * 36 - 2 * 7 - 4);
        assert_eq!(plan.predicted_reads(), 54);
        assert_eq!(plan.predicted_writes(), 36);
    }

    #[test]
    fn strassen_streaming_costs() {
        let plan = build_plan(&strassen(), AdditionStrategy::Streaming, false);
        // MK + KN + R reads.
        assert_eq!(plan.predicted_reads(), 4 + 4 + 7);
        assert_eq!(plan.predicted_writes(), 14);
        assert!(plan.predicted_writes() <= 18);
        assert_eq!(plan.concurrent_temp_slots, 14);
    }

    #[test]
    fn pairwise_minus_write_once_is_the_formula_gap() {
        // Algebraic identity of the two closed forms:
        // pairwise reads - write-once reads = nnz - 2R - MN.
        for alg in [
            strassen(),
            classical_algorithm(2, 2, 2),
            classical_algorithm(2, 3, 4),
            classical_algorithm(3, 3, 3),
        ] {
            let st = stats(&alg);
            let (m, _, n) = alg.base_dims();
            let pairwise = build_plan(&alg, AdditionStrategy::Pairwise, false);
            let writeonce = build_plan(&alg, AdditionStrategy::WriteOnce, false);
            assert_eq!(
                pairwise.predicted_reads() - writeonce.predicted_reads(),
                (st.nnz_total - 2 * st.rank - m * n) as u64
            );
        }
    }

    #[test]
    fn plan_addition_count_matches_stats() {
        for alg in [strassen(), classical_algorithm(2, 3, 4)] {
            let plan = build_plan(&alg, AdditionStrategy::WriteOnce, false);
            assert_eq!(plan.addition_count(), stats(&alg).addition_count);
        }
    }

    #[test]
    fn classical_plans_have_no_operand_additions() {
        let plan = build_plan(&classical_algorithm(2, 2, 2), AdditionStrategy::WriteOnce, false);
        assert!(plan.s_phase.outputs.iter().all(|c| c.is_singleton()));
        assert!(plan.t_phase.outputs.iter().all(|c| c.is_singleton()));
        assert_eq!(plan.s_cost.writes + plan.t_cost.writes, 0);
        assert_eq!(plan.c_cost.writes, 4);
    }

    #[test]
    fn streaming_reads_count_distinct_operands() {
        // Classical S/T chains are all singletons: every block is still
        // referenced, so each is read once.
        let plan = build_plan(&classical_algorithm(2, 2, 2), AdditionStrategy::Streaming, false);
        assert_eq!(plan.s_cost.reads, 4);
        assert_eq!(plan.t_cost.reads, 4);
        assert_eq!(plan.c_cost.reads, 8);
    }
}
