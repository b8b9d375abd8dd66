//! Greedy length-two common-subexpression elimination over addition chains.
//!
//! Two chain-term pairs match "up to scalar multiplication": `a*x + b*y`
//! and `c*x + d*y` share a subexpression whenever `b/a == d/c`. The winner
//! is the pair present in the most chains; it becomes an auxiliary chain
//! holding the primitive (content-free) combination, every occurrence is
//! rewritten to a single scaled reference, and the scan repeats until no
//! pair occurs twice.

use std::collections::BTreeMap;

use num_rational::BigRational;

use super::{AdditionChain, ChainTarget, Operand, Phase};
use crate::coeff::Coeff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CseReport {
    pub subexpressions_eliminated: usize,
    /// Sum over eliminated pairs of (occurrences - 1): each occurrence after
    /// the first trades one addition for none, the auxiliary chain costs one.
    pub additions_saved: usize,
}

/// Net change in submatrix reads+writes from eliminating one pair that
/// occurs `k` times, under write-once accounting: `-(k - 3)`. Break-even at
/// `k = 3`; a pair must occur at least four times to reduce traffic.
pub fn cost_delta_cse(k: usize) -> i64 {
    assert!(k >= 2, "a common subexpression occurs at least twice");
    -(k as i64 - 3)
}

/// Unordered operand pair plus the coefficient ratio that makes occurrences
/// scalar multiples of each other. `BTreeMap` ordering doubles as the
/// deterministic tie-break: smallest (operand, operand, ratio) wins.
type PairKey = (Operand, Operand, BigRational);

fn pair_ratio(first: &Coeff, second: &Coeff) -> Option<BigRational> {
    // Ratios across different lambda powers are not plain rationals; such
    // pairs never unify.
    (first.lambda_exp == second.lambda_exp).then(|| &second.value / &first.value)
}

/// Occurrences of every pair: key -> indices of chains containing it.
fn collect_pairs(chains: &[AdditionChain]) -> BTreeMap<PairKey, Vec<usize>> {
    let mut map: BTreeMap<PairKey, Vec<usize>> = BTreeMap::new();
    for (idx, chain) in chains.iter().enumerate() {
        for a in 0..chain.terms.len() {
            for b in a + 1..chain.terms.len() {
                let (mut x, mut y) = (&chain.terms[a], &chain.terms[b]);
                if y.0 < x.0 {
                    std::mem::swap(&mut x, &mut y);
                }
                if let Some(ratio) = pair_ratio(&x.1, &y.1) {
                    map.entry((x.0, y.0, ratio)).or_default().push(idx);
                }
            }
        }
    }
    map
}

/// Rewrites the chains of one phase by greedy length-two elimination.
/// Auxiliary chains participate in later rounds, so nested subexpressions
/// are found too. Returns the rewritten phase and the savings report.
pub fn eliminate_cse(phase: &Phase) -> (Phase, CseReport) {
    let mut chains: Vec<AdditionChain> = phase.aux.iter().chain(&phase.outputs).cloned().collect();
    let mut num_aux = phase.aux.len();
    let mut report = CseReport::default();

    loop {
        let pairs = collect_pairs(&chains);
        let Some((key, members)) = pairs
            .into_iter()
            .max_by(|(ka, va), (kb, vb)| va.len().cmp(&vb.len()).then(kb.cmp(ka)))
            .filter(|(_, v)| v.len() >= 2)
        else {
            break;
        };
        let (op_x, op_y, ratio) = key;
        // Primitive combination q*x + p*y for ratio p/q (reduced, q > 0).
        let p = BigRational::from_integer(ratio.numer().clone());
        let q = BigRational::from_integer(ratio.denom().clone());
        let aux_index = num_aux;
        num_aux += 1;

        for idx in &members {
            let chain = &mut chains[*idx];
            let pos_x = chain.terms.iter().position(|(o, _)| *o == op_x).unwrap();
            let coeff_x = chain.terms[pos_x].1.clone();
            // Occurrence scalar: coeff_x / q (lambda power rides along).
            let scalar = Coeff {
                value: &coeff_x.value / &q,
                lambda_exp: coeff_x.lambda_exp,
            };
            chain.terms.retain(|(o, _)| *o != op_x && *o != op_y);
            chain.terms.push((Operand::Aux(aux_index), scalar));
        }
        chains.push(AdditionChain {
            target: ChainTarget::Aux(aux_index),
            terms: vec![
                (op_x, Coeff::rational(q)),
                (op_y, Coeff::rational(p)),
            ],
        });
        report.subexpressions_eliminated += 1;
        report.additions_saved += members.len() - 1;
    }

    let (aux, outputs): (Vec<_>, Vec<_>) = chains
        .into_iter()
        .partition(|c| matches!(c.target, ChainTarget::Aux(_)));
    (
        Phase {
            outputs,
            aux,
            num_inputs: phase.num_inputs,
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use rand::Rng;
    use rand::SeedableRng;

    fn chain(target: usize, terms: &[(usize, i64)]) -> AdditionChain {
        AdditionChain {
            target: ChainTarget::Output(target),
            terms: terms
                .iter()
                .map(|&(op, c)| (Operand::Input(op), Coeff::from_int(c)))
                .collect(),
        }
    }

    fn phase(chains: Vec<AdditionChain>, num_inputs: usize) -> Phase {
        Phase {
            outputs: chains,
            aux: Vec::new(),
            num_inputs,
        }
    }

    #[test]
    fn worked_example_t11_t25() {
        // T11 = B24 - B12 - B22, T25 = B23 + B12 + B22 for a 2x4 B-block
        // grid; the shared subexpression is B12 + B22 up to sign.
        let b12 = 1;
        let b22 = 5;
        let b23 = 6;
        let b24 = 7;
        let t11 = chain(0, &[(b24, 1), (b12, -1), (b22, -1)]);
        let t25 = chain(1, &[(b23, 1), (b12, 1), (b22, 1)]);
        let (rewritten, report) = eliminate_cse(&phase(vec![t11, t25], 8));

        assert_eq!(report.subexpressions_eliminated, 1);
        assert_eq!(report.additions_saved, 1);
        assert_eq!(rewritten.aux.len(), 1);
        // Y1 = B12 + B22.
        assert_eq!(
            rewritten.aux[0].terms,
            vec![
                (Operand::Input(b12), Coeff::from_int(1)),
                (Operand::Input(b22), Coeff::from_int(1)),
            ]
        );
        // T11 = B24 - Y1, T25 = B23 + Y1.
        assert_eq!(
            rewritten.outputs[0].terms,
            vec![
                (Operand::Input(b24), Coeff::from_int(1)),
                (Operand::Aux(0), Coeff::from_int(-1)),
            ]
        );
        assert_eq!(
            rewritten.outputs[1].terms,
            vec![
                (Operand::Input(b23), Coeff::from_int(1)),
                (Operand::Aux(0), Coeff::from_int(1)),
            ]
        );
    }

    #[test]
    fn distinct_pairs_are_untouched() {
        let p = phase(
            vec![chain(0, &[(0, 1), (1, 1)]), chain(1, &[(2, 1), (3, -1)])],
            4,
        );
        let (rewritten, report) = eliminate_cse(&p);
        assert_eq!(report, CseReport::default());
        assert_eq!(rewritten, p);
    }

    #[test]
    fn planted_pair_in_five_chains() {
        let mut chains = Vec::new();
        for t in 0..5 {
            // Pair (0, 1) with per-chain scale, plus a distinct third term.
            let s = t as i64 + 1;
            chains.push(chain(t, &[(0, 2 * s), (1, 3 * s), (t + 2, 1)]));
        }
        let (rewritten, report) = eliminate_cse(&phase(chains, 7));
        assert_eq!(report.subexpressions_eliminated, 1);
        assert_eq!(report.additions_saved, 4);
        assert_eq!(cost_delta_cse(5), -2);
        // Primitive chain is content-free: 2*x + 3*y.
        assert_eq!(
            rewritten.aux[0].terms,
            vec![
                (Operand::Input(0), Coeff::from_int(2)),
                (Operand::Input(1), Coeff::from_int(3)),
            ]
        );
    }

    #[test]
    fn cost_delta_thresholds() {
        assert_eq!(cost_delta_cse(2), 1);
        assert_eq!(cost_delta_cse(3), 0);
        assert_eq!(cost_delta_cse(4), -1);
    }

    #[test]
    #[should_panic(expected = "at least twice")]
    fn cost_delta_rejects_k_below_two() {
        cost_delta_cse(1);
    }

    #[test]
    fn semantics_preserved_on_random_chains() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let num_inputs = rng.random_range(3..8);
            let num_chains = rng.random_range(2..7);
            let chains: Vec<AdditionChain> = (0..num_chains)
                .map(|t| {
                    let len = rng.random_range(1..=num_inputs);
                    let mut ops: Vec<usize> = (0..num_inputs).collect();
                    // Partial shuffle for distinct operands.
                    for i in 0..len {
                        let j = rng.random_range(i..num_inputs);
                        ops.swap(i, j);
                    }
                    let terms = (0..len)
                        .map(|i| {
                            let c = loop {
                                let c = rng.random_range(-3..=3i64);
                                if c != 0 {
                                    break c;
                                }
                            };
                            (ops[i], c)
                        })
                        .collect::<Vec<_>>();
                    chain(t, &terms)
                })
                .collect();
            let before = phase(chains, num_inputs);
            let (after, _) = eliminate_cse(&before);
            let inputs: Vec<BigRational> = (0..num_inputs)
                .map(|_| {
                    BigRational::new(
                        BigInt::from(rng.random_range(-50..50i64)),
                        BigInt::from(rng.random_range(1..9i64)),
                    )
                })
                .collect();
            assert_eq!(before.evaluate(&inputs), after.evaluate(&inputs));
        }
    }

    #[test]
    fn sign_flipped_pairs_unify() {
        // (x + y) and (-x - y): ratio is 1 in both, scalars +1 / -1.
        let p = phase(
            vec![
                chain(0, &[(0, 1), (1, 1), (2, 1)]),
                chain(1, &[(0, -1), (1, -1), (3, 1)]),
            ],
            4,
        );
        let (rewritten, report) = eliminate_cse(&p);
        assert_eq!(report.subexpressions_eliminated, 1);
        assert_eq!(rewritten.outputs[0].terms.last().unwrap().1, Coeff::from_int(1));
        assert_eq!(rewritten.outputs[1].terms.last().unwrap().1, Coeff::from_int(-1));
    }

    #[test]
    fn opposite_ratio_pairs_do_not_unify() {
        // (x + y) vs (x - y) are different subexpressions.
        let p = phase(
            vec![
                chain(0, &[(0, 1), (1, 1)]),
                chain(1, &[(0, 1), (1, -1)]),
            ],
            2,
        );
        let (_, report) = eliminate_cse(&p);
        assert_eq!(report.subexpressions_eliminated, 0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_phase() -> impl Strategy<Value = Phase> {
            (3usize..7).prop_flat_map(|num_inputs| {
                let chain_strategy = proptest::collection::vec(
                    (0..num_inputs, -3i64..=3),
                    1..=num_inputs,
                )
                .prop_map(move |raw| {
                    // Dedup operands, drop zero coefficients, keep nonempty.
                    let mut seen = vec![false; num_inputs];
                    let mut terms = Vec::new();
                    for (op, c) in raw {
                        if !seen[op] && c != 0 {
                            seen[op] = true;
                            terms.push((Operand::Input(op), Coeff::from_int(c)));
                        }
                    }
                    if terms.is_empty() {
                        terms.push((Operand::Input(0), Coeff::from_int(1)));
                    }
                    terms
                });
                proptest::collection::vec(chain_strategy, 1..6).prop_map(move |chains| Phase {
                    outputs: chains
                        .into_iter()
                        .enumerate()
                        .map(|(t, terms)| AdditionChain {
                            target: ChainTarget::Output(t),
                            terms,
                        })
                        .collect(),
                    aux: Vec::new(),
                    num_inputs,
                })
            })
        }

        proptest! {
            // CSE is semantics-preserving: identical rationals before and
            // after rewriting, for arbitrary chains and inputs.
            #[test]
            fn cse_preserves_chain_semantics(
                phase in arb_phase(),
                inputs in proptest::collection::vec((-40i64..40, 1i64..8), 8),
            ) {
                let (rewritten, _) = eliminate_cse(&phase);
                let values: Vec<BigRational> = inputs
                    .iter()
                    .map(|(p, q)| BigRational::new(BigInt::from(*p), BigInt::from(*q)))
                    .collect();
                prop_assert_eq!(phase.evaluate(&values), rewritten.evaluate(&values));
            }
        }
    }
}
