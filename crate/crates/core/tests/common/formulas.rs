//! Random formulas in the compilable fragment and exhaustive trace sets.

#![allow(dead_code)]

use actguard::ltlf::{evaluate_trace, to_dfa, Assignment, Formula, Trace};
use rand::Rng;

pub const ATOMS: [&str; 3] = ["p", "q", "r"];

pub fn gen_beta<R: Rng>(rng: &mut R, depth: u32) -> Formula {
    if depth == 0 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..8) {
            0 => Formula::True,
            1 => Formula::False,
            i => Formula::atom(ATOMS[i % 3]),
        };
    }
    let a = gen_beta(rng, depth - 1);
    match rng.gen_range(0..4) {
        0 => Formula::not(a),
        1 => Formula::and(a, gen_beta(rng, depth - 1)),
        2 => Formula::or(a, gen_beta(rng, depth - 1)),
        _ => Formula::implies(a, gen_beta(rng, depth - 1)),
    }
}

pub fn gen_pattern<R: Rng>(rng: &mut R) -> Formula {
    let beta = gen_beta(rng, 3);
    if rng.gen_bool(0.5) {
        Formula::globally(beta)
    } else {
        Formula::eventually_always(beta)
    }
}

/// A conjunction of one to three `G`/`FG` patterns.
pub fn gen_formula<R: Rng>(rng: &mut R) -> Formula {
    let n = rng.gen_range(1..=3);
    let mut f = gen_pattern(rng);
    for _ in 1..n {
        f = Formula::and(f, gen_pattern(rng));
    }
    f
}

/// Every trace over `ATOMS` of length 1 to `max_len`.
pub fn all_traces(max_len: usize) -> Vec<Trace> {
    let symbols: Vec<Assignment> = (0..8u32)
        .map(|bits| ATOMS.iter().enumerate().map(|(i, a)| (a.to_string(), bits >> i & 1 == 1)).collect())
        .collect();
    let mut out = Vec::new();
    let mut layer: Vec<Vec<Assignment>> = vec![vec![]];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|prefix| {
                symbols.iter().map(move |s| {
                    let mut t = prefix.clone();
                    t.push(s.clone());
                    t
                })
            })
            .collect();
        out.extend(layer.iter().cloned().map(Trace));
    }
    out
}

/// Number of traces on which the compiled automaton and the direct
/// evaluator disagree.
pub fn mismatches(f: &Formula, traces: &[Trace]) -> usize {
    let dfa = to_dfa(f).unwrap();
    traces.iter().filter(|t| dfa.accepts(t).unwrap() != evaluate_trace(f, t).unwrap()).count()
}
