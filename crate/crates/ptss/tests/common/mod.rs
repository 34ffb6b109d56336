//! Shared test support: corpus loading, random specification generators,
//! and independent oracles the implementation is checked against.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use num::One;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ptss::analysis::{apply_m, AnalyzerState, Multiplicity};
use ptss::bisim::Relation;
use ptss::engine::{match_rule, TransSet};
use ptss::format::ChiTable;
use ptss::syntax::{
    classify_evaluable, parse_spec, parse_state_term, NegPremise, PosPremise, Ptss, Rule,
    RuleSource,
};
use ptss::terms::{
    eval_dist, Distribution, Rational, Signature, StateTerm, DistTerm, Substitution,
};

pub fn corpus_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

pub fn load_corpus(name: &str) -> Ptss {
    let text = std::fs::read_to_string(corpus_path(name)).expect("corpus file readable");
    parse_spec(&text).expect("corpus file parses")
}

pub fn term(p: &Ptss, s: &str) -> StateTerm {
    parse_state_term(s, &p.signature).expect("term parses")
}

pub fn rat(s: &str) -> Rational {
    ptss::terms::rational_from_str(s).expect("rational parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact weights in (0,1] summing to 1 by repeated halving.
pub fn dyadic_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rational> {
    assert!(n >= 1);
    let mut weights = Vec::with_capacity(n);
    let mut rest = Rational::one();
    for i in 0..n {
        if i + 1 == n {
            weights.push(rest.clone());
        } else {
            let half = rest.clone() / Rational::new(2.into(), 1.into());
            weights.push(half.clone());
            rest = half;
        }
    }
    if n > 1 && rng.gen_bool(0.5) {
        weights.reverse();
    }
    weights
}

/// Configuration of the random specification generator.
pub struct GenConfig {
    /// Number of non-constant operators (arity 1..=2).
    pub max_operators: usize,
    /// Allow targets to mention operators of the same or higher level
    /// (creates cyclic dependencies; fine for static analysis, unbounded
    /// for evaluation).
    pub cyclic_targets: bool,
    /// Restrict to the executable class and guarantee finite fragments.
    pub evaluable: bool,
}

impl GenConfig {
    pub fn static_analysis() -> Self {
        GenConfig { max_operators: 4, cyclic_targets: true, evaluable: false }
    }

    pub fn evaluable() -> Self {
        GenConfig { max_operators: 4, cyclic_targets: false, evaluable: true }
    }
}

pub const GEN_ACTIONS: [&str; 2] = ["a", "b"];

/// Generate a well-formed specification. With `evaluable` the result is in
/// the executable class and induces finite fragments: operators are
/// levelled, targets only mention strictly lower operators, premises test
/// source variables (possibly under a lower-level context), and negative
/// premises test bare source variables. Two twin constants with identical
/// self-looping axioms are always included so strictly bisimilar distinct
/// states exist.
pub fn gen_spec(rng: &mut ChaCha8Rng, config: &GenConfig) -> Ptss {
    let mut sig = Signature::new();
    let constants = ["c0", "c1", "c2"];
    for c in constants {
        sig.declare(c, 0);
    }
    let n_ops = rng.gen_range(1..=config.max_operators);
    let mut level_of: Vec<(String, usize)> = Vec::new();
    for k in 0..n_ops {
        let name = format!("f{k}");
        sig.declare(name.clone(), rng.gen_range(1..=2));
        level_of.push((name, k + 1));
    }

    let mut rules: Vec<Rule> = Vec::new();

    // twin constants with the same behavior: c0 and c1 loop on `a`
    for c in ["c0", "c1"] {
        rules.push(Rule {
            name: None,
            pos_premises: vec![],
            neg_premises: vec![],
            source: RuleSource::Op(c.to_string(), vec![]),
            conclusion_action: "a".to_string(),
            target: DistTerm::Dirac(StateTerm::constant(c)),
        });
    }
    // c2 leaks between actions to break symmetry
    if rng.gen_bool(0.8) {
        let weights = dyadic_weights(rng, 2);
        rules.push(Rule {
            name: None,
            pos_premises: vec![],
            neg_premises: vec![],
            source: RuleSource::Op("c2".to_string(), vec![]),
            conclusion_action: GEN_ACTIONS[rng.gen_range(0..GEN_ACTIONS.len())].to_string(),
            target: DistTerm::Convex(vec![
                (weights[0].clone(), DistTerm::Dirac(StateTerm::constant("c0"))),
                (weights[1].clone(), DistTerm::Dirac(StateTerm::constant("c2"))),
            ]),
        });
    }

    for (op, level) in level_of.clone() {
        let arity = sig.arity(&op).unwrap();
        let n_rules = rng.gen_range(0..=2);
        for _ in 0..n_rules {
            let source_vars: Vec<String> = (0..arity).map(|i| format!("x{i}")).collect();
            let mut pos_premises = Vec::new();
            let mut neg_premises = Vec::new();
            let mut derivatives = Vec::new();
            for (i, x) in source_vars.iter().enumerate() {
                match rng.gen_range(0..5) {
                    0 => {} // untested argument
                    1 => {
                        neg_premises.push(NegPremise {
                            lhs: StateTerm::var(x.clone()),
                            action: GEN_ACTIONS[rng.gen_range(0..GEN_ACTIONS.len())].to_string(),
                        });
                    }
                    _ => {
                        let lhs = if rng.gen_bool(0.15) {
                            // premise testing a context around the variable
                            match lower_op(&sig, &level_of, level, rng) {
                                Some((ctx_op, ctx_arity)) => StateTerm::App(
                                    ctx_op,
                                    (0..ctx_arity).map(|_| StateTerm::var(x.clone())).collect(),
                                ),
                                None => StateTerm::var(x.clone()),
                            }
                        } else {
                            StateTerm::var(x.clone())
                        };
                        let m = format!("m{i}");
                        pos_premises.push(PosPremise {
                            lhs,
                            action: GEN_ACTIONS[rng.gen_range(0..GEN_ACTIONS.len())].to_string(),
                            derivative: m.clone(),
                        });
                        derivatives.push(m);
                    }
                }
            }
            let target = gen_dist_term(
                rng,
                &sig,
                &level_of,
                if config.cyclic_targets { usize::MAX } else { level },
                &source_vars,
                &derivatives,
                2,
            );
            rules.push(Rule {
                name: None,
                pos_premises,
                neg_premises,
                source: RuleSource::Op(op.clone(), source_vars),
                conclusion_action: GEN_ACTIONS[rng.gen_range(0..GEN_ACTIONS.len())].to_string(),
                target,
            });
        }
    }

    let spec = Ptss::new(sig, rules);
    for (i, rule) in spec.rules.iter().enumerate() {
        let d = ptss::syntax::validate_simple(rule, &spec.signature);
        assert!(d.is_empty(), "generated rule {i} invalid: {d}");
    }
    if config.evaluable {
        let d = classify_evaluable(&spec);
        assert!(d.is_empty(), "generated spec not evaluable: {d}");
    }
    spec
}

fn lower_op(
    sig: &Signature,
    level_of: &[(String, usize)],
    level: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(String, usize)> {
    let candidates: Vec<&(String, usize)> =
        level_of.iter().filter(|(_, l)| *l < level).collect();
    if candidates.is_empty() {
        return None;
    }
    let (name, _) = candidates[rng.gen_range(0..candidates.len())];
    Some((name.clone(), sig.arity(name).unwrap()))
}

fn gen_dist_term(
    rng: &mut ChaCha8Rng,
    sig: &Signature,
    level_of: &[(String, usize)],
    max_level: usize,
    source_vars: &[String],
    derivatives: &[String],
    depth: usize,
) -> DistTerm {
    let choice = rng.gen_range(0..10);
    if choice < 4 && !derivatives.is_empty() {
        return DistTerm::dvar(derivatives[rng.gen_range(0..derivatives.len())].clone());
    }
    if choice < 6 {
        // Dirac of a source variable or constant
        if !source_vars.is_empty() && rng.gen_bool(0.6) {
            return DistTerm::Dirac(StateTerm::var(
                source_vars[rng.gen_range(0..source_vars.len())].clone(),
            ));
        }
        return DistTerm::Dirac(StateTerm::constant(format!("c{}", rng.gen_range(0..3))));
    }
    if choice < 8 && depth > 0 {
        let n = rng.gen_range(2..=3);
        let weights = dyadic_weights(rng, n);
        return DistTerm::Convex(
            weights
                .into_iter()
                .map(|w| {
                    (
                        w,
                        gen_dist_term(rng, sig, level_of, max_level, source_vars, derivatives, depth - 1),
                    )
                })
                .collect(),
        );
    }
    if depth > 0 {
        // lift of an operator below the level bound
        let candidates: Vec<(String, usize)> = level_of
            .iter()
            .filter(|(_, l)| *l < max_level || max_level == usize::MAX)
            .map(|(n, _)| (n.clone(), sig.arity(n).unwrap()))
            .collect();
        if !candidates.is_empty() {
            let (op, arity) = candidates[rng.gen_range(0..candidates.len())].clone();
            return DistTerm::Lift(
                op,
                (0..arity)
                    .map(|_| {
                        gen_dist_term(rng, sig, level_of, max_level, source_vars, derivatives, depth - 1)
                    })
                    .collect(),
            );
        }
    }
    DistTerm::Dirac(StateTerm::constant(format!("c{}", rng.gen_range(0..3))))
}

/// A random analyzer state over the spec's operator arguments with small
/// finite entries and occasional infinities.
pub fn gen_state(rng: &mut ChaCha8Rng, p: &Ptss) -> AnalyzerState {
    let mut state = AnalyzerState::bottom(p);
    let keys: Vec<(String, usize)> = state.iter().map(|(k, _)| k.clone()).collect();
    for (op, i) in keys {
        let v = match rng.gen_range(0..6) {
            0 => Multiplicity::Inf,
            k => Multiplicity::fin(rng.gen_range(0..=k as u32)),
        };
        state.set(&op, i, v);
    }
    state
}

/// A state pointwise above `base`.
pub fn gen_state_above(rng: &mut ChaCha8Rng, _p: &Ptss, base: &AnalyzerState) -> AnalyzerState {
    let mut state = base.clone();
    let keys: Vec<(String, usize)> = state.iter().map(|(k, _)| k.clone()).collect();
    for (op, i) in keys {
        match rng.gen_range(0..3) {
            0 => {}
            1 => {
                let bumped = state.get(&op, i) + Multiplicity::fin(rng.gen_range(1..=2u32));
                state.set(&op, i, bumped);
            }
            _ => {
                if rng.gen_bool(0.2) {
                    state.set(&op, i, Multiplicity::Inf);
                }
            }
        }
    }
    state
}

/// Plain parallel iteration of the counting function for `sweeps` rounds
/// from the all-zero state. Entries exceeding `cap` are snapped to
/// infinity after each sweep, which is exact below the cap because the
/// arithmetic never maps large operands back under it (except by a zero
/// factor, which is exact anyway).
pub fn jacobi(p: &Ptss, chi: &ChiTable, sweeps: usize, cap: &Multiplicity) -> AnalyzerState {
    let mut state = AnalyzerState::bottom(p);
    for _ in 0..sweeps {
        let mut next = apply_m(p, chi, &state);
        let keys: Vec<(String, usize)> = next.iter().map(|(k, _)| k.clone()).collect();
        for (op, i) in keys {
            if &next.get(&op, i) > cap {
                next.set(&op, i, Multiplicity::Inf);
            }
        }
        if next == state {
            return state;
        }
        state = next;
    }
    state
}

/// Independent lifting-check oracle: enumerate every subset of the union
/// of both supports directly against the definition.
pub fn naive_lift_check(
    pi: &Distribution,
    pi2: &Distribution,
    rel: &Relation,
    eps: &Rational,
) -> bool {
    let universe: Vec<StateTerm> = {
        let mut u: BTreeSet<StateTerm> = pi.support().cloned().collect();
        u.extend(pi2.support().cloned());
        u.into_iter().collect()
    };
    assert!(universe.len() <= 16, "oracle universe too large");
    for mask in 0u32..(1 << universe.len()) {
        let subset: Vec<&StateTerm> = universe
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, t)| t)
            .collect();
        let lhs = pi.mass_of_set(subset.iter().copied());
        let image: BTreeSet<&StateTerm> = universe
            .iter()
            .chain(pi2.support())
            .filter(|y| subset.iter().any(|x| rel.related(x, y)))
            .collect();
        let rhs = pi2.mass_of_set(image.into_iter());
        if lhs > rhs.clone() + eps {
            return false;
        }
    }
    true
}

/// Top-down rule evaluation without memoization or fixed points; only
/// terminates on premise-well-founded specifications (the corpus is).
pub fn naive_transitions(p: &Ptss, t: &StateTerm, fuel: usize) -> TransSet {
    assert!(fuel > 0, "naive evaluator ran out of fuel");
    let mut out = TransSet::new();
    'rules: for rule in &p.rules {
        let Some(sigma) = match_rule(rule, t) else { continue };
        for np in &rule.neg_premises {
            let v = sigma.apply_state(&np.lhs);
            let trans = naive_transitions(p, &v, fuel - 1);
            if trans.iter().any(|(a, _)| *a == np.action) {
                continue 'rules;
            }
        }
        let mut candidate_sets: Vec<Vec<Distribution>> = Vec::new();
        for pp in &rule.pos_premises {
            let u = sigma.apply_state(&pp.lhs);
            let trans = naive_transitions(p, &u, fuel - 1);
            let cands: Vec<Distribution> = trans
                .into_iter()
                .filter(|(a, _)| *a == pp.action)
                .map(|(_, d)| d)
                .collect();
            if cands.is_empty() {
                continue 'rules;
            }
            candidate_sets.push(cands);
        }
        let total: usize = candidate_sets.iter().map(|c| c.len()).product();
        for combo in 0..total.max(1) {
            let mut idx = combo;
            let mut full = sigma.clone();
            for (k, pp) in rule.pos_premises.iter().enumerate() {
                let n = candidate_sets[k].len();
                let pi = &candidate_sets[k][idx % n];
                idx /= n;
                let as_term = if pi.support_size() == 1 {
                    DistTerm::Dirac(pi.support().next().unwrap().clone())
                } else {
                    DistTerm::Convex(
                        pi.iter().map(|(u, p)| (p.clone(), DistTerm::Dirac(u.clone()))).collect(),
                    )
                };
                full.insert_dist(pp.derivative.clone(), as_term);
            }
            let pi = eval_dist(&full.apply_dist(&rule.target)).expect("closed target");
            out.insert((rule.conclusion_action.clone(), pi));
        }
    }
    out
}

/// Random distribution over a small constant universe with dyadic masses.
pub fn gen_distribution(rng: &mut ChaCha8Rng, universe: &[StateTerm]) -> Distribution {
    let n = rng.gen_range(1..=universe.len().min(4));
    let mut picked: Vec<usize> = (0..universe.len()).collect();
    for i in (1..picked.len()).rev() {
        let j = rng.gen_range(0..=i);
        picked.swap(i, j);
    }
    picked.truncate(n);
    picked.sort_unstable();
    let weights = dyadic_weights(rng, n);
    Distribution::from_weighted(
        picked.into_iter().zip(weights).map(|(i, w)| (universe[i].clone(), w)),
    )
    .expect("valid distribution")
}

/// Random symmetric relation over a universe.
pub fn gen_relation(rng: &mut ChaCha8Rng, universe: &[StateTerm]) -> Relation {
    let mut rel = Relation::new();
    for (i, a) in universe.iter().enumerate() {
        for b in universe.iter().skip(i + 1) {
            if rng.gen_bool(0.4) {
                rel.insert(a, b);
            }
        }
    }
    rel
}

/// Closed terms of height at most 2 over the spec's signature, capped.
pub fn small_closed_terms(p: &Ptss, cap: usize) -> Vec<StateTerm> {
    let constants: Vec<StateTerm> = p
        .signature
        .operators()
        .filter(|(_, a)| *a == 0)
        .map(|(n, _)| StateTerm::constant(n))
        .collect();
    let mut out = constants.clone();
    for (op, arity) in p.signature.operators() {
        if arity == 0 {
            continue;
        }
        let mut stack = vec![Vec::new()];
        for _ in 0..arity {
            let mut next = Vec::new();
            for prefix in &stack {
                for c in &constants {
                    let mut prefix: Vec<StateTerm> = prefix.clone();
                    prefix.push(c.clone());
                    next.push(prefix);
                }
            }
            stack = next;
        }
        for args in stack {
            out.push(StateTerm::App(op.to_string(), args));
            if out.len() >= cap {
                return out;
            }
        }
    }
    out
}

/// Substitution composition for the composition law test.
pub fn compose(outer: &Substitution, inner: &Substitution, vars: &[&str], dvars: &[&str]) -> Substitution {
    let mut sigma = Substitution::new();
    for v in vars {
        match inner.state_binding(v) {
            Some(t) => sigma.insert_state(v.to_string(), outer.apply_state(t)),
            None => {
                if let Some(t) = outer.state_binding(v) {
                    sigma.insert_state(v.to_string(), t.clone());
                }
            }
        }
    }
    for m in dvars {
        match inner.dist_binding(m) {
            Some(t) => sigma.insert_dist(m.to_string(), outer.apply_dist(t)),
            None => {
                if let Some(t) = outer.dist_binding(m) {
                    sigma.insert_dist(m.to_string(), t.clone());
                }
            }
        }
    }
    sigma
}
