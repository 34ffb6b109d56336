//! The expansivity analyzer: counting arithmetic over the naturals extended
//! with infinity, the weighted-multiplicity equations, least-fixed-point
//! iteration with widening, and the expansivity bound.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul};

use num::bigint::BigUint;
use num::traits::Pow;
use num::{One, Zero};
use thiserror::Error;

use crate::format::{discriminating_power, ChiTable};
use crate::syntax::{Ptss, RuleSource};
use crate::terms::{DistTerm, Rational, StateTerm, VarId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("operator `{op}` has arity {arity}, got {given} distances")]
    ArityMismatch { op: String, arity: usize, given: usize },
    #[error("distance {0} is outside [0,1]")]
    EpsOutOfRange(String),
    #[error("exponent {0} too large for exact evaluation")]
    ExponentTooLarge(String),
    #[error("analyzer result failed the fixed-point verification at ({0},{1})")]
    NotAFixpoint(String, usize),
}

/// A value in the naturals extended with infinity. Addition and
/// multiplication follow the absorbing rules `inf + n = inf`,
/// `0 * inf = 0` and `n * inf = inf` for `n >= 1`; the order is the
/// natural one with every finite value below `Inf`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Multiplicity {
    Fin(BigUint),
    Inf,
}

impl Multiplicity {
    pub fn zero() -> Self {
        Multiplicity::Fin(BigUint::zero())
    }

    pub fn one() -> Self {
        Multiplicity::Fin(BigUint::one())
    }

    pub fn fin(n: impl Into<BigUint>) -> Self {
        Multiplicity::Fin(n.into())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Multiplicity::Fin(n) if n.is_zero())
    }

    pub fn is_inf(&self) -> bool {
        matches!(self, Multiplicity::Inf)
    }

    pub fn max(self, other: Self) -> Self {
        std::cmp::max(self, other)
    }
}

impl Add for Multiplicity {
    type Output = Multiplicity;
    fn add(self, rhs: Multiplicity) -> Multiplicity {
        match (self, rhs) {
            (Multiplicity::Inf, _) | (_, Multiplicity::Inf) => Multiplicity::Inf,
            (Multiplicity::Fin(a), Multiplicity::Fin(b)) => Multiplicity::Fin(a + b),
        }
    }
}

impl Mul for Multiplicity {
    type Output = Multiplicity;
    fn mul(self, rhs: Multiplicity) -> Multiplicity {
        if self.is_zero() || rhs.is_zero() {
            return Multiplicity::zero();
        }
        match (self, rhs) {
            (Multiplicity::Inf, _) | (_, Multiplicity::Inf) => Multiplicity::Inf,
            (Multiplicity::Fin(a), Multiplicity::Fin(b)) => Multiplicity::Fin(a * b),
        }
    }
}

impl std::iter::Sum for Multiplicity {
    fn sum<I: Iterator<Item = Multiplicity>>(iter: I) -> Multiplicity {
        iter.fold(Multiplicity::zero(), Add::add)
    }
}

impl fmt::Display for Multiplicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Multiplicity::Fin(n) => write!(f, "{n}"),
            Multiplicity::Inf => write!(f, "inf"),
        }
    }
}

/// The per-operator-argument component of the analyzer lattice: one
/// multiplicity per declared operator argument, ordered pointwise. The
/// term-indexed component is not materialized; it is computed on demand by
/// structural recursion over the entries stored here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzerState {
    entries: BTreeMap<(String, usize), Multiplicity>,
}

impl AnalyzerState {
    /// The all-zero bottom element for a signature.
    pub fn bottom(p: &Ptss) -> Self {
        let mut entries = BTreeMap::new();
        for (op, arity) in p.signature.operators() {
            for i in 0..arity {
                entries.insert((op.to_string(), i), Multiplicity::zero());
            }
        }
        AnalyzerState { entries }
    }

    pub fn get(&self, op: &str, index: usize) -> Multiplicity {
        self.entries.get(&(op.to_string(), index)).cloned().unwrap_or_else(Multiplicity::zero)
    }

    pub fn set(&mut self, op: &str, index: usize, value: Multiplicity) {
        self.entries.insert((op.to_string(), index), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize), &Multiplicity)> {
        self.entries.iter()
    }

    /// Pointwise order.
    pub fn leq(&self, other: &AnalyzerState) -> bool {
        self.entries.iter().all(|(k, v)| other.entries.get(k).is_some_and(|w| v <= w))
    }

    /// Pointwise least upper bound.
    pub fn join(&self, other: &AnalyzerState) -> AnalyzerState {
        let mut entries = self.entries.clone();
        for (k, v) in &other.entries {
            entries
                .entry(k.clone())
                .and_modify(|w| {
                    if v > w {
                        *w = v.clone();
                    }
                })
                .or_insert_with(|| v.clone());
        }
        AnalyzerState { entries }
    }

    /// Pointwise greatest lower bound.
    pub fn meet(&self, other: &AnalyzerState) -> AnalyzerState {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                other.entries.get(k).map(|w| (k.clone(), std::cmp::min(v, w).clone()))
            })
            .collect();
        AnalyzerState { entries }
    }
}

/// Weighted multiplicity of a state or distribution variable in a state
/// term: occurrences of the variable weighted by the expansivity power of
/// the operators applied on top of it.
pub fn weighted_multiplicity_state(
    state: &AnalyzerState,
    t: &StateTerm,
    zeta: &VarId,
) -> Multiplicity {
    match t {
        StateTerm::Var(x) => match zeta {
            VarId::State(y) if x == y => Multiplicity::one(),
            _ => Multiplicity::zero(),
        },
        StateTerm::App(op, args) => args
            .iter()
            .enumerate()
            .map(|(i, arg)| state.get(op, i) * weighted_multiplicity_state(state, arg, zeta))
            .sum(),
    }
}

/// Weighted multiplicity in a distribution term. Convex combinations take
/// the maximum over their summands; under a lifted operator each argument
/// is weighted by the operator's expansivity power, floored by its
/// discriminating power.
pub fn weighted_multiplicity_dist(
    state: &AnalyzerState,
    chi: &ChiTable,
    theta: &DistTerm,
    zeta: &VarId,
) -> Multiplicity {
    match theta {
        DistTerm::DVar(m) => match zeta {
            VarId::Dist(d) if m == d => Multiplicity::one(),
            _ => Multiplicity::zero(),
        },
        DistTerm::Dirac(t) => weighted_multiplicity_state(state, t, zeta),
        DistTerm::Convex(parts) => parts
            .iter()
            .map(|(_, body)| weighted_multiplicity_dist(state, chi, body, zeta))
            .max()
            .unwrap_or_else(Multiplicity::zero),
        DistTerm::Lift(op, args) => args
            .iter()
            .enumerate()
            .map(|(i, arg)| {
                let weight = if chi.get(op, i).unwrap_or(false) {
                    state.get(op, i).max(Multiplicity::one())
                } else {
                    state.get(op, i)
                };
                weight * weighted_multiplicity_dist(state, chi, arg, zeta)
            })
            .sum(),
    }
}

fn rule_entry(
    state: &AnalyzerState,
    chi: &ChiTable,
    rule: &crate::syntax::Rule,
    var: &str,
) -> Multiplicity {
    let mut value =
        weighted_multiplicity_dist(state, chi, &rule.target, &VarId::State(var.to_string()));
    for pp in &rule.pos_premises {
        let in_premise =
            weighted_multiplicity_state(state, &pp.lhs, &VarId::State(var.to_string()));
        let deriv_in_target = weighted_multiplicity_dist(
            state,
            chi,
            &rule.target,
            &VarId::Dist(pp.derivative.clone()),
        );
        value = value + in_premise * deriv_in_target;
    }
    value
}

/// One parallel application of the counting function: every entry is
/// recomputed from the given state. The supremum over an empty rule set
/// is 0.
pub fn apply_m(p: &Ptss, chi: &ChiTable, state: &AnalyzerState) -> AnalyzerState {
    let mut next = AnalyzerState::bottom(p);
    for (op, arity) in p.signature.operators() {
        for i in 0..arity {
            let mut sup = Multiplicity::zero();
            for rule in p.rules_of(op) {
                let RuleSource::Op(_, vars) = &rule.source else { unreachable!() };
                let v = rule_entry(state, chi, rule, &vars[i]);
                if v > sup {
                    sup = v;
                }
            }
            next.set(op, i, sup);
        }
    }
    next
}

/// The computed expansivity powers together with the discriminating powers
/// and iteration metadata. The table is a verified fixed point of the
/// counting function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansivityTable {
    state: AnalyzerState,
    chi: ChiTable,
    arities: BTreeMap<String, usize>,
    pub sweeps: usize,
    pub widened: Vec<(String, usize)>,
    pub converged: bool,
}

impl ExpansivityTable {
    /// Expansivity power of argument `index` (0-based) of `op`.
    pub fn omega(&self, op: &str, index: usize) -> Option<Multiplicity> {
        let arity = *self.arities.get(op)?;
        if index >= arity {
            return None;
        }
        Some(self.state.get(op, index))
    }

    pub fn omega_row(&self, op: &str) -> Option<Vec<Multiplicity>> {
        let arity = *self.arities.get(op)?;
        Some((0..arity).map(|i| self.state.get(op, i)).collect())
    }

    pub fn operators(&self) -> impl Iterator<Item = (&str, Vec<Multiplicity>)> {
        self.arities
            .iter()
            .map(|(op, arity)| (op.as_str(), (0..*arity).map(|i| self.state.get(op, i)).collect()))
    }

    pub fn arity(&self, op: &str) -> Option<usize> {
        self.arities.get(op).copied()
    }

    pub fn chi(&self) -> &ChiTable {
        &self.chi
    }

    pub fn state(&self) -> &AnalyzerState {
        &self.state
    }

    /// Weighted multiplicity of a variable in a state term at the fixed
    /// point.
    pub fn omega_t_state(&self, t: &StateTerm, zeta: &VarId) -> Multiplicity {
        weighted_multiplicity_state(&self.state, t, zeta)
    }

    /// Weighted multiplicity of a variable in a distribution term at the
    /// fixed point.
    pub fn omega_t_dist(&self, theta: &DistTerm, zeta: &VarId) -> Multiplicity {
        weighted_multiplicity_dist(&self.state, &self.chi, theta, zeta)
    }
}

/// Compute the least fixed point of the counting function by ascending
/// iteration from the all-zero state, updating entries in place within a
/// sweep.
///
/// An entry of the least fixed point is infinite exactly when it sits on a
/// dependency cycle with net amplification, and any finite entry stabilizes
/// within as many sweeps as there are entries. Hence every entry that still
/// strictly increases during sweep n+1 or later (n = number of entries) is
/// widened to infinity; iteration then continues to stabilization. The
/// result is verified to be a fixed point by one extra parallel application.
pub fn lfp_expansivity(p: &Ptss) -> Result<ExpansivityTable, AnalysisError> {
    let chi = discriminating_power(p);
    let mut state = AnalyzerState::bottom(p);
    let unknowns = state.len();
    let mut widened = Vec::new();
    let mut sweeps = 0usize;

    let keys: Vec<(String, usize)> = state.iter().map(|(k, _)| k.clone()).collect();
    let rules_by_op: BTreeMap<&str, Vec<&crate::syntax::Rule>> = {
        let mut map: BTreeMap<&str, Vec<&crate::syntax::Rule>> = BTreeMap::new();
        for rule in &p.rules {
            match &rule.source {
                RuleSource::Op(op, _) => map.entry(op.as_str()).or_default().push(rule),
                RuleSource::Var(_) => {
                    panic!("lfp_expansivity requires an expanded, operator-sourced specification")
                }
            }
        }
        map
    };

    loop {
        sweeps += 1;
        let mut changed = false;
        for (op, i) in &keys {
            let mut sup = Multiplicity::zero();
            if let Some(rules) = rules_by_op.get(op.as_str()) {
                for rule in rules {
                    let RuleSource::Op(_, vars) = &rule.source else { unreachable!() };
                    let v = rule_entry(&state, &chi, rule, &vars[*i]);
                    if v > sup {
                        sup = v;
                    }
                }
            }
            let old = state.get(op, *i);
            if sup > old {
                changed = true;
                if sweeps > unknowns {
                    state.set(op, *i, Multiplicity::Inf);
                    widened.push((op.clone(), *i));
                } else {
                    state.set(op, *i, sup);
                }
            }
        }
        if !changed {
            break;
        }
    }

    // one parallel application must reproduce the state exactly
    let check = apply_m(p, &chi, &state);
    if check != state {
        let bad = keys
            .iter()
            .find(|(op, i)| check.get(op, *i) != state.get(op, *i))
            .expect("some entry differs");
        return Err(AnalysisError::NotAFixpoint(bad.0.clone(), bad.1));
    }

    Ok(ExpansivityTable {
        state,
        chi,
        arities: p.signature.operators().map(|(op, a)| (op.to_string(), a)).collect(),
        sweeps,
        widened,
        converged: true,
    })
}

/// The expansivity bound: `1 - prod_i (1 - eps_i)^omega(f,i)`, with the
/// conventions that a zero power contributes factor 1 and an infinite power
/// contributes factor 0 unless the distance is 0 (then 1).
pub fn expansivity_bound(
    table: &ExpansivityTable,
    op: &str,
    eps: &[Rational],
) -> Result<Rational, AnalysisError> {
    let row =
        table.omega_row(op).ok_or_else(|| AnalysisError::UnknownOperator(op.to_string()))?;
    if eps.len() != row.len() {
        return Err(AnalysisError::ArityMismatch {
            op: op.to_string(),
            arity: row.len(),
            given: eps.len(),
        });
    }
    let zero = Rational::zero();
    let one = Rational::one();
    let mut product = Rational::one();
    for (e, omega) in eps.iter().zip(&row) {
        if *e < zero || *e > one {
            return Err(AnalysisError::EpsOutOfRange(e.to_string()));
        }
        match omega {
            Multiplicity::Fin(n) if n.is_zero() => {}
            Multiplicity::Inf => {
                if !e.is_zero() {
                    return Ok(Rational::one());
                }
            }
            Multiplicity::Fin(n) => {
                let exp = u32::try_from(n).map_err(|_| AnalysisError::ExponentTooLarge(n.to_string()))?;
                let base = one.clone() - e;
                product = product * Pow::pow(base, exp);
            }
        }
    }
    Ok(one - product)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syntax::parse_spec;
    use crate::terms::rational_from_str;

    const R2: &str = "op r/0; op s/0; op nil/0; op f/1; op g/2;\n\
        rule r_loop : |- r -a-> delta(r);\n\
        rule s_leak : |- s -a-> (3/4 * delta(s) (+) 1/4 * delta(nil));\n\
        rule f_copy : x -a-> %m |- f(x) -a-> g(%m,%m);\n\
        rule g_step : x1 -a-> %m1, x2 -a-> %m2 |- g(x1,x2) -a-> g(%m1,%m2);";

    fn fin(n: u32) -> Multiplicity {
        Multiplicity::fin(n)
    }

    #[test]
    fn multiplicity_arithmetic() {
        assert_eq!(fin(2) + fin(3), fin(5));
        assert_eq!(fin(2) + Multiplicity::Inf, Multiplicity::Inf);
        assert_eq!(Multiplicity::Inf + Multiplicity::Inf, Multiplicity::Inf);
        assert_eq!(Multiplicity::zero() * Multiplicity::Inf, Multiplicity::zero());
        assert_eq!(Multiplicity::Inf * Multiplicity::zero(), Multiplicity::zero());
        assert_eq!(fin(3) * Multiplicity::Inf, Multiplicity::Inf);
        assert_eq!(fin(3) * fin(4), fin(12));
        assert!(fin(1_000_000) < Multiplicity::Inf);
        assert!(fin(2) < fin(3));
    }

    #[test]
    fn weighted_multiplicity_state_cases() {
        let p = parse_spec(R2).unwrap();
        let mut state = AnalyzerState::bottom(&p);
        let x = VarId::state("x");
        assert_eq!(weighted_multiplicity_state(&state, &StateTerm::var("x"), &x), fin(1));

        state.set("g", 0, fin(1));
        state.set("g", 1, fin(1));
        let t = StateTerm::app("g", vec![StateTerm::var("x"), StateTerm::var("x")]);
        assert_eq!(weighted_multiplicity_state(&state, &t, &x), fin(2));

        // zero weights absorb
        state.set("g", 0, Multiplicity::zero());
        state.set("g", 1, Multiplicity::zero());
        assert_eq!(weighted_multiplicity_state(&state, &t, &x), fin(0));
    }

    #[test]
    fn weighted_multiplicity_dist_cases() {
        let p = parse_spec(R2).unwrap();
        let state = AnalyzerState::bottom(&p);
        let chi = discriminating_power(&p);
        let mu = VarId::dist("m");
        assert_eq!(
            weighted_multiplicity_dist(&state, &chi, &DistTerm::dvar("m"), &mu),
            fin(1)
        );
        // chi(g,.)=1 floors the weight even when the state entry is 0
        let theta = DistTerm::Lift("g".into(), vec![DistTerm::dvar("m"), DistTerm::dvar("m")]);
        assert_eq!(weighted_multiplicity_dist(&state, &chi, &theta, &mu), fin(2));
    }

    #[test]
    fn convex_target_takes_max_of_parts() {
        let spec = "op par/2; op sp/0; op f/1;\n\
            rule : x1 -a-> %m1, x2 -a-> %m2 |- par(x1,x2) -a-> par(%m1,%m2);\n\
            rule : x -a-> %m |- f(x) -a-> (1/2 * par(%m,%m) (+) 1/2 * delta(sp));";
        let p = parse_spec(spec).unwrap();
        let table = lfp_expansivity(&p).unwrap();
        let mut state = AnalyzerState::bottom(&p);
        state.set("par", 0, fin(1));
        state.set("par", 1, fin(1));
        let target = &p.rules[1].target;
        let v = weighted_multiplicity_dist(&state, table.chi(), target, &VarId::dist("m"));
        assert_eq!(v, fin(2));
    }

    #[test]
    fn r2_fixed_point_values() {
        let p = parse_spec(R2).unwrap();
        let table = lfp_expansivity(&p).unwrap();
        assert_eq!(table.omega("g", 0), Some(fin(1)));
        assert_eq!(table.omega("g", 1), Some(fin(1)));
        assert_eq!(table.omega("f", 0), Some(fin(2)));
        assert_eq!(table.omega("r", 0), None);
        assert!(table.converged);
        assert!(table.widened.is_empty());
    }

    #[test]
    fn recursive_duplication_widens_to_infinity() {
        let r4 = "op r/0; op s/0; op nil/0; op f/1; op g/2;\n\
            rule : |- r -a-> delta(r);\n\
            rule : |- s -a-> (3/4 * delta(s) (+) 1/4 * delta(nil));\n\
            rule : x -a-> %m |- f(x) -a-> g(f(%m),f(%m));\n\
            rule : x1 -a-> %m1, x2 -a-> %m2 |- g(x1,x2) -a-> g(%m1,%m2);";
        let p = parse_spec(r4).unwrap();
        let table = lfp_expansivity(&p).unwrap();
        assert_eq!(table.omega("f", 0), Some(Multiplicity::Inf));
        assert!(table.widened.contains(&("f".to_string(), 0)));
        // the widened table is still a fixed point
        let re = apply_m(&p, table.chi(), table.state());
        assert_eq!(&re, table.state());
    }

    #[test]
    fn operator_without_rules_is_absorbing() {
        let p = parse_spec("op g2/2; op c/0; rule : |- c -a-> delta(c);").unwrap();
        let table = lfp_expansivity(&p).unwrap();
        assert_eq!(table.omega("g2", 0), Some(fin(0)));
        assert_eq!(table.omega("g2", 1), Some(fin(0)));
    }

    #[test]
    fn apply_m_is_order_preserving_on_a_witness() {
        let p = parse_spec(R2).unwrap();
        let chi = discriminating_power(&p);
        let a = AnalyzerState::bottom(&p);
        let mut b = a.clone();
        b.set("g", 0, fin(3));
        assert!(a.leq(&b));
        let ma = apply_m(&p, &chi, &a);
        let mb = apply_m(&p, &chi, &b);
        assert!(ma.leq(&mb));
    }

    #[test]
    fn bound_formula_conventions() {
        let p = parse_spec(R2).unwrap();
        let table = lfp_expansivity(&p).unwrap();
        let quarter = rational_from_str("1/4").unwrap();
        let bound = expansivity_bound(&table, "f", &[quarter.clone()]).unwrap();
        assert_eq!(bound, rational_from_str("7/16").unwrap());
        let bound = expansivity_bound(&table, "f", &[Rational::zero()]).unwrap();
        assert_eq!(bound, Rational::zero());
        let bound = expansivity_bound(&table, "g", &[Rational::zero(), Rational::zero()]).unwrap();
        assert_eq!(bound, Rational::zero());

        let r4 = "op r/0; op f/1; op g/2;\n\
            rule : |- r -a-> delta(r);\n\
            rule : x -a-> %m |- f(x) -a-> g(f(%m),f(%m));\n\
            rule : x1 -a-> %m1, x2 -a-> %m2 |- g(x1,x2) -a-> g(%m1,%m2);";
        let p = parse_spec(r4).unwrap();
        let table = lfp_expansivity(&p).unwrap();
        let bound = expansivity_bound(&table, "f", &[quarter]).unwrap();
        assert_eq!(bound, Rational::one());
        let bound = expansivity_bound(&table, "f", &[Rational::zero()]).unwrap();
        assert_eq!(bound, Rational::zero());

        assert!(matches!(
            expansivity_bound(&table, "nope", &[]),
            Err(AnalysisError::UnknownOperator(_))
        ));
        assert!(matches!(
            expansivity_bound(&table, "f", &[rational_from_str("3/2").unwrap()]),
            Err(AnalysisError::EpsOutOfRange(_))
        ));
    }

    #[test]
    fn join_and_meet_are_pointwise_bounds() {
        let p = parse_spec(R2).unwrap();
        let mut a = AnalyzerState::bottom(&p);
        let mut b = AnalyzerState::bottom(&p);
        a.set("g", 0, fin(2));
        b.set("g", 0, fin(1));
        b.set("f", 0, Multiplicity::Inf);
        let j = a.join(&b);
        let m = a.meet(&b);
        assert!(a.leq(&j) && b.leq(&j));
        assert!(m.leq(&a) && m.leq(&b));
        assert_eq!(j.get("g", 0), fin(2));
        assert_eq!(j.get("f", 0), Multiplicity::Inf);
        assert_eq!(m.get("g", 0), fin(1));
        assert_eq!(m.get("f", 0), fin(0));
    }
}
