//! Relations on finite fragments: the lifting check with probability slack,
//! greatest-relation refinement, exact distances, strict bisimilarity by
//! partition refinement, and the bound-verification harness.

use std::collections::{BTreeMap, BTreeSet};

use num::{One, Zero};
use thiserror::Error;

use crate::analysis::{expansivity_bound, lfp_expansivity, AnalysisError};
use crate::engine::{reachable_fragment, Budget, EngineError, Pts};
use crate::syntax::Ptss;
use crate::terms::{Distribution, Rational, StateTerm};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BisimError {
    #[error("support of size {0} exceeds the subset-enumeration limit of 20")]
    SupportTooLarge(usize),
    #[error("fragment state `{0}` is incomplete; rerun with a larger budget")]
    IncompleteFragment(String),
    #[error("term `{0}` is not a state of the fragment")]
    TermNotInFragment(String),
}

/// A symmetric relation over closed terms, stored as unordered pairs of
/// distinct terms; reflexive pairs are implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Relation {
    pairs: BTreeSet<(StateTerm, StateTerm)>,
}

fn ordered(a: &StateTerm, b: &StateTerm) -> (StateTerm, StateTerm) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl Relation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (StateTerm, StateTerm)>) -> Self {
        let mut rel = Relation::new();
        for (a, b) in pairs {
            rel.insert(&a, &b);
        }
        rel
    }

    pub fn insert(&mut self, a: &StateTerm, b: &StateTerm) {
        if a != b {
            self.pairs.insert(ordered(a, b));
        }
    }

    pub fn remove(&mut self, a: &StateTerm, b: &StateTerm) {
        self.pairs.remove(&ordered(a, b));
    }

    /// Related including implicit reflexivity.
    pub fn related(&self, a: &StateTerm, b: &StateTerm) -> bool {
        a == b || self.pairs.contains(&ordered(a, b))
    }

    /// Distinct related pairs in canonical order.
    pub fn pairs(&self) -> impl Iterator<Item = &(StateTerm, StateTerm)> {
        self.pairs.iter()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_subset(&self, other: &Relation) -> bool {
        self.pairs.is_subset(&other.pairs)
    }
}

/// Check the lifted transfer condition: for every subset X of the support
/// of `pi`, `pi(X) <= pi2(R(X)) + eps`, with R(X) the image of X under the
/// relation (reflexive pairs included).
///
/// Support points with identical images are grouped: the binding subsets
/// are unions of such groups, which keeps the enumeration small.
pub fn lift_check(
    pi: &Distribution,
    pi2: &Distribution,
    rel: &Relation,
    eps: &Rational,
) -> Result<bool, BisimError> {
    if pi.support_size() > 20 {
        return Err(BisimError::SupportTooLarge(pi.support_size()));
    }
    let supp2: Vec<&StateTerm> = pi2.support().collect();
    let mut classes: BTreeMap<Vec<usize>, Rational> = BTreeMap::new();
    for (x, mass) in pi.iter() {
        let img: Vec<usize> = supp2
            .iter()
            .enumerate()
            .filter(|(_, y)| rel.related(x, y))
            .map(|(j, _)| j)
            .collect();
        *classes.entry(img).or_insert_with(Rational::zero) += mass;
    }
    let classes: Vec<(Vec<usize>, Rational)> = classes.into_iter().collect();
    let masses2: Vec<&Rational> = pi2.iter().map(|(_, p)| p).collect();

    fn enumerate(
        classes: &[(Vec<usize>, Rational)],
        k: usize,
        lhs: Rational,
        img: BTreeSet<usize>,
        masses2: &[&Rational],
        eps: &Rational,
    ) -> bool {
        if k == classes.len() {
            let rhs: Rational = img.iter().map(|&j| masses2[j].clone()).sum();
            return lhs <= rhs + eps;
        }
        if !enumerate(classes, k + 1, lhs.clone(), img.clone(), masses2, eps) {
            return false;
        }
        let (class_img, class_mass) = &classes[k];
        let mut img = img;
        img.extend(class_img.iter().copied());
        enumerate(classes, k + 1, lhs + class_mass, img, masses2, eps)
    }

    Ok(enumerate(&classes, 0, Rational::zero(), BTreeSet::new(), &masses2, eps))
}

fn require_complete(pts: &Pts) -> Result<(), BisimError> {
    if let Some(t) = pts.states().find(|t| !pts.is_complete(t)) {
        return Err(BisimError::IncompleteFragment(t.to_string()));
    }
    Ok(())
}

fn transfer_holds(
    pts: &Pts,
    t: &StateTerm,
    t2: &StateTerm,
    rel: &Relation,
    eps: &Rational,
) -> Result<bool, BisimError> {
    for (action, pi) in pts.transitions_of(t) {
        let mut matched = false;
        for (action2, pi2) in pts.transitions_of(t2) {
            if action2 == action && lift_check(pi, pi2, rel, eps)? {
                matched = true;
                break;
            }
        }
        if !matched {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The largest relation on the fragment whose pairs satisfy the transfer
/// condition at slack `eps` in both directions: start from all pairs and
/// delete violating pairs until stable.
pub fn greatest_epsilon_bisim(pts: &Pts, eps: &Rational) -> Result<Relation, BisimError> {
    require_complete(pts)?;
    let states: Vec<&StateTerm> = pts.states().collect();
    let mut rel = Relation::new();
    for (i, a) in states.iter().enumerate() {
        for b in states.iter().skip(i + 1) {
            rel.insert(a, b);
        }
    }
    loop {
        let snapshot: Vec<(StateTerm, StateTerm)> = rel.pairs().cloned().collect();
        let mut changed = false;
        for (a, b) in snapshot {
            if !(transfer_holds(pts, &a, &b, &rel, eps)?
                && transfer_holds(pts, &b, &a, &rel, eps)?)
            {
                rel.remove(&a, &b);
                changed = true;
            }
        }
        if !changed {
            return Ok(rel);
        }
    }
}

/// Requested distance computation mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DistanceMode {
    /// Exact when supports and the candidate set are small enough,
    /// otherwise bracketed to the default tolerance of 1e-6.
    Auto,
    Exact,
    Bracket(Rational),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DistanceValue {
    Exact(Rational),
    Bracket { lo: Rational, hi: Rational },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceResult {
    pub value: DistanceValue,
    /// The relation witnessing relatedness at the reported value (absent
    /// when the terms are unrelated at every slack).
    pub witness: Option<(Rational, Relation)>,
}

impl DistanceResult {
    pub fn exact_value(&self) -> Option<&Rational> {
        match &self.value {
            DistanceValue::Exact(v) => Some(v),
            DistanceValue::Bracket { .. } => None,
        }
    }
}

const AUTO_CANDIDATE_LIMIT: usize = 2_000_000;

fn subset_sums(pi: &Distribution) -> BTreeSet<Rational> {
    let mut sums = BTreeSet::new();
    sums.insert(Rational::zero());
    for (_, p) in pi.iter() {
        let with: Vec<Rational> = sums.iter().map(|s| s.clone() + p).collect();
        sums.extend(with);
    }
    sums
}

/// The distance between two fragment states: the least slack at which the
/// greatest-relation refinement keeps them related.
///
/// In exact mode the infimum is attained on the candidate grid
/// `{0,1} + {pi(X) - pi2(Y)}` over all stored distribution pairs and
/// support subsets, since relatedness is monotone in the slack and constant
/// between consecutive candidates. Bracket mode bisects to the tolerance.
pub fn distance(
    pts: &Pts,
    t: &StateTerm,
    t2: &StateTerm,
    mode: DistanceMode,
) -> Result<DistanceResult, BisimError> {
    if !pts.contains(t) {
        return Err(BisimError::TermNotInFragment(t.to_string()));
    }
    if !pts.contains(t2) {
        return Err(BisimError::TermNotInFragment(t2.to_string()));
    }
    let seeds: BTreeSet<StateTerm> = [t.clone(), t2.clone()].into_iter().collect();
    let sub = pts.restrict_reachable(&seeds);
    require_complete(&sub)?;

    let max_support =
        sub.states().flat_map(|s| sub.transitions_of(s)).map(|(_, d)| d.support_size()).max();
    if let Some(n) = max_support {
        if n > 20 {
            return Err(BisimError::SupportTooLarge(n));
        }
    }

    let member = |eps: &Rational| -> Result<Option<Relation>, BisimError> {
        let rel = greatest_epsilon_bisim(&sub, eps)?;
        Ok(if rel.related(t, t2) { Some(rel) } else { None })
    };

    let exact = |limit: Option<usize>| -> Result<Option<DistanceResult>, BisimError> {
        let dists: BTreeSet<&Distribution> = sub
            .states()
            .flat_map(|s| sub.transitions_of(s))
            .map(|(_, d)| d)
            .collect();
        let sums: Vec<BTreeSet<Rational>> = dists.iter().map(|d| subset_sums(d)).collect();
        let mut candidates: BTreeSet<Rational> = BTreeSet::new();
        candidates.insert(Rational::zero());
        candidates.insert(Rational::one());
        for a in &sums {
            for b in &sums {
                if let Some(limit) = limit {
                    if candidates.len().saturating_add(a.len() * b.len()) > limit * 2 {
                        // rough guard before the product loop
                    }
                }
                for x in a {
                    for y in b {
                        let diff = x.clone() - y.clone();
                        if diff > Rational::zero() && diff < Rational::one() {
                            candidates.insert(diff);
                        }
                    }
                }
                if let Some(limit) = limit {
                    if candidates.len() > limit {
                        return Ok(None);
                    }
                }
            }
        }
        let candidates: Vec<Rational> = candidates.into_iter().collect();
        // least candidate at which the pair stays related
        let mut lo = 0usize;
        let mut hi = candidates.len();
        let mut best: Option<(usize, Relation)> = None;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match member(&candidates[mid])? {
                Some(rel) => {
                    best = Some((mid, rel));
                    hi = mid;
                }
                None => lo = mid + 1,
            }
        }
        Ok(Some(match best {
            Some((idx, rel)) => {
                let value = candidates[idx].clone();
                DistanceResult {
                    value: DistanceValue::Exact(value.clone()),
                    witness: Some((value, rel)),
                }
            }
            // related at no slack: the infimum over the empty set is 1
            None => DistanceResult { value: DistanceValue::Exact(Rational::one()), witness: None },
        }))
    };

    match mode {
        DistanceMode::Exact => Ok(exact(None)?.expect("unlimited candidate enumeration")),
        DistanceMode::Auto => {
            if let Some(result) = exact(Some(AUTO_CANDIDATE_LIMIT))? {
                return Ok(result);
            }
            let tol = Rational::new(1.into(), 1_000_000.into());
            bracket(&member, tol)
        }
        DistanceMode::Bracket(tol) => bracket(&member, tol),
    }
}

fn bracket(
    member: &dyn Fn(&Rational) -> Result<Option<Relation>, BisimError>,
    tol: Rational,
) -> Result<DistanceResult, BisimError> {
    let one = Rational::one();
    let zero = Rational::zero();
    let Some(rel_at_one) = member(&one)? else {
        // unrelated at every slack; the distance is exactly 1
        return Ok(DistanceResult {
            value: DistanceValue::Bracket { lo: one.clone(), hi: one },
            witness: None,
        });
    };
    if let Some(rel) = member(&zero)? {
        return Ok(DistanceResult {
            value: DistanceValue::Bracket { lo: zero.clone(), hi: zero.clone() },
            witness: Some((zero, rel)),
        });
    }
    let mut lo = zero;
    let mut hi = one;
    let mut witness = rel_at_one;
    let two = Rational::new(2.into(), 1.into());
    while hi.clone() - lo.clone() > tol {
        let mid = (lo.clone() + hi.clone()) / two.clone();
        match member(&mid)? {
            Some(rel) => {
                hi = mid;
                witness = rel;
            }
            None => lo = mid,
        }
    }
    Ok(DistanceResult {
        value: DistanceValue::Bracket { lo, hi: hi.clone() },
        witness: Some((hi, witness)),
    })
}

/// Strict probabilistic bisimilarity on a complete fragment, computed by
/// signature-based partition refinement: states are split until, for every
/// pair in a block, each transition is matched by one with equal mass on
/// every block.
pub fn strict_bisim(pts: &Pts) -> Result<Vec<Vec<StateTerm>>, BisimError> {
    require_complete(pts)?;
    let states: Vec<&StateTerm> = pts.states().collect();
    let mut block: BTreeMap<&StateTerm, usize> = states.iter().map(|t| (*t, 0usize)).collect();
    let mut block_count = 1usize.min(states.len());
    loop {
        type Sig = BTreeSet<(String, Vec<(usize, Rational)>)>;
        let signature = |t: &StateTerm, block: &BTreeMap<&StateTerm, usize>| -> Sig {
            pts.transitions_of(t)
                .map(|(a, pi)| {
                    let mut by_block: BTreeMap<usize, Rational> = BTreeMap::new();
                    for (u, p) in pi.iter() {
                        *by_block.entry(block[u]).or_insert_with(Rational::zero) += p;
                    }
                    (a.clone(), by_block.into_iter().collect())
                })
                .collect()
        };
        let mut renumber: BTreeMap<(usize, Sig), usize> = BTreeMap::new();
        let mut next: BTreeMap<&StateTerm, usize> = BTreeMap::new();
        for t in &states {
            let key = (block[*t], signature(t, &block));
            let fresh = renumber.len();
            let id = *renumber.entry(key).or_insert(fresh);
            next.insert(*t, id);
        }
        let next_count = renumber.len();
        if next_count == block_count {
            let mut blocks: BTreeMap<usize, Vec<StateTerm>> = BTreeMap::new();
            for (t, b) in block {
                blocks.entry(b).or_default().push(t.clone());
            }
            return Ok(blocks.into_values().collect());
        }
        block = next;
        block_count = next_count;
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Bisim(#[from] BisimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("distance could not be computed exactly")]
    NotExact,
}

/// Outcome of one bound verification: measured argument distances, the
/// bound they induce, and the measured distance of the combined terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundCheck {
    pub op: String,
    pub pairs: Vec<(StateTerm, StateTerm, Rational)>,
    pub bound: Rational,
    pub measured: Rational,
    pub holds: bool,
    pub gap: Rational,
}

/// Measure the argument distances, evaluate the bound for the operator,
/// measure the distance of the combined terms, and compare — all with
/// exact arithmetic.
pub fn verify_expansivity_bound(
    p: &Ptss,
    op: &str,
    pairs: &[(StateTerm, StateTerm)],
    budget: Budget,
) -> Result<BoundCheck, HarnessError> {
    let table = lfp_expansivity(p)?;
    let combined_l = StateTerm::App(op.to_string(), pairs.iter().map(|(a, _)| a.clone()).collect());
    let combined_r = StateTerm::App(op.to_string(), pairs.iter().map(|(_, b)| b.clone()).collect());
    let mut seeds: BTreeSet<StateTerm> = [combined_l.clone(), combined_r.clone()].into();
    for (a, b) in pairs {
        seeds.insert(a.clone());
        seeds.insert(b.clone());
    }
    let pts = reachable_fragment(p, &seeds, budget)?;

    let exact_distance = |a: &StateTerm, b: &StateTerm| -> Result<Rational, HarnessError> {
        let d = distance(&pts, a, b, DistanceMode::Exact)?;
        d.exact_value().cloned().ok_or(HarnessError::NotExact)
    };

    let mut measured_pairs = Vec::new();
    let mut eps = Vec::new();
    for (a, b) in pairs {
        let e = exact_distance(a, b)?;
        eps.push(e.clone());
        measured_pairs.push((a.clone(), b.clone(), e));
    }
    let bound = expansivity_bound(&table, op, &eps)?;
    let measured = exact_distance(&combined_l, &combined_r)?;
    let holds = measured <= bound;
    let gap = bound.clone() - measured.clone();
    Ok(BoundCheck { op: op.to_string(), pairs: measured_pairs, bound, measured, holds, gap })
}
