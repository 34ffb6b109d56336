//! Derivation of the induced transition system on closed terms: rule
//! matching, demand-driven evaluation with a least-fixed-point treatment of
//! positive premise cycles, negative premises resolved against fully
//! evaluated proper subterms, and budgeted reachable-fragment exploration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syntax::{classify_evaluable, parse_closed_term_lenient, Ptss, Rule, RuleSource};
use crate::terms::{eval_dist, rational_from_str, DistTerm, Distribution, StateTerm, Substitution};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("specification is not executable: {0}")]
    NotEvaluable(String),
    #[error("invalid serialized transition system: {0}")]
    BadInput(String),
}

/// Exploration limits. Exhaustion is never an error; it surfaces as
/// `complete = false` flags on the affected states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Budget {
    pub max_states: usize,
    pub max_depth: usize,
    pub max_closure_iters: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_states: 4096, max_depth: 64, max_closure_iters: 64 }
    }
}

pub type TransSet = BTreeSet<(String, Distribution)>;

/// A finite explored fragment of the induced transition system. A state is
/// complete iff all of its transitions were derived within budget.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pts {
    trans: BTreeMap<StateTerm, TransSet>,
    complete: BTreeMap<StateTerm, bool>,
}

impl Pts {
    pub fn states(&self) -> impl Iterator<Item = &StateTerm> {
        self.complete.keys()
    }

    pub fn state_count(&self) -> usize {
        self.complete.len()
    }

    pub fn contains(&self, t: &StateTerm) -> bool {
        self.complete.contains_key(t)
    }

    pub fn transitions_of(&self, t: &StateTerm) -> impl Iterator<Item = &(String, Distribution)> {
        self.trans.get(t).into_iter().flatten()
    }

    pub fn is_complete(&self, t: &StateTerm) -> bool {
        self.complete.get(t).copied().unwrap_or(false)
    }

    pub fn all_complete(&self) -> bool {
        self.complete.values().all(|c| *c)
    }

    fn insert_state(&mut self, t: StateTerm, trans: TransSet, complete: bool) {
        self.trans.insert(t.clone(), trans);
        self.complete.insert(t, complete);
    }

    fn insert_frontier(&mut self, t: StateTerm) {
        self.complete.entry(t).or_insert(false);
    }

    /// Restrict to the states reachable from the seeds via stored
    /// transitions.
    pub fn restrict_reachable(&self, seeds: &BTreeSet<StateTerm>) -> Pts {
        let mut keep: BTreeSet<StateTerm> =
            seeds.iter().filter(|t| self.contains(t)).cloned().collect();
        let mut frontier: Vec<StateTerm> = keep.iter().cloned().collect();
        while let Some(t) = frontier.pop() {
            for (_, dist) in self.transitions_of(&t) {
                for u in dist.support() {
                    if keep.insert(u.clone()) {
                        frontier.push(u.clone());
                    }
                }
            }
        }
        Pts {
            trans: self
                .trans
                .iter()
                .filter(|(t, _)| keep.contains(*t))
                .map(|(t, s)| (t.clone(), s.clone()))
                .collect(),
            complete: self
                .complete
                .iter()
                .filter(|(t, _)| keep.contains(*t))
                .map(|(t, c)| (t.clone(), *c))
                .collect(),
        }
    }
}

/// Match an operator-sourced rule against a closed term, yielding the
/// source substitution when the head operator agrees.
pub fn match_rule(rule: &Rule, t: &StateTerm) -> Option<Substitution> {
    let RuleSource::Op(op, vars) = &rule.source else {
        return None;
    };
    let StateTerm::App(head, args) = t else {
        return None;
    };
    if head != op || args.len() != vars.len() {
        return None;
    }
    let mut sigma = Substitution::new();
    for (x, arg) in vars.iter().zip(args) {
        sigma.insert_state(x.clone(), arg.clone());
    }
    Some(sigma)
}

struct TermResult {
    trans: TransSet,
    complete: bool,
}

/// One evaluation session: owns the memo table shared by all terms
/// evaluated against the same specification and budget.
pub struct Session<'a> {
    spec: &'a Ptss,
    budget: Budget,
    done: BTreeMap<StateTerm, TermResult>,
}

impl<'a> Session<'a> {
    /// Create a session, refusing specifications outside the executable
    /// class (bare-variable sources, complex negative premises, free
    /// variables).
    pub fn new(spec: &'a Ptss, budget: Budget) -> Result<Self, EngineError> {
        let diags = classify_evaluable(spec);
        if !diags.is_empty() {
            return Err(EngineError::NotEvaluable(diags.to_string().trim().to_string()));
        }
        Ok(Session { spec, budget, done: BTreeMap::new() })
    }

    /// Transition set of a closed term, with its completeness flag.
    pub fn transitions(&mut self, t: &StateTerm) -> Result<(&TransSet, bool), EngineError> {
        if !t.is_closed() {
            return Err(EngineError::NotEvaluable(format!("term {t} is not closed")));
        }
        if !self.done.contains_key(t) {
            self.eval(t)?;
        }
        let r = &self.done[t];
        Ok((&r.trans, r.complete))
    }

    /// Evaluate the demand closure of `root`: collect every term reachable
    /// through premise instantiation, order the dependency graph by strongly
    /// connected components, and solve each component by ascending
    /// iteration. Negative premises are only read from components that are
    /// already fully evaluated.
    fn eval(&mut self, root: &StateTerm) -> Result<(), EngineError> {
        // Phase 1: demand closure over premise instantiations.
        let mut nodes: BTreeSet<StateTerm> = BTreeSet::new();
        let mut edges: BTreeMap<StateTerm, BTreeSet<StateTerm>> = BTreeMap::new();
        let mut truncated: BTreeSet<StateTerm> = BTreeSet::new();
        let mut frontier = vec![root.clone()];
        nodes.insert(root.clone());
        while let Some(t) = frontier.pop() {
            let mut deps = BTreeSet::new();
            for rule in &self.spec.rules {
                let Some(sigma) = match_rule(rule, &t) else { continue };
                for pp in &rule.pos_premises {
                    deps.insert(sigma.apply_state(&pp.lhs));
                }
                for np in &rule.neg_premises {
                    deps.insert(sigma.apply_state(&np.lhs));
                }
            }
            for u in &deps {
                if !u.is_closed() {
                    return Err(EngineError::NotEvaluable(format!(
                        "premise instance {u} of {t} is not closed"
                    )));
                }
                if self.done.contains_key(u) || nodes.contains(u) {
                    continue;
                }
                if nodes.len() >= self.budget.max_states {
                    truncated.insert(t.clone());
                    continue;
                }
                nodes.insert(u.clone());
                frontier.push(u.clone());
            }
            edges.insert(t, deps);
        }

        // Phase 2: strongly connected components, dependencies first.
        let order: Vec<StateTerm> = nodes.iter().cloned().collect();
        let index_of: BTreeMap<&StateTerm, usize> =
            order.iter().enumerate().map(|(i, t)| (t, i)).collect();
        let succ: Vec<Vec<usize>> = order
            .iter()
            .map(|t| {
                edges
                    .get(t)
                    .map(|deps| deps.iter().filter_map(|u| index_of.get(u).copied()).collect())
                    .unwrap_or_default()
            })
            .collect();
        let sccs = tarjan_sccs(&succ);

        // Phase 3: solve components in order.
        let mut uncertain: BTreeSet<StateTerm> = BTreeSet::new();
        for scc in &sccs {
            let members: BTreeSet<StateTerm> = scc.iter().map(|&i| order[i].clone()).collect();
            let mut table: BTreeMap<StateTerm, TransSet> =
                members.iter().map(|t| (t.clone(), TransSet::new())).collect();
            let mut converged = false;
            for _ in 0..self.budget.max_closure_iters {
                let mut changed = false;
                for t in &members {
                    let mut acc = table[t].clone();
                    let before = acc.len();
                    self.fire_rules(t, &members, &table, &mut acc, &mut uncertain)?;
                    if acc.len() != before {
                        changed = true;
                        table.insert(t.clone(), acc);
                    }
                }
                if !changed {
                    converged = true;
                    break;
                }
            }
            if !converged {
                uncertain.extend(members.iter().cloned());
            }
            for (t, trans) in table {
                let complete = !uncertain.contains(&t) && !truncated.contains(&t);
                self.done.insert(t, TermResult { trans, complete });
            }
        }

        // Phase 4: incompleteness propagates along dependency edges.
        loop {
            let mut changed = false;
            for t in &order {
                if self.done[t].complete {
                    let dep_incomplete = edges
                        .get(t)
                        .is_some_and(|deps| deps.iter().any(|u| !self.done[u].complete));
                    if dep_incomplete {
                        self.done.get_mut(t).unwrap().complete = false;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(())
    }

    /// Derive the transitions of `t` visible from the current component
    /// table, accumulating into `acc`.
    fn fire_rules(
        &self,
        t: &StateTerm,
        members: &BTreeSet<StateTerm>,
        table: &BTreeMap<StateTerm, TransSet>,
        acc: &mut TransSet,
        uncertain: &mut BTreeSet<StateTerm>,
    ) -> Result<(), EngineError> {
        'rules: for rule in &self.spec.rules {
            let Some(sigma) = match_rule(rule, t) else { continue };
            for np in &rule.neg_premises {
                let v = sigma.apply_state(&np.lhs);
                if members.contains(&v) {
                    // the tested term is still being computed: unresolvable
                    uncertain.insert(t.clone());
                    continue 'rules;
                }
                let Some(res) = self.done.get(&v) else {
                    uncertain.insert(t.clone());
                    continue 'rules;
                };
                if res.trans.iter().any(|(a, _)| *a == np.action) {
                    continue 'rules; // negative premise refuted
                }
                if !res.complete {
                    // absence of a transition cannot be trusted
                    uncertain.insert(t.clone());
                    continue 'rules;
                }
            }
            let mut candidate_sets: Vec<Vec<&Distribution>> = Vec::new();
            for pp in &rule.pos_premises {
                let u = sigma.apply_state(&pp.lhs);
                let set = if let Some(r) = self.done.get(&u) {
                    if !r.complete {
                        uncertain.insert(t.clone());
                    }
                    &r.trans
                } else if let Some(s) = table.get(&u) {
                    s
                } else {
                    // demand was truncated by the state budget
                    uncertain.insert(t.clone());
                    continue 'rules;
                };
                let cands: Vec<&Distribution> =
                    set.iter().filter(|(a, _)| *a == pp.action).map(|(_, d)| d).collect();
                if cands.is_empty() {
                    continue 'rules; // premise (currently) unsatisfiable
                }
                candidate_sets.push(cands);
            }
            let mut total = 1usize;
            for c in &candidate_sets {
                total = total.saturating_mul(c.len());
            }
            if total > 1_000_000 {
                uncertain.insert(t.clone());
                continue 'rules;
            }
            for combo in 0..total {
                let mut idx = combo;
                let mut full = sigma.clone();
                for (k, pp) in rule.pos_premises.iter().enumerate() {
                    let n = candidate_sets[k].len();
                    full.insert_dist(pp.derivative.clone(), dist_as_term(candidate_sets[k][idx % n]));
                    idx /= n;
                }
                let target = full.apply_dist(&rule.target);
                let pi = eval_dist(&target).map_err(|e| {
                    EngineError::NotEvaluable(format!("target of rule over {t}: {e}"))
                })?;
                acc.insert((rule.conclusion_action.clone(), pi));
            }
        }
        Ok(())
    }
}

/// Represent a concrete distribution as a distribution term for
/// substitution into rule targets.
fn dist_as_term(pi: &Distribution) -> DistTerm {
    if pi.support_size() == 1 {
        let t = pi.support().next().unwrap().clone();
        return DistTerm::Dirac(t);
    }
    DistTerm::Convex(
        pi.iter().map(|(t, p)| (p.clone(), DistTerm::Dirac(t.clone()))).collect(),
    )
}

/// Iterative Tarjan strongly-connected components; components are emitted
/// dependencies-first.
fn tarjan_sccs(succ: &[Vec<usize>]) -> Vec<Vec<usize>> {
    #[derive(Clone)]
    struct NodeState {
        index: Option<usize>,
        lowlink: usize,
        on_stack: bool,
    }
    let n = succ.len();
    let mut state = vec![NodeState { index: None, lowlink: 0, on_stack: false }; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut sccs = Vec::new();
    let mut call: Vec<(usize, usize)> = Vec::new();

    for start in 0..n {
        if state[start].index.is_some() {
            continue;
        }
        call.push((start, 0));
        state[start].index = Some(next_index);
        state[start].lowlink = next_index;
        next_index += 1;
        state[start].on_stack = true;
        stack.push(start);
        while let Some((v, ei)) = call.pop() {
            if ei < succ[v].len() {
                call.push((v, ei + 1));
                let w = succ[v][ei];
                if state[w].index.is_none() {
                    state[w].index = Some(next_index);
                    state[w].lowlink = next_index;
                    next_index += 1;
                    state[w].on_stack = true;
                    stack.push(w);
                    call.push((w, 0));
                } else if state[w].on_stack {
                    state[v].lowlink = state[v].lowlink.min(state[w].index.unwrap());
                }
            } else {
                if let Some(&(parent, _)) = call.last() {
                    let low = state[v].lowlink;
                    state[parent].lowlink = state[parent].lowlink.min(low);
                }
                if state[v].lowlink == state[v].index.unwrap() {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        state[w].on_stack = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    sccs.push(comp);
                }
            }
        }
    }
    sccs
}

/// Derive the transitions of one closed term under a fresh session.
pub fn derive_transitions(
    p: &Ptss,
    t: &StateTerm,
    budget: Budget,
) -> Result<(TransSet, bool), EngineError> {
    let mut session = Session::new(p, budget)?;
    let (set, complete) = session.transitions(t)?;
    Ok((set.clone(), complete))
}

/// Breadth-first closure from the seed terms over the support points of
/// derived distributions, limited by the budget. States cut off by the
/// depth or state limit are included with `complete = false`.
pub fn reachable_fragment(
    p: &Ptss,
    seeds: &BTreeSet<StateTerm>,
    budget: Budget,
) -> Result<Pts, EngineError> {
    let mut session = Session::new(p, budget)?;
    let mut pts = Pts::default();
    let mut current: BTreeSet<StateTerm> = seeds.clone();
    let mut visited: BTreeSet<StateTerm> = BTreeSet::new();
    let mut depth = 0usize;
    while !current.is_empty() {
        let mut next = BTreeSet::new();
        for t in &current {
            if !t.is_closed() {
                return Err(EngineError::NotEvaluable(format!("seed {t} is not closed")));
            }
            if !visited.insert(t.clone()) {
                continue;
            }
            if depth >= budget.max_depth || pts.state_count() >= budget.max_states {
                pts.insert_frontier(t.clone());
                continue;
            }
            let (set, complete) = session.transitions(t)?;
            let set = set.clone();
            for (_, dist) in &set {
                for u in dist.support() {
                    if !visited.contains(u) {
                        next.insert(u.clone());
                    }
                }
            }
            pts.insert_state(t.clone(), set, complete);
        }
        current = next;
        depth += 1;
    }
    Ok(pts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MassReport {
    to: String,
    p: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionReport {
    from: String,
    action: String,
    dist: Vec<MassReport>,
}

/// Wire format of a fragment; also accepted as standalone input for the
/// distance machinery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PtsReport {
    states: Vec<String>,
    transitions: Vec<TransitionReport>,
    complete: BTreeMap<String, bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<Budget>,
}

impl Pts {
    pub fn to_report(&self, budget: Option<Budget>) -> PtsReport {
        PtsReport {
            states: self.states().map(|t| t.to_string()).collect(),
            transitions: self
                .trans
                .iter()
                .flat_map(|(t, set)| {
                    set.iter().map(move |(a, dist)| TransitionReport {
                        from: t.to_string(),
                        action: a.clone(),
                        dist: dist
                            .iter()
                            .map(|(u, p)| MassReport { to: u.to_string(), p: p.to_string() })
                            .collect(),
                    })
                })
                .collect(),
            complete: self.complete.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
            budget,
        }
    }

    pub fn from_report(report: &PtsReport) -> Result<Pts, EngineError> {
        let parse = |s: &str| {
            parse_closed_term_lenient(s)
                .map_err(|d| EngineError::BadInput(format!("bad term `{s}`: {d}")))
        };
        let mut pts = Pts::default();
        for s in &report.states {
            let t = parse(s)?;
            pts.complete.insert(t.clone(), report.complete.get(s).copied().unwrap_or(false));
            pts.trans.entry(t).or_default();
        }
        for tr in &report.transitions {
            let from = parse(&tr.from)?;
            if !pts.complete.contains_key(&from) {
                return Err(EngineError::BadInput(format!("transition from unknown state `{}`", tr.from)));
            }
            let mut weighted = Vec::new();
            for m in &tr.dist {
                let to = parse(&m.to)?;
                if !pts.complete.contains_key(&to) {
                    return Err(EngineError::BadInput(format!(
                        "support point `{}` missing from states",
                        m.to
                    )));
                }
                let p = rational_from_str(&m.p)
                    .ok_or_else(|| EngineError::BadInput(format!("bad probability `{}`", m.p)))?;
                weighted.push((to, p));
            }
            let dist = Distribution::from_weighted(weighted)
                .map_err(|e| EngineError::BadInput(e.to_string()))?;
            pts.trans.get_mut(&from).unwrap().insert((tr.action.clone(), dist));
        }
        Ok(pts)
    }
}
