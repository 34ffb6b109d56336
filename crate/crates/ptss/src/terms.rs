//! The two-level term algebra: signatures, state terms, distribution terms,
//! substitutions, occurrence counting, and exact finitely-supported
//! probability distributions over closed terms.

use std::collections::BTreeMap;
use std::fmt;

use num::{BigRational, One, Zero};
use thiserror::Error;

/// Exact rational number used for all probabilities and distances.
pub type Rational = BigRational;

/// Parse `n`, `n/d` or a finite decimal literal into an exact rational.
pub fn rational_from_str(text: &str) -> Option<Rational> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: num::BigInt = n.trim().parse().ok()?;
        let d: num::BigInt = d.trim().parse().ok()?;
        if d.is_zero() {
            return None;
        }
        return Some(Rational::new(n, d));
    }
    if let Some((int, frac)) = text.split_once('.') {
        if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let int: num::BigInt = if int.is_empty() { Zero::zero() } else { int.parse().ok()? };
        let numer: num::BigInt = frac.parse().ok()?;
        let denom = num::BigInt::from(10u32).pow(frac.len() as u32);
        return Some(Rational::from(int) + Rational::new(numer, denom));
    }
    let n: num::BigInt = text.parse().ok()?;
    Some(Rational::from(n))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TermError {
    #[error("open term cannot be evaluated to a distribution")]
    OpenTerm,
    #[error("convex weights must lie in (0,1], got {0}")]
    WeightOutOfRange(String),
    #[error("convex weights sum to {0}, expected exactly 1")]
    WeightSum(String),
    #[error("a distribution needs a nonempty support")]
    EmptySupport,
}

/// A signature: operator names with their arities.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Signature {
    operators: BTreeMap<String, usize>,
}

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declare an operator. Returns false if the name was already taken.
    pub fn declare(&mut self, name: impl Into<String>, arity: usize) -> bool {
        let name = name.into();
        if self.operators.contains_key(&name) {
            return false;
        }
        self.operators.insert(name, arity);
        true
    }

    pub fn arity(&self, name: &str) -> Option<usize> {
        self.operators.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.operators.contains_key(name)
    }

    /// Operators in canonical (lexicographic) order.
    pub fn operators(&self) -> impl Iterator<Item = (&str, usize)> {
        self.operators.iter().map(|(n, a)| (n.as_str(), *a))
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }
}

/// A state term: a variable or an operator applied to argument terms.
///
/// The derived `Ord` is the canonical term order used everywhere a
/// deterministic traversal is needed: variables first, then applications
/// ordered lexicographically by operator name and then by arguments.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateTerm {
    Var(String),
    App(String, Vec<StateTerm>),
}

impl StateTerm {
    pub fn var(name: impl Into<String>) -> Self {
        StateTerm::Var(name.into())
    }

    pub fn constant(name: impl Into<String>) -> Self {
        StateTerm::App(name.into(), Vec::new())
    }

    pub fn app(name: impl Into<String>, args: Vec<StateTerm>) -> Self {
        StateTerm::App(name.into(), args)
    }

    /// A term is closed iff it contains no variable.
    pub fn is_closed(&self) -> bool {
        match self {
            StateTerm::Var(_) => false,
            StateTerm::App(_, args) => args.iter().all(StateTerm::is_closed),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            StateTerm::Var(_) => 1,
            StateTerm::App(_, args) => 1 + args.iter().map(StateTerm::depth).max().unwrap_or(0),
        }
    }

    /// Collect the variables occurring in the term, in order of appearance.
    pub fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            StateTerm::Var(x) => out.push(x),
            StateTerm::App(_, args) => {
                for a in args {
                    a.collect_vars(out);
                }
            }
        }
    }
}

impl fmt::Display for StateTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateTerm::Var(x) => write!(f, "{x}"),
            StateTerm::App(op, args) => {
                write!(f, "{op}")?;
                if !args.is_empty() {
                    write!(f, "(")?;
                    for (i, a) in args.iter().enumerate() {
                        if i > 0 {
                            write!(f, ",")?;
                        }
                        write!(f, "{a}")?;
                    }
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

/// A distribution term: distribution variable, instantiable Dirac,
/// finite convex combination, or an operator lifted to distributions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistTerm {
    DVar(String),
    Dirac(StateTerm),
    Convex(Vec<(Rational, DistTerm)>),
    Lift(String, Vec<DistTerm>),
}

impl DistTerm {
    pub fn dvar(name: impl Into<String>) -> Self {
        DistTerm::DVar(name.into())
    }

    pub fn dirac(t: StateTerm) -> Self {
        DistTerm::Dirac(t)
    }
}

impl fmt::Display for DistTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistTerm::DVar(m) => write!(f, "%{m}"),
            DistTerm::Dirac(t) => write!(f, "delta({t})"),
            DistTerm::Convex(parts) => {
                write!(f, "(")?;
                for (i, (p, body)) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, " (+) ")?;
                    }
                    write!(f, "{p} * {body}")?;
                }
                write!(f, ")")
            }
            DistTerm::Lift(op, args) => {
                write!(f, "{op}")?;
                if !args.is_empty() {
                    write!(f, "(")?;
                    for (i, a) in args.iter().enumerate() {
                        if i > 0 {
                            write!(f, ",")?;
                        }
                        write!(f, "{a}")?;
                    }
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

/// A state or distribution variable, used wherever the two kinds are
/// counted or weighted uniformly.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    State(String),
    Dist(String),
}

impl VarId {
    pub fn state(name: impl Into<String>) -> Self {
        VarId::State(name.into())
    }

    pub fn dist(name: impl Into<String>) -> Self {
        VarId::Dist(name.into())
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::State(x) => write!(f, "{x}"),
            VarId::Dist(m) => write!(f, "%{m}"),
        }
    }
}

/// A substitution on state and distribution variables. Unmapped variables
/// persist under application.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Substitution {
    state_map: BTreeMap<String, StateTerm>,
    dist_map: BTreeMap<String, DistTerm>,
}

impl Substitution {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind_state(mut self, var: impl Into<String>, term: StateTerm) -> Self {
        self.state_map.insert(var.into(), term);
        self
    }

    pub fn bind_dist(mut self, var: impl Into<String>, term: DistTerm) -> Self {
        self.dist_map.insert(var.into(), term);
        self
    }

    pub fn insert_state(&mut self, var: impl Into<String>, term: StateTerm) {
        self.state_map.insert(var.into(), term);
    }

    pub fn insert_dist(&mut self, var: impl Into<String>, term: DistTerm) {
        self.dist_map.insert(var.into(), term);
    }

    pub fn state_binding(&self, var: &str) -> Option<&StateTerm> {
        self.state_map.get(var)
    }

    pub fn dist_binding(&self, var: &str) -> Option<&DistTerm> {
        self.dist_map.get(var)
    }

    /// Apply to a state term, replacing mapped variables homomorphically.
    pub fn apply_state(&self, t: &StateTerm) -> StateTerm {
        match t {
            StateTerm::Var(x) => match self.state_map.get(x) {
                Some(u) => u.clone(),
                None => t.clone(),
            },
            StateTerm::App(op, args) => {
                StateTerm::App(op.clone(), args.iter().map(|a| self.apply_state(a)).collect())
            }
        }
    }

    /// Apply to a distribution term; Dirac bodies are substituted as state terms.
    pub fn apply_dist(&self, theta: &DistTerm) -> DistTerm {
        match theta {
            DistTerm::DVar(m) => match self.dist_map.get(m) {
                Some(u) => u.clone(),
                None => theta.clone(),
            },
            DistTerm::Dirac(t) => DistTerm::Dirac(self.apply_state(t)),
            DistTerm::Convex(parts) => DistTerm::Convex(
                parts.iter().map(|(p, body)| (p.clone(), self.apply_dist(body))).collect(),
            ),
            DistTerm::Lift(op, args) => {
                DistTerm::Lift(op.clone(), args.iter().map(|a| self.apply_dist(a)).collect())
            }
        }
    }
}

/// Number of occurrences of the state variable `var` in `t`.
pub fn mvar_state(t: &StateTerm, var: &str) -> u64 {
    match t {
        StateTerm::Var(x) => u64::from(x == var),
        StateTerm::App(_, args) => args.iter().map(|a| mvar_state(a, var)).sum(),
    }
}

/// Occurrence count of a state or distribution variable in a distribution
/// term. Convex combinations take the maximum over their summands because
/// the probabilistic choice selects exactly one of them; lifted operators
/// sum over their arguments.
pub fn mvar_dist(theta: &DistTerm, zeta: &VarId) -> u64 {
    match theta {
        DistTerm::DVar(m) => match zeta {
            VarId::Dist(d) => u64::from(m == d),
            VarId::State(_) => 0,
        },
        DistTerm::Dirac(t) => match zeta {
            VarId::State(x) => mvar_state(t, x),
            VarId::Dist(_) => 0,
        },
        DistTerm::Convex(parts) => {
            parts.iter().map(|(_, body)| mvar_dist(body, zeta)).max().unwrap_or(0)
        }
        DistTerm::Lift(_, args) => args.iter().map(|a| mvar_dist(a, zeta)).sum(),
    }
}

/// A finitely supported probability distribution over closed state terms,
/// with exact rational masses summing to exactly 1. Zero-mass entries are
/// never stored; the support is kept in canonical term order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Distribution {
    mass: BTreeMap<StateTerm, Rational>,
}

impl Distribution {
    /// Point mass at a closed term.
    pub fn dirac(t: StateTerm) -> Self {
        let mut mass = BTreeMap::new();
        mass.insert(t, Rational::one());
        Distribution { mass }
    }

    /// Build from weighted support points; duplicate terms are merged.
    pub fn from_weighted(
        parts: impl IntoIterator<Item = (StateTerm, Rational)>,
    ) -> Result<Self, TermError> {
        let mut mass: BTreeMap<StateTerm, Rational> = BTreeMap::new();
        for (t, p) in parts {
            if p <= Rational::zero() || p > Rational::one() {
                return Err(TermError::WeightOutOfRange(p.to_string()));
            }
            *mass.entry(t).or_insert_with(Rational::zero) += p;
        }
        if mass.is_empty() {
            return Err(TermError::EmptySupport);
        }
        let total: Rational = mass.values().cloned().sum();
        if !total.is_one() {
            return Err(TermError::WeightSum(total.to_string()));
        }
        Ok(Distribution { mass })
    }

    pub fn mass_of(&self, t: &StateTerm) -> Rational {
        self.mass.get(t).cloned().unwrap_or_else(Rational::zero)
    }

    /// Total mass assigned to a set of terms.
    pub fn mass_of_set<'a>(&self, terms: impl IntoIterator<Item = &'a StateTerm>) -> Rational {
        let mut total = Rational::zero();
        for t in terms {
            if let Some(p) = self.mass.get(t) {
                total += p;
            }
        }
        total
    }

    pub fn support(&self) -> impl Iterator<Item = &StateTerm> {
        self.mass.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateTerm, &Rational)> {
        self.mass.iter()
    }

    pub fn support_size(&self) -> usize {
        self.mass.len()
    }

    pub fn total_mass(&self) -> Rational {
        self.mass.values().cloned().sum()
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (t, p)) in self.mass.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{t}: {p}")?;
        }
        write!(f, "}}")
    }
}

/// Evaluate a closed distribution term to the distribution it denotes.
///
/// Dirac terms become point masses, convex combinations are weighted sums
/// with merged duplicates, and lifted operators denote the product
/// distribution: `f(pi_1,...,pi_n)` assigns `prod_i pi_i(t_i)` to
/// `f(t_1,...,t_n)`.
pub fn eval_dist(theta: &DistTerm) -> Result<Distribution, TermError> {
    match theta {
        DistTerm::DVar(_) => Err(TermError::OpenTerm),
        DistTerm::Dirac(t) => {
            if !t.is_closed() {
                return Err(TermError::OpenTerm);
            }
            Ok(Distribution::dirac(t.clone()))
        }
        DistTerm::Convex(parts) => {
            if parts.is_empty() {
                return Err(TermError::EmptySupport);
            }
            let mut acc: BTreeMap<StateTerm, Rational> = BTreeMap::new();
            let mut total = Rational::zero();
            for (p, body) in parts {
                if *p <= Rational::zero() || *p > Rational::one() {
                    return Err(TermError::WeightOutOfRange(p.to_string()));
                }
                total += p;
                let pi = eval_dist(body)?;
                for (t, q) in pi.iter() {
                    *acc.entry(t.clone()).or_insert_with(Rational::zero) += p * q;
                }
            }
            if !total.is_one() {
                return Err(TermError::WeightSum(total.to_string()));
            }
            Ok(Distribution { mass: acc })
        }
        DistTerm::Lift(op, args) => {
            let parts = args.iter().map(eval_dist).collect::<Result<Vec<_>, _>>()?;
            let mut combos: Vec<(Vec<StateTerm>, Rational)> = vec![(Vec::new(), Rational::one())];
            for pi in &parts {
                let mut next = Vec::with_capacity(combos.len() * pi.support_size());
                for (prefix, w) in &combos {
                    for (t, p) in pi.iter() {
                        let mut prefix = prefix.clone();
                        prefix.push(t.clone());
                        next.push((prefix, w * p));
                    }
                }
                combos = next;
            }
            let mut acc: BTreeMap<StateTerm, Rational> = BTreeMap::new();
            for (tuple, w) in combos {
                *acc.entry(StateTerm::App(op.clone(), tuple)).or_insert_with(Rational::zero) += w;
            }
            Ok(Distribution { mass: acc })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(s: &str) -> Rational {
        rational_from_str(s).unwrap()
    }

    #[test]
    fn substitute_state_lookup_and_homomorphism() {
        let sigma = Substitution::new().bind_state("x", StateTerm::constant("r"));
        assert_eq!(sigma.apply_state(&StateTerm::var("x")), StateTerm::constant("r"));

        let sigma = Substitution::new().bind_state("x", StateTerm::constant("s"));
        let t = StateTerm::app("g", vec![StateTerm::var("x"), StateTerm::var("x")]);
        assert_eq!(
            sigma.apply_state(&t),
            StateTerm::app("g", vec![StateTerm::constant("s"), StateTerm::constant("s")])
        );

        // unmapped variables persist
        let sigma = Substitution::new().bind_state("x", StateTerm::constant("r"));
        let t = StateTerm::app("f", vec![StateTerm::var("y")]);
        assert_eq!(sigma.apply_state(&t), t);
    }

    #[test]
    fn substitute_dist_cases() {
        let sigma = Substitution::new().bind_state("x", StateTerm::constant("r"));
        assert_eq!(
            sigma.apply_dist(&DistTerm::Dirac(StateTerm::var("x"))),
            DistTerm::Dirac(StateTerm::constant("r"))
        );

        let sigma = Substitution::new().bind_dist("m", DistTerm::Dirac(StateTerm::constant("r")));
        assert_eq!(
            sigma.apply_dist(&DistTerm::dvar("m")),
            DistTerm::Dirac(StateTerm::constant("r"))
        );

        let sigma = Substitution::new().bind_dist("m", DistTerm::Dirac(StateTerm::constant("s")));
        let theta = DistTerm::Lift("g".into(), vec![DistTerm::dvar("m"), DistTerm::dvar("m")]);
        assert_eq!(
            sigma.apply_dist(&theta),
            DistTerm::Lift(
                "g".into(),
                vec![
                    DistTerm::Dirac(StateTerm::constant("s")),
                    DistTerm::Dirac(StateTerm::constant("s"))
                ]
            )
        );
    }

    #[test]
    fn mvar_state_counts_occurrences() {
        assert_eq!(mvar_state(&StateTerm::var("x"), "x"), 1);
        let t = StateTerm::app("g", vec![StateTerm::var("x"), StateTerm::var("x")]);
        assert_eq!(mvar_state(&t, "x"), 2);
        assert_eq!(mvar_state(&StateTerm::constant("r"), "x"), 0);
    }

    #[test]
    fn mvar_dist_max_over_convex_and_sum_over_lift() {
        let mu = VarId::dist("m");
        let lift = DistTerm::Lift("g".into(), vec![DistTerm::dvar("m"), DistTerm::dvar("m")]);
        assert_eq!(mvar_dist(&lift, &mu), 2);

        let par = DistTerm::Lift("par".into(), vec![DistTerm::dvar("m"), DistTerm::dvar("m")]);
        let convex = DistTerm::Convex(vec![
            (rat("1/2"), par),
            (rat("1/2"), DistTerm::Dirac(StateTerm::constant("sp"))),
        ]);
        assert_eq!(mvar_dist(&convex, &mu), 2);

        assert_eq!(mvar_dist(&DistTerm::Dirac(StateTerm::var("x")), &mu), 0);
        assert_eq!(mvar_dist(&DistTerm::Dirac(StateTerm::var("x")), &VarId::state("x")), 1);
    }

    #[test]
    fn eval_dist_dirac_and_duplicate_merge() {
        let pi = eval_dist(&DistTerm::Dirac(StateTerm::constant("r"))).unwrap();
        assert_eq!(pi.mass_of(&StateTerm::constant("r")), rat("1"));
        assert_eq!(pi.support_size(), 1);

        let theta = DistTerm::Convex(vec![
            (rat("1/2"), DistTerm::Dirac(StateTerm::constant("r"))),
            (rat("1/2"), DistTerm::Dirac(StateTerm::constant("r"))),
        ]);
        let pi = eval_dist(&theta).unwrap();
        assert_eq!(pi.support_size(), 1);
        assert_eq!(pi.mass_of(&StateTerm::constant("r")), rat("1"));
    }

    #[test]
    fn eval_dist_product_formula() {
        // pi = {s: 3/4, nil: 1/4}; g(pi, pi) is the independent product.
        let pi_term = DistTerm::Convex(vec![
            (rat("3/4"), DistTerm::Dirac(StateTerm::constant("s"))),
            (rat("1/4"), DistTerm::Dirac(StateTerm::constant("nil"))),
        ]);
        let theta = DistTerm::Lift("g".into(), vec![pi_term.clone(), pi_term]);
        let pi = eval_dist(&theta).unwrap();
        let s = StateTerm::constant("s");
        let nil = StateTerm::constant("nil");
        let g = |a: &StateTerm, b: &StateTerm| StateTerm::app("g", vec![a.clone(), b.clone()]);
        assert_eq!(pi.mass_of(&g(&s, &s)), rat("9/16"));
        assert_eq!(pi.mass_of(&g(&s, &nil)), rat("3/16"));
        assert_eq!(pi.mass_of(&g(&nil, &s)), rat("3/16"));
        assert_eq!(pi.mass_of(&g(&nil, &nil)), rat("1/16"));
        assert!(pi.total_mass().is_one());
    }

    #[test]
    fn eval_dist_rejects_open_terms() {
        assert_eq!(eval_dist(&DistTerm::dvar("m")), Err(TermError::OpenTerm));
        assert_eq!(eval_dist(&DistTerm::Dirac(StateTerm::var("x"))), Err(TermError::OpenTerm));
    }

    #[test]
    fn dist_mass_sums_over_subset() {
        let pi = Distribution::from_weighted(vec![
            (StateTerm::constant("s"), rat("3/4")),
            (StateTerm::constant("nil"), rat("1/4")),
        ])
        .unwrap();
        assert_eq!(pi.mass_of_set([&StateTerm::constant("nil")]), rat("1/4"));
        assert_eq!(pi.mass_of_set(std::iter::empty()), rat("0"));
        let pi = Distribution::dirac(StateTerm::constant("r"));
        assert_eq!(pi.mass_of_set([&StateTerm::constant("r")]), rat("1"));
    }

    #[test]
    fn rendering_is_canonical() {
        let t = StateTerm::app("f", vec![StateTerm::constant("r")]);
        assert_eq!(t.to_string(), "f(r)");
        assert_eq!(StateTerm::constant("nil").to_string(), "nil");
        let theta = DistTerm::Convex(vec![
            (rat("3/4"), DistTerm::Dirac(StateTerm::constant("s"))),
            (rat("1/4"), DistTerm::dvar("m")),
        ]);
        assert_eq!(theta.to_string(), "(3/4 * delta(s) (+) 1/4 * %m)");
    }

    #[test]
    fn rational_parsing_is_exact() {
        assert_eq!(rat("0.5"), rat("1/2"));
        assert_eq!(rat("0.125"), rat("1/8"));
        assert_eq!(rat("1"), Rational::one());
        assert!(rational_from_str("1/0").is_none());
        assert!(rational_from_str("x").is_none());
    }
}
