//! Syntactic checks on rule sets: the per-argument discriminating power
//! table, the non-expansivity rule format, and verdicts for derived
//! compositionality requirements.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::analysis::{AnalysisError, ExpansivityTable, Multiplicity};
use crate::syntax::{Ptss, Rule, RuleSource};
use crate::terms::{mvar_dist, mvar_state, VarId};

/// For each declared operator argument: 1 if the argument is tested by a
/// premise of some rule of that operator, else 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChiTable {
    chi: BTreeMap<String, Vec<bool>>,
}

impl ChiTable {
    /// Discriminating power of argument `index` (0-based) of `op`.
    pub fn get(&self, op: &str, index: usize) -> Option<bool> {
        self.chi.get(op).and_then(|row| row.get(index)).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.chi.iter().map(|(op, row)| (op.as_str(), row.as_slice()))
    }
}

/// Compute the discriminating power table: `chi(f,i) = 1` iff the i-th
/// source variable of some `f`-rule occurs in a positive or negative
/// premise left-hand side of that rule. Operators without rules get
/// all-zero rows.
///
/// The specification must contain only operator-sourced rules.
pub fn discriminating_power(p: &Ptss) -> ChiTable {
    let mut chi: BTreeMap<String, Vec<bool>> =
        p.signature.operators().map(|(op, arity)| (op.to_string(), vec![false; arity])).collect();
    for rule in &p.rules {
        let RuleSource::Op(op, vars) = &rule.source else {
            panic!("discriminating_power requires an expanded, operator-sourced specification");
        };
        let row = chi.get_mut(op).expect("rule operator missing from signature");
        for (i, x) in vars.iter().enumerate() {
            if row[i] {
                continue;
            }
            let tested = rule.pos_premises.iter().any(|pp| mvar_state(&pp.lhs, x) > 0)
                || rule.neg_premises.iter().any(|np| mvar_state(&np.lhs, x) > 0);
            if tested {
                row[i] = true;
            }
        }
    }
    ChiTable { chi }
}

/// A source variable whose copy count exceeds the allowed limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormatViolation {
    pub var: String,
    pub sum: u64,
    pub limit: u64,
}

/// Per-rule outcome of the non-expansivity format check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleFormatCheck {
    pub pass: bool,
    pub violations: Vec<FormatViolation>,
}

/// Check one operator-sourced rule against the non-expansivity rule format:
/// for each source variable `x_i`, the occurrence count of `x_i` in the
/// target plus, for every positive premise, the count of `x_i` in the
/// premise left-hand side times the count of the premise derivative in the
/// target, must not exceed 1.
pub fn check_rule_entmuft(rule: &Rule) -> RuleFormatCheck {
    let mut violations = Vec::new();
    for x in rule.source_vars() {
        let mut sum = mvar_dist(&rule.target, &VarId::state(x.clone()));
        for pp in &rule.pos_premises {
            sum += mvar_state(&pp.lhs, x)
                * mvar_dist(&rule.target, &VarId::dist(pp.derivative.clone()));
        }
        if sum > 1 {
            violations.push(FormatViolation { var: x.clone(), sum, limit: 1 });
        }
    }
    RuleFormatCheck { pass: violations.is_empty(), violations }
}

/// Aggregate of the per-rule format checks over a whole specification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatReport {
    pub per_rule: Vec<(String, RuleFormatCheck)>,
    pub overall: bool,
}

/// Check every rule of an expanded specification; the overall verdict is
/// the conjunction of the per-rule passes (vacuously true without rules).
pub fn check_spec_entmuft(p: &Ptss) -> FormatReport {
    let per_rule: Vec<(String, RuleFormatCheck)> = p
        .rules
        .iter()
        .enumerate()
        .map(|(i, rule)| {
            assert!(
                matches!(rule.source, RuleSource::Op(..)),
                "check_spec_entmuft requires an expanded, operator-sourced specification"
            );
            (p.rule_name(i), check_rule_entmuft(rule))
        })
        .collect();
    let overall = per_rule.iter().all(|(_, c)| c.pass);
    FormatReport { per_rule, overall }
}

/// A compositionality requirement to test against the expansivity table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Requirement {
    /// Combined distance bounded by the (capped) sum of argument distances.
    NonExpansive,
    /// The distance of the combined processes must not depend on the given
    /// argument (1-based index).
    ArgIndependent { op: String, arg: usize },
    /// Combined distance bounded by the p-norm of the argument distances,
    /// for some p > 1 (carried verbatim for reporting).
    PNorm { p: String },
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Requirement::NonExpansive => write!(f, "non-expansive"),
            Requirement::ArgIndependent { op, arg } => write!(f, "arg-independent={op}:{arg}"),
            Requirement::PNorm { p } => write!(f, "p-norm={p}"),
        }
    }
}

/// Sufficient-condition verdict: `Pass` means the requirement is guaranteed
/// by the expansivity table; `NotGuaranteed` means the table does not prove
/// it (which is not a proof of violation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    NotGuaranteed,
}

/// Evaluate a requirement against the computed expansivity powers,
/// returning one verdict per affected operator.
///
/// Non-expansivity is guaranteed when every argument has power at most 1;
/// independence of an argument when its power is 0; a p-norm bound with
/// p > 1 when at most one argument has power 1 and all others have power 0.
pub fn check_requirement(
    table: &ExpansivityTable,
    req: &Requirement,
) -> Result<Vec<(String, Verdict)>, AnalysisError> {
    let one = Multiplicity::fin(1u32);
    match req {
        Requirement::NonExpansive => Ok(table
            .operators()
            .map(|(op, row)| {
                let ok = row.iter().all(|m| *m <= one);
                (op.to_string(), if ok { Verdict::Pass } else { Verdict::NotGuaranteed })
            })
            .collect()),
        Requirement::ArgIndependent { op, arg } => {
            let row = table
                .omega_row(op)
                .ok_or_else(|| AnalysisError::UnknownOperator(op.clone()))?;
            if *arg == 0 || *arg > row.len() {
                return Err(AnalysisError::UnknownOperator(format!("{op}:{arg}")));
            }
            let ok = row[arg - 1].is_zero();
            Ok(vec![(op.clone(), if ok { Verdict::Pass } else { Verdict::NotGuaranteed })])
        }
        Requirement::PNorm { .. } => Ok(table
            .operators()
            .map(|(op, row)| {
                let ones = row.iter().filter(|m| **m == one).count();
                let rest_zero = row.iter().all(|m| m.is_zero() || *m == one);
                let ok = ones <= 1 && rest_zero;
                (op.to_string(), if ok { Verdict::Pass } else { Verdict::NotGuaranteed })
            })
            .collect()),
    }
}
