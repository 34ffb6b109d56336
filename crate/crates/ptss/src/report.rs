//! Serializable report payloads for every front-end surface. All maps are
//! ordered so serialization is byte-stable across runs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::analysis::{ExpansivityTable, Multiplicity};
use crate::bisim::{BoundCheck, DistanceResult, DistanceValue, Relation};
use crate::engine::Budget;
use crate::format::{FormatReport, FormatViolation, Requirement, Verdict};
use crate::syntax::{Diagnostic, Diagnostics};

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl DiagnosticsReport {
    pub fn new(d: &Diagnostics) -> Self {
        DiagnosticsReport { diagnostics: d.items().to_vec() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleFormatReport {
    pub name: String,
    pub entmuft: bool,
    pub violations: Vec<FormatViolation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorChiReport {
    pub name: String,
    pub chi: Vec<u8>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RequirementReport {
    pub kind: String,
    pub operator: String,
    pub verdict: Verdict,
}

/// Report of the format checker: per-rule verdicts, per-operator
/// discriminating powers, and any requirement verdicts.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub rules: Vec<RuleFormatReport>,
    pub operators: Vec<OperatorChiReport>,
    pub requirements: Vec<RequirementReport>,
    pub overall: bool,
}

pub fn check_report(
    format: &FormatReport,
    chi_rows: impl Iterator<Item = (String, Vec<bool>)>,
    requirements: Vec<RequirementReport>,
) -> CheckReport {
    CheckReport {
        rules: format
            .per_rule
            .iter()
            .map(|(name, check)| RuleFormatReport {
                name: name.clone(),
                entmuft: check.pass,
                violations: check.violations.clone(),
            })
            .collect(),
        operators: chi_rows
            .map(|(name, row)| OperatorChiReport {
                name,
                chi: row.into_iter().map(u8::from).collect(),
            })
            .collect(),
        requirements,
        overall: format.overall,
    }
}

pub fn requirement_reports(
    req: &Requirement,
    verdicts: &[(String, Verdict)],
) -> Vec<RequirementReport> {
    verdicts
        .iter()
        .map(|(op, verdict)| RequirementReport {
            kind: req.to_string(),
            operator: op.clone(),
            verdict: *verdict,
        })
        .collect()
}

fn omega_json(m: &Multiplicity) -> serde_json::Value {
    match m {
        Multiplicity::Inf => serde_json::Value::String("inf".to_string()),
        Multiplicity::Fin(n) => match u64::try_from(n) {
            Ok(v) => serde_json::Value::from(v),
            Err(_) => serde_json::Value::String(n.to_string()),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorAnalysisReport {
    pub name: String,
    pub arity: usize,
    pub omega: Vec<serde_json::Value>,
    pub chi: Vec<u8>,
}

/// Report of the expansivity analyzer.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub operators: Vec<OperatorAnalysisReport>,
    pub sweeps: usize,
    pub widened: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub requirements: Vec<RequirementReport>,
}

pub fn analysis_report(table: &ExpansivityTable, requirements: Vec<RequirementReport>) -> AnalysisReport {
    AnalysisReport {
        operators: table
            .operators()
            .map(|(name, row)| OperatorAnalysisReport {
                name: name.to_string(),
                arity: row.len(),
                omega: row.iter().map(omega_json).collect(),
                chi: (0..row.len())
                    .map(|i| u8::from(table.chi().get(name, i).unwrap_or(false)))
                    .collect(),
            })
            .collect(),
        sweeps: table.sweeps,
        widened: table.widened.iter().map(|(op, i)| format!("{op}:{}", i + 1)).collect(),
        requirements,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelationReport {
    pub pairs: Vec<[String; 2]>,
    pub epsilon: String,
}

pub fn relation_report(rel: &Relation, epsilon: &crate::terms::Rational) -> RelationReport {
    RelationReport {
        pairs: rel.pairs().map(|(a, b)| [a.to_string(), b.to_string()]).collect(),
        epsilon: epsilon.to_string(),
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum DistanceValueReport {
    Exact(String),
    Bracket { lo: String, hi: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    pub t: String,
    #[serde(rename = "t'")]
    pub t_prime: String,
    pub distance: DistanceValueReport,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<RelationReport>,
    pub budget: Budget,
}

pub fn distance_report(
    t: &crate::terms::StateTerm,
    t2: &crate::terms::StateTerm,
    result: &DistanceResult,
    budget: Budget,
) -> DistanceReport {
    let (distance, mode) = match &result.value {
        DistanceValue::Exact(v) => (DistanceValueReport::Exact(v.to_string()), "exact"),
        DistanceValue::Bracket { lo, hi } => (
            DistanceValueReport::Bracket { lo: lo.to_string(), hi: hi.to_string() },
            "bracket",
        ),
    };
    DistanceReport {
        t: t.to_string(),
        t_prime: t2.to_string(),
        distance,
        mode: mode.to_string(),
        witness: result.witness.as_ref().map(|(eps, rel)| relation_report(rel, eps)),
        budget,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifiedPairReport {
    pub t: String,
    #[serde(rename = "t'")]
    pub t_prime: String,
    pub epsilon: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub op: String,
    pub pairs: Vec<VerifiedPairReport>,
    pub bound: String,
    pub measured: String,
    pub holds: bool,
    pub gap: String,
    pub budget: Budget,
}

pub fn verify_report(check: &BoundCheck, budget: Budget) -> VerifyReport {
    VerifyReport {
        op: check.op.clone(),
        pairs: check
            .pairs
            .iter()
            .map(|(a, b, e)| VerifiedPairReport {
                t: a.to_string(),
                t_prime: b.to_string(),
                epsilon: e.to_string(),
            })
            .collect(),
        bound: check.bound.to_string(),
        measured: check.measured.to_string(),
        holds: check.holds,
        gap: check.gap.to_string(),
        budget,
    }
}

/// Render any serializable report as stable, pretty-printed JSON.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialization cannot fail")
}

/// Chi rows of a table in canonical operator order, for report assembly.
pub fn chi_rows(table: &ExpansivityTable) -> Vec<(String, Vec<bool>)> {
    table
        .operators()
        .map(|(name, row)| {
            let bits =
                (0..row.len()).map(|i| table.chi().get(name, i).unwrap_or(false)).collect();
            (name.to_string(), bits)
        })
        .collect()
}

#[allow(unused)]
fn _assert_maps_are_ordered(_: BTreeMap<String, bool>) {}
