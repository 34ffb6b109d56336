//! Python bindings: a `Spec` class wrapping a parsed specification with the
//! analyzers, the fragment explorer, and the distance machinery. Reports
//! come back as JSON strings with the same schemas as the command line.

use std::collections::BTreeSet;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ptss::analysis::{expansivity_bound, lfp_expansivity};
use ptss::bisim::{distance, verify_expansivity_bound, DistanceMode, DistanceValue};
use ptss::engine::{reachable_fragment, Budget};
use ptss::format::{check_spec_entmuft, discriminating_power};
use ptss::report;
use ptss::syntax::{classify_evaluable, expand_var_sourced, parse_spec, parse_state_term, Ptss};
use ptss::terms::{rational_from_str, StateTerm};

fn value_err(msg: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(msg.to_string())
}

/// A parsed specification, already expanded to operator-sourced rules.
#[pyclass]
struct Spec {
    inner: Ptss,
}

impl Spec {
    fn term(&self, text: &str) -> PyResult<StateTerm> {
        let t = parse_state_term(text, &self.inner.signature)
            .map_err(|d| value_err(format!("bad term `{text}`: {d}")))?;
        if !t.is_closed() {
            return Err(value_err(format!("term `{text}` is not closed")));
        }
        Ok(t)
    }

    fn budget(&self, max_states: Option<usize>, max_depth: Option<usize>) -> Budget {
        let mut budget = Budget::default();
        if let Some(n) = max_states {
            budget.max_states = n;
        }
        if let Some(n) = max_depth {
            budget.max_depth = n;
        }
        budget
    }
}

#[pymethods]
impl Spec {
    /// Parse a specification from source text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Spec> {
        let spec = parse_spec(text).map_err(|d| value_err(format!("parse failed:\n{d}")))?;
        Ok(Spec { inner: expand_var_sourced(&spec) })
    }

    /// Parse a specification from a file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Spec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| value_err(format!("cannot read {path}: {e}")))?;
        Spec::parse(&text)
    }

    /// Declared operators as (name, arity) pairs in canonical order.
    fn operators(&self) -> Vec<(String, usize)> {
        self.inner.signature.operators().map(|(n, a)| (n.to_string(), a)).collect()
    }

    /// Rule display names in declaration order.
    fn rules(&self) -> Vec<String> {
        (0..self.inner.rules.len()).map(|i| self.inner.rule_name(i)).collect()
    }

    /// Inferred action labels.
    fn actions(&self) -> Vec<String> {
        self.inner.actions.iter().cloned().collect()
    }

    /// True when the semantics engine can execute this specification.
    fn is_executable(&self) -> bool {
        classify_evaluable(&self.inner).is_empty()
    }

    /// Format-checker report (JSON).
    fn check_format(&self) -> String {
        let format = check_spec_entmuft(&self.inner);
        let chi = discriminating_power(&self.inner);
        let rows: Vec<(String, Vec<bool>)> =
            chi.rows().map(|(op, row)| (op.to_string(), row.to_vec())).collect();
        report::to_json(&report::check_report(&format, rows.into_iter(), Vec::new()))
    }

    /// Expansivity analyzer report (JSON).
    fn analyze(&self) -> PyResult<String> {
        let table = lfp_expansivity(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(report::to_json(&report::analysis_report(&table, Vec::new())))
    }

    /// Expansivity powers of one operator, each "0", "1", ... or "inf".
    fn omega(&self, op: &str) -> PyResult<Vec<String>> {
        let table = lfp_expansivity(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let row = table.omega_row(op).ok_or_else(|| value_err(format!("unknown operator `{op}`")))?;
        Ok(row.iter().map(|m| m.to_string()).collect())
    }

    /// The expansivity bound for an operator at the given argument
    /// distances (rationals as strings), as an exact rational string.
    fn bound(&self, op: &str, eps: Vec<String>) -> PyResult<String> {
        let table = lfp_expansivity(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let eps = eps
            .iter()
            .map(|e| rational_from_str(e).ok_or_else(|| value_err(format!("bad rational `{e}`"))))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(expansivity_bound(&table, op, &eps).map_err(value_err)?.to_string())
    }

    /// Explore the reachable fragment from seed terms; returns the
    /// fragment report (JSON).
    #[pyo3(signature = (seeds, max_states=None, max_depth=None))]
    fn explore(
        &self,
        seeds: Vec<String>,
        max_states: Option<usize>,
        max_depth: Option<usize>,
    ) -> PyResult<String> {
        let budget = self.budget(max_states, max_depth);
        let seed_terms: BTreeSet<StateTerm> =
            seeds.iter().map(|s| self.term(s)).collect::<PyResult<_>>()?;
        let pts = reachable_fragment(&self.inner, &seed_terms, budget).map_err(value_err)?;
        Ok(report::to_json(&pts.to_report(Some(budget))))
    }

    /// Exact distance between two terms as a rational string.
    #[pyo3(signature = (t, t2, max_states=None, max_depth=None))]
    fn distance(
        &self,
        t: &str,
        t2: &str,
        max_states: Option<usize>,
        max_depth: Option<usize>,
    ) -> PyResult<String> {
        let budget = self.budget(max_states, max_depth);
        let a = self.term(t)?;
        let b = self.term(t2)?;
        let seeds: BTreeSet<StateTerm> = [a.clone(), b.clone()].into();
        let pts = reachable_fragment(&self.inner, &seeds, budget).map_err(value_err)?;
        let result = distance(&pts, &a, &b, DistanceMode::Exact)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        match result.value {
            DistanceValue::Exact(v) => Ok(v.to_string()),
            DistanceValue::Bracket { .. } => unreachable!("exact mode requested"),
        }
    }

    /// Measure argument distances, evaluate the bound, and compare with
    /// the combined distance; returns the report (JSON).
    #[pyo3(signature = (op, pairs, max_states=None, max_depth=None))]
    fn verify_bound(
        &self,
        op: &str,
        pairs: Vec<(String, String)>,
        max_states: Option<usize>,
        max_depth: Option<usize>,
    ) -> PyResult<String> {
        let budget = self.budget(max_states, max_depth);
        let pairs = pairs
            .iter()
            .map(|(a, b)| Ok((self.term(a)?, self.term(b)?)))
            .collect::<PyResult<Vec<_>>>()?;
        let check = verify_expansivity_bound(&self.inner, op, &pairs, budget)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(report::to_json(&report::verify_report(&check, budget)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Spec({} operators, {} rules, {} actions)",
            self.inner.signature.len(),
            self.inner.rules.len(),
            self.inner.actions.len()
        )
    }
}

#[pymodule]
fn ptss_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Spec>()?;
    Ok(())
}
