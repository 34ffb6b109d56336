//! Command-line front end: parse, format-check, analyze, explore, and
//! measure specifications, with deterministic text or JSON reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ptss::analysis::lfp_expansivity;
use ptss::bisim::{
    distance, verify_expansivity_bound, BisimError, DistanceMode, DistanceValue, HarnessError,
};
use ptss::engine::{reachable_fragment, Budget, Pts, PtsReport};
use ptss::format::{check_spec_entmuft, discriminating_power, check_requirement, Requirement, Verdict};
use ptss::report::{self, RequirementReport};
use ptss::syntax::{
    classify_evaluable, expand_var_sourced, parse_spec, parse_state_term, Diagnostics, Ptss,
};
use ptss::terms::{rational_from_str, Rational, StateTerm};

#[derive(Parser)]
#[command(name = "ptss", version, about = "Analyze probabilistic transition system specifications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct OutputOpts {
    /// Report format on standard output
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetOpts {
    /// Maximum number of explored states (also: PTSS_BUDGET_STATES)
    #[arg(long)]
    max_states: Option<usize>,
    /// Maximum exploration depth
    #[arg(long)]
    max_depth: Option<usize>,
    /// Maximum fixed-point sweeps per component
    #[arg(long)]
    max_closure_iters: Option<usize>,
}

impl BudgetOpts {
    fn resolve(&self) -> Budget {
        let mut budget = Budget::default();
        if let Ok(v) = std::env::var("PTSS_BUDGET_STATES") {
            if let Ok(n) = v.parse::<usize>() {
                budget.max_states = n;
            }
        }
        if let Some(n) = self.max_states {
            budget.max_states = n;
        }
        if let Some(n) = self.max_depth {
            budget.max_depth = n;
        }
        if let Some(n) = self.max_closure_iters {
            budget.max_closure_iters = n;
        }
        budget
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a specification and check every rule against the
    /// non-expansivity rule format
    Check {
        input: PathBuf,
        #[command(flatten)]
        output: OutputOpts,
        /// Exit with status 1 when a rule fails the format
        #[arg(long)]
        strict: bool,
    },
    /// Compute expansivity and discriminating powers, optionally checking
    /// compositionality requirements
    Analyze {
        input: PathBuf,
        /// Requirement to verify: non-expansive, p-norm=P, arg-independent=f:i
        #[arg(long = "require")]
        require: Vec<String>,
        #[command(flatten)]
        output: OutputOpts,
        /// Exit with status 1 when a requirement is not guaranteed
        #[arg(long)]
        strict: bool,
    },
    /// Explore the reachable fragment from seed terms
    Pts {
        input: PathBuf,
        /// Seed term (repeatable)
        #[arg(long = "seed", required = true)]
        seeds: Vec<String>,
        #[command(flatten)]
        budget: BudgetOpts,
        #[command(flatten)]
        output: OutputOpts,
    },
    /// Distance between two terms over the fragment they reach
    Distance {
        /// A specification (.ptss) or a serialized fragment (.json)
        input: PathBuf,
        /// The two terms to compare (exactly twice)
        #[arg(long = "term", num_args = 1, required = true)]
        terms: Vec<String>,
        /// exact, bracket, or auto
        #[arg(long, default_value = "auto")]
        mode: String,
        /// Bracket tolerance (rational, e.g. 1/1000000)
        #[arg(long)]
        tol: Option<String>,
        #[command(flatten)]
        budget: BudgetOpts,
        #[command(flatten)]
        output: OutputOpts,
    },
    /// Measure argument distances, evaluate the expansivity bound, and
    /// compare with the measured distance of the combined terms
    Verify {
        input: PathBuf,
        /// Operator to combine the pairs with
        #[arg(long)]
        op: String,
        /// Argument pair "t|t'" (repeatable, one per operator argument)
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
        #[command(flatten)]
        budget: BudgetOpts,
        #[command(flatten)]
        output: OutputOpts,
        /// Exit with status 1 when the bound does not hold
        #[arg(long)]
        strict: bool,
    },
}

/// Failure modes mapped to exit codes 2 (input) and 3 (budget).
enum CliError {
    Input(String, Option<Diagnostics>),
    Budget(String),
}

impl CliError {
    fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into(), None)
    }
}

fn emit(output: &OutputOpts, text: String, json: String) -> Result<(), CliError> {
    let body = match output.format {
        Format::Text => text,
        Format::Json => json.clone(),
    };
    println!("{body}");
    if let Some(path) = &output.out {
        std::fs::write(path, json + "\n")
            .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn load_spec(path: &Path) -> Result<(Ptss, Ptss), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let spec = parse_spec(&text)
        .map_err(|d| CliError::Input(format!("{} does not parse", path.display()), Some(d)))?;
    let expanded = expand_var_sourced(&spec);
    Ok((spec, expanded))
}

fn parse_term_arg(text: &str, spec: &Ptss) -> Result<StateTerm, CliError> {
    let t = parse_state_term(text, &spec.signature)
        .map_err(|d| CliError::Input(format!("bad term `{text}`"), Some(d)))?;
    if !t.is_closed() {
        return Err(CliError::input(format!("term `{text}` is not closed")));
    }
    Ok(t)
}

fn parse_requirement(text: &str) -> Result<Requirement, CliError> {
    if text == "non-expansive" {
        return Ok(Requirement::NonExpansive);
    }
    if let Some(rest) = text.strip_prefix("p-norm=") {
        let p: f64 = rest
            .parse()
            .map_err(|_| CliError::input(format!("bad p-norm exponent `{rest}`")))?;
        if !(p > 1.0) {
            return Err(CliError::input("p-norm requires p > 1".to_string()));
        }
        return Ok(Requirement::PNorm { p: rest.to_string() });
    }
    if let Some(rest) = text.strip_prefix("arg-independent=") {
        let (op, arg) = rest
            .split_once(':')
            .ok_or_else(|| CliError::input("expected arg-independent=op:index"))?;
        let arg: usize =
            arg.parse().map_err(|_| CliError::input(format!("bad argument index `{arg}`")))?;
        return Ok(Requirement::ArgIndependent { op: op.to_string(), arg });
    }
    Err(CliError::input(format!(
        "unknown requirement `{text}` (expected non-expansive, p-norm=P, arg-independent=f:i)"
    )))
}

fn verdict_text(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::NotGuaranteed => "not-guaranteed",
    }
}

fn run_check(input: &Path, output: &OutputOpts, strict: bool) -> Result<ExitCode, CliError> {
    let (_, expanded) = load_spec(input)?;
    let format_report = check_spec_entmuft(&expanded);
    let chi = discriminating_power(&expanded);
    let chi_rows: Vec<(String, Vec<bool>)> =
        chi.rows().map(|(op, row)| (op.to_string(), row.to_vec())).collect();
    let report = report::check_report(&format_report, chi_rows.into_iter(), Vec::new());

    let mut text = String::new();
    for rule in &report.rules {
        if rule.entmuft {
            writeln!(text, "rule {:<12} pass", rule.name).unwrap();
        } else {
            let vars: Vec<String> = rule
                .violations
                .iter()
                .map(|v| format!("{} copied {} times (limit {})", v.var, v.sum, v.limit))
                .collect();
            writeln!(text, "rule {:<12} FAIL: {}", rule.name, vars.join("; ")).unwrap();
        }
    }
    writeln!(text, "overall: {}", if report.overall { "pass" } else { "fail" }).unwrap();
    let overall = report.overall;
    emit(output, text.trim_end().to_string(), report::to_json(&report))?;
    Ok(if strict && !overall { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn run_analyze(
    input: &Path,
    require: &[String],
    output: &OutputOpts,
    strict: bool,
) -> Result<ExitCode, CliError> {
    let (_, expanded) = load_spec(input)?;
    let table = lfp_expansivity(&expanded).map_err(|e| CliError::input(e.to_string()))?;
    let mut requirement_rows: Vec<RequirementReport> = Vec::new();
    for text in require {
        let req = parse_requirement(text)?;
        let verdicts =
            check_requirement(&table, &req).map_err(|e| CliError::input(e.to_string()))?;
        requirement_rows.extend(report::requirement_reports(&req, &verdicts));
    }
    let all_guaranteed = requirement_rows.iter().all(|r| r.verdict == Verdict::Pass);
    let report = report::analysis_report(&table, requirement_rows);

    let mut text = String::new();
    for op in &report.operators {
        let omega: Vec<String> = op.omega.iter().map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }).collect();
        let chi: Vec<String> = op.chi.iter().map(|c| c.to_string()).collect();
        writeln!(text, "{:<10} omega=[{}] chi=[{}]", op.name, omega.join(","), chi.join(","))
            .unwrap();
    }
    writeln!(text, "sweeps: {}", report.sweeps).unwrap();
    if !report.widened.is_empty() {
        writeln!(text, "widened: {}", report.widened.join(", ")).unwrap();
    }
    for r in &report.requirements {
        writeln!(text, "require {} {}: {}", r.kind, r.operator, verdict_text(r.verdict)).unwrap();
    }
    emit(output, text.trim_end().to_string(), report::to_json(&report))?;
    Ok(if strict && !all_guaranteed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn evaluable_or_input_error(spec: &Ptss) -> Result<(), CliError> {
    let diags = classify_evaluable(spec);
    if !diags.is_empty() {
        return Err(CliError::Input("specification is not executable".to_string(), Some(diags)));
    }
    Ok(())
}

fn run_pts(
    input: &Path,
    seeds: &[String],
    budget: &BudgetOpts,
    output: &OutputOpts,
) -> Result<ExitCode, CliError> {
    let (_, expanded) = load_spec(input)?;
    evaluable_or_input_error(&expanded)?;
    let budget = budget.resolve();
    let seed_terms: BTreeSet<StateTerm> =
        seeds.iter().map(|s| parse_term_arg(s, &expanded)).collect::<Result<_, _>>()?;
    let pts = reachable_fragment(&expanded, &seed_terms, budget)
        .map_err(|e| CliError::input(e.to_string()))?;
    let report = pts.to_report(Some(budget));

    let mut text = String::new();
    writeln!(text, "states: {}", pts.state_count()).unwrap();
    for t in pts.states() {
        let flag = if pts.is_complete(t) { "" } else { "  [incomplete]" };
        writeln!(text, "  {t}{flag}").unwrap();
        for (action, dist) in pts.transitions_of(t) {
            writeln!(text, "    -{action}-> {dist}").unwrap();
        }
    }
    emit(output, text.trim_end().to_string(), report::to_json(&report))?;
    Ok(ExitCode::SUCCESS)
}

enum DistanceInput {
    Spec(Ptss),
    Fragment(Pts),
}

fn load_distance_input(input: &Path) -> Result<DistanceInput, CliError> {
    if input.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(input)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", input.display())))?;
        let report: PtsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("bad fragment file: {e}")))?;
        let pts = Pts::from_report(&report).map_err(|e| CliError::input(e.to_string()))?;
        Ok(DistanceInput::Fragment(pts))
    } else {
        let (_, expanded) = load_spec(input)?;
        evaluable_or_input_error(&expanded)?;
        Ok(DistanceInput::Spec(expanded))
    }
}

fn map_bisim_error(e: BisimError) -> CliError {
    match e {
        BisimError::IncompleteFragment(t) => {
            CliError::Budget(format!("state `{t}` exceeded the exploration budget"))
        }
        other => CliError::input(other.to_string()),
    }
}

fn run_distance(
    input: &Path,
    terms: &[String],
    mode: &str,
    tol: &Option<String>,
    budget: &BudgetOpts,
    output: &OutputOpts,
) -> Result<ExitCode, CliError> {
    if terms.len() != 2 {
        return Err(CliError::input("distance needs exactly two --term arguments"));
    }
    let budget = budget.resolve();
    let tol_value = match tol {
        Some(t) => Some(
            rational_from_str(t).ok_or_else(|| CliError::input(format!("bad tolerance `{t}`")))?,
        ),
        None => None,
    };
    let mode = match mode {
        "auto" => DistanceMode::Auto,
        "exact" => DistanceMode::Exact,
        "bracket" => DistanceMode::Bracket(
            tol_value.clone().unwrap_or_else(|| Rational::new(1.into(), 1_000_000.into())),
        ),
        other => return Err(CliError::input(format!("unknown mode `{other}`"))),
    };

    let (pts, t1, t2) = match load_distance_input(input)? {
        DistanceInput::Spec(spec) => {
            let t1 = parse_term_arg(&terms[0], &spec)?;
            let t2 = parse_term_arg(&terms[1], &spec)?;
            let seeds: BTreeSet<StateTerm> = [t1.clone(), t2.clone()].into();
            let pts = reachable_fragment(&spec, &seeds, budget)
                .map_err(|e| CliError::input(e.to_string()))?;
            (pts, t1, t2)
        }
        DistanceInput::Fragment(pts) => {
            let parse = |s: &str| {
                ptss::syntax::parse_closed_term_lenient(s)
                    .map_err(|d| CliError::Input(format!("bad term `{s}`"), Some(d)))
            };
            let t1 = parse(&terms[0])?;
            let t2 = parse(&terms[1])?;
            (pts, t1, t2)
        }
    };

    let result = distance(&pts, &t1, &t2, mode).map_err(map_bisim_error)?;
    let report = report::distance_report(&t1, &t2, &result, budget);

    let mut text = String::new();
    match &result.value {
        DistanceValue::Exact(v) => writeln!(text, "d({t1}, {t2}) = {v}").unwrap(),
        DistanceValue::Bracket { lo, hi } => {
            writeln!(text, "d({t1}, {t2}) in [{lo}, {hi}]").unwrap()
        }
    }
    emit(output, text.trim_end().to_string(), report::to_json(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn map_harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::Bisim(b) => map_bisim_error(b),
        other => CliError::input(other.to_string()),
    }
}

fn run_verify(
    input: &Path,
    op: &str,
    pairs: &[String],
    budget: &BudgetOpts,
    output: &OutputOpts,
    strict: bool,
) -> Result<ExitCode, CliError> {
    let (_, expanded) = load_spec(input)?;
    evaluable_or_input_error(&expanded)?;
    let budget = budget.resolve();
    let mut term_pairs = Vec::new();
    for pair in pairs {
        let (a, b) = pair
            .split_once('|')
            .ok_or_else(|| CliError::input(format!("bad pair `{pair}` (expected \"t|t'\")")))?;
        term_pairs.push((parse_term_arg(a.trim(), &expanded)?, parse_term_arg(b.trim(), &expanded)?));
    }
    let check = verify_expansivity_bound(&expanded, op, &term_pairs, budget)
        .map_err(map_harness_error)?;
    let report = report::verify_report(&check, budget);

    let mut text = String::new();
    for (a, b, e) in &check.pairs {
        writeln!(text, "d({a}, {b}) = {e}").unwrap();
    }
    writeln!(text, "bound    = {}", check.bound).unwrap();
    writeln!(text, "measured = {}", check.measured).unwrap();
    writeln!(text, "holds    = {} (gap {})", check.holds, check.gap).unwrap();
    let holds = check.holds;
    emit(output, text.trim_end().to_string(), report::to_json(&report))?;
    Ok(if strict && !holds { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = match &cli.command {
        Command::Check { output, .. }
        | Command::Analyze { output, .. }
        | Command::Pts { output, .. }
        | Command::Distance { output, .. }
        | Command::Verify { output, .. } => output.format,
    };
    let result = match &cli.command {
        Command::Check { input, output, strict } => run_check(input, output, *strict),
        Command::Analyze { input, require, output, strict } => {
            run_analyze(input, require, output, *strict)
        }
        Command::Pts { input, seeds, budget, output } => run_pts(input, seeds, budget, output),
        Command::Distance { input, terms, mode, tol, budget, output } => {
            run_distance(input, terms, mode, tol, budget, output)
        }
        Command::Verify { input, op, pairs, budget, output, strict } => {
            run_verify(input, op, pairs, budget, output, *strict)
        }
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            let (message, diags, code) = match err {
                CliError::Input(m, d) => (m, d, 2),
                CliError::Budget(m) => (m, None, 3),
            };
            match format {
                Format::Json => {
                    let diags = diags.unwrap_or_else(|| {
                        let mut d = Diagnostics::new();
                        d.error("INPUT", ptss::syntax::Span::default(), message.clone());
                        d
                    });
                    println!("{}", report::to_json(&report::DiagnosticsReport::new(&diags)));
                }
                Format::Text => {
                    eprintln!("error: {message}");
                    if let Some(d) = diags {
                        eprint!("{d}");
                    }
                }
            }
            ExitCode::from(code)
        }
    }
}
