//! The rule-language front end: lexer, parser, well-formedness validation,
//! source-variable rule expansion, and classification of the subset the
//! semantics engine can execute.
//!
//! Lexical classes: identifiers declared via `op name/arity;` are operators,
//! `%`-prefixed identifiers are distribution variables, every other
//! identifier occurring in a rule is a state variable.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::terms::{rational_from_str, DistTerm, Rational, Signature, StateTerm, Substitution};

/// A positive premise `lhs -action-> %derivative`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosPremise {
    pub lhs: StateTerm,
    pub action: String,
    pub derivative: String,
}

/// A negative premise `lhs -action-/>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegPremise {
    pub lhs: StateTerm,
    pub action: String,
}

/// Source of a rule conclusion: an operator applied to distinct variables,
/// or a bare variable (to be expanded per operator).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleSource {
    Op(String, Vec<String>),
    Var(String),
}

/// A simple rule: premises, a source, a conclusion action and a target
/// distribution term. Premise left-hand sides are state terms, so the
/// format has no lookahead by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub name: Option<String>,
    pub pos_premises: Vec<PosPremise>,
    pub neg_premises: Vec<NegPremise>,
    pub source: RuleSource,
    pub conclusion_action: String,
    pub target: DistTerm,
}

impl Rule {
    /// Source variables in positional order (a bare-variable source has one).
    pub fn source_vars(&self) -> &[String] {
        match &self.source {
            RuleSource::Op(_, vars) => vars,
            RuleSource::Var(x) => std::slice::from_ref(x),
        }
    }

    pub fn source_op(&self) -> Option<&str> {
        match &self.source {
            RuleSource::Op(op, _) => Some(op),
            RuleSource::Var(_) => None,
        }
    }

    /// Bound variables: source variables plus derivatives.
    pub fn bound_state_vars(&self) -> BTreeSet<&str> {
        self.source_vars().iter().map(String::as_str).collect()
    }

    pub fn derivatives(&self) -> impl Iterator<Item = &str> {
        self.pos_premises.iter().map(|p| p.derivative.as_str())
    }

    fn actions<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        out.insert(self.conclusion_action.as_str());
        for p in &self.pos_premises {
            out.insert(p.action.as_str());
        }
        for p in &self.neg_premises {
            out.insert(p.action.as_str());
        }
    }
}

/// A full specification: signature, inferred action set, and rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ptss {
    pub signature: Signature,
    pub actions: BTreeSet<String>,
    pub rules: Vec<Rule>,
}

impl Ptss {
    pub fn new(signature: Signature, rules: Vec<Rule>) -> Self {
        let mut actions = BTreeSet::new();
        for r in &rules {
            let mut acts = BTreeSet::new();
            r.actions(&mut acts);
            actions.extend(acts.into_iter().map(str::to_owned));
        }
        Ptss { signature, actions, rules }
    }

    /// Display name of a rule: its declared name or a stable synthetic one.
    pub fn rule_name(&self, index: usize) -> String {
        match &self.rules[index].name {
            Some(n) => n.clone(),
            None => format!("r{index}"),
        }
    }

    /// Rules whose conclusion source is the given operator.
    pub fn rules_of<'a>(&'a self, op: &'a str) -> impl Iterator<Item = &'a Rule> + 'a {
        self.rules.iter().filter(move |r| r.source_op() == Some(op))
    }

    pub fn has_var_sourced_rules(&self) -> bool {
        self.rules.iter().any(|r| matches!(r.source, RuleSource::Var(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One diagnostic with a stable code and a 1-based source location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub line: u32,
    pub col: u32,
    pub message: String,
}

/// A deterministic batch of diagnostics, ordered by location then code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    items: Vec<Diagnostic>,
}

impl Diagnostics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, severity: Severity, code: &str, span: Span, message: impl Into<String>) {
        self.items.push(Diagnostic {
            severity,
            code: code.to_string(),
            line: span.line,
            col: span.col,
            message: message.into(),
        });
    }

    pub fn error(&mut self, code: &str, span: Span, message: impl Into<String>) {
        self.push(Severity::Error, code, span, message);
    }

    pub fn warning(&mut self, code: &str, span: Span, message: impl Into<String>) {
        self.push(Severity::Warning, code, span, message);
    }

    pub fn extend(&mut self, other: Diagnostics) {
        self.items.extend(other.items);
    }

    pub fn normalize(&mut self) {
        self.items.sort_by(|a, b| {
            (a.line, a.col, &a.code, &a.message).cmp(&(b.line, b.col, &b.code, &b.message))
        });
        self.items.dedup();
    }

    pub fn has_errors(&self) -> bool {
        self.items.iter().any(|d| d.severity == Severity::Error)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Diagnostic] {
        &self.items
    }

    pub fn items_with_code<'a>(&'a self, code: &'a str) -> impl Iterator<Item = &'a Diagnostic> + 'a {
        self.items.iter().filter(move |d| d.code == code)
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.items {
            let sev = match d.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            writeln!(f, "{}:{}: {sev}[{}]: {}", d.line, d.col, d.code, d.message)?;
        }
        Ok(())
    }
}

pub mod codes {
    pub const SYNTAX: &str = "SYNTAX";
    pub const UNKNOWN_OP: &str = "UNKNOWN_OP";
    pub const ARITY: &str = "ARITY";
    pub const DUP_OP: &str = "DUP_OP";
    pub const DUP_DERIVATIVE: &str = "DUP_DERIVATIVE";
    pub const DUP_SOURCE_VAR: &str = "DUP_SOURCE_VAR";
    pub const LOOKAHEAD: &str = "LOOKAHEAD";
    pub const SOURCE_VAR: &str = "SOURCE_VAR";
    pub const BAD_WEIGHT: &str = "BAD_WEIGHT";
    pub const NEG_NONVAR: &str = "NEG_NONVAR";
    pub const FREE_VAR: &str = "FREE_VAR";
    pub const XSOURCE: &str = "XSOURCE";
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    DVar(String),
    Number(String),
    LParen,
    RParen,
    Comma,
    Semi,
    Colon,
    Slash,
    Star,
    OPlus,
    Turnstile,
    PosArrow(String),
    NegArrow(String),
    KwOp,
    KwRule,
    KwDelta,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::DVar(s) => write!(f, "distribution variable `%{s}`"),
            Tok::Number(s) => write!(f, "number `{s}`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Semi => write!(f, "`;`"),
            Tok::Colon => write!(f, "`:`"),
            Tok::Slash => write!(f, "`/`"),
            Tok::Star => write!(f, "`*`"),
            Tok::OPlus => write!(f, "`(+)`"),
            Tok::Turnstile => write!(f, "`|-`"),
            Tok::PosArrow(a) => write!(f, "`-{a}->`"),
            Tok::NegArrow(a) => write!(f, "`-{a}-/>`"),
            Tok::KwOp => write!(f, "`op`"),
            Tok::KwRule => write!(f, "`rule`"),
            Tok::KwDelta => write!(f, "`delta`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'\''
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek_at(&self, off: usize) -> Option<u8> {
        self.src.get(self.pos + off).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(b)
    }

    fn span(&self) -> Span {
        Span { line: self.line, col: self.col }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.peek().is_some_and(is_ident_continue) {
            self.bump();
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn tokenize(mut self) -> Result<Vec<(Tok, Span)>, Diagnostics> {
        let mut out = Vec::new();
        let mut diags = Diagnostics::new();
        loop {
            match self.peek() {
                None => break,
                Some(b) if b.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'#') => {
                    while self.peek().is_some_and(|b| b != b'\n') {
                        self.bump();
                    }
                }
                Some(b'(') => {
                    let span = self.span();
                    if self.peek_at(1) == Some(b'+') && self.peek_at(2) == Some(b')') {
                        self.bump();
                        self.bump();
                        self.bump();
                        out.push((Tok::OPlus, span));
                    } else {
                        self.bump();
                        out.push((Tok::LParen, span));
                    }
                }
                Some(b')') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::RParen, span));
                }
                Some(b',') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::Comma, span));
                }
                Some(b';') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::Semi, span));
                }
                Some(b':') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::Colon, span));
                }
                Some(b'/') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::Slash, span));
                }
                Some(b'*') => {
                    let span = self.span();
                    self.bump();
                    out.push((Tok::Star, span));
                }
                Some(b'|') => {
                    let span = self.span();
                    self.bump();
                    if self.peek() == Some(b'-') {
                        self.bump();
                        out.push((Tok::Turnstile, span));
                    } else {
                        diags.error(codes::SYNTAX, span, "expected `|-`");
                    }
                }
                Some(b'%') => {
                    let span = self.span();
                    self.bump();
                    if self.peek().is_some_and(is_ident_start) {
                        let name = self.ident();
                        out.push((Tok::DVar(name), span));
                    } else {
                        diags.error(codes::SYNTAX, span, "expected identifier after `%`");
                    }
                }
                Some(b'-') => {
                    // action arrows: -act-> and -act-/>
                    let span = self.span();
                    self.bump();
                    if !self.peek().is_some_and(is_ident_start) {
                        diags.error(codes::SYNTAX, span, "expected action name after `-`");
                        continue;
                    }
                    let action = self.ident();
                    if self.peek() != Some(b'-') {
                        diags.error(codes::SYNTAX, span, "expected `->` or `-/>` after action");
                        continue;
                    }
                    self.bump();
                    match self.peek() {
                        Some(b'>') => {
                            self.bump();
                            out.push((Tok::PosArrow(action), span));
                        }
                        Some(b'/') if self.peek_at(1) == Some(b'>') => {
                            self.bump();
                            self.bump();
                            out.push((Tok::NegArrow(action), span));
                        }
                        _ => diags.error(codes::SYNTAX, span, "expected `->` or `-/>` after action"),
                    }
                }
                Some(b) if b.is_ascii_digit() => {
                    let span = self.span();
                    let start = self.pos;
                    while self.peek().is_some_and(|b| b.is_ascii_digit()) {
                        self.bump();
                    }
                    if self.peek() == Some(b'.') && self.peek_at(1).is_some_and(|b| b.is_ascii_digit()) {
                        self.bump();
                        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
                            self.bump();
                        }
                    }
                    let text = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                    out.push((Tok::Number(text), span));
                }
                Some(b) if is_ident_start(b) => {
                    let span = self.span();
                    let name = self.ident();
                    let tok = match name.as_str() {
                        "op" => Tok::KwOp,
                        "rule" => Tok::KwRule,
                        "delta" => Tok::KwDelta,
                        _ => Tok::Ident(name),
                    };
                    out.push((tok, span));
                }
                Some(b) => {
                    let span = self.span();
                    self.bump();
                    diags.error(codes::SYNTAX, span, format!("unexpected character `{}`", b as char));
                }
            }
        }
        if diags.has_errors() {
            diags.normalize();
            return Err(diags);
        }
        out.push((Tok::Eof, self.span()));
        Ok(out)
    }
}

struct Parser {
    toks: Vec<(Tok, Span)>,
    pos: usize,
    sig: Signature,
    diags: Diagnostics,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn span(&self) -> Span {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, Span) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok) -> bool {
        if self.peek() == want {
            self.bump();
            true
        } else {
            let span = self.span();
            let got = self.peek().clone();
            self.diags.error(codes::SYNTAX, span, format!("expected {want}, found {got}"));
            false
        }
    }

    /// Skip to just past the next `;` for error recovery.
    fn recover_to_semi(&mut self) {
        loop {
            match self.peek() {
                Tok::Semi => {
                    self.bump();
                    return;
                }
                Tok::Eof => return,
                _ => {
                    self.bump();
                }
            }
        }
    }

    fn parse_number(&mut self) -> Option<Rational> {
        let span = self.span();
        let first = match self.bump().0 {
            Tok::Number(s) => s,
            got => {
                self.diags.error(codes::SYNTAX, span, format!("expected number, found {got}"));
                return None;
            }
        };
        if first.contains('.') {
            return rational_from_str(&first).or_else(|| {
                self.diags.error(codes::BAD_WEIGHT, span, format!("invalid literal `{first}`"));
                None
            });
        }
        if *self.peek() == Tok::Slash {
            self.bump();
            let dspan = self.span();
            let denom = match self.bump().0 {
                Tok::Number(s) if !s.contains('.') => s,
                got => {
                    self.diags.error(codes::SYNTAX, dspan, format!("expected integer, found {got}"));
                    return None;
                }
            };
            return rational_from_str(&format!("{first}/{denom}")).or_else(|| {
                self.diags.error(codes::BAD_WEIGHT, span, "denominator must be nonzero");
                None
            });
        }
        rational_from_str(&first)
    }

    fn parse_state_term(&mut self) -> Option<StateTerm> {
        let span = self.span();
        match self.bump().0 {
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.bump();
                    let mut args = Vec::new();
                    if *self.peek() != Tok::RParen {
                        loop {
                            args.push(self.parse_state_term()?);
                            if *self.peek() == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    if !self.expect(&Tok::RParen) {
                        return None;
                    }
                    match self.sig.arity(&name) {
                        None => {
                            self.diags.error(
                                codes::UNKNOWN_OP,
                                span,
                                format!("unknown operator `{name}`"),
                            );
                            None
                        }
                        Some(a) if a != args.len() => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got {} arguments", args.len()),
                            );
                            None
                        }
                        Some(_) => Some(StateTerm::App(name, args)),
                    }
                } else {
                    match self.sig.arity(&name) {
                        Some(0) => Some(StateTerm::constant(name)),
                        Some(a) => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got 0 arguments"),
                            );
                            None
                        }
                        None => Some(StateTerm::Var(name)),
                    }
                }
            }
            got => {
                self.diags.error(codes::SYNTAX, span, format!("expected state term, found {got}"));
                None
            }
        }
    }

    fn parse_dist_term(&mut self) -> Option<DistTerm> {
        let span = self.span();
        match self.peek().clone() {
            Tok::DVar(name) => {
                self.bump();
                Some(DistTerm::DVar(name))
            }
            Tok::KwDelta => {
                self.bump();
                if !self.expect(&Tok::LParen) {
                    return None;
                }
                let t = self.parse_state_term()?;
                if !self.expect(&Tok::RParen) {
                    return None;
                }
                Some(DistTerm::Dirac(t))
            }
            Tok::LParen => {
                // convex combination: (w * theta ((+) w * theta)*)
                self.bump();
                let mut parts = Vec::new();
                loop {
                    let wspan = self.span();
                    let w = self.parse_number()?;
                    if w <= Rational::from_integer(0.into()) || w > Rational::from_integer(1.into())
                    {
                        self.diags.error(
                            codes::BAD_WEIGHT,
                            wspan,
                            format!("weight {w} is outside (0,1]"),
                        );
                        return None;
                    }
                    if !self.expect(&Tok::Star) {
                        return None;
                    }
                    parts.push((w, self.parse_dist_term()?));
                    if *self.peek() == Tok::OPlus {
                        self.bump();
                    } else {
                        break;
                    }
                }
                if !self.expect(&Tok::RParen) {
                    return None;
                }
                let total: Rational = parts.iter().map(|(w, _)| w.clone()).sum();
                if total != Rational::from_integer(1.into()) {
                    self.diags.error(
                        codes::BAD_WEIGHT,
                        span,
                        format!("convex weights sum to {total}, expected exactly 1"),
                    );
                    return None;
                }
                Some(DistTerm::Convex(parts))
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    self.bump();
                    let mut args = Vec::new();
                    if *self.peek() != Tok::RParen {
                        loop {
                            args.push(self.parse_dist_term()?);
                            if *self.peek() == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    if !self.expect(&Tok::RParen) {
                        return None;
                    }
                    match self.sig.arity(&name) {
                        None => {
                            self.diags.error(
                                codes::UNKNOWN_OP,
                                span,
                                format!("unknown operator `{name}`"),
                            );
                            None
                        }
                        Some(a) if a != args.len() => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got {} arguments", args.len()),
                            );
                            None
                        }
                        Some(_) => Some(DistTerm::Lift(name, args)),
                    }
                } else {
                    match self.sig.arity(&name) {
                        Some(0) => Some(DistTerm::Lift(name, Vec::new())),
                        Some(a) => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got 0 arguments"),
                            );
                            None
                        }
                        None => {
                            self.diags.error(
                                codes::SYNTAX,
                                span,
                                format!("state variable `{name}` cannot stand for a distribution; use `delta({name})` or a distribution variable"),
                            );
                            None
                        }
                    }
                }
            }
            got => {
                self.diags
                    .error(codes::SYNTAX, span, format!("expected distribution term, found {got}"));
                None
            }
        }
    }

    fn parse_source(&mut self) -> Option<RuleSource> {
        let span = self.span();
        match self.bump().0 {
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    self.bump();
                    let mut vars = Vec::new();
                    if *self.peek() != Tok::RParen {
                        loop {
                            let vspan = self.span();
                            match self.bump().0 {
                                Tok::Ident(v) => {
                                    if self.sig.contains(&v) {
                                        self.diags.error(
                                            codes::SOURCE_VAR,
                                            vspan,
                                            format!("source argument `{v}` must be a variable, not an operator"),
                                        );
                                        return None;
                                    }
                                    vars.push(v);
                                }
                                got => {
                                    self.diags.error(
                                        codes::SOURCE_VAR,
                                        vspan,
                                        format!("expected source variable, found {got}"),
                                    );
                                    return None;
                                }
                            }
                            if *self.peek() == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    if !self.expect(&Tok::RParen) {
                        return None;
                    }
                    match self.sig.arity(&name) {
                        None => {
                            self.diags.error(
                                codes::UNKNOWN_OP,
                                span,
                                format!("unknown operator `{name}`"),
                            );
                            None
                        }
                        Some(a) if a != vars.len() => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got {} source variables", vars.len()),
                            );
                            None
                        }
                        Some(_) => Some(RuleSource::Op(name, vars)),
                    }
                } else {
                    match self.sig.arity(&name) {
                        Some(0) => Some(RuleSource::Op(name, Vec::new())),
                        Some(a) => {
                            self.diags.error(
                                codes::ARITY,
                                span,
                                format!("operator `{name}` has arity {a}, got 0 source variables"),
                            );
                            None
                        }
                        None => Some(RuleSource::Var(name)),
                    }
                }
            }
            got => {
                self.diags
                    .error(codes::SYNTAX, span, format!("expected rule source, found {got}"));
                None
            }
        }
    }

    fn parse_rule(&mut self) -> Option<(Rule, Span)> {
        let rule_span = self.span();
        let name = match self.peek().clone() {
            Tok::Ident(n) => {
                self.bump();
                Some(n)
            }
            _ => None,
        };
        if !self.expect(&Tok::Colon) {
            return None;
        }
        let mut pos_premises = Vec::new();
        let mut neg_premises = Vec::new();
        while *self.peek() != Tok::Turnstile {
            let pspan = self.span();
            if let Tok::DVar(m) = self.peek().clone() {
                self.diags.error(
                    codes::LOOKAHEAD,
                    pspan,
                    format!("premise left-hand side `%{m}` is a distribution variable: lookahead not in simple format"),
                );
                return None;
            }
            let lhs = self.parse_state_term()?;
            match self.bump().0 {
                Tok::PosArrow(action) => {
                    let dspan = self.span();
                    match self.bump().0 {
                        Tok::DVar(derivative) => {
                            pos_premises.push(PosPremise { lhs, action, derivative });
                        }
                        got => {
                            self.diags.error(
                                codes::SYNTAX,
                                dspan,
                                format!("expected distribution variable as derivative, found {got}"),
                            );
                            return None;
                        }
                    }
                }
                Tok::NegArrow(action) => {
                    neg_premises.push(NegPremise { lhs, action });
                }
                got => {
                    self.diags.error(
                        codes::SYNTAX,
                        pspan,
                        format!("expected `-action->` or `-action-/>`, found {got}"),
                    );
                    return None;
                }
            }
            if *self.peek() == Tok::Comma {
                self.bump();
            } else {
                break;
            }
        }
        if !self.expect(&Tok::Turnstile) {
            return None;
        }
        let source = self.parse_source()?;
        let cspan = self.span();
        let conclusion_action = match self.bump().0 {
            Tok::PosArrow(a) => a,
            got => {
                self.diags
                    .error(codes::SYNTAX, cspan, format!("expected `-action->` in conclusion, found {got}"));
                return None;
            }
        };
        let target = self.parse_dist_term()?;
        if !self.expect(&Tok::Semi) {
            return None;
        }
        Some((
            Rule { name, pos_premises, neg_premises, source, conclusion_action, target },
            rule_span,
        ))
    }
}

/// Pre-scan all `op name/arity;` declarations so rules may reference
/// operators declared later in the file.
fn prescan_signature(toks: &[(Tok, Span)], diags: &mut Diagnostics) -> Signature {
    let mut sig = Signature::new();
    let mut i = 0;
    while i < toks.len() {
        if toks[i].0 == Tok::KwOp {
            let span = toks[i].1;
            match (toks.get(i + 1), toks.get(i + 2), toks.get(i + 3)) {
                (Some((Tok::Ident(name), _)), Some((Tok::Slash, _)), Some((Tok::Number(n), nspan)))
                    if !n.contains('.') =>
                {
                    match n.parse::<usize>() {
                        Ok(arity) => {
                            if !sig.declare(name.clone(), arity) {
                                diags.error(
                                    codes::DUP_OP,
                                    span,
                                    format!("operator `{name}` declared twice"),
                                );
                            }
                        }
                        Err(_) => diags.error(codes::SYNTAX, *nspan, "arity out of range"),
                    }
                    i += 4;
                    continue;
                }
                _ => {
                    diags.error(codes::SYNTAX, span, "expected `op name/arity;`");
                }
            }
        }
        i += 1;
    }
    sig
}

/// Parse a specification. On success every rule satisfies the simple-format
/// well-formedness constraints; on failure at least one error diagnostic is
/// returned.
pub fn parse_spec(text: &str) -> Result<Ptss, Diagnostics> {
    let toks = Lexer::new(text).tokenize()?;
    let mut diags = Diagnostics::new();
    let sig = prescan_signature(&toks, &mut diags);
    let mut parser = Parser { toks, pos: 0, sig, diags };
    let mut rules = Vec::new();
    let mut spans = Vec::new();
    loop {
        match parser.peek().clone() {
            Tok::Eof => break,
            Tok::KwOp => {
                // already collected in the pre-scan; skip over the declaration
                parser.bump();
                parser.recover_to_semi();
            }
            Tok::KwRule => {
                parser.bump();
                match parser.parse_rule() {
                    Some((rule, span)) => {
                        rules.push(rule);
                        spans.push(span);
                    }
                    None => parser.recover_to_semi(),
                }
            }
            got => {
                let span = parser.span();
                parser.diags.error(
                    codes::SYNTAX,
                    span,
                    format!("expected `op` or `rule`, found {got}"),
                );
                parser.bump();
                parser.recover_to_semi();
            }
        }
    }
    let Parser { sig, mut diags, .. } = parser;
    for (rule, span) in rules.iter().zip(&spans) {
        diags.extend(validate_simple_at(rule, &sig, *span));
    }
    diags.normalize();
    if diags.has_errors() {
        return Err(diags);
    }
    Ok(Ptss::new(sig, rules))
}

fn check_term_arities(t: &StateTerm, sig: &Signature, span: Span, diags: &mut Diagnostics) {
    if let StateTerm::App(op, args) = t {
        match sig.arity(op) {
            None => diags.error(codes::UNKNOWN_OP, span, format!("unknown operator `{op}`")),
            Some(a) if a != args.len() => diags.error(
                codes::ARITY,
                span,
                format!("operator `{op}` has arity {a}, got {} arguments", args.len()),
            ),
            Some(_) => {}
        }
        for a in args {
            check_term_arities(a, sig, span, diags);
        }
    }
}

fn check_dist_arities(theta: &DistTerm, sig: &Signature, span: Span, diags: &mut Diagnostics) {
    match theta {
        DistTerm::DVar(_) => {}
        DistTerm::Dirac(t) => check_term_arities(t, sig, span, diags),
        DistTerm::Convex(parts) => {
            for (_, body) in parts {
                check_dist_arities(body, sig, span, diags);
            }
        }
        DistTerm::Lift(op, args) => {
            match sig.arity(op) {
                None => diags.error(codes::UNKNOWN_OP, span, format!("unknown operator `{op}`")),
                Some(a) if a != args.len() => diags.error(
                    codes::ARITY,
                    span,
                    format!("operator `{op}` has arity {a}, got {} arguments", args.len()),
                ),
                Some(_) => {}
            }
            for a in args {
                check_dist_arities(a, sig, span, diags);
            }
        }
    }
}

/// Check the simple-rule well-formedness constraints: derivatives pairwise
/// distinct, source variables pairwise distinct and matching the operator
/// arity, all operator uses consistent with the signature. An empty result
/// means the rule is well formed.
pub fn validate_simple(rule: &Rule, sig: &Signature) -> Diagnostics {
    validate_simple_at(rule, sig, Span::default())
}

pub fn validate_simple_at(rule: &Rule, sig: &Signature, span: Span) -> Diagnostics {
    let mut diags = Diagnostics::new();
    let mut seen = BTreeSet::new();
    for d in rule.derivatives() {
        if !seen.insert(d) {
            diags.error(
                codes::DUP_DERIVATIVE,
                span,
                format!("derivative `%{d}` bound by more than one positive premise"),
            );
        }
    }
    match &rule.source {
        RuleSource::Op(op, vars) => {
            let mut seen = BTreeSet::new();
            for v in vars {
                if !seen.insert(v) {
                    diags.error(
                        codes::DUP_SOURCE_VAR,
                        span,
                        format!("source variable `{v}` occurs twice in the source"),
                    );
                }
                if sig.contains(v) {
                    diags.error(
                        codes::SOURCE_VAR,
                        span,
                        format!("source argument `{v}` must be a variable, not an operator"),
                    );
                }
            }
            match sig.arity(op) {
                None => diags.error(codes::UNKNOWN_OP, span, format!("unknown operator `{op}`")),
                Some(a) if a != vars.len() => diags.error(
                    codes::ARITY,
                    span,
                    format!("operator `{op}` has arity {a}, got {} source variables", vars.len()),
                ),
                Some(_) => {}
            }
        }
        RuleSource::Var(x) => {
            if sig.contains(x) && sig.arity(x) != Some(0) {
                diags.error(
                    codes::ARITY,
                    span,
                    format!("operator `{x}` has arity {}, got 0 source variables", sig.arity(x).unwrap()),
                );
            }
        }
    }
    for p in &rule.pos_premises {
        check_term_arities(&p.lhs, sig, span, &mut diags);
    }
    for p in &rule.neg_premises {
        check_term_arities(&p.lhs, sig, span, &mut diags);
    }
    check_dist_arities(&rule.target, sig, span, &mut diags);
    diags.normalize();
    diags
}

/// Pick `count` variable names based on `x1`, `x2`, ... that avoid `taken`.
fn fresh_vars(count: usize, taken: &BTreeSet<&str>) -> Vec<String> {
    (1..=count)
        .map(|i| {
            let mut name = format!("x{i}");
            while taken.contains(name.as_str()) {
                name.push('\'');
            }
            name
        })
        .collect()
}

/// Replace every bare-variable-sourced rule by one operator-sourced rule per
/// signature operator, substituting the source variable by a fresh-variable
/// application throughout premises and target. The result induces the same
/// transition system.
pub fn expand_var_sourced(p: &Ptss) -> Ptss {
    let mut rules = Vec::new();
    for rule in &p.rules {
        match &rule.source {
            RuleSource::Op(..) => rules.push(rule.clone()),
            RuleSource::Var(x) => {
                let mut taken: BTreeSet<&str> = BTreeSet::new();
                taken.insert(x.as_str());
                for pp in &rule.pos_premises {
                    let mut vs = Vec::new();
                    pp.lhs.collect_vars(&mut vs);
                    taken.extend(vs);
                    taken.insert(pp.derivative.as_str());
                }
                for np in &rule.neg_premises {
                    let mut vs = Vec::new();
                    np.lhs.collect_vars(&mut vs);
                    taken.extend(vs);
                }
                for (op, arity) in p.signature.operators() {
                    let vars = fresh_vars(arity, &taken);
                    let replacement = StateTerm::App(
                        op.to_string(),
                        vars.iter().map(StateTerm::var).collect(),
                    );
                    let sigma = Substitution::new().bind_state(x.clone(), replacement);
                    rules.push(Rule {
                        name: rule.name.as_ref().map(|n| format!("{n}@{op}")),
                        pos_premises: rule
                            .pos_premises
                            .iter()
                            .map(|pp| PosPremise {
                                lhs: sigma.apply_state(&pp.lhs),
                                action: pp.action.clone(),
                                derivative: pp.derivative.clone(),
                            })
                            .collect(),
                        neg_premises: rule
                            .neg_premises
                            .iter()
                            .map(|np| NegPremise {
                                lhs: sigma.apply_state(&np.lhs),
                                action: np.action.clone(),
                            })
                            .collect(),
                        source: RuleSource::Op(op.to_string(), vars),
                        conclusion_action: rule.conclusion_action.clone(),
                        target: sigma.apply_dist(&rule.target),
                    });
                }
            }
        }
    }
    Ptss::new(p.signature.clone(), rules)
}

fn free_dist_vars<'a>(theta: &'a DistTerm, bound: &BTreeSet<&str>, out: &mut BTreeSet<&'a str>) {
    match theta {
        DistTerm::DVar(m) => {
            if !bound.contains(m.as_str()) {
                out.insert(m);
            }
        }
        DistTerm::Dirac(_) => {}
        DistTerm::Convex(parts) => {
            for (_, body) in parts {
                free_dist_vars(body, bound, out);
            }
        }
        DistTerm::Lift(_, args) => {
            for a in args {
                free_dist_vars(a, bound, out);
            }
        }
    }
}

fn state_vars_of_dist<'a>(theta: &'a DistTerm, out: &mut Vec<&'a str>) {
    match theta {
        DistTerm::DVar(_) => {}
        DistTerm::Dirac(t) => t.collect_vars(out),
        DistTerm::Convex(parts) => {
            for (_, body) in parts {
                state_vars_of_dist(body, out);
            }
        }
        DistTerm::Lift(_, args) => {
            for a in args {
                state_vars_of_dist(a, out);
            }
        }
    }
}

/// Report (as warnings) the constructs the semantics engine cannot execute:
/// negative premises whose left-hand side is not a bare source variable, and
/// free variables in premises or targets. Specs with such warnings remain
/// analyzable by the static checkers.
pub fn classify_evaluable(p: &Ptss) -> Diagnostics {
    let mut diags = Diagnostics::new();
    for (i, rule) in p.rules.iter().enumerate() {
        let name = p.rule_name(i);
        if matches!(rule.source, RuleSource::Var(_)) {
            diags.error(
                codes::XSOURCE,
                Span::default(),
                format!("rule {name}: bare-variable source must be expanded before evaluation"),
            );
            continue;
        }
        let source_vars = rule.bound_state_vars();
        let derivatives: BTreeSet<&str> = rule.derivatives().collect();
        for np in &rule.neg_premises {
            match &np.lhs {
                StateTerm::Var(x) if source_vars.contains(x.as_str()) => {}
                StateTerm::Var(_) => {
                    // free variable; reported below
                }
                _ => diags.warning(
                    codes::NEG_NONVAR,
                    Span::default(),
                    format!(
                        "rule {name}: negative premise tests `{}`, not a bare source variable",
                        np.lhs
                    ),
                ),
            }
        }
        let mut used: Vec<&str> = Vec::new();
        for pp in &rule.pos_premises {
            pp.lhs.collect_vars(&mut used);
        }
        for np in &rule.neg_premises {
            np.lhs.collect_vars(&mut used);
        }
        state_vars_of_dist(&rule.target, &mut used);
        let mut reported = BTreeSet::new();
        for v in used {
            if !source_vars.contains(v) && reported.insert(v) {
                diags.warning(
                    codes::FREE_VAR,
                    Span::default(),
                    format!("rule {name}: state variable `{v}` is not a source variable"),
                );
            }
        }
        let mut free_dvars = BTreeSet::new();
        free_dist_vars(&rule.target, &derivatives, &mut free_dvars);
        for m in free_dvars {
            diags.warning(
                codes::FREE_VAR,
                Span::default(),
                format!("rule {name}: distribution variable `%{m}` is not bound by a premise"),
            );
        }
    }
    diags.normalize();
    diags
}

/// Render a specification back to its concrete syntax. `parse_spec` of the
/// result reproduces the same data model.
pub fn render(p: &Ptss) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (op, arity) in p.signature.operators() {
        writeln!(out, "op {op}/{arity};").unwrap();
    }
    for rule in &p.rules {
        out.push_str("rule ");
        if let Some(n) = &rule.name {
            out.push_str(n);
            out.push(' ');
        }
        out.push_str(":");
        let mut first = true;
        for pp in &rule.pos_premises {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, " {} -{}-> %{}", pp.lhs, pp.action, pp.derivative).unwrap();
        }
        for np in &rule.neg_premises {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, " {} -{}-/>", np.lhs, np.action).unwrap();
        }
        match &rule.source {
            RuleSource::Op(op, vars) => {
                write!(out, " |- {op}").unwrap();
                if !vars.is_empty() {
                    write!(out, "({})", vars.join(",")).unwrap();
                }
            }
            RuleSource::Var(x) => write!(out, " |- {x}").unwrap(),
        }
        writeln!(out, " -{}-> {};", rule.conclusion_action, rule.target).unwrap();
    }
    out
}

/// Parse a state term in the canonical syntax against a signature.
pub fn parse_state_term(text: &str, sig: &Signature) -> Result<StateTerm, Diagnostics> {
    let toks = Lexer::new(text).tokenize()?;
    let mut parser = Parser { toks, pos: 0, sig: sig.clone(), diags: Diagnostics::new() };
    let term = parser.parse_state_term();
    if *parser.peek() != Tok::Eof {
        let span = parser.span();
        let got = parser.peek().clone();
        parser.diags.error(codes::SYNTAX, span, format!("unexpected {got} after term"));
    }
    parser.diags.normalize();
    match term {
        Some(t) if !parser.diags.has_errors() => Ok(t),
        _ => Err(parser.diags),
    }
}

/// Parse a closed term without a signature: every identifier is taken to be
/// an operator. Used when reading serialized transition systems back in.
pub fn parse_closed_term_lenient(text: &str) -> Result<StateTerm, Diagnostics> {
    fn go(parser: &mut Parser) -> Option<StateTerm> {
        let span = parser.span();
        match parser.bump().0 {
            Tok::Ident(name) => {
                let mut args = Vec::new();
                if *parser.peek() == Tok::LParen {
                    parser.bump();
                    if *parser.peek() != Tok::RParen {
                        loop {
                            args.push(go(parser)?);
                            if *parser.peek() == Tok::Comma {
                                parser.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    if !parser.expect(&Tok::RParen) {
                        return None;
                    }
                }
                Some(StateTerm::App(name, args))
            }
            got => {
                parser.diags.error(codes::SYNTAX, span, format!("expected term, found {got}"));
                None
            }
        }
    }
    let toks = Lexer::new(text).tokenize()?;
    let mut parser = Parser { toks, pos: 0, sig: Signature::new(), diags: Diagnostics::new() };
    let term = go(&mut parser);
    if *parser.peek() != Tok::Eof {
        let span = parser.span();
        let got = parser.peek().clone();
        parser.diags.error(codes::SYNTAX, span, format!("unexpected {got} after term"));
    }
    parser.diags.normalize();
    match term {
        Some(t) if !parser.diags.has_errors() => Ok(t),
        _ => Err(parser.diags),
    }
}
