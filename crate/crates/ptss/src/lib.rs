//! Analysis toolkit for probabilistic transition system specifications:
//! a rule-language front end, static expansivity and format checkers, an
//! exact-arithmetic semantics engine, and behavioral-distance machinery on
//! finite fragments.

pub mod analysis;
pub mod bisim;
pub mod engine;
pub mod format;
pub mod report;
pub mod syntax;
pub mod terms;
