//! Deterministic experiment assignment.
//!
//! Scripts written in a small language are parsed into an IR, evaluated
//! against unit identifiers with salted SHA1 hashing, grouped into
//! namespaces of mutually exclusive experiments, logged on exposure and
//! checked by Monte-Carlo simulation.

pub mod corpus;
pub mod diagnostic;
pub mod dsl;
pub mod exposure;
pub mod interpreter;
pub mod ir;
pub mod namespace;
pub mod overrides;
pub mod random;
pub mod registry;
pub mod simulator;
pub mod store;
pub mod value;

pub use diagnostic::{Diagnostic, Severity};
pub use interpreter::{Assignment, EvalError, Evaluation, ExperimentContext, Inputs, Overrides, Script};
pub use ir::ScriptIR;
pub use namespace::{Namespace, NamespaceError};
pub use store::NamespaceManager;
pub use value::Value;
