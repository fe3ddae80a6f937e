//! Plug-in point for operators supplied by the embedding application.
//!
//! Scripts call custom operators with the same keyword syntax as the
//! built-in random operators. A random custom operator receives a
//! [`SaltContext`] and the unit tuple, so it can draw through
//! [`hash_draw`](crate::random::hash_draw) and stay deterministic.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::ir::{BuiltinOp, RandomOp};
use crate::random::SaltContext;
use crate::value::Value;

/// Evaluated arguments passed to a custom operator.
pub struct CallArgs<'a> {
    /// Every argument except `unit` and `salt`.
    pub params: &'a BTreeMap<String, Value>,
    /// Unit tuple; empty for non-random operators.
    pub units: &'a [Value],
    /// Salt scope; `None` for non-random operators.
    pub salt: Option<&'a SaltContext>,
}

pub trait CustomOperator: Send + Sync {
    fn name(&self) -> &str;

    /// Random operators must be called with `unit=` and get a salt.
    fn is_random(&self) -> bool;

    fn required_params(&self) -> &[&'static str] {
        &[]
    }

    fn optional_params(&self) -> &[&'static str] {
        &[]
    }

    fn evaluate(&self, args: &CallArgs<'_>) -> Result<Value, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("`{0}` is a built-in operator")]
    Builtin(String),
    #[error("operator `{0}` is already registered")]
    Duplicate(String),
    #[error("{0:?} is not a valid operator name")]
    InvalidName(String),
}

#[derive(Clone, Default)]
pub struct OperatorRegistry {
    ops: HashMap<String, Arc<dyn CustomOperator>>,
}

impl fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.ops.keys().collect();
        names.sort();
        f.debug_struct("OperatorRegistry").field("ops", &names).finish()
    }
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, op: Arc<dyn CustomOperator>) -> Result<(), RegistryError> {
        let name = op.name().to_string();
        if BuiltinOp::from_name(&name).is_some() || RandomOp::from_name(&name).is_some() {
            return Err(RegistryError::Builtin(name));
        }
        if !crate::ir::is_identifier(&name) {
            return Err(RegistryError::InvalidName(name));
        }
        if self.ops.contains_key(&name) {
            return Err(RegistryError::Duplicate(name));
        }
        self.ops.insert(name, op);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn CustomOperator> {
        self.ops.get(name).map(|op| op.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.ops.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }
}
