//! Static inspection: which parameters a script sets and which units each
//! one is randomized over.

use indexmap::IndexMap;
use serde::Serialize;

use super::{Expr, ScriptIR, Stmt};

/// Every assignment target, in first-assignment order.
pub fn list_parameters(ir: &ScriptIR) -> Vec<String> {
    let mut out = Vec::new();
    visit_assigns(&ir.statements, &mut |target, _| {
        if !out.iter().any(|p| p == target) {
            out.push(target.to_string());
        }
    });
    out
}

/// Units a parameter is randomized over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum UnitRef {
    /// Input variable names, in the order they appear in `unit=`.
    Vars(Vec<String>),
    /// The unit expression is computed, so it cannot be named statically.
    #[serde(serialize_with = "dynamic")]
    Dynamic,
}

fn dynamic<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str("dynamic")
}

/// For each parameter assigned through a random operator, the unit
/// variables used. Parameters without random assignment are omitted.
pub fn list_units(ir: &ScriptIR) -> IndexMap<String, UnitRef> {
    let mut out: IndexMap<String, UnitRef> = IndexMap::new();
    visit_assigns(&ir.statements, &mut |target, value| {
        value.walk(&mut |node| {
            let params = match node {
                Expr::Random { params, .. } | Expr::Custom { params, .. } => params,
                _ => return,
            };
            let Some(unit) = params.get("unit") else {
                return;
            };
            let found = unit_vars(unit);
            let entry = out
                .entry(target.to_string())
                .or_insert_with(|| UnitRef::Vars(Vec::new()));
            match (entry, found) {
                (UnitRef::Vars(existing), Some(names)) => {
                    for n in names {
                        if !existing.contains(&n) {
                            existing.push(n);
                        }
                    }
                }
                (entry, _) => *entry = UnitRef::Dynamic,
            }
        });
    });
    out
}

fn unit_vars(unit: &Expr) -> Option<Vec<String>> {
    match unit {
        Expr::Var(name) => Some(vec![name.clone()]),
        Expr::Array(items) => items
            .iter()
            .map(|e| match e {
                Expr::Var(name) => Some(name.clone()),
                _ => None,
            })
            .collect(),
        _ => None,
    }
}

fn visit_assigns<'a>(stmts: &'a [Stmt], f: &mut dyn FnMut(&'a str, &'a Expr)) {
    for stmt in stmts {
        match stmt {
            Stmt::Assign { target, value } => f(target, value),
            Stmt::If {
                branches,
                otherwise,
            } => {
                for b in branches {
                    visit_assigns(&b.body, f);
                }
                if let Some(body) = otherwise {
                    visit_assigns(body, f);
                }
            }
            Stmt::Block(body) => visit_assigns(body, f),
            Stmt::Return(_) => {}
        }
    }
}
