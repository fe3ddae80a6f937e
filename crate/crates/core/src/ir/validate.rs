use std::collections::BTreeSet;

use super::{is_identifier, Expr, RandomOp, ScriptIR, Stmt};
use crate::diagnostic::Diagnostic;
use crate::registry::OperatorRegistry;
use crate::value::Value;

/// Extra context for [`validate_with`].
#[derive(Default, Clone, Copy)]
pub struct ValidateOptions<'a> {
    /// Custom operators that scripts may call.
    pub registry: Option<&'a OperatorRegistry>,
    /// Names the caller promises to supply as inputs.
    pub inputs: &'a [String],
}

/// Checks a script with no custom operators and no declared inputs.
///
/// Names used inside a `unit` argument count as declared inputs.
pub fn validate(ir: &ScriptIR) -> Vec<Diagnostic> {
    validate_with(ir, ValidateOptions::default())
}

/// Returns every problem found in `ir`; an empty list means the script is
/// clean. Errors block execution and allocation, warnings do not.
pub fn validate_with(ir: &ScriptIR, opts: ValidateOptions<'_>) -> Vec<Diagnostic> {
    let mut assigned_anywhere = BTreeSet::new();
    collect_targets(&ir.statements, &mut assigned_anywhere);

    let mut declared: BTreeSet<String> = opts.inputs.iter().cloned().collect();
    collect_unit_vars(&ir.statements, &mut declared);

    let mut v = Validator {
        registry: opts.registry,
        assigned_anywhere,
        declared,
        warned: BTreeSet::new(),
        diags: Vec::new(),
        in_assign: false,
    };
    let mut bound = BTreeSet::new();
    v.stmts(&ir.statements, &mut bound);
    v.diags
}

fn collect_targets(stmts: &[Stmt], out: &mut BTreeSet<String>) {
    for stmt in stmts {
        match stmt {
            Stmt::Assign { target, .. } => {
                out.insert(target.clone());
            }
            Stmt::If {
                branches,
                otherwise,
            } => {
                for b in branches {
                    collect_targets(&b.body, out);
                }
                if let Some(body) = otherwise {
                    collect_targets(body, out);
                }
            }
            Stmt::Block(body) => collect_targets(body, out),
            Stmt::Return(_) => {}
        }
    }
}

fn collect_unit_vars(stmts: &[Stmt], out: &mut BTreeSet<String>) {
    let mut visit = |e: &Expr| {
        e.walk(&mut |node| {
            if let Expr::Random { params, .. } | Expr::Custom { params, .. } = node {
                if let Some(unit) = params.get("unit") {
                    unit.walk(&mut |u| {
                        if let Expr::Var(name) = u {
                            out.insert(name.clone());
                        }
                    });
                }
            }
        })
    };
    for_each_expr(stmts, &mut visit);
}

fn for_each_expr(stmts: &[Stmt], f: &mut dyn FnMut(&Expr)) {
    for stmt in stmts {
        match stmt {
            Stmt::Assign { value, .. } | Stmt::Return(value) => f(value),
            Stmt::If {
                branches,
                otherwise,
            } => {
                for b in branches {
                    f(&b.cond);
                    for_each_expr(&b.body, f);
                }
                if let Some(body) = otherwise {
                    for_each_expr(body, f);
                }
            }
            Stmt::Block(body) => for_each_expr(body, f),
        }
    }
}

struct Validator<'a> {
    registry: Option<&'a OperatorRegistry>,
    assigned_anywhere: BTreeSet<String>,
    declared: BTreeSet<String>,
    warned: BTreeSet<String>,
    diags: Vec<Diagnostic>,
    /// True while checking the right-hand side of an assignment, whose
    /// target supplies the default salt.
    in_assign: bool,
}

impl Validator<'_> {
    /// `bound` holds names definitely assigned on every path so far.
    fn stmts(&mut self, stmts: &[Stmt], bound: &mut BTreeSet<String>) {
        for stmt in stmts {
            match stmt {
                Stmt::Assign { target, value } => {
                    if !is_identifier(target) {
                        self.diags.push(Diagnostic::error(format!(
                            "assignment target {target:?} is not a valid identifier"
                        )));
                    }
                    self.in_assign = true;
                    self.expr(value, bound);
                    self.in_assign = false;
                    bound.insert(target.clone());
                }
                Stmt::If {
                    branches,
                    otherwise,
                } => {
                    let mut after: Option<BTreeSet<String>> = None;
                    let mut merge = |set: BTreeSet<String>| {
                        after = Some(match after.take() {
                            None => set,
                            Some(prev) => prev.intersection(&set).cloned().collect(),
                        });
                    };
                    // Conditions are evaluated in sequence, and bind nothing.
                    for b in branches {
                        self.expr(&b.cond, bound);
                        let mut inner = bound.clone();
                        self.stmts(&b.body, &mut inner);
                        merge(inner);
                    }
                    match otherwise {
                        Some(body) => {
                            let mut inner = bound.clone();
                            self.stmts(body, &mut inner);
                            merge(inner);
                        }
                        None => merge(bound.clone()),
                    }
                    if let Some(set) = after {
                        *bound = set;
                    }
                }
                Stmt::Block(body) => self.stmts(body, bound),
                Stmt::Return(value) => self.expr(value, bound),
            }
        }
    }

    fn expr(&mut self, expr: &Expr, bound: &BTreeSet<String>) {
        match expr {
            Expr::Literal(v) => match v {
                Value::Float(f) if !f.is_finite() => self
                    .diags
                    .push(Diagnostic::error(format!("non-finite float literal {f}"))),
                Value::List(_) | Value::Map(_) => self.diags.push(Diagnostic::error(
                    "literal must be a scalar; use array or map nodes",
                )),
                _ => {}
            },
            Expr::Array(items) => items.iter().for_each(|e| self.expr(e, bound)),
            Expr::Map(entries) => entries.values().for_each(|e| self.expr(e, bound)),
            Expr::Var(name) => self.var(name, bound),
            Expr::Index { base, index } => {
                self.expr(base, bound);
                self.expr(index, bound);
            }
            Expr::Builtin { op, args } => {
                if !op.arity().accepts(args.len()) {
                    self.diags.push(Diagnostic::error(format!(
                        "operator `{}` expects {} argument(s), got {}",
                        op.name(),
                        describe_arity(op.arity()),
                        args.len()
                    )));
                }
                args.iter().for_each(|e| self.expr(e, bound));
            }
            Expr::Random { op, params } => {
                let name = op.name();
                if !params.contains_key("unit") {
                    self.diags
                        .push(Diagnostic::error(format!("random op `{name}` missing unit")));
                }
                for req in op.required_params() {
                    if !params.contains_key(*req) {
                        self.diags.push(Diagnostic::error(format!(
                            "operator `{name}` missing required argument `{req}`"
                        )));
                    }
                }
                for key in params.keys() {
                    if !op.accepts_param(key) {
                        self.diags.push(Diagnostic::error(format!(
                            "operator `{name}` has no argument `{key}`"
                        )));
                    }
                }
                self.salt(name, params.get("salt"));
                if *op == RandomOp::WeightedChoice {
                    if let (Some(Expr::Array(c)), Some(Expr::Array(w))) =
                        (params.get("choices"), params.get("weights"))
                    {
                        if c.len() != w.len() {
                            self.diags.push(Diagnostic::error(format!(
                                "weightedChoice has {} choices but {} weights",
                                c.len(),
                                w.len()
                            )));
                        }
                    }
                }
                params.values().for_each(|e| self.expr(e, bound));
            }
            Expr::Custom { name, params } => {
                match self.registry.and_then(|r| r.get(name)) {
                    None => self
                        .diags
                        .push(Diagnostic::error(format!("unknown operator `{name}`"))),
                    Some(op) => {
                        if op.is_random() && !params.contains_key("unit") {
                            self.diags.push(Diagnostic::error(format!(
                                "random op `{name}` missing unit"
                            )));
                        }
                        for req in op.required_params() {
                            if !params.contains_key(*req) {
                                self.diags.push(Diagnostic::error(format!(
                                    "operator `{name}` missing required argument `{req}`"
                                )));
                            }
                        }
                        for key in params.keys() {
                            let known = key == "unit"
                                || key == "salt"
                                || op.required_params().contains(&key.as_str())
                                || op.optional_params().contains(&key.as_str());
                            if !known {
                                self.diags.push(Diagnostic::error(format!(
                                    "operator `{name}` has no argument `{key}`"
                                )));
                            }
                        }
                    }
                }
                if self.registry.and_then(|r| r.get(name)).is_some_and(|op| op.is_random()) {
                    self.salt(name, params.get("salt"));
                }
                params.values().for_each(|e| self.expr(e, bound));
            }
        }
    }

    fn salt(&mut self, op: &str, salt: Option<&Expr>) {
        match salt {
            None if self.in_assign => {}
            None => self.diags.push(Diagnostic::error(format!(
                "operator `{op}` outside an assignment needs an explicit salt"
            ))),
            Some(Expr::Literal(Value::Str(s))) if !s.is_empty() && !s.contains('.') => {}
            Some(_) => self.diags.push(Diagnostic::error(format!(
                "operator `{op}`: salt must be a non-empty string literal without '.'"
            ))),
        }
    }

    fn var(&mut self, name: &str, bound: &BTreeSet<String>) {
        if !is_identifier(name) {
            self.diags.push(Diagnostic::error(format!(
                "variable {name:?} is not a valid identifier"
            )));
            return;
        }
        if bound.contains(name) || self.warned.contains(name) {
            return;
        }
        let message = if self.assigned_anywhere.contains(name) {
            format!("possibly-unbound variable `{name}`: read before it is assigned on every path")
        } else if self.declared.contains(name) {
            return;
        } else {
            format!("possibly-unbound variable `{name}`: never assigned and not declared as an input")
        };
        self.warned.insert(name.to_string());
        self.diags.push(Diagnostic::warning(message));
    }
}

fn describe_arity(a: super::Arity) -> String {
    match a {
        super::Arity::Exactly(n) => n.to_string(),
        super::Arity::AtLeast(n) => format!("at least {n}"),
    }
}
