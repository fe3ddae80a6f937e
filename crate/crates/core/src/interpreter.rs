//! Sequential evaluation of scripts.
//!
//! Name lookup order is overrides, then parameters assigned so far, then
//! inputs. Assigning to an overridden name keeps the override. Random
//! operators are salted with the assignment target unless `salt=` is
//! given, so the same script under another experiment name draws
//! independently.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::ops::Deref;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use lru::LruCache;
use serde::Serialize;
use thiserror::Error;

use crate::ir::{list_parameters, BuiltinOp, Expr, RandomOp, ScriptIR, Stmt};
use crate::random::{self, RandomError, SaltContext};
use crate::registry::{CallArgs, OperatorRegistry};
use crate::value::Value;

pub type Inputs = BTreeMap<String, Value>;
pub type Overrides = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("`{0}` is not an input, an assigned parameter or an override")]
    MissingInput(String),
    #[error("index {index} out of range for list of length {len}")]
    IndexOutOfRange { index: i64, len: usize },
    #[error("map has no key {0:?}")]
    MissingKey(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow in `{0}`")]
    Overflow(&'static str),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("`{op}` needs a salt: it is not the value of an assignment")]
    MissingSalt { op: String },
    #[error("{op}: {source}")]
    Random {
        op: String,
        #[source]
        source: RandomError,
    },
    #[error("{op}: {message}")]
    Custom { op: String, message: String },
}

/// Namespace and experiment names that scope every draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExperimentContext {
    base: SaltContext,
}

impl ExperimentContext {
    pub fn new(namespace: &str, experiment: &str) -> Result<Self, RandomError> {
        Ok(ExperimentContext {
            base: SaltContext::new(namespace, experiment, "_")?,
        })
    }

    pub fn namespace(&self) -> &str {
        self.base.namespace()
    }

    pub fn experiment(&self) -> &str {
        self.base.experiment()
    }

    pub fn salt(&self, param_salt: &str) -> Result<SaltContext, RandomError> {
        self.base.with_salt(param_salt)
    }
}

/// A script prepared for repeated evaluation.
#[derive(Clone)]
pub struct Script {
    ir: Arc<ScriptIR>,
    digest: Arc<str>,
    parameters: Arc<[String]>,
    registry: Option<Arc<OperatorRegistry>>,
}

impl fmt::Debug for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Script")
            .field("digest", &self.digest)
            .field("parameters", &self.parameters)
            .finish()
    }
}

impl Script {
    pub fn new(ir: ScriptIR) -> Self {
        Script {
            digest: ir.digest().into(),
            parameters: list_parameters(&ir).into(),
            ir: Arc::new(ir),
            registry: None,
        }
    }

    pub fn with_registry(mut self, registry: Arc<OperatorRegistry>) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn ir(&self) -> &ScriptIR {
        &self.ir
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn parameters(&self) -> &[String] {
        &self.parameters
    }

    pub fn registry(&self) -> Option<&OperatorRegistry> {
        self.registry.as_deref()
    }

    pub fn evaluate(
        &self,
        inputs: &Inputs,
        overrides: &Overrides,
        ctx: &ExperimentContext,
    ) -> Result<Evaluation, EvalError> {
        let mut ev = Evaluator {
            inputs,
            overrides,
            ctx,
            registry: self.registry.as_deref(),
            params: IndexMap::new(),
        };
        let in_experiment = match ev.stmts(&self.ir.statements)? {
            Flow::Next => true,
            Flow::Return(v) => v.truthy(),
        };
        let mut params = ev.params;
        // Frozen parameters are reported even when evaluation never
        // reached their assignment.
        for p in self.parameters.iter() {
            if let Some(v) = overrides.get(p) {
                params.entry(p.clone()).or_insert_with(|| v.clone());
            }
        }
        Ok(Evaluation {
            namespace: ctx.namespace().to_string(),
            experiment: ctx.experiment().to_string(),
            params,
            in_experiment,
            inputs: inputs.clone(),
            overrides: overrides.clone(),
            script_digest: self.digest.to_string(),
        })
    }
}

/// One-shot evaluation of an unprepared script.
pub fn evaluate(
    ir: &ScriptIR,
    inputs: &Inputs,
    overrides: &Overrides,
    ctx: &ExperimentContext,
) -> Result<Assignment, EvalError> {
    Script::new(ir.clone())
        .evaluate(inputs, overrides, ctx)
        .map(Assignment::new)
}

/// Immutable result of evaluating a script for one set of inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub namespace: String,
    pub experiment: String,
    /// Parameters in the order the script first assigned them.
    pub params: IndexMap<String, Value>,
    /// False when the script ran `return` with a falsy value.
    pub in_experiment: bool,
    pub inputs: Inputs,
    pub overrides: Overrides,
    pub script_digest: String,
}

impl Evaluation {
    /// Canonical JSON text of the parameter map, in assignment order.
    pub fn params_text(&self) -> String {
        serde_json::to_string(&self.params).expect("values always serialize")
    }
}

pub type ExposureHook = Arc<dyn Fn(&Evaluation) + Send + Sync>;

/// An evaluation plus a once-only exposure flag.
pub struct Assignment {
    data: Arc<Evaluation>,
    exposed: AtomicBool,
    hook: Option<ExposureHook>,
}

impl fmt::Debug for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Assignment")
            .field("data", &self.data)
            .field("exposed", &self.exposed())
            .finish()
    }
}

impl Deref for Assignment {
    type Target = Evaluation;
    fn deref(&self) -> &Evaluation {
        &self.data
    }
}

impl Assignment {
    pub fn new(data: Evaluation) -> Self {
        Self::from_shared(Arc::new(data))
    }

    pub fn from_shared(data: Arc<Evaluation>) -> Self {
        Assignment {
            data,
            exposed: AtomicBool::new(false),
            hook: None,
        }
    }

    pub fn with_hook(mut self, hook: ExposureHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn evaluation(&self) -> &Arc<Evaluation> {
        &self.data
    }

    pub fn exposed(&self) -> bool {
        self.exposed.load(Ordering::Acquire)
    }

    /// Returns a parameter, logging an exposure the first time any set
    /// parameter is read. Unset names return `default` (or null) and log
    /// nothing.
    pub fn get(&self, name: &str, default: Option<Value>) -> Value {
        match self.data.params.get(name) {
            Some(v) => {
                self.expose();
                v.clone()
            }
            None => default.unwrap_or(Value::Null),
        }
    }

    /// Marks the assignment exposed. Returns true for the call that did it.
    pub fn expose(&self) -> bool {
        if !self.data.in_experiment {
            return false;
        }
        let first = !self.exposed.swap(true, Ordering::AcqRel);
        if first {
            if let Some(hook) = &self.hook {
                hook(&self.data);
            }
        }
        first
    }
}

enum Flow {
    Next,
    Return(Value),
}

struct Evaluator<'a> {
    inputs: &'a Inputs,
    overrides: &'a Overrides,
    ctx: &'a ExperimentContext,
    registry: Option<&'a OperatorRegistry>,
    params: IndexMap<String, Value>,
}

fn mismatch(msg: impl Into<String>) -> EvalError {
    EvalError::TypeMismatch(msg.into())
}

impl Evaluator<'_> {
    fn stmts(&mut self, stmts: &[Stmt]) -> Result<Flow, EvalError> {
        for s in stmts {
            if let Flow::Return(v) = self.stmt(s)? {
                return Ok(Flow::Return(v));
            }
        }
        Ok(Flow::Next)
    }

    fn stmt(&mut self, s: &Stmt) -> Result<Flow, EvalError> {
        match s {
            Stmt::Assign { target, value } => {
                let v = match self.overrides.get(target) {
                    Some(frozen) => frozen.clone(),
                    None => self.expr(value, Some(target))?,
                };
                self.params.insert(target.clone(), v);
                Ok(Flow::Next)
            }
            Stmt::If {
                branches,
                otherwise,
            } => {
                for b in branches {
                    if self.expr(&b.cond, None)?.truthy() {
                        return self.stmts(&b.body);
                    }
                }
                match otherwise {
                    Some(body) => self.stmts(body),
                    None => Ok(Flow::Next),
                }
            }
            Stmt::Block(body) => self.stmts(body),
            Stmt::Return(value) => Ok(Flow::Return(self.expr(value, None)?)),
        }
    }

    fn lookup(&self, name: &str) -> Result<Value, EvalError> {
        self.overrides
            .get(name)
            .or_else(|| self.params.get(name))
            .or_else(|| self.inputs.get(name))
            .cloned()
            .ok_or_else(|| EvalError::MissingInput(name.to_string()))
    }

    /// `target` is the parameter being assigned, used as the default salt.
    fn expr(&self, e: &Expr, target: Option<&str>) -> Result<Value, EvalError> {
        match e {
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Var(name) => self.lookup(name),
            Expr::Array(items) => items
                .iter()
                .map(|x| self.expr(x, target))
                .collect::<Result<_, _>>()
                .map(Value::List),
            Expr::Map(entries) => entries
                .iter()
                .map(|(k, x)| Ok((k.clone(), self.expr(x, target)?)))
                .collect::<Result<_, _>>()
                .map(Value::Map),
            Expr::Index { base, index } => {
                let b = self.expr(base, target)?;
                let i = self.expr(index, target)?;
                index_value(&b, &i)
            }
            Expr::Builtin { op, args } => self.builtin(*op, args, target),
            Expr::Random { op, params } => self.random(*op, params, target),
            Expr::Custom { name, params } => self.custom(name, params, target),
        }
    }

    fn builtin(&self, op: BuiltinOp, args: &[Expr], target: Option<&str>) -> Result<Value, EvalError> {
        let arg = |i: usize| self.expr(&args[i], target);
        match op {
            BuiltinOp::And => {
                Ok(Value::Bool(arg(0)?.truthy() && arg(1)?.truthy()))
            }
            BuiltinOp::Or => Ok(Value::Bool(arg(0)?.truthy() || arg(1)?.truthy())),
            BuiltinOp::Not => Ok(Value::Bool(!arg(0)?.truthy())),
            BuiltinOp::Coalesce => {
                for a in args {
                    let v = self.expr(a, target)?;
                    if !v.is_null() {
                        return Ok(v);
                    }
                }
                Ok(Value::Null)
            }
            _ => {
                let vals = args
                    .iter()
                    .map(|a| self.expr(a, target))
                    .collect::<Result<Vec<_>, _>>()?;
                apply_builtin(op, &vals)
            }
        }
    }

    fn params(
        &self,
        params: &BTreeMap<String, Expr>,
        target: Option<&str>,
    ) -> Result<BTreeMap<String, Value>, EvalError> {
        params
            .iter()
            .filter(|(k, _)| k.as_str() != "salt")
            .map(|(k, x)| Ok((k.clone(), self.expr(x, target)?)))
            .collect()
    }

    fn salt_ctx(
        &self,
        op: &str,
        params: &BTreeMap<String, Expr>,
        target: Option<&str>,
    ) -> Result<SaltContext, EvalError> {
        let salt = match params.get("salt") {
            Some(Expr::Literal(Value::Str(s))) => s.as_str(),
            Some(_) => return Err(mismatch(format!("{op}: salt must be a string literal"))),
            None => target.ok_or_else(|| EvalError::MissingSalt { op: op.to_string() })?,
        };
        self.ctx.salt(salt).map_err(|source| EvalError::Random {
            op: op.to_string(),
            source,
        })
    }

    fn random(
        &self,
        op: RandomOp,
        params: &BTreeMap<String, Expr>,
        target: Option<&str>,
    ) -> Result<Value, EvalError> {
        let name = op.name();
        let ctx = self.salt_ctx(name, params, target)?;
        let vals = self.params(params, target)?;
        let get = |k: &str| {
            vals.get(k)
                .ok_or_else(|| mismatch(format!("{name}: missing argument `{k}`")))
        };
        let units = random::units_of(get("unit")?);
        let rerr = |source| EvalError::Random {
            op: name.to_string(),
            source,
        };
        let list = |k: &str| {
            get(k)?
                .as_list()
                .ok_or_else(|| mismatch(format!("{name}: `{k}` must be a list")))
        };
        let num = |k: &str| {
            get(k)?
                .as_f64()
                .ok_or_else(|| mismatch(format!("{name}: `{k}` must be a number")))
        };
        let int = |k: &str| {
            get(k)?
                .as_int()
                .ok_or_else(|| mismatch(format!("{name}: `{k}` must be an integer")))
        };
        match op {
            RandomOp::UniformChoice => {
                random::uniform_choice(list("choices")?, &ctx, &units).map_err(rerr)
            }
            RandomOp::WeightedChoice => {
                let weights = list("weights")?
                    .iter()
                    .map(|w| {
                        w.as_f64()
                            .ok_or_else(|| mismatch(format!("{name}: weights must be numbers")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                random::weighted_choice(list("choices")?, &weights, &ctx, &units).map_err(rerr)
            }
            RandomOp::BernoulliTrial => random::bernoulli_trial(num("p")?, &ctx, &units)
                .map(Value::Int)
                .map_err(rerr),
            RandomOp::RandomInteger => random::random_integer(int("min")?, int("max")?, &ctx, &units)
                .map(Value::Int)
                .map_err(rerr),
            RandomOp::RandomFloat => random::random_float(num("min")?, num("max")?, &ctx, &units)
                .map(Value::Float)
                .map_err(rerr),
            RandomOp::Sample => {
                let choices = list("choices")?;
                let draws = match vals.get("draws") {
                    Some(_) => int("draws")?,
                    None => choices.len() as i64,
                };
                random::sample(choices, draws, &ctx, &units)
                    .map(Value::List)
                    .map_err(rerr)
            }
        }
    }

    fn custom(
        &self,
        name: &str,
        params: &BTreeMap<String, Expr>,
        target: Option<&str>,
    ) -> Result<Value, EvalError> {
        let op = self
            .registry
            .and_then(|r| r.get(name))
            .ok_or_else(|| EvalError::UnknownOperator(name.to_string()))?;
        let mut vals = self.params(params, target)?;
        let (units, salt) = if op.is_random() {
            let unit = vals
                .remove("unit")
                .ok_or_else(|| mismatch(format!("{name}: missing argument `unit`")))?;
            (random::units_of(&unit), Some(self.salt_ctx(name, params, target)?))
        } else {
            (Vec::new(), None)
        };
        op.evaluate(&CallArgs {
            params: &vals,
            units: &units,
            salt: salt.as_ref(),
        })
        .map_err(|message| EvalError::Custom {
            op: name.to_string(),
            message,
        })
    }
}

fn index_value(base: &Value, index: &Value) -> Result<Value, EvalError> {
    match base {
        Value::List(items) => {
            let i = index
                .as_int()
                .ok_or_else(|| mismatch(format!("list index must be an integer, got {}", index.kind())))?;
            if i < 0 || i as u64 >= items.len() as u64 {
                return Err(EvalError::IndexOutOfRange {
                    index: i,
                    len: items.len(),
                });
            }
            Ok(items[i as usize].clone())
        }
        Value::Map(entries) => {
            let k = index
                .as_str()
                .ok_or_else(|| mismatch(format!("map key must be a string, got {}", index.kind())))?;
            entries
                .get(k)
                .cloned()
                .ok_or_else(|| EvalError::MissingKey(k.to_string()))
        }
        other => Err(mismatch(format!("cannot index a {}", other.kind()))),
    }
}

enum Num {
    I(i64),
    F(f64),
}

fn num(v: &Value, op: BuiltinOp) -> Result<Num, EvalError> {
    match v {
        Value::Float(f) => Ok(Num::F(*f)),
        other => other
            .as_int()
            .map(Num::I)
            .ok_or_else(|| mismatch(format!("`{}` on a {}", op.name(), other.kind()))),
    }
}

fn arith(
    op: BuiltinOp,
    a: &Value,
    b: &Value,
    int: fn(i64, i64) -> Option<i64>,
    float: fn(f64, f64) -> f64,
) -> Result<Value, EvalError> {
    match (num(a, op)?, num(b, op)?) {
        (Num::I(x), Num::I(y)) => int(x, y).map(Value::Int).ok_or(EvalError::Overflow(op.name())),
        (x, y) => {
            let f = |n| match n {
                Num::I(i) => i as f64,
                Num::F(f) => f,
            };
            Ok(Value::Float(float(f(x), f(y))))
        }
    }
}

fn compare(op: BuiltinOp, a: &Value, b: &Value) -> Result<std::cmp::Ordering, EvalError> {
    a.loose_cmp(b).ok_or_else(|| {
        mismatch(format!(
            "`{}` cannot compare {} with {}",
            op.name(),
            a.kind(),
            b.kind()
        ))
    })
}

fn extremum(op: BuiltinOp, vals: &[Value]) -> Result<Value, EvalError> {
    // A single list argument means "over its elements".
    let items = match vals {
        [Value::List(items)] => items.as_slice(),
        _ => vals,
    };
    let mut best = items
        .first()
        .ok_or_else(|| mismatch(format!("`{}` of an empty list", op.name())))?;
    for v in &items[1..] {
        let ord = compare(op, v, best)?;
        let better = match op {
            BuiltinOp::Min => ord.is_lt(),
            _ => ord.is_gt(),
        };
        if better {
            best = v;
        }
    }
    Ok(best.clone())
}

fn apply_builtin(op: BuiltinOp, v: &[Value]) -> Result<Value, EvalError> {
    use BuiltinOp::*;
    match op {
        Add => arith(op, &v[0], &v[1], i64::checked_add, |x, y| x + y),
        Sub => arith(op, &v[0], &v[1], i64::checked_sub, |x, y| x - y),
        Mul => arith(op, &v[0], &v[1], i64::checked_mul, |x, y| x * y),
        Div => {
            let (x, y) = (
                v[0].as_f64().ok_or_else(|| mismatch(format!("`div` on a {}", v[0].kind())))?,
                v[1].as_f64().ok_or_else(|| mismatch(format!("`div` on a {}", v[1].kind())))?,
            );
            if y == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            Ok(Value::Float(x / y))
        }
        Mod => {
            let x = v[0].as_int().ok_or_else(|| mismatch(format!("`mod` on a {}", v[0].kind())))?;
            let y = v[1].as_int().ok_or_else(|| mismatch(format!("`mod` on a {}", v[1].kind())))?;
            if y == 0 {
                return Err(EvalError::DivisionByZero);
            }
            x.checked_rem(y).map(Value::Int).ok_or(EvalError::Overflow("mod"))
        }
        Neg => match num(&v[0], op)? {
            Num::I(i) => i.checked_neg().map(Value::Int).ok_or(EvalError::Overflow("neg")),
            Num::F(f) => Ok(Value::Float(-f)),
        },
        Eq => Ok(Value::Bool(v[0].loose_eq(&v[1]))),
        Neq => Ok(Value::Bool(!v[0].loose_eq(&v[1]))),
        Lt => Ok(Value::Bool(compare(op, &v[0], &v[1])?.is_lt())),
        Lte => Ok(Value::Bool(compare(op, &v[0], &v[1])?.is_le())),
        Gt => Ok(Value::Bool(compare(op, &v[0], &v[1])?.is_gt())),
        Gte => Ok(Value::Bool(compare(op, &v[0], &v[1])?.is_ge())),
        Length => match &v[0] {
            Value::List(l) => Ok(Value::Int(l.len() as i64)),
            Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
            Value::Map(m) => Ok(Value::Int(m.len() as i64)),
            other => Err(mismatch(format!("`length` of a {}", other.kind()))),
        },
        Min | Max => extremum(op, v),
        Round => match num(&v[0], op)? {
            Num::I(i) => Ok(Value::Int(i)),
            Num::F(f) => {
                let r = f.round();
                if r.is_finite() && r.abs() < 9.2e18 {
                    Ok(Value::Int(r as i64))
                } else {
                    Err(EvalError::Overflow("round"))
                }
            }
        },
        And | Or | Not | Coalesce => unreachable!("evaluated lazily"),
    }
}

/// Bounded LRU of evaluations keyed by everything that determines them.
pub struct AssignmentCache {
    inner: Mutex<LruCache<String, Arc<Evaluation>>>,
}

impl fmt::Debug for AssignmentCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AssignmentCache")
            .field("len", &self.len())
            .finish()
    }
}

impl Default for AssignmentCache {
    fn default() -> Self {
        Self::new(AssignmentCache::DEFAULT_CAPACITY)
    }
}

impl AssignmentCache {
    pub const DEFAULT_CAPACITY: usize = 10_000;

    pub fn new(capacity: usize) -> Self {
        AssignmentCache {
            inner: Mutex::new(LruCache::new(
                NonZeroUsize::new(capacity.max(1)).expect("capacity is at least 1"),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluates on a miss. Evaluation is pure, so two threads racing on
    /// the same key compute equal values and either may win.
    pub fn get_or_evaluate(
        &self,
        script: &Script,
        inputs: &Inputs,
        overrides: &Overrides,
        ctx: &ExperimentContext,
    ) -> Result<Arc<Evaluation>, EvalError> {
        let key = cache_key(script, inputs, overrides, ctx);
        if let Some(hit) = self.lock().get(&key) {
            return Ok(hit.clone());
        }
        let fresh = Arc::new(script.evaluate(inputs, overrides, ctx)?);
        Ok(self.lock().get_or_insert(key, || fresh).clone())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<String, Arc<Evaluation>>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

fn cache_key(script: &Script, inputs: &Inputs, overrides: &Overrides, ctx: &ExperimentContext) -> String {
    let canon = |m: &BTreeMap<String, Value>| serde_json::to_string(m).expect("values always serialize");
    format!(
        "{}\u{0}{}\u{0}{}\u{0}{}\u{0}{}",
        ctx.namespace(),
        ctx.experiment(),
        script.digest(),
        canon(inputs),
        canon(overrides)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::dsl::parse;
    use std::sync::atomic::AtomicUsize;

    fn ctx() -> ExperimentContext {
        ExperimentContext::new("ns", "exp").unwrap()
    }

    fn inputs<const N: usize>(pairs: [(&str, Value); N]) -> Inputs {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn run(src: &str, inp: Inputs, ov: Overrides) -> Result<Evaluation, EvalError> {
        Script::new(parse(src).unwrap()).evaluate(&inp, &ov, &ctx())
    }

    fn eval_expr(src: &str) -> Result<Value, EvalError> {
        run(&format!("x = {src};"), Inputs::new(), Overrides::new()).map(|e| e.params["x"].clone())
    }

    #[test]
    fn arithmetic_and_promotion() {
        assert_eq!(eval_expr("1 + 2 * 3").unwrap(), Value::Int(7));
        assert_eq!(eval_expr("1 + 2.5").unwrap(), Value::Float(3.5));
        assert_eq!(eval_expr("7 / 2").unwrap(), Value::Float(3.5));
        assert_eq!(eval_expr("-7 % 3").unwrap(), Value::Int(-1));
        assert_eq!(eval_expr("true + 1").unwrap(), Value::Int(2));
        assert_eq!(eval_expr("1 / 0"), Err(EvalError::DivisionByZero));
        assert_eq!(eval_expr("1 % 0"), Err(EvalError::DivisionByZero));
        assert!(matches!(eval_expr("1.5 % 1"), Err(EvalError::TypeMismatch(_))));
        assert!(matches!(eval_expr("'a' + 1"), Err(EvalError::TypeMismatch(_))));
        assert_eq!(
            eval_expr("9223372036854775807 + 1"),
            Err(EvalError::Overflow("add"))
        );
    }

    #[test]
    fn comparisons_and_logic() {
        assert_eq!(eval_expr("true == 1").unwrap(), Value::Bool(true));
        assert_eq!(eval_expr("2 == 2.0").unwrap(), Value::Bool(true));
        assert_eq!(eval_expr("'a' < 'b'").unwrap(), Value::Bool(true));
        assert_eq!(eval_expr("1 < 2 && 0").unwrap(), Value::Bool(false));
        assert_eq!(eval_expr("0 || 'x'").unwrap(), Value::Bool(true));
        assert_eq!(eval_expr("!''").unwrap(), Value::Bool(true));
        assert!(matches!(eval_expr("'a' < 1"), Err(EvalError::TypeMismatch(_))));
        // Short-circuit skips the missing name.
        assert_eq!(eval_expr("0 && missing").unwrap(), Value::Bool(false));
    }

    #[test]
    fn indexing() {
        assert_eq!(eval_expr("[10, 20][true]").unwrap(), Value::Int(20));
        assert_eq!(eval_expr("{'a': 1}['a']").unwrap(), Value::Int(1));
        assert_eq!(
            eval_expr("[1][1]"),
            Err(EvalError::IndexOutOfRange { index: 1, len: 1 })
        );
        assert_eq!(eval_expr("[1][-1]"), Err(EvalError::IndexOutOfRange { index: -1, len: 1 }));
        assert_eq!(eval_expr("{'a': 1}['b']"), Err(EvalError::MissingKey("b".into())));
    }

    #[test]
    fn builtin_functions() {
        assert_eq!(eval_expr("length([1, 2, 3])").unwrap(), Value::Int(3));
        assert_eq!(eval_expr("min(length([1, 2]), 3)").unwrap(), Value::Int(2));
        assert_eq!(eval_expr("max([4, 9, 2])").unwrap(), Value::Int(9));
        assert_eq!(eval_expr("max(1, 2.5)").unwrap(), Value::Float(2.5));
        assert_eq!(eval_expr("round(2.5)").unwrap(), Value::Int(3));
        assert_eq!(eval_expr("round(-2.5)").unwrap(), Value::Int(-3));
        assert_eq!(eval_expr("coalesce(null, 0, 4)").unwrap(), Value::Int(0));
        assert!(matches!(eval_expr("min([])"), Err(EvalError::TypeMismatch(_))));
    }

    #[test]
    fn missing_input_is_an_error() {
        assert_eq!(
            run("x = y + 1;", Inputs::new(), Overrides::new()),
            Err(EvalError::MissingInput("y".into()))
        );
        let err = run(corpus::BUTTON_COLOR.source, Inputs::new(), Overrides::new()).unwrap_err();
        assert_eq!(err, EvalError::MissingInput("cookieid".into()));
        let err = run(
            corpus::BUTTON_COLOR.source,
            inputs([("cookieid", Value::Null)]),
            Overrides::new(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EvalError::Random {
                source: RandomError::EmptyUnit,
                ..
            }
        ));
    }

    #[test]
    fn default_salt_is_target_name() {
        // Same draw as random::uniform_choice under salt "button_color",
        // checked against the SHA1 reference value in the random module.
        let ev = run(
            corpus::BUTTON_COLOR.source,
            inputs([("cookieid", 42.into())]),
            Overrides::new(),
        )
        .unwrap();
        assert_eq!(ev.params["button_color"], Value::from("#3c539a"));
        let with_salt = run(
            "y = uniformChoice(choices=['#3c539a', '#5f9647', '#b33316'], unit=cookieid, salt='button_color');",
            inputs([("cookieid", 42.into())]),
            Overrides::new(),
        )
        .unwrap();
        assert_eq!(with_salt.params["y"], ev.params["button_color"]);
    }

    #[test]
    fn strata_probabilities_follow_country() {
        // With unit-interval floats fixed per user, p=0.2 vs p=0.05 gives
        // rates near those values.
        for script in [corpus::STRATA_IF, corpus::STRATA_INDEX] {
            let s = Script::new(parse(script.source).unwrap());
            for (country, p) in [("US", 0.2), ("BR", 0.05)] {
                let n = 40_000;
                let hits: i64 = (0..n)
                    .map(|u| {
                        let inp = inputs([("userid", u.into()), ("country", country.into())]);
                        s.evaluate(&inp, &Overrides::new(), &ctx()).unwrap().params["has_translate"]
                            .as_int()
                            .unwrap()
                    })
                    .sum();
                let rate = hits as f64 / n as f64;
                assert!((rate - p).abs() < 0.01, "{} {country}: {rate}", script.name);
            }
        }
    }

    #[test]
    fn strata_scripts_agree_per_unit() {
        // Both scripts draw has_translate with the same salt and p.
        let a = Script::new(parse(corpus::STRATA_IF.source).unwrap());
        let b = Script::new(parse(corpus::STRATA_INDEX.source).unwrap());
        for u in 0..500 {
            let inp = (corpus::STRATA_IF.sample_inputs)(u);
            let x = a.evaluate(&inp, &Overrides::new(), &ctx()).unwrap();
            let y = b.evaluate(&inp, &Overrides::new(), &ctx()).unwrap();
            assert_eq!(x.params["has_translate"], y.params["has_translate"]);
        }
    }

    #[test]
    fn overrides_freeze_and_recompute_downstream() {
        let ov: Overrides = [
            ("specific_goal".to_string(), Value::Int(1)),
            ("group_size".to_string(), Value::Int(10)),
            ("ratings_per_user_goal".to_string(), Value::Int(8)),
        ]
        .into();
        let ev = run(corpus::GOAL_SETTING.source, inputs([("userid", 3.into())]), ov).unwrap();
        assert_eq!(ev.params["ratings_goal"], Value::Int(80));
        assert_eq!(
            ev.params.keys().collect::<Vec<_>>(),
            vec!["group_size", "specific_goal", "ratings_per_user_goal", "ratings_goal"]
        );
    }

    #[test]
    fn unreached_override_is_still_reported() {
        let ov: Overrides = [
            ("specific_goal".to_string(), Value::Int(0)),
            ("ratings_goal".to_string(), Value::Int(5)),
        ]
        .into();
        let ev = run(corpus::GOAL_SETTING.source, inputs([("userid", 3.into())]), ov).unwrap();
        assert_eq!(ev.params["ratings_goal"], Value::Int(5));
        assert!(!ev.params.contains_key("ratings_per_user_goal"));
        // Overrides that are not parameters do not become parameters.
        let ov: Overrides = [("unrelated".to_string(), Value::Int(1))].into();
        let ev = run(corpus::GOAL_SETTING.source, inputs([("userid", 3.into())]), ov).unwrap();
        assert!(!ev.params.contains_key("unrelated"));
    }

    #[test]
    fn input_override_changes_the_hash_input() {
        let src = corpus::BUTTON_COLOR.source;
        let a = run(src, inputs([("cookieid", 1.into())]), [("cookieid".to_string(), 42.into())].into())
            .unwrap();
        let b = run(src, inputs([("cookieid", 42.into())]), Overrides::new()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn return_controls_membership() {
        let src = "x = 1; if (country != 'US') { return false; } y = 2;";
        let ev = run(src, inputs([("country", "BR".into())]), Overrides::new()).unwrap();
        assert!(!ev.in_experiment);
        assert!(!ev.params.contains_key("y"));
        let ev = run(src, inputs([("country", "US".into())]), Overrides::new()).unwrap();
        assert!(ev.in_experiment);
        assert_eq!(ev.params["y"], Value::Int(2));
        let ev = run("x = 1; return true; y = 2;", Inputs::new(), Overrides::new()).unwrap();
        assert!(ev.in_experiment);
        assert!(!ev.params.contains_key("y"));
    }

    #[test]
    fn get_logs_exposure_once() {
        let ev = run(
            corpus::COLLAPSE_STORY.source,
            inputs([("viewerid", 1.into()), ("storyid", 2.into())]),
            Overrides::new(),
        )
        .unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let a = Assignment::new(ev).with_hook(Arc::new(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
        }));
        assert_eq!(a.get("nonexistent", Some(7.into())), Value::Int(7));
        assert_eq!(count.load(Ordering::SeqCst), 0);
        let v = a.get("collapse_story", None);
        assert!(v == Value::Int(0) || v == Value::Int(1));
        a.get("collapse_story", None);
        assert_eq!(count.load(Ordering::SeqCst), 1);
        assert!(a.exposed());
        assert_eq!(a.get("nonexistent", None), Value::Null);
    }

    #[test]
    fn out_of_experiment_get_does_not_expose() {
        let ev = run("x = 1; return 0;", Inputs::new(), Overrides::new()).unwrap();
        let a = Assignment::new(ev);
        assert_eq!(a.get("x", None), Value::Int(1));
        assert!(!a.exposed());
    }

    #[test]
    fn experiment_name_changes_draws() {
        let s = Script::new(parse(corpus::BUTTON_COLOR.source).unwrap());
        let other = ExperimentContext::new("ns", "other").unwrap();
        let differ = (0..300)
            .filter(|u| {
                let inp = inputs([("cookieid", (*u).into())]);
                s.evaluate(&inp, &Overrides::new(), &ctx()).unwrap().params
                    != s.evaluate(&inp, &Overrides::new(), &other).unwrap().params
            })
            .count();
        assert!(differ > 150, "{differ}");
    }

    #[test]
    fn random_op_outside_assignment() {
        let e = run("if (bernoulliTrial(p=1, unit=1)) { x = 1; }", Inputs::new(), Overrides::new());
        assert_eq!(e, Err(EvalError::MissingSalt { op: "bernoulliTrial".into() }));
        let ok = run(
            "if (bernoulliTrial(p=1, unit=1, salt='gate')) { x = 1; }",
            Inputs::new(),
            Overrides::new(),
        )
        .unwrap();
        assert_eq!(ok.params["x"], Value::Int(1));
    }

    #[test]
    fn cache_returns_shared_evaluation() {
        let s = Script::new(parse(corpus::TWO_FACTOR.source).unwrap());
        let cache = AssignmentCache::new(2);
        let inp = inputs([("cookieid", 1.into())]);
        let a = cache.get_or_evaluate(&s, &inp, &Overrides::new(), &ctx()).unwrap();
        let b = cache.get_or_evaluate(&s, &inp, &Overrides::new(), &ctx()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        for u in 2..10 {
            let inp = inputs([("cookieid", u.into())]);
            cache.get_or_evaluate(&s, &inp, &Overrides::new(), &ctx()).unwrap();
        }
        assert_eq!(cache.len(), 2);
    }

    struct Coin;

    impl crate::registry::CustomOperator for Coin {
        fn name(&self) -> &str {
            "coin"
        }
        fn is_random(&self) -> bool {
            true
        }
        fn evaluate(&self, args: &CallArgs<'_>) -> Result<Value, String> {
            let ctx = args.salt.ok_or("no salt")?;
            let d = random::hash_draw(ctx, args.units, None).map_err(|e| e.to_string())?;
            Ok(Value::Int((d.value % 2) as i64))
        }
    }

    #[test]
    fn custom_random_operator() {
        let mut reg = OperatorRegistry::new();
        reg.register(Arc::new(Coin)).unwrap();
        let s = Script::new(parse("c = coin(unit=userid);").unwrap()).with_registry(Arc::new(reg));
        let inp = inputs([("userid", 42.into())]);
        let v = s.evaluate(&inp, &Overrides::new(), &ctx()).unwrap().params["c"].clone();
        let expected = random::hash_draw(&SaltContext::new("ns", "exp", "c").unwrap(), &[42.into()], None)
            .unwrap()
            .value
            % 2;
        assert_eq!(v, Value::Int(expected as i64));

        let bare = Script::new(parse("c = coin(unit=userid);").unwrap());
        assert_eq!(
            bare.evaluate(&inp, &Overrides::new(), &ctx()),
            Err(EvalError::UnknownOperator("coin".into()))
        );
    }
}
