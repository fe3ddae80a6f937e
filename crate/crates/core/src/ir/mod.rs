//! Intermediate representation of assignment scripts.
//!
//! A script is a list of statements executed in order. The IR is the
//! portable form of an experiment: it is what gets stored, hashed into a
//! digest, and shipped to other services. See [`serialize`] for the text
//! format.

mod inspect;
mod serial;
mod validate;

use std::collections::BTreeMap;

use sha1::{Digest, Sha1};

use crate::value::Value;

pub use inspect::{list_parameters, list_units, UnitRef};
pub use serial::{deserialize, from_json, serialize, to_json, IrError};
pub use validate::{validate, validate_with, ValidateOptions};

/// Version tag written into every serialized script.
pub const FORMAT_VERSION: &str = "planout-ir/1";

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptIR {
    pub format_version: String,
    pub statements: Vec<Stmt>,
}

impl Default for ScriptIR {
    fn default() -> Self {
        ScriptIR::new(Vec::new())
    }
}

impl ScriptIR {
    pub fn new(statements: Vec<Stmt>) -> Self {
        ScriptIR {
            format_version: FORMAT_VERSION.to_string(),
            statements,
        }
    }

    /// Hex SHA1 of the canonical serialization.
    pub fn digest(&self) -> String {
        let text = serialize(self);
        let mut hasher = Sha1::new();
        hasher.update(text.as_bytes());
        hex_lower(&hasher.finalize())
    }
}

pub(crate) fn hex_lower(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Assign { target: String, value: Expr },
    If {
        branches: Vec<Branch>,
        otherwise: Option<Vec<Stmt>>,
    },
    Block(Vec<Stmt>),
    /// Stops evaluation. A falsy value marks the unit as not in the
    /// experiment, which suppresses exposure logging.
    Return(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub cond: Expr,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Scalar constant: null, boolean, integer, float or string.
    Literal(Value),
    Array(Vec<Expr>),
    Map(BTreeMap<String, Expr>),
    Var(String),
    Index { base: Box<Expr>, index: Box<Expr> },
    Builtin { op: BuiltinOp, args: Vec<Expr> },
    Random {
        op: RandomOp,
        params: BTreeMap<String, Expr>,
    },
    /// Operator supplied by the embedding application through an
    /// [`OperatorRegistry`](crate::registry::OperatorRegistry).
    Custom {
        name: String,
        params: BTreeMap<String, Expr>,
    },
}

impl Expr {
    pub fn lit(v: impl Into<Value>) -> Expr {
        Expr::Literal(v.into())
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn builtin(op: BuiltinOp, args: Vec<Expr>) -> Expr {
        Expr::Builtin { op, args }
    }

    pub fn random<'a>(op: RandomOp, params: impl IntoIterator<Item = (&'a str, Expr)>) -> Expr {
        Expr::Random {
            op,
            params: params
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    /// Calls `f` on this node and every descendant expression, pre-order.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Literal(_) | Expr::Var(_) => {}
            Expr::Array(items) => items.iter().for_each(|e| e.walk(f)),
            Expr::Map(entries) => entries.values().for_each(|e| e.walk(f)),
            Expr::Index { base, index } => {
                base.walk(f);
                index.walk(f);
            }
            Expr::Builtin { args, .. } => args.iter().for_each(|e| e.walk(f)),
            Expr::Random { params, .. } | Expr::Custom { params, .. } => {
                params.values().for_each(|e| e.walk(f))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

macro_rules! builtin_ops {
    ($($variant:ident => $name:literal, $arity:expr;)*) => {
        /// Deterministic (non-random) operators.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum BuiltinOp {
            $($variant,)*
        }

        impl BuiltinOp {
            pub const ALL: &'static [BuiltinOp] = &[$(BuiltinOp::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(BuiltinOp::$variant => $name,)*
                }
            }

            pub fn from_name(name: &str) -> Option<BuiltinOp> {
                match name {
                    $($name => Some(BuiltinOp::$variant),)*
                    _ => None,
                }
            }

            pub fn arity(self) -> Arity {
                match self {
                    $(BuiltinOp::$variant => $arity,)*
                }
            }
        }
    };
}

builtin_ops! {
    Add => "add", Arity::Exactly(2);
    Sub => "sub", Arity::Exactly(2);
    Mul => "mul", Arity::Exactly(2);
    Div => "div", Arity::Exactly(2);
    Mod => "mod", Arity::Exactly(2);
    Neg => "neg", Arity::Exactly(1);
    Not => "not", Arity::Exactly(1);
    And => "and", Arity::Exactly(2);
    Or => "or", Arity::Exactly(2);
    Eq => "equals", Arity::Exactly(2);
    Neq => "not_equals", Arity::Exactly(2);
    Lt => "less_than", Arity::Exactly(2);
    Lte => "less_equal", Arity::Exactly(2);
    Gt => "greater_than", Arity::Exactly(2);
    Gte => "greater_equal", Arity::Exactly(2);
    Length => "length", Arity::Exactly(1);
    Min => "min", Arity::AtLeast(1);
    Max => "max", Arity::AtLeast(1);
    Round => "round", Arity::Exactly(1);
    Coalesce => "coalesce", Arity::AtLeast(1);
}

impl BuiltinOp {
    /// Builtins written as function calls in the DSL (the rest are
    /// infix/prefix operators).
    pub fn is_function(self) -> bool {
        matches!(
            self,
            BuiltinOp::Length
                | BuiltinOp::Min
                | BuiltinOp::Max
                | BuiltinOp::Round
                | BuiltinOp::Coalesce
        )
    }
}

/// Hash-based random assignment operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RandomOp {
    UniformChoice,
    WeightedChoice,
    BernoulliTrial,
    RandomInteger,
    RandomFloat,
    Sample,
}

impl RandomOp {
    pub const ALL: &'static [RandomOp] = &[
        RandomOp::UniformChoice,
        RandomOp::WeightedChoice,
        RandomOp::BernoulliTrial,
        RandomOp::RandomInteger,
        RandomOp::RandomFloat,
        RandomOp::Sample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RandomOp::UniformChoice => "uniformChoice",
            RandomOp::WeightedChoice => "weightedChoice",
            RandomOp::BernoulliTrial => "bernoulliTrial",
            RandomOp::RandomInteger => "randomInteger",
            RandomOp::RandomFloat => "randomFloat",
            RandomOp::Sample => "sample",
        }
    }

    pub fn from_name(name: &str) -> Option<RandomOp> {
        RandomOp::ALL.iter().copied().find(|op| op.name() == name)
    }

    /// Parameters besides `unit` that must be present.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            RandomOp::UniformChoice => &["choices"],
            RandomOp::WeightedChoice => &["choices", "weights"],
            RandomOp::BernoulliTrial => &["p"],
            RandomOp::RandomInteger | RandomOp::RandomFloat => &["min", "max"],
            RandomOp::Sample => &["choices"],
        }
    }

    /// Parameters besides `salt` that may be present.
    pub fn optional_params(self) -> &'static [&'static str] {
        match self {
            RandomOp::Sample => &["draws"],
            _ => &[],
        }
    }

    pub fn accepts_param(self, name: &str) -> bool {
        name == "unit"
            || name == "salt"
            || self.required_params().contains(&name)
            || self.optional_params().contains(&name)
    }
}

/// True for names usable as variables, parameters and salts.
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_') && !crate::dsl::is_keyword(name)
}
