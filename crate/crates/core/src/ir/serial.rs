//! Canonical JSON text format for [`ScriptIR`].
//!
//! ```text
//! script    := {"format_version": "planout-ir/1", "statements": [stmt...]}
//! stmt      := {"op": "set", "var": NAME, "value": expr}
//!            | {"op": "if", "branches": [{"cond": expr, "body": [stmt...]}...], "else": [stmt...]?}
//!            | {"op": "seq", "body": [stmt...]}
//!            | {"op": "return", "value": expr}
//! expr      := {"op": "literal", "value": null | bool | int | float | string}
//!            | {"op": "array", "values": [expr...]}
//!            | {"op": "map", "entries": {KEY: expr...}}
//!            | {"op": "get", "var": NAME}
//!            | {"op": "index", "base": expr, "index": expr}
//!            | {"op": BUILTIN, "args": [expr...]}
//!            | {"op": RANDOM_OP, "params": {NAME: expr...}}
//!            | {"op": "custom", "name": NAME, "params": {NAME: expr...}}
//! ```
//!
//! Object keys are emitted sorted and without whitespace. Integers are
//! written without a fraction; floats always carry a fraction or an
//! exponent, so the two kinds survive a round trip.

use std::collections::BTreeMap;

use serde_json::{Map, Number, Value as Json};
use thiserror::Error;

use super::{Branch, BuiltinOp, Expr, RandomOp, ScriptIR, Stmt, FORMAT_VERSION};
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("malformed script text at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid `{node}` node: {message}")]
    Schema { node: String, message: String },
}

fn schema(node: &str, message: impl Into<String>) -> IrError {
    IrError::Schema {
        node: node.to_string(),
        message: message.into(),
    }
}

/// Canonical text of a script. Equal scripts give byte-equal text.
pub fn serialize(ir: &ScriptIR) -> String {
    to_json(ir).to_string()
}

/// The script as a JSON tree (object keys sorted).
pub fn to_json(ir: &ScriptIR) -> Json {
    let mut obj = Map::new();
    obj.insert("format_version".into(), Json::String(ir.format_version.clone()));
    obj.insert("statements".into(), stmts_to_json(&ir.statements));
    Json::Object(obj)
}

fn node(op: &str, fields: impl IntoIterator<Item = (&'static str, Json)>) -> Json {
    let mut obj = Map::new();
    obj.insert("op".into(), Json::String(op.to_string()));
    for (k, v) in fields {
        obj.insert(k.into(), v);
    }
    Json::Object(obj)
}

fn stmts_to_json(stmts: &[Stmt]) -> Json {
    Json::Array(stmts.iter().map(stmt_to_json).collect())
}

fn stmt_to_json(stmt: &Stmt) -> Json {
    match stmt {
        Stmt::Assign { target, value } => node(
            "set",
            [("var", Json::String(target.clone())), ("value", expr_to_json(value))],
        ),
        Stmt::If {
            branches,
            otherwise,
        } => {
            let branches = branches
                .iter()
                .map(|b| {
                    let mut obj = Map::new();
                    obj.insert("cond".into(), expr_to_json(&b.cond));
                    obj.insert("body".into(), stmts_to_json(&b.body));
                    Json::Object(obj)
                })
                .collect();
            let mut fields = vec![("branches", Json::Array(branches))];
            if let Some(body) = otherwise {
                fields.push(("else", stmts_to_json(body)));
            }
            node("if", fields)
        }
        Stmt::Block(body) => node("seq", [("body", stmts_to_json(body))]),
        Stmt::Return(value) => node("return", [("value", expr_to_json(value))]),
    }
}

fn params_to_json(params: &BTreeMap<String, Expr>) -> Json {
    Json::Object(
        params
            .iter()
            .map(|(k, v)| (k.clone(), expr_to_json(v)))
            .collect(),
    )
}

fn expr_to_json(expr: &Expr) -> Json {
    match expr {
        Expr::Literal(v) => node("literal", [("value", scalar_to_json(v))]),
        Expr::Array(items) => node(
            "array",
            [("values", Json::Array(items.iter().map(expr_to_json).collect()))],
        ),
        Expr::Map(entries) => node("map", [("entries", params_to_json(entries))]),
        Expr::Var(name) => node("get", [("var", Json::String(name.clone()))]),
        Expr::Index { base, index } => node(
            "index",
            [("base", expr_to_json(base)), ("index", expr_to_json(index))],
        ),
        Expr::Builtin { op, args } => node(
            op.name(),
            [("args", Json::Array(args.iter().map(expr_to_json).collect()))],
        ),
        Expr::Random { op, params } => node(op.name(), [("params", params_to_json(params))]),
        Expr::Custom { name, params } => node(
            "custom",
            [("name", Json::String(name.clone())), ("params", params_to_json(params))],
        ),
    }
}

fn scalar_to_json(v: &Value) -> Json {
    match v {
        Value::Null => Json::Null,
        Value::Bool(b) => Json::Bool(*b),
        Value::Int(i) => Json::Number((*i).into()),
        // Validation rejects non-finite literals.
        Value::Float(f) => Number::from_f64(*f).map_or(Json::Null, Json::Number),
        Value::Str(s) => Json::String(s.clone()),
        // Lists and maps are built from `array`/`map` nodes, never literals.
        other => serde_json::to_value(other).unwrap_or(Json::Null),
    }
}

/// Parses canonical script text.
///
/// Rejects malformed JSON ([`IrError::Parse`], with the byte offset of the
/// failure) and unknown node kinds, missing or unexpected fields
/// ([`IrError::Schema`], naming the node kind).
pub fn deserialize(text: &str) -> Result<ScriptIR, IrError> {
    let json: Json = serde_json::from_str(text).map_err(|e| IrError::Parse {
        offset: if e.is_eof() {
            text.len()
        } else {
            byte_offset(text, e.line(), e.column())
        },
        message: e.to_string(),
    })?;
    from_json(&json)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn from_json(json: &Json) -> Result<ScriptIR, IrError> {
    let obj = json
        .as_object()
        .ok_or_else(|| schema("script", "expected a JSON object"))?;
    let mut fields = Fields::new("script", obj);
    let version = fields.string("format_version")?;
    if version != FORMAT_VERSION {
        return Err(schema(
            "script",
            format!("unsupported format_version {version:?}, expected {FORMAT_VERSION:?}"),
        ));
    }
    let statements = stmts_from_json(fields.required("statements")?)?;
    fields.finish()?;
    Ok(ScriptIR {
        format_version: version,
        statements,
    })
}

/// Tracks which fields of a node were consumed so leftovers are rejected.
struct Fields<'a> {
    node: String,
    obj: &'a Map<String, Json>,
    seen: Vec<&'static str>,
}

impl<'a> Fields<'a> {
    fn new(node: &str, obj: &'a Map<String, Json>) -> Self {
        Fields {
            node: node.to_string(),
            obj,
            seen: vec!["op"],
        }
    }

    fn optional(&mut self, key: &'static str) -> Option<&'a Json> {
        self.seen.push(key);
        self.obj.get(key).filter(|v| !v.is_null())
    }

    fn required(&mut self, key: &'static str) -> Result<&'a Json, IrError> {
        self.seen.push(key);
        self.obj
            .get(key)
            .ok_or_else(|| schema(&self.node, format!("missing required field `{key}`")))
    }

    fn string(&mut self, key: &'static str) -> Result<String, IrError> {
        let node = self.node.clone();
        self.required(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| schema(&node, format!("field `{key}` must be a string")))
    }

    fn array(&mut self, key: &'static str) -> Result<&'a Vec<Json>, IrError> {
        let node = self.node.clone();
        self.required(key)?
            .as_array()
            .ok_or_else(|| schema(&node, format!("field `{key}` must be an array")))
    }

    fn object(&mut self, key: &'static str) -> Result<&'a Map<String, Json>, IrError> {
        let node = self.node.clone();
        self.required(key)?
            .as_object()
            .ok_or_else(|| schema(&node, format!("field `{key}` must be an object")))
    }

    fn finish(self) -> Result<(), IrError> {
        match self.obj.keys().find(|k| !self.seen.contains(&k.as_str())) {
            Some(extra) => Err(schema(&self.node, format!("unexpected field `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn op_of<'a>(json: &'a Json, position: &str) -> Result<(String, &'a Map<String, Json>), IrError> {
    let obj = json
        .as_object()
        .ok_or_else(|| schema(position, "expected a JSON object"))?;
    let op = obj
        .get("op")
        .and_then(Json::as_str)
        .ok_or_else(|| schema(position, "missing string field `op`"))?;
    Ok((op.to_string(), obj))
}

fn stmts_from_json(json: &Json) -> Result<Vec<Stmt>, IrError> {
    json.as_array()
        .ok_or_else(|| schema("statement list", "expected an array"))?
        .iter()
        .map(stmt_from_json)
        .collect()
}

fn stmt_from_json(json: &Json) -> Result<Stmt, IrError> {
    let (op, obj) = op_of(json, "statement")?;
    let mut f = Fields::new(&op, obj);
    let stmt = match op.as_str() {
        "set" => Stmt::Assign {
            target: f.string("var")?,
            value: expr_from_json(f.required("value")?)?,
        },
        "if" => {
            let raw = f.array("branches")?;
            if raw.is_empty() {
                return Err(schema("if", "needs at least one branch"));
            }
            let branches = raw
                .iter()
                .map(|b| {
                    let obj = b
                        .as_object()
                        .ok_or_else(|| schema("if", "branch must be an object"))?;
                    let mut bf = Fields::new("if", obj);
                    bf.seen.clear();
                    let branch = Branch {
                        cond: expr_from_json(bf.required("cond")?)?,
                        body: stmts_from_json(bf.required("body")?)?,
                    };
                    bf.finish()?;
                    Ok(branch)
                })
                .collect::<Result<_, IrError>>()?;
            let otherwise = f.optional("else").map(stmts_from_json).transpose()?;
            Stmt::If {
                branches,
                otherwise,
            }
        }
        "seq" => Stmt::Block(stmts_from_json(f.required("body")?)?),
        "return" => Stmt::Return(expr_from_json(f.required("value")?)?),
        _ => return Err(schema(&op, "unknown statement kind")),
    };
    f.finish()?;
    Ok(stmt)
}

fn params_from_json(obj: &Map<String, Json>) -> Result<BTreeMap<String, Expr>, IrError> {
    obj.iter()
        .map(|(k, v)| Ok((k.clone(), expr_from_json(v)?)))
        .collect()
}

fn expr_from_json(json: &Json) -> Result<Expr, IrError> {
    let (op, obj) = op_of(json, "expression")?;
    let mut f = Fields::new(&op, obj);
    let expr = match op.as_str() {
        "literal" => Expr::Literal(scalar_from_json(f.required("value")?)?),
        "array" => Expr::Array(
            f.array("values")?
                .iter()
                .map(expr_from_json)
                .collect::<Result<_, _>>()?,
        ),
        "map" => Expr::Map(params_from_json(f.object("entries")?)?),
        "get" => Expr::Var(f.string("var")?),
        "index" => Expr::Index {
            base: Box::new(expr_from_json(f.required("base")?)?),
            index: Box::new(expr_from_json(f.required("index")?)?),
        },
        "custom" => Expr::Custom {
            name: f.string("name")?,
            params: params_from_json(f.object("params")?)?,
        },
        other => {
            if let Some(op) = BuiltinOp::from_name(other) {
                Expr::Builtin {
                    op,
                    args: f
                        .array("args")?
                        .iter()
                        .map(expr_from_json)
                        .collect::<Result<_, _>>()?,
                }
            } else if let Some(op) = RandomOp::from_name(other) {
                Expr::Random {
                    op,
                    params: params_from_json(f.object("params")?)?,
                }
            } else {
                return Err(schema(other, "unknown operator"));
            }
        }
    };
    f.finish()?;
    Ok(expr)
}

fn scalar_from_json(json: &Json) -> Result<Value, IrError> {
    Ok(match json {
        Json::Null => Value::Null,
        Json::Bool(b) => Value::Bool(*b),
        Json::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::Int(i)
            } else if n.is_u64() {
                return Err(schema("literal", format!("integer {n} out of 64-bit range")));
            } else {
                Value::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        Json::String(s) => Value::Str(s.clone()),
        Json::Array(_) | Json::Object(_) => {
            return Err(schema(
                "literal",
                "value must be a scalar; use `array` or `map` nodes",
            ))
        }
    })
}
