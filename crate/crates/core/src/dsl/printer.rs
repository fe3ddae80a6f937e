use std::fmt::Write;

use crate::ir::{BuiltinOp, Expr, ScriptIR, Stmt};
use crate::value::Value;

const INDENT: &str = "  ";

// Binding strength, loosest first.
const OR: u8 = 1;
const AND: u8 = 2;
const CMP: u8 = 3;
const ADD: u8 = 4;
const MUL: u8 = 5;
const UNARY: u8 = 6;
const POSTFIX: u8 = 7;
const ATOM: u8 = 8;

/// Renders a script as DSL source that parses back to the same IR.
///
/// Expects a validated script: builtin arities must match and names must
/// be identifiers.
pub fn decompile(ir: &ScriptIR) -> String {
    let mut out = String::new();
    stmts(&mut out, &ir.statements, 0);
    out
}

fn stmts(out: &mut String, list: &[Stmt], depth: usize) {
    for s in list {
        stmt(out, s, depth);
    }
}

fn body(out: &mut String, list: &[Stmt], depth: usize) {
    out.push_str("{\n");
    stmts(out, list, depth + 1);
    out.push_str(&INDENT.repeat(depth));
    out.push('}');
}

fn stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = INDENT.repeat(depth);
    out.push_str(&pad);
    match s {
        Stmt::Assign { target, value } => {
            let _ = writeln!(out, "{target} = {};", expr(value));
        }
        Stmt::Return(value) => {
            let _ = writeln!(out, "return {};", expr(value));
        }
        Stmt::Block(list) => {
            body(out, list, depth);
            out.push('\n');
        }
        Stmt::If {
            branches,
            otherwise,
        } => {
            for (i, b) in branches.iter().enumerate() {
                if i > 0 {
                    out.push_str(" else ");
                }
                let _ = write!(out, "if ({}) ", expr(&b.cond));
                body(out, &b.body, depth);
            }
            if let Some(list) = otherwise {
                out.push_str(" else ");
                body(out, list, depth);
            }
            out.push('\n');
        }
    }
}

pub(crate) fn expr(e: &Expr) -> String {
    render(e).0
}

fn wrap(e: &Expr, min: u8) -> String {
    let (text, prec) = render(e);
    if prec < min {
        format!("({text})")
    } else {
        text
    }
}

fn binary_symbol(op: BuiltinOp) -> Option<(&'static str, u8)> {
    Some(match op {
        BuiltinOp::Or => ("||", OR),
        BuiltinOp::And => ("&&", AND),
        BuiltinOp::Eq => ("==", CMP),
        BuiltinOp::Neq => ("!=", CMP),
        BuiltinOp::Lt => ("<", CMP),
        BuiltinOp::Lte => ("<=", CMP),
        BuiltinOp::Gt => (">", CMP),
        BuiltinOp::Gte => (">=", CMP),
        BuiltinOp::Add => ("+", ADD),
        BuiltinOp::Sub => ("-", ADD),
        BuiltinOp::Mul => ("*", MUL),
        BuiltinOp::Div => ("/", MUL),
        BuiltinOp::Mod => ("%", MUL),
        _ => return None,
    })
}

fn join<'a>(items: impl Iterator<Item = &'a Expr>) -> String {
    items.map(expr).collect::<Vec<_>>().join(", ")
}

fn kwargs(params: &std::collections::BTreeMap<String, Expr>) -> String {
    params
        .iter()
        .map(|(k, v)| format!("{k}={}", expr(v)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn render(e: &Expr) -> (String, u8) {
    match e {
        Expr::Literal(v) => (literal(v), ATOM),
        Expr::Var(name) => (name.clone(), ATOM),
        Expr::Array(items) => (format!("[{}]", join(items.iter())), ATOM),
        Expr::Map(entries) => {
            let body = entries
                .iter()
                .map(|(k, v)| format!("{}: {}", quote(k), expr(v)))
                .collect::<Vec<_>>()
                .join(", ");
            (format!("{{{body}}}"), ATOM)
        }
        Expr::Index { base, index } => (
            format!("{}[{}]", wrap(base, POSTFIX), expr(index)),
            POSTFIX,
        ),
        Expr::Random { op, params } => (format!("{}({})", op.name(), kwargs(params)), ATOM),
        Expr::Custom { name, params } => (format!("{name}({})", kwargs(params)), ATOM),
        Expr::Builtin { op, args } => {
            if let Some((sym, prec)) = binary_symbol(*op) {
                if let [l, r] = args.as_slice() {
                    return (
                        format!("{} {sym} {}", wrap(l, prec), wrap(r, prec + 1)),
                        prec,
                    );
                }
            }
            match (op, args.as_slice()) {
                (BuiltinOp::Not, [x]) => (format!("!{}", wrap(x, UNARY)), UNARY),
                (BuiltinOp::Neg, [x]) => {
                    let inner = wrap(x, UNARY);
                    // `-` before a digit would fold into a negative literal.
                    if inner.starts_with(|c: char| c.is_ascii_digit()) {
                        (format!("-({inner})"), UNARY)
                    } else {
                        (format!("-{inner}"), UNARY)
                    }
                }
                _ => (format!("{}({})", op.name(), join(args.iter())), ATOM),
            }
        }
    }
}

fn literal(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        // Debug output is the shortest text that round-trips and always
        // contains `.` or `e`, so it re-lexes as a float.
        Value::Float(f) => format!("{f:?}"),
        Value::Str(s) => quote(s),
        other => other.to_canonical(),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '\0' => out.push_str("\\0"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::dsl::parse;

    #[test]
    fn empty_script_is_empty_text() {
        assert_eq!(decompile(&ScriptIR::default()), "");
    }

    #[test]
    fn corpus_round_trips() {
        for script in corpus::ALL {
            let ir = parse(script.source).unwrap();
            let text = decompile(&ir);
            assert_eq!(parse(&text).unwrap(), ir, "{}:\n{text}", script.name);
        }
    }

    #[test]
    fn layout() {
        let ir = parse(corpus::GOAL_SETTING.source).unwrap();
        assert_eq!(
            decompile(&ir),
            "group_size = uniformChoice(choices=[1, 10], unit=userid);\n\
             specific_goal = bernoulliTrial(p=0.8, unit=userid);\n\
             if (specific_goal) {\n\
             \x20 ratings_per_user_goal = uniformChoice(choices=[8, 16, 32, 64], unit=userid);\n\
             \x20 ratings_goal = group_size * ratings_per_user_goal;\n\
             }\n"
        );
    }

    #[test]
    fn parenthesizes_only_when_needed() {
        let ir = parse("x = (a + b) * c - (d - e) + -(1) + --2;").unwrap();
        let text = decompile(&ir);
        assert_eq!(text, "x = (a + b) * c - (d - e) + -(1) + --2;\n");
        assert_eq!(parse(&text).unwrap(), ir);
    }

    #[test]
    fn else_block_holding_an_if_stays_nested() {
        let src = "if (a) { x = 1; } else { if (b) { x = 2; } }";
        let ir = parse(src).unwrap();
        assert_eq!(parse(&decompile(&ir)).unwrap(), ir);
    }

    #[test]
    fn string_escaping() {
        let ir = parse(r#"x = "tab\tquote\"back\\slash\u{1}";"#).unwrap();
        assert_eq!(parse(&decompile(&ir)).unwrap(), ir);
    }
}
