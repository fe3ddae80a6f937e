use std::collections::BTreeMap;

use super::lexer::{tokenize, Token, TokenKind};
use crate::diagnostic::Diagnostic;
use crate::ir::{Branch, BuiltinOp, Expr, RandomOp, ScriptIR, Stmt};
use crate::value::Value;

const MAX_DEPTH: usize = 200;

/// Parses DSL source into a script. On a syntax error the result is a
/// single error diagnostic at the first failing token.
pub fn parse(src: &str) -> Result<ScriptIR, Vec<Diagnostic>> {
    let tokens = tokenize(src).map_err(|d| vec![d])?;
    let mut p = Parser {
        tokens,
        pos: 0,
        depth: 0,
    };
    let mut statements = Vec::new();
    while p.peek().kind != TokenKind::Eof {
        statements.push(p.statement().map_err(|d| vec![d])?);
    }
    Ok(ScriptIR::new(statements))
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_at(&self, ahead: usize) -> &Token {
        let i = (self.pos + ahead).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != TokenKind::Eof {
            self.pos += 1;
        }
        tok
    }

    fn unexpected(&self, expected: &str) -> Diagnostic {
        let tok = self.peek();
        let found = match tok.kind {
            TokenKind::Eof => "end of input".to_string(),
            _ => format!("`{}`", tok.lexeme),
        };
        Diagnostic::error(format!("expected {expected}, found {found}")).at(tok.offset)
    }

    fn expect_punct(&mut self, p: &str) -> PResult<Token> {
        if self.peek().is_punct(p) {
            Ok(self.bump())
        } else {
            Err(self.unexpected(&format!("`{p}`")))
        }
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.peek().is_punct(p) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn enter(&mut self) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(Diagnostic::error("script nested too deeply").at(self.peek().offset));
        }
        Ok(())
    }

    fn statement(&mut self) -> PResult<Stmt> {
        self.enter()?;
        let stmt = self.statement_inner();
        self.depth -= 1;
        stmt
    }

    fn statement_inner(&mut self) -> PResult<Stmt> {
        let tok = self.peek().clone();
        if tok.is_keyword("if") {
            return self.if_chain();
        }
        if tok.is_keyword("return") {
            self.bump();
            let value = self.expr()?;
            self.expect_punct(";")?;
            return Ok(Stmt::Return(value));
        }
        if tok.is_punct("{") {
            return Ok(Stmt::Block(self.block()?));
        }
        if tok.kind == TokenKind::Identifier {
            self.bump();
            self.expect_punct("=")?;
            let value = self.expr()?;
            self.expect_punct(";")?;
            return Ok(Stmt::Assign {
                target: tok.text,
                value,
            });
        }
        Err(self.unexpected("a statement"))
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect_punct("{")?;
        let mut body = Vec::new();
        while !self.peek().is_punct("}") {
            if self.peek().kind == TokenKind::Eof {
                return Err(self.unexpected("`}`"));
            }
            body.push(self.statement()?);
        }
        self.bump();
        Ok(body)
    }

    fn if_chain(&mut self) -> PResult<Stmt> {
        let mut branches = Vec::new();
        let mut otherwise = None;
        loop {
            // Current token is `if`.
            self.bump();
            self.expect_punct("(")?;
            let cond = self.expr()?;
            self.expect_punct(")")?;
            let body = self.block()?;
            branches.push(Branch { cond, body });
            if !self.peek().is_keyword("else") {
                break;
            }
            self.bump();
            if self.peek().is_keyword("if") {
                continue;
            }
            otherwise = Some(self.block()?);
            break;
        }
        Ok(Stmt::If {
            branches,
            otherwise,
        })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.enter()?;
        let e = self.or_expr();
        self.depth -= 1;
        e
    }

    fn binary_level(
        &mut self,
        ops: &[(&str, BuiltinOp)],
        next: fn(&mut Self) -> PResult<Expr>,
    ) -> PResult<Expr> {
        let mut left = next(self)?;
        'outer: loop {
            for (sym, op) in ops {
                let tok = self.peek();
                let matches = match tok.kind {
                    TokenKind::Punct | TokenKind::Keyword => tok.lexeme == *sym,
                    _ => false,
                };
                if matches {
                    self.bump();
                    let right = next(self)?;
                    left = Expr::builtin(*op, vec![left, right]);
                    continue 'outer;
                }
            }
            return Ok(left);
        }
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        self.binary_level(&[("||", BuiltinOp::Or), ("or", BuiltinOp::Or)], Self::and_expr)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        self.binary_level(&[("&&", BuiltinOp::And), ("and", BuiltinOp::And)], Self::cmp_expr)
    }

    fn cmp_expr(&mut self) -> PResult<Expr> {
        self.binary_level(
            &[
                ("==", BuiltinOp::Eq),
                ("!=", BuiltinOp::Neq),
                ("<=", BuiltinOp::Lte),
                (">=", BuiltinOp::Gte),
                ("<", BuiltinOp::Lt),
                (">", BuiltinOp::Gt),
            ],
            Self::add_expr,
        )
    }

    fn add_expr(&mut self) -> PResult<Expr> {
        self.binary_level(&[("+", BuiltinOp::Add), ("-", BuiltinOp::Sub)], Self::mul_expr)
    }

    fn mul_expr(&mut self) -> PResult<Expr> {
        self.binary_level(
            &[("*", BuiltinOp::Mul), ("/", BuiltinOp::Div), ("%", BuiltinOp::Mod)],
            Self::unary,
        )
    }

    fn unary(&mut self) -> PResult<Expr> {
        self.enter()?;
        let e = self.unary_inner();
        self.depth -= 1;
        e
    }

    fn unary_inner(&mut self) -> PResult<Expr> {
        let tok = self.peek();
        if tok.is_punct("!") || tok.is_keyword("not") {
            self.bump();
            let operand = self.unary()?;
            return Ok(Expr::builtin(BuiltinOp::Not, vec![operand]));
        }
        if tok.is_punct("-") {
            // `-` directly before a number literal is part of the literal.
            if self.peek_at(1).kind == TokenKind::Number {
                let minus = self.bump();
                let num = self.bump();
                let lit = number_literal(&format!("-{}", num.lexeme), minus.offset)?;
                return self.postfix(lit);
            }
            self.bump();
            let operand = self.unary()?;
            return Ok(Expr::builtin(BuiltinOp::Neg, vec![operand]));
        }
        let base = self.primary()?;
        self.postfix(base)
    }

    fn postfix(&mut self, mut base: Expr) -> PResult<Expr> {
        while self.eat_punct("[") {
            let index = self.expr()?;
            self.expect_punct("]")?;
            base = Expr::Index {
                base: Box::new(base),
                index: Box::new(index),
            };
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let tok = self.peek().clone();
        match tok.kind {
            TokenKind::Number => {
                self.bump();
                number_literal(&tok.lexeme, tok.offset)
            }
            TokenKind::Str => {
                self.bump();
                Ok(Expr::Literal(Value::Str(tok.text)))
            }
            TokenKind::Keyword => {
                let v = match tok.lexeme.as_str() {
                    "true" => Value::Bool(true),
                    "false" => Value::Bool(false),
                    "null" => Value::Null,
                    _ => return Err(self.unexpected("an expression")),
                };
                self.bump();
                Ok(Expr::Literal(v))
            }
            TokenKind::Identifier => {
                self.bump();
                if self.peek().is_punct("(") {
                    self.call(tok)
                } else {
                    Ok(Expr::Var(tok.text))
                }
            }
            TokenKind::Punct if tok.lexeme == "(" => {
                self.bump();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            TokenKind::Punct if tok.lexeme == "[" => {
                self.bump();
                let mut items = Vec::new();
                while !self.peek().is_punct("]") {
                    items.push(self.expr()?);
                    if !self.eat_punct(",") {
                        break;
                    }
                }
                self.expect_punct("]")?;
                Ok(Expr::Array(items))
            }
            TokenKind::Punct if tok.lexeme == "{" => {
                self.bump();
                let mut entries = BTreeMap::new();
                while !self.peek().is_punct("}") {
                    let key = self.peek().clone();
                    if !matches!(key.kind, TokenKind::Str | TokenKind::Identifier) {
                        return Err(self.unexpected("a map key"));
                    }
                    self.bump();
                    self.expect_punct(":")?;
                    let value = self.expr()?;
                    if entries.insert(key.text.clone(), value).is_some() {
                        return Err(Diagnostic::error(format!("duplicate map key {:?}", key.text))
                            .at(key.offset));
                    }
                    if !self.eat_punct(",") {
                        break;
                    }
                }
                self.expect_punct("}")?;
                Ok(Expr::Map(entries))
            }
            _ => Err(self.unexpected("an expression")),
        }
    }

    fn call(&mut self, name: Token) -> PResult<Expr> {
        self.expect_punct("(")?;
        let mut positional = Vec::new();
        let mut keyword: BTreeMap<String, Expr> = BTreeMap::new();
        let mut first_positional = None;
        let mut first_keyword = None;
        while !self.peek().is_punct(")") {
            let tok = self.peek().clone();
            if tok.kind == TokenKind::Identifier && self.peek_at(1).is_punct("=") {
                self.bump();
                self.bump();
                let value = self.expr()?;
                first_keyword.get_or_insert(tok.offset);
                if keyword.insert(tok.text.clone(), value).is_some() {
                    return Err(
                        Diagnostic::error(format!("duplicate argument `{}`", tok.text)).at(tok.offset)
                    );
                }
            } else {
                first_positional.get_or_insert(tok.offset);
                positional.push(self.expr()?);
            }
            if !self.eat_punct(",") {
                break;
            }
        }
        self.expect_punct(")")?;

        let fname = name.text.as_str();
        if let Some(op) = BuiltinOp::from_name(fname).filter(|op| op.is_function()) {
            if let Some(at) = first_keyword {
                return Err(Diagnostic::error(format!(
                    "`{fname}` takes positional arguments only"
                ))
                .at(at));
            }
            return Ok(Expr::builtin(op, positional));
        }
        if let Some(at) = first_positional {
            return Err(Diagnostic::error(format!(
                "positional arguments are not allowed for `{fname}`; use name=value"
            ))
            .at(at));
        }
        match RandomOp::from_name(fname) {
            Some(op) => Ok(Expr::Random {
                op,
                params: keyword,
            }),
            None if BuiltinOp::from_name(fname).is_some() => Err(Diagnostic::error(format!(
                "`{fname}` is an operator, not a function"
            ))
            .at(name.offset)),
            None => Ok(Expr::Custom {
                name: name.text,
                params: keyword,
            }),
        }
    }
}

fn number_literal(text: &str, offset: usize) -> PResult<Expr> {
    let is_float = text.contains(['.', 'e', 'E']);
    let value = if is_float {
        text.parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::Float)
    } else {
        text.parse::<i64>().ok().map(Value::Int)
    };
    value
        .map(Expr::Literal)
        .ok_or_else(|| Diagnostic::error(format!("number {text} is out of range")).at(offset))
}
