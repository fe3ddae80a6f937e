//! The script language: lexer, recursive-descent parser and the inverse
//! pretty-printer.
//!
//! ```text
//! script     = { statement } ;
//! statement  = IDENT "=" expr ";"
//!            | "if" "(" expr ")" block { "else" "if" "(" expr ")" block } [ "else" block ]
//!            | "return" expr ";"
//!            | block ;
//! block      = "{" { statement } "}" ;
//! expr       = and { ( "||" | "or" ) and } ;
//! and        = cmp { ( "&&" | "and" ) cmp } ;
//! cmp        = sum { ( "==" | "!=" | "<" | "<=" | ">" | ">=" ) sum } ;
//! sum        = term { ( "+" | "-" ) term } ;
//! term       = unary { ( "*" | "/" | "%" ) unary } ;
//! unary      = ( "!" | "not" | "-" ) unary | postfix ;
//! postfix    = primary { "[" expr "]" } ;
//! primary    = NUMBER | STRING | "true" | "false" | "null"
//!            | IDENT [ "(" [ arg { "," arg } [","] ] ")" ]
//!            | "(" expr ")"
//!            | "[" [ expr { "," expr } [","] ] "]"
//!            | "{" [ key ":" expr { "," key ":" expr } [","] ] "}" ;
//! arg        = IDENT "=" expr | expr ;
//! key        = IDENT | STRING ;
//! ```
//!
//! Random operators and custom operators take keyword arguments only;
//! `length`, `min`, `max`, `round` and `coalesce` take positional ones.
//! Strings use single or double quotes. `#` starts a line comment.

mod lexer;
mod parser;
mod printer;

pub use lexer::{is_keyword, tokenize, Token, TokenKind, KEYWORDS};
pub use parser::parse;
pub use printer::decompile;
