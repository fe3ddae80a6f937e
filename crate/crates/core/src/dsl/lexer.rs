use crate::diagnostic::Diagnostic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Number,
    Str,
    Punct,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Source text of the token, quotes included for strings.
    pub lexeme: String,
    /// Decoded content for strings; same as `lexeme` otherwise.
    pub text: String,
    pub offset: usize,
}

impl Token {
    pub fn is(&self, kind: TokenKind, text: &str) -> bool {
        self.kind == kind && self.lexeme == text
    }

    pub fn is_punct(&self, text: &str) -> bool {
        self.is(TokenKind::Punct, text)
    }

    pub fn is_keyword(&self, text: &str) -> bool {
        self.is(TokenKind::Keyword, text)
    }
}

pub const KEYWORDS: &[&str] = &[
    "if", "else", "and", "or", "not", "true", "false", "null", "return",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

// Longest first so `==` wins over `=`.
const PUNCT: &[&str] = &[
    "==", "!=", "<=", ">=", "&&", "||", "(", ")", "[", "]", "{", "}", ",", ";", ":", "=", "<",
    ">", "+", "-", "*", "/", "%", "!",
];

/// Splits source text into tokens, ending with a single `Eof` token.
pub fn tokenize(src: &str) -> Result<Vec<Token>, Diagnostic> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;

    while pos < bytes.len() {
        let c = bytes[pos];
        if c.is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        if c == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        if c.is_ascii_alphabetic() || c == b'_' {
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            let word = &src[start..pos];
            let kind = if is_keyword(word) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            };
            tokens.push(simple(kind, word, start));
        } else if c.is_ascii_digit() {
            pos = scan_number(bytes, pos)
                .map_err(|at| Diagnostic::error("malformed number literal").at(at))?;
            tokens.push(simple(TokenKind::Number, &src[start..pos], start));
        } else if c == b'"' || c == b'\'' {
            let (text, end) = scan_string(src, pos)?;
            tokens.push(Token {
                kind: TokenKind::Str,
                lexeme: src[start..end].to_string(),
                text,
                offset: start,
            });
            pos = end;
        } else if let Some(p) = PUNCT.iter().find(|p| src[pos..].starts_with(**p)) {
            pos += p.len();
            tokens.push(simple(TokenKind::Punct, p, start));
        } else {
            let ch = src[pos..].chars().next().unwrap_or('?');
            return Err(Diagnostic::error(format!("unexpected character {ch:?}")).at(pos));
        }
    }
    tokens.push(simple(TokenKind::Eof, "", src.len()));
    Ok(tokens)
}

fn simple(kind: TokenKind, s: &str, offset: usize) -> Token {
    Token {
        kind,
        lexeme: s.to_string(),
        text: s.to_string(),
        offset,
    }
}

/// `digits ('.' digits)? ([eE] [+-]? digits)?`; returns the end offset or
/// the offset of the first bad byte.
fn scan_number(bytes: &[u8], mut pos: usize) -> Result<usize, usize> {
    let digits = |pos: &mut usize| {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        *pos > start
    };
    digits(&mut pos);
    if pos < bytes.len() && bytes[pos] == b'.' {
        pos += 1;
        if !digits(&mut pos) {
            return Err(pos);
        }
    }
    if pos < bytes.len() && (bytes[pos] == b'e' || bytes[pos] == b'E') {
        pos += 1;
        if pos < bytes.len() && (bytes[pos] == b'+' || bytes[pos] == b'-') {
            pos += 1;
        }
        if !digits(&mut pos) {
            return Err(pos);
        }
    }
    if pos < bytes.len() && (bytes[pos].is_ascii_alphabetic() || bytes[pos] == b'_') {
        return Err(pos);
    }
    Ok(pos)
}

fn scan_string(src: &str, start: usize) -> Result<(String, usize), Diagnostic> {
    let quote = src.as_bytes()[start] as char;
    let mut out = String::new();
    let mut chars = src[start + 1..].char_indices();
    while let Some((i, c)) = chars.next() {
        let at = start + 1 + i;
        match c {
            c if c == quote => return Ok((out, at + 1)),
            '\\' => {
                let Some((_, esc)) = chars.next() else {
                    break;
                };
                match esc {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    '0' => out.push('\0'),
                    '\\' | '\'' | '"' => out.push(esc),
                    'u' => {
                        let rest = &src[at + 2..];
                        let close = rest.find('}').filter(|_| rest.starts_with('{'));
                        let ch = close
                            .and_then(|end| u32::from_str_radix(&rest[1..end], 16).ok())
                            .and_then(char::from_u32)
                            .ok_or_else(|| Diagnostic::error("invalid \\u{...} escape").at(at))?;
                        out.push(ch);
                        let skip = rest[..=close.unwrap()].chars().count();
                        for _ in 0..skip {
                            chars.next();
                        }
                    }
                    other => {
                        return Err(
                            Diagnostic::error(format!("unknown escape sequence \\{other}")).at(at)
                        )
                    }
                }
            }
            _ => out.push(c),
        }
    }
    Err(Diagnostic::error("unterminated string literal").at(start))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src)
            .unwrap()
            .into_iter()
            .map(|t| (t.kind, t.text))
            .collect()
    }

    #[test]
    fn basic_statement() {
        use TokenKind::*;
        assert_eq!(
            kinds("x = a[0] == 'US'; # trailing"),
            vec![
                (Identifier, "x".into()),
                (Punct, "=".into()),
                (Identifier, "a".into()),
                (Punct, "[".into()),
                (Number, "0".into()),
                (Punct, "]".into()),
                (Punct, "==".into()),
                (Str, "US".into()),
                (Punct, ";".into()),
                (Eof, "".into()),
            ]
        );
    }

    #[test]
    fn hash_inside_string_is_not_a_comment() {
        let toks = tokenize("c = '#3c539a';").unwrap();
        assert_eq!(toks[2].text, "#3c539a");
    }

    #[test]
    fn string_escapes() {
        let toks = tokenize(r#""I'm \"a\" voter\n\u{e9}""#).unwrap();
        assert_eq!(toks[0].text, "I'm \"a\" voter\né");
    }

    #[test]
    fn numbers() {
        for n in ["0", "42", "0.5", "1e-7", "2.5E+10"] {
            let toks = tokenize(n).unwrap();
            assert_eq!(toks[0].kind, TokenKind::Number);
            assert_eq!(toks[0].lexeme, n);
        }
        assert_eq!(tokenize("1.").unwrap_err().offset, Some(2));
        assert_eq!(tokenize("12abc").unwrap_err().offset, Some(2));
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(tokenize("x = 'abc").unwrap_err().offset, Some(4));
        assert_eq!(tokenize("x = @;").unwrap_err().offset, Some(4));
    }

    #[test]
    fn offsets_are_monotone() {
        let toks = tokenize(crate::corpus::SOCIAL_CUES.source).unwrap();
        assert!(toks.windows(2).all(|w| w[0].offset <= w[1].offset));
        // Every non-EOF token consumes at least one byte.
        assert!(toks[..toks.len() - 1].iter().all(|t| !t.lexeme.is_empty()));
    }
}
