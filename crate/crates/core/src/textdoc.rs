//! Tokenizer and cursor shared by the block-structured text formats
//! (system configs and campaign plan files).
//!
//! The grammar family is deliberately small: identifiers, double-quoted
//! strings, integer and decimal numbers, and the punctuation `{ } [ ] = ,`.
//! `#` starts a comment that runs to end of line. Every token carries the
//! 1-based line and column where it starts so parsers can report precise
//! positions.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl ParseError {
    pub fn new(line: u32, col: u32, message: impl Into<String>) -> Self {
        ParseError {
            line,
            col,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Ident(String),
    Str(String),
    Int(u64),
    Float(f64),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Eq,
    Comma,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Str(s) => format!("string \"{s}\""),
            Token::Int(n) => format!("number {n}"),
            Token::Float(x) => format!("number {x}"),
            Token::LBrace => "`{`".into(),
            Token::RBrace => "`}`".into(),
            Token::LBracket => "`[`".into(),
            Token::RBracket => "`]`".into(),
            Token::Eq => "`=`".into(),
            Token::Comma => "`,`".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub token: Token,
    pub line: u32,
    pub col: u32,
}

pub fn tokenize(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = text.chars().peekable();

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if let Some(ch) = c {
                if ch == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '{' | '}' | '[' | ']' | '=' | ',' => {
                bump!();
                let token = match c {
                    '{' => Token::LBrace,
                    '}' => Token::RBrace,
                    '[' => Token::LBracket,
                    ']' => Token::RBracket,
                    '=' => Token::Eq,
                    _ => Token::Comma,
                };
                out.push(Spanned {
                    token,
                    line: tline,
                    col: tcol,
                });
            }
            '"' => {
                bump!();
                let mut s = String::new();
                loop {
                    match chars.peek() {
                        None => {
                            return Err(ParseError::new(tline, tcol, "unterminated string"));
                        }
                        Some('\n') => {
                            return Err(ParseError::new(tline, tcol, "unterminated string"));
                        }
                        Some('"') => {
                            bump!();
                            break;
                        }
                        Some(&c) => {
                            s.push(c);
                            bump!();
                        }
                    }
                }
                out.push(Spanned {
                    token: Token::Str(s),
                    line: tline,
                    col: tcol,
                });
            }
            c if c.is_ascii_digit() => {
                let mut raw = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                        raw.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                let token = scan_number(&raw)
                    .ok_or_else(|| ParseError::new(tline, tcol, format!("bad number `{raw}`")))?;
                out.push(Spanned {
                    token,
                    line: tline,
                    col: tcol,
                });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        s.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    token: Token::Ident(s),
                    line: tline,
                    col: tcol,
                });
            }
            c => {
                return Err(ParseError::new(
                    tline,
                    tcol,
                    format!("unexpected character `{c}`"),
                ));
            }
        }
    }
    Ok(out)
}

fn scan_number(raw: &str) -> Option<Token> {
    let clean: String = raw.chars().filter(|&c| c != '_').collect();
    if let Some(hex) = clean.strip_prefix("0x").or_else(|| clean.strip_prefix("0X")) {
        if hex.is_empty() {
            return None;
        }
        return u64::from_str_radix(hex, 16).ok().map(Token::Int);
    }
    if clean.contains('.') {
        return clean.parse::<f64>().ok().map(Token::Float);
    }
    clean.parse::<u64>().ok().map(Token::Int)
}

/// Token stream with lookahead and error helpers for recursive-descent
/// parsers.
pub struct Cursor {
    tokens: Vec<Spanned>,
    pos: usize,
    end_line: u32,
    end_col: u32,
}

impl Cursor {
    pub fn new(text: &str) -> Result<Self, ParseError> {
        let tokens = tokenize(text)?;
        let (end_line, end_col) = match tokens.last() {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        };
        Ok(Cursor {
            tokens,
            pos: 0,
            end_line,
            end_col,
        })
    }

    pub fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|s| &s.token)
    }

    pub fn advance(&mut self) -> Option<Spanned> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    /// Position of the next token, or of the last token when exhausted.
    pub fn here(&self) -> (u32, u32) {
        match self.tokens.get(self.pos) {
            Some(t) => (t.line, t.col),
            None => (self.end_line, self.end_col),
        }
    }

    pub fn error(&self, message: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError::new(line, col, message)
    }

    pub fn expect(&mut self, want: &Token, what: &str) -> Result<(), ParseError> {
        match self.advance() {
            Some(s) if s.token == *want => Ok(()),
            Some(s) => Err(ParseError::new(
                s.line,
                s.col,
                format!("expected {what}, found {}", s.token.describe()),
            )),
            None => Err(ParseError::new(
                self.end_line,
                self.end_col,
                format!("expected {what}, found end of input"),
            )),
        }
    }

    pub fn expect_ident(&mut self, what: &str) -> Result<(String, u32, u32), ParseError> {
        match self.advance() {
            Some(Spanned {
                token: Token::Ident(s),
                line,
                col,
            }) => Ok((s, line, col)),
            Some(s) => Err(ParseError::new(
                s.line,
                s.col,
                format!("expected {what}, found {}", s.token.describe()),
            )),
            None => Err(ParseError::new(
                self.end_line,
                self.end_col,
                format!("expected {what}, found end of input"),
            )),
        }
    }

    pub fn expect_string(&mut self, what: &str) -> Result<String, ParseError> {
        match self.advance() {
            Some(Spanned {
                token: Token::Str(s),
                ..
            }) => Ok(s),
            Some(s) => Err(ParseError::new(
                s.line,
                s.col,
                format!("expected {what}, found {}", s.token.describe()),
            )),
            None => Err(ParseError::new(
                self.end_line,
                self.end_col,
                format!("expected {what}, found end of input"),
            )),
        }
    }

    pub fn expect_int(&mut self, what: &str) -> Result<(u64, u32, u32), ParseError> {
        match self.advance() {
            Some(Spanned {
                token: Token::Int(n),
                line,
                col,
            }) => Ok((n, line, col)),
            Some(s) => Err(ParseError::new(
                s.line,
                s.col,
                format!("expected {what}, found {}", s.token.describe()),
            )),
            None => Err(ParseError::new(
                self.end_line,
                self.end_col,
                format!("expected {what}, found end of input"),
            )),
        }
    }

    /// Accepts either an integer or a decimal literal.
    pub fn expect_number(&mut self, what: &str) -> Result<f64, ParseError> {
        match self.advance() {
            Some(Spanned {
                token: Token::Int(n),
                ..
            }) => Ok(n as f64),
            Some(Spanned {
                token: Token::Float(x),
                ..
            }) => Ok(x),
            Some(s) => Err(ParseError::new(
                s.line,
                s.col,
                format!("expected {what}, found {}", s.token.describe()),
            )),
            None => Err(ParseError::new(
                self.end_line,
                self.end_col,
                format!("expected {what}, found end of input"),
            )),
        }
    }

    /// Parses `[ item, item, ... ]` of integers; the surrounding `=` must
    /// already be consumed. Trailing commas are allowed.
    pub fn expect_int_list(&mut self, what: &str) -> Result<Vec<(u64, u32, u32)>, ParseError> {
        self.expect(&Token::LBracket, "`[`")?;
        let mut items = Vec::new();
        loop {
            match self.peek() {
                Some(Token::RBracket) => {
                    self.advance();
                    break;
                }
                Some(Token::Int(_)) => {
                    items.push(self.expect_int(what)?);
                    match self.peek() {
                        Some(Token::Comma) => {
                            self.advance();
                        }
                        Some(Token::RBracket) => {}
                        _ => return Err(self.error("expected `,` or `]`")),
                    }
                }
                _ => return Err(self.error(format!("expected {what} or `]`"))),
            }
        }
        Ok(items)
    }

    /// Parses `[ ident, ident, ... ]`; the surrounding `=` must already be
    /// consumed.
    pub fn expect_ident_list(&mut self, what: &str) -> Result<Vec<(String, u32, u32)>, ParseError> {
        self.expect(&Token::LBracket, "`[`")?;
        let mut items = Vec::new();
        loop {
            match self.peek() {
                Some(Token::RBracket) => {
                    self.advance();
                    break;
                }
                Some(Token::Ident(_)) => {
                    items.push(self.expect_ident(what)?);
                    match self.peek() {
                        Some(Token::Comma) => {
                            self.advance();
                        }
                        Some(Token::RBracket) => {}
                        _ => return Err(self.error("expected `,` or `]`")),
                    }
                }
                _ => return Err(self.error(format!("expected {what} or `]`"))),
            }
        }
        Ok(items)
    }
}
