//! Text front end: polynomial expressions and JSON system files.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary ('*' unary)*
//! unary   := ('-' | '+') unary | power
//! power   := atom ('^' integer)?
//! atom    := number | identifier | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus, so `-z^2` is `-(z^2)`. Juxtaposition is
//! not multiplication.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{PolyError, Polynomial, VarSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unexpected character '{found}' at column {pos}")]
    Lex { pos: usize, found: char },
    #[error("unexpected {found} at column {pos}, expected {expected}")]
    Syntax {
        pos: usize,
        found: String,
        expected: &'static str,
    },
    #[error("unknown identifier `{name}` at column {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("exponent at column {pos} must be a non-negative integer, got `{text}`")]
    BadExponent { pos: usize, text: String },
    #[error("division at column {pos} does not yield a polynomial")]
    Division { pos: usize },
    #[error("invalid number `{text}` at column {pos}")]
    BadNumber { pos: usize, text: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(String),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
    Slash,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(s) => format!("number `{s}`"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Slash => "'/'".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        let tok = match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '/' => Tok::Slash,
            c if c.is_ascii_digit() || c == '.' => {
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                // optional exponent part, only when followed by digits
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                out.push((start, Tok::Num(chars[start..i].iter().collect())));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(chars[start..i].iter().collect())));
                continue;
            }
            other => return Err(ParseError::Lex { pos: i, found: other }),
        };
        out.push((start, tok));
        i += 1;
    }
    out.push((chars.len(), Tok::End));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    at: usize,
    vars: &'a VarSet,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> (usize, Tok) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        match self.peek() {
            Tok::Slash => ParseError::Division { pos: self.pos() },
            t => ParseError::Syntax {
                pos: self.pos(),
                found: t.describe(),
                expected,
            },
        }
    }

    fn expr(&mut self) -> Result<Polynomial, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    acc = &acc + &self.term()?;
                }
                Tok::Minus => {
                    self.bump();
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Polynomial, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    acc = &acc * &self.unary()?;
                }
                Tok::Slash => return Err(ParseError::Division { pos: self.pos() }),
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Polynomial, ParseError> {
        match self.peek() {
            Tok::Minus => {
                self.bump();
                Ok(-&self.unary()?)
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(text) => {
                self.bump();
                text.parse::<u32>()
                    .map(|e| base.pow(e))
                    .map_err(|_| ParseError::BadExponent { pos, text })
            }
            Tok::Minus => {
                self.bump();
                let rest = match self.peek() {
                    Tok::Num(s) => s.clone(),
                    _ => String::new(),
                };
                Err(ParseError::BadExponent {
                    pos,
                    text: format!("-{rest}"),
                })
            }
            _ => Err(self.unexpected("an integer exponent")),
        }
    }

    fn atom(&mut self) -> Result<Polynomial, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(text) => {
                self.bump();
                let v: f64 = text
                    .parse()
                    .map_err(|_| ParseError::BadNumber { pos, text: text.clone() })?;
                Ok(Polynomial::constant(self.vars, v))
            }
            Tok::Ident(name) => {
                self.bump();
                Polynomial::var(self.vars, &name)
                    .map_err(|_| ParseError::UnknownIdentifier { pos, name })
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return Err(self.unexpected("')'"));
                }
                self.bump();
                Ok(inner)
            }
            _ => Err(self.unexpected("a number, identifier or '('")),
        }
    }
}

/// Parses and fully expands a polynomial expression over `vars`.
pub fn parse_polynomial(text: &str, vars: &VarSet) -> Result<Polynomial, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0, vars };
    let out = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected("an operator or end of input"));
    }
    Ok(out)
}

/// Name of the current-state variable `i` (0-based) in system files.
pub fn state_var(i: usize) -> String {
    format!("z{}", i + 1)
}

/// Name of the held-sample variable `i` (0-based) in system files.
pub fn sample_var(i: usize) -> String {
    format!("xk{}", i + 1)
}

/// A sampled-data system `dz/dt = f(z, xk)` with `xk` held between samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemDef {
    pub name: String,
    /// Variables `z1..zn, xk1..xkn`.
    pub vars: VarSet,
    pub dynamics: Vec<Polynomial>,
}

impl SystemDef {
    pub fn dim(&self) -> usize {
        self.dynamics.len()
    }

    /// The variable set `z1..zn, xk1..xkn` for an `n`-dimensional system.
    pub fn varset_for(n: usize) -> VarSet {
        VarSet::new((0..n).map(state_var).chain((0..n).map(sample_var)))
            .expect("generated names are distinct")
    }

    /// Builds a system from expression strings.
    pub fn from_strings<S: AsRef<str>>(name: &str, dynamics: &[S]) -> Result<Self, SystemError> {
        if dynamics.is_empty() {
            return Err(SystemError::Empty);
        }
        let vars = Self::varset_for(dynamics.len());
        let dynamics = dynamics
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parse_polynomial(s.as_ref(), &vars).map_err(|source| SystemError::Dynamics {
                    index: i,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SystemDef {
            name: name.to_string(),
            vars,
            dynamics,
        })
    }

    /// Evaluates `f(z, xk)` into `out`.
    pub fn eval_into(&self, z: &[f64], xk: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut pt = Vec::with_capacity(2 * n);
        pt.extend_from_slice(z);
        pt.extend_from_slice(xk);
        for (o, f) in out.iter_mut().zip(&self.dynamics) {
            *o = f.eval_slice(&pt);
        }
    }

    /// File representation, with each right-hand side in canonical text.
    pub fn to_file(&self) -> SystemFile {
        SystemFile {
            name: Some(self.name.clone()),
            n: Some(self.dim()),
            dynamics: Some(self.dynamics.iter().map(|p| p.to_string()).collect()),
        }
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("cannot read system file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed system JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `n` is {declared} but `dynamics` has {found} entries")]
    DimensionMismatch { declared: usize, found: usize },
    #[error("system must have at least one state")]
    Empty,
    #[error("dynamics[{index}]: {source}")]
    Dynamics { index: usize, source: ParseError },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// On-disk system description: `{ "name": .., "n": .., "dynamics": [..] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub name: Option<String>,
    pub n: Option<usize>,
    pub dynamics: Option<Vec<String>>,
}

impl SystemFile {
    pub fn into_system(self) -> Result<SystemDef, SystemError> {
        let name = self.name.ok_or(SystemError::MissingField("name"))?;
        let n = self.n.ok_or(SystemError::MissingField("n"))?;
        let dynamics = self.dynamics.ok_or(SystemError::MissingField("dynamics"))?;
        if n != dynamics.len() {
            return Err(SystemError::DimensionMismatch {
                declared: n,
                found: dynamics.len(),
            });
        }
        SystemDef::from_strings(&name, &dynamics)
    }
}

pub fn parse_system_str(json: &str) -> Result<SystemDef, SystemError> {
    let file: SystemFile = serde_json::from_str(json)?;
    file.into_system()
}

/// Loads and validates a JSON system file.
pub fn parse_system(path: impl AsRef<Path>) -> Result<SystemDef, SystemError> {
    let text = std::fs::read_to_string(path)?;
    parse_system_str(&text)
}
