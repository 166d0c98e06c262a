//! Problem files: a TOML document whose functions are written as arithmetic
//! expressions. Derivatives come from second-order forward-mode automatic
//! differentiation over the parsed expression tree.
//!
//! ```toml
//! name = "example1"
//! n = 2
//! m = 1
//! objective = "-x1 + 1.5*x2"
//! si_constraints = ["-y1^2 + 2*y1*x1 - x2"]
//! index_constraints = ["y1 - 1", "-y1 - 1"]
//! finite_constraints = []
//! x_bounds = [[-1, 1], [-1, 1]]
//! known_solution = [0.3333333333333333, 0.1111111111111111]
//! initial_point = [1, -1]
//! ```
//!
//! Expressions support `+ - * / ^`, unary minus, parentheses, the functions
//! `sin cos exp log sqrt`, the constant `pi` and the variables `x1..xn`,
//! `y1..ym`. The exponent of `^` must be a nonnegative integer literal or
//! `0.5`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::model::{Field, FieldEval, Interval, KnownSolution, ScalarField, SipProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exponent {
    Int(u32),
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    /// 0-based index into x.
    X(usize),
    /// 0-based index into y.
    Y(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Exponent),
    Call(Func, Box<Expr>),
}

/// Fully parenthesized; parsing the output gives back the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(Var::X(j)) => write!(f, "x{}", j + 1),
            Expr::Var(Var::Y(j)) => write!(f, "y{}", j + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Pow(a, Exponent::Int(k)) => write!(f, "({a} ^ {k})"),
            Expr::Pow(a, Exponent::Half) => write!(f, "({a} ^ 0.5)"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl Expr {
    pub fn visit_vars(&self, out: &mut impl FnMut(Var)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => out(*v),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.visit_vars(out),
            Expr::Bin(_, a, b) => {
                a.visit_vars(out);
                b.visit_vars(out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExprErrorKind {
    UnexpectedChar(char),
    UnexpectedToken(String),
    UnexpectedEnd,
    UnclosedParen,
    UnknownIdentifier(String),
    BadNumber(String),
    BadExponent(String),
}

/// Syntax error with a 1-based character column inside the expression.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at column {column}")]
pub struct ExprError {
    pub column: usize,
    pub kind: ExprErrorKind,
}

impl fmt::Display for ExprErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprErrorKind::UnexpectedChar(c) => write!(f, "unexpected character '{c}'"),
            ExprErrorKind::UnexpectedToken(t) => write!(f, "unexpected '{t}'"),
            ExprErrorKind::UnexpectedEnd => write!(f, "unexpected end of expression"),
            ExprErrorKind::UnclosedParen => write!(f, "unclosed '('"),
            ExprErrorKind::UnknownIdentifier(s) => write!(f, "unknown identifier '{s}'"),
            ExprErrorKind::BadNumber(s) => write!(f, "malformed number '{s}'"),
            ExprErrorKind::BadExponent(s) => {
                write!(f, "exponent '{s}' must be a nonnegative integer or 0.5")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Sym(char),
    End,
}

impl Tok {
    fn text(&self) -> String {
        match self {
            Tok::Num(_, s) | Tok::Ident(s) => s.clone(),
            Tok::Sym(c) => c.to_string(),
            Tok::End => String::new(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ExprError {
                column: col,
                kind: ExprErrorKind::BadNumber(text.clone()),
            })?;
            out.push((Tok::Num(v, text), col));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Sym(c), col));
            i += 1;
        } else {
            return Err(ExprError {
                column: col,
                kind: ExprErrorKind::UnexpectedChar(c),
            });
        }
    }
    out.push((Tok::End, chars.len() + 1));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn col(&self) -> usize {
        self.toks[self.pos].1
    }

    fn next(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self) -> ExprError {
        let kind = match self.peek() {
            Tok::End => ExprErrorKind::UnexpectedEnd,
            t => ExprErrorKind::UnexpectedToken(t.text()),
        };
        ExprError {
            column: self.col(),
            kind,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Sym('+') => BinOp::Add,
                Tok::Sym('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Sym('*') => BinOp::Mul,
                Tok::Sym('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == &Tok::Sym('-') {
            self.next();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.peek() != &Tok::Sym('^') {
            return Ok(base);
        }
        self.next();
        let col = self.col();
        let (tok, _) = self.next();
        let exp = match &tok {
            Tok::Num(v, _) if *v == 0.5 => Exponent::Half,
            Tok::Num(v, _) if *v >= 0.0 && v.fract() == 0.0 && *v <= u32::MAX as f64 => Exponent::Int(*v as u32),
            Tok::End => {
                return Err(ExprError {
                    column: col,
                    kind: ExprErrorKind::UnexpectedEnd,
                })
            }
            t => {
                return Err(ExprError {
                    column: col,
                    kind: ExprErrorKind::BadExponent(t.text()),
                })
            }
        };
        if self.peek() == &Tok::Sym('^') {
            return Err(self.unexpected());
        }
        Ok(Expr::Pow(Box::new(base), exp))
    }

    /// Parses `expr )` after an opening parenthesis at `open`.
    fn closed(&mut self, open: usize) -> Result<Expr, ExprError> {
        let unclosed = ExprError {
            column: open,
            kind: ExprErrorKind::UnclosedParen,
        };
        let inner = match self.expr() {
            Ok(e) => e,
            Err(e) if e.kind == ExprErrorKind::UnexpectedEnd => return Err(unclosed),
            Err(e) => return Err(e),
        };
        match self.peek() {
            Tok::Sym(')') => {
                self.next();
                Ok(inner)
            }
            Tok::End => Err(unclosed),
            _ => Err(self.unexpected()),
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let col = self.col();
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.next();
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.next();
                self.closed(col)
            }
            Tok::Ident(name) => {
                self.next();
                if let Some(func) = Func::from_name(&name) {
                    let open = self.col();
                    if self.peek() != &Tok::Sym('(') {
                        return Err(self.unexpected());
                    }
                    self.next();
                    return Ok(Expr::Call(func, Box::new(self.closed(open)?)));
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                parse_var(&name).map(Expr::Var).ok_or(ExprError {
                    column: col,
                    kind: ExprErrorKind::UnknownIdentifier(name),
                })
            }
            _ => Err(self.unexpected()),
        }
    }
}

fn parse_var(name: &str) -> Option<Var> {
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    match head {
        "x" => Some(Var::X(idx - 1)),
        "y" => Some(Var::Y(idx - 1)),
        _ => None,
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek() != &Tok::End {
        return Err(p.unexpected());
    }
    Ok(e)
}

/// Value, gradient and Hessian (row-major, `d x d`) carried together.
#[derive(Clone, Debug)]
struct Jet {
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Jet {
    fn constant(v: f64, d: usize) -> Self {
        Self {
            v,
            g: vec![0.0; d],
            h: vec![0.0; d * d],
        }
    }

    fn variable(v: f64, k: usize, d: usize) -> Self {
        let mut j = Self::constant(v, d);
        j.g[k] = 1.0;
        j
    }

    /// `f(self)` given `f`, `f'` and `f''` at `self.v`.
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let d = self.g.len();
        let mut h = self.h;
        for r in 0..d {
            for c in 0..d {
                h[r * d + c] = f1 * h[r * d + c] + f2 * self.g[r] * self.g[c];
            }
        }
        Self {
            v: f0,
            g: self.g.iter().map(|g| f1 * g).collect(),
            h,
        }
    }

    fn add(self, o: &Jet, sign: f64) -> Self {
        Self {
            v: self.v + sign * o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a + sign * b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a + sign * b).collect(),
        }
    }

    fn mul(&self, o: &Jet) -> Self {
        let d = self.g.len();
        let mut h = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                h[r * d + c] =
                    self.v * o.h[r * d + c] + o.v * self.h[r * d + c] + self.g[r] * o.g[c] + o.g[r] * self.g[c];
            }
        }
        Self {
            v: self.v * o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| o.v * a + self.v * b).collect(),
            h,
        }
    }
}

fn func_derivs(func: Func, u: f64) -> (f64, f64, f64) {
    match func {
        Func::Sin => (u.sin(), u.cos(), -u.sin()),
        Func::Cos => (u.cos(), -u.sin(), -u.cos()),
        Func::Exp => {
            let e = u.exp();
            (e, e, e)
        }
        Func::Log => (u.ln(), 1.0 / u, -1.0 / (u * u)),
        Func::Sqrt => {
            let s = u.sqrt();
            (s, 0.5 / s, -0.25 / (s * u))
        }
    }
}

fn pow_derivs(u: f64, k: u32) -> (f64, f64, f64) {
    let kf = k as f64;
    match k {
        0 => (1.0, 0.0, 0.0),
        1 => (u, 1.0, 0.0),
        _ => (
            u.powi(k as i32),
            kf * u.powi(k as i32 - 1),
            kf * (kf - 1.0) * u.powi(k as i32 - 2),
        ),
    }
}

/// An expression with variables resolved to positions in the field's
/// argument vector.
#[derive(Clone, Debug)]
pub struct ExprField {
    expr: Expr,
    arity: usize,
    /// Offset of `y1` in the argument vector.
    y_offset: usize,
}

impl ExprField {
    pub fn new(expr: Expr, arity: usize, y_offset: usize) -> Self {
        Self { expr, arity, y_offset }
    }

    fn slot(&self, v: Var) -> usize {
        match v {
            Var::X(j) => j,
            Var::Y(j) => self.y_offset + j,
        }
    }

    fn value_of(&self, e: &Expr, z: &[f64]) -> f64 {
        match e {
            Expr::Num(v) => *v,
            Expr::Var(v) => z[self.slot(*v)],
            Expr::Neg(a) => -self.value_of(a, z),
            Expr::Bin(op, a, b) => {
                let (a, b) = (self.value_of(a, z), self.value_of(b, z));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            Expr::Pow(a, Exponent::Int(k)) => pow_derivs(self.value_of(a, z), *k).0,
            Expr::Pow(a, Exponent::Half) => self.value_of(a, z).sqrt(),
            Expr::Call(f, a) => func_derivs(*f, self.value_of(a, z)).0,
        }
    }

    fn jet_of(&self, e: &Expr, z: &[f64]) -> Jet {
        let d = self.arity;
        match e {
            Expr::Num(v) => Jet::constant(*v, d),
            Expr::Var(v) => {
                let k = self.slot(*v);
                Jet::variable(z[k], k, d)
            }
            Expr::Neg(a) => self.jet_of(a, z).chain(-self.value_of(a, z), -1.0, 0.0),
            Expr::Bin(op, a, b) => {
                let (ja, jb) = (self.jet_of(a, z), self.jet_of(b, z));
                match op {
                    BinOp::Add => ja.add(&jb, 1.0),
                    BinOp::Sub => ja.add(&jb, -1.0),
                    BinOp::Mul => ja.mul(&jb),
                    BinOp::Div => {
                        let u = jb.v;
                        let inv = jb.chain(1.0 / u, -1.0 / (u * u), 2.0 / (u * u * u));
                        ja.mul(&inv)
                    }
                }
            }
            Expr::Pow(a, exp) => {
                let ja = self.jet_of(a, z);
                let (f0, f1, f2) = match exp {
                    Exponent::Int(k) => pow_derivs(ja.v, *k),
                    Exponent::Half => func_derivs(Func::Sqrt, ja.v),
                };
                ja.chain(f0, f1, f2)
            }
            Expr::Call(f, a) => {
                let ja = self.jet_of(a, z);
                let (f0, f1, f2) = func_derivs(*f, ja.v);
                ja.chain(f0, f1, f2)
            }
        }
    }
}

impl ScalarField for ExprField {
    fn arity(&self) -> usize {
        self.arity
    }

    fn eval(&self, point: &[f64]) -> FieldEval {
        let j = self.jet_of(&self.expr, point);
        FieldEval {
            value: j.v,
            gradient: DVector::from_vec(j.g),
            hessian: Some(DMatrix::from_row_slice(self.arity, self.arity, &j.h)),
        }
    }

    fn value(&self, point: &[f64]) -> f64 {
        self.value_of(&self.expr, point)
    }
}

/// Where an expression may refer to x and y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    X,
    Y,
    XY,
}

/// A parsed expression with its source location in the problem file.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecExpr {
    pub source: String,
    pub expr: Expr,
    pub line: usize,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpecFile {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub objective: SpecExpr,
    pub si_constraints: Vec<SpecExpr>,
    pub index_constraints: Vec<SpecExpr>,
    pub finite_constraints: Vec<SpecExpr>,
    pub x_bounds: Vec<[f64; 2]>,
    pub known_solution: Option<Vec<f64>>,
    pub initial_point: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    n: usize,
    m: usize,
    objective: toml::Spanned<String>,
    si_constraints: Vec<toml::Spanned<String>>,
    index_constraints: Vec<toml::Spanned<String>>,
    #[serde(default)]
    finite_constraints: Vec<toml::Spanned<String>>,
    x_bounds: Vec<[f64; 2]>,
    known_solution: Option<Vec<f64>>,
    initial_point: Option<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("line {line}, column {column}: {message}")]
    Format {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field} (line {line}, column {column}): {source}")]
    Syntax {
        field: String,
        line: usize,
        column: usize,
        source: ExprError,
    },
    #[error("{field} (line {line}, column {column}): {message}")]
    Dimension {
        field: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SpecError {
    /// File position of the error, when it has one.
    pub fn location(&self) -> Option<(usize, usize)> {
        match self {
            SpecError::Format { line, column, .. }
            | SpecError::Syntax { line, column, .. }
            | SpecError::Dimension { line, column, .. } => Some((*line, *column)),
            _ => None,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

fn parse_field(
    text: &str,
    field: String,
    raw: &toml::Spanned<String>,
    scope: Scope,
    n: usize,
    m: usize,
) -> Result<SpecExpr, SpecError> {
    // Column of the first character inside the quotes.
    let (line, start) = line_col(text, raw.span().start + 1);
    let source = raw.get_ref().clone();
    let expr = parse_expr(&source).map_err(|e| SpecError::Syntax {
        field: field.clone(),
        line,
        column: start + e.column - 1,
        source: e,
    })?;
    let mut bad = None;
    expr.visit_vars(&mut |v| {
        if bad.is_some() {
            return;
        }
        let msg = match v {
            Var::X(j) if scope == Scope::Y => Some(format!("x{} not allowed here", j + 1)),
            Var::Y(j) if scope == Scope::X => Some(format!("y{} not allowed here", j + 1)),
            Var::X(j) if j >= n => Some(format!("x{} out of range (n = {n})", j + 1)),
            Var::Y(j) if j >= m => Some(format!("y{} out of range (m = {m})", j + 1)),
            _ => None,
        };
        bad = msg;
    });
    if let Some(message) = bad {
        return Err(SpecError::Dimension {
            field,
            line,
            column: start,
            message,
        });
    }
    Ok(SpecExpr {
        source,
        expr,
        line,
        column: start,
    })
}

/// Parses and checks a problem file.
pub fn parse_spec(text: &str) -> Result<ProblemSpecFile, SpecError> {
    let raw: RawSpec = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        SpecError::Format {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let (n, m) = (raw.n, raw.m);
    if n == 0 || m == 0 {
        return Err(SpecError::Invalid("n and m must be positive".into()));
    }
    if raw.si_constraints.is_empty() {
        return Err(SpecError::Invalid("at least one si_constraint is required".into()));
    }
    if raw.index_constraints.is_empty() {
        return Err(SpecError::Invalid("at least one index_constraint is required".into()));
    }
    if raw.x_bounds.len() != n {
        return Err(SpecError::Invalid(format!(
            "x_bounds has {} entries, expected n = {n}",
            raw.x_bounds.len()
        )));
    }
    for (key, v) in [
        ("known_solution", &raw.known_solution),
        ("initial_point", &raw.initial_point),
    ] {
        if let Some(v) = v {
            if v.len() != n {
                return Err(SpecError::Invalid(format!(
                    "{key} has {} entries, expected n = {n}",
                    v.len()
                )));
            }
        }
    }
    let list = |key: &str, items: &[toml::Spanned<String>], scope| {
        items
            .iter()
            .enumerate()
            .map(|(k, r)| parse_field(text, format!("{key}[{k}]"), r, scope, n, m))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(ProblemSpecFile {
        objective: parse_field(text, "objective".into(), &raw.objective, Scope::X, n, m)?,
        si_constraints: list("si_constraints", &raw.si_constraints, Scope::XY)?,
        index_constraints: list("index_constraints", &raw.index_constraints, Scope::Y)?,
        finite_constraints: list("finite_constraints", &raw.finite_constraints, Scope::X)?,
        name: raw.name,
        n,
        m,
        x_bounds: raw.x_bounds,
        known_solution: raw.known_solution,
        initial_point: raw.initial_point,
    })
}

fn field(e: &SpecExpr, arity: usize, y_offset: usize) -> Field {
    Arc::new(ExprField::new(e.expr.clone(), arity, y_offset))
}

pub fn compile(spec: &ProblemSpecFile) -> Result<SipProblem, SpecError> {
    let (n, m) = (spec.n, spec.m);
    let mut x_bounds = Vec::with_capacity(n);
    for (j, &[lo, hi]) in spec.x_bounds.iter().enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(SpecError::Invalid(format!(
                "x_bounds[{j}] = [{lo}, {hi}] is not an interval"
            )));
        }
        x_bounds.push(Interval::new(lo, hi));
    }
    let objective = field(&spec.objective, n, 0);
    let known_solution = spec.known_solution.as_ref().map(|x| KnownSolution {
        objective: Some(objective.value(x)),
        point: x.clone(),
    });
    Ok(SipProblem {
        name: spec.name.clone(),
        n,
        m,
        objective,
        si_constraints: spec.si_constraints.iter().map(|e| field(e, n + m, n)).collect(),
        index_constraints: spec.index_constraints.iter().map(|e| field(e, m, 0)).collect(),
        finite_constraints: spec.finite_constraints.iter().map(|e| field(e, n, 0)).collect(),
        x_bounds,
        known_solution,
        initial_point: spec.initial_point.clone(),
    })
}

pub fn load_problem(text: &str) -> Result<SipProblem, SpecError> {
    compile(&parse_spec(text)?)
}

pub fn load_problem_file(path: &Path) -> Result<SipProblem, SpecError> {
    let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_problem(&text)
}
