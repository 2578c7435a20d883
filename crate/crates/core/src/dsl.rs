//! A small arithmetic language for coefficient functions in scenario files.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr    := term   (('+' | '-') term)*
//! term    := unary  (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | variable | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus and is right-associative, so `-y1^2`
//! is `-(y1^2)` and `2^3^2` is `2^(3^2)`. Variables are `t`, `x1..xm`,
//! `y1..yn` and `z1..zn`; when the noise has dimension `d > 1`, `zI_J` names
//! row `I`, column `J` of `Z` (and `zI` is `zI_1`). Functions: `sin`, `cos`,
//! `exp`, `tanh`, `abs` (one argument), `min`, `max` (two).

use std::fmt;

use nalgebra::DVector;
use thiserror::Error;

/// Declared dimensions that bound variable indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n, d: 1 }
    }
}

/// Zero-based variable references.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X(usize),
    Y(usize),
    Z(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { position: usize, name: String },
    #[error("variable `{name}` at position {position} is outside the declared dimensions")]
    VariableOutOfRange { position: usize, name: String },
    #[error("`{func}` at position {position} takes {expected} argument(s), got {found}")]
    Arity {
        position: usize,
        func: &'static str,
        expected: usize,
        found: usize,
    },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { position, .. }
            | ParseError::UnknownIdentifier { position, .. }
            | ParseError::VariableOutOfRange { position, .. }
            | ParseError::Arity { position, .. } => *position,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{expr}`")]
    DivisionByZero { expr: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            let value = lexeme.parse::<f64>().map_err(|_| ParseError::Syntax {
                position: start,
                message: format!("malformed number `{lexeme}`"),
            })?;
            out.push((Tok::Num(value), start));
        } else if c.is_ascii_alphabetic() {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ParseError::Syntax {
                        position: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            out.push((tok, start));
            i += 1;
        }
    }
    out.push((Tok::End, chars.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dims: Dims,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn position(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self) -> ParseError {
        let message = match self.peek() {
            Tok::End => "unexpected end of input".to_string(),
            Tok::Num(v) => format!("unexpected number `{v}`"),
            Tok::Ident(s) => format!("unexpected identifier `{s}`"),
            Tok::Op(c) => format!("unexpected `{c}`"),
            Tok::LParen => "unexpected `(`".to_string(),
            Tok::RParen => "unexpected `)`".to_string(),
            Tok::Comma => "unexpected `,`".to_string(),
        };
        ParseError::Syntax {
            position: self.position(),
            message,
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.bump();
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let position = self.position();
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    return self.call(func, position);
                }
                self.variable(&name, position).map(Expr::Var)
            }
            _ => Err(self.unexpected()),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if *self.peek() == Tok::RParen {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected())
        }
    }

    fn call(&mut self, func: Func, position: usize) -> Result<Expr, ParseError> {
        if *self.peek() != Tok::LParen {
            return Err(ParseError::Syntax {
                position: self.position(),
                message: format!("expected `(` after `{}`", func.name()),
            });
        }
        self.bump();
        let mut args = vec![self.expr()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect_rparen()?;
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                position,
                func: func.name(),
                expected: func.arity(),
                found: args.len(),
            });
        }
        Ok(Expr::Call(func, args))
    }

    fn variable(&self, name: &str, position: usize) -> Result<Var, ParseError> {
        let unknown = || ParseError::UnknownIdentifier {
            position,
            name: name.to_string(),
        };
        let out_of_range = || ParseError::VariableOutOfRange {
            position,
            name: name.to_string(),
        };
        if name == "t" {
            return Ok(Var::T);
        }
        let (head, rest) = name.split_at(1);
        let index = |s: &str| -> Option<usize> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            s.parse::<usize>().ok()
        };
        match head {
            "x" | "y" => {
                let i = index(rest).ok_or_else(unknown)?;
                let bound = if head == "x" { self.dims.m } else { self.dims.n };
                if i == 0 || i > bound {
                    return Err(out_of_range());
                }
                Ok(if head == "x" {
                    Var::X(i - 1)
                } else {
                    Var::Y(i - 1)
                })
            }
            "z" => {
                let (row, col) = match rest.split_once('_') {
                    Some((r, c)) => (
                        index(r).ok_or_else(unknown)?,
                        index(c).ok_or_else(unknown)?,
                    ),
                    None => (index(rest).ok_or_else(unknown)?, 1),
                };
                if row == 0 || row > self.dims.n || col == 0 || col > self.dims.d {
                    return Err(out_of_range());
                }
                Ok(Var::Z(row - 1, col - 1))
            }
            _ => Err(unknown()),
        }
    }
}

/// Parses one expression against the declared dimensions.
pub fn parse_expr(text: &str, dims: Dims) -> Result<Expr, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0, dims };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected());
    }
    Ok(e)
}

/// Values for every variable an expression may reference.
///
/// `z` is row-major with `z_cols` columns.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub z_cols: usize,
}

impl<'a> Bindings<'a> {
    pub fn new(t: f64, x: &'a [f64], y: &'a [f64], z: &'a [f64]) -> Self {
        Self {
            t,
            x,
            y,
            z,
            z_cols: 1,
        }
    }
}

impl Expr {
    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::T) => b.t,
            Expr::Var(Var::X(i)) => b.x[*i],
            Expr::Var(Var::Y(i)) => b.y[*i],
            Expr::Var(Var::Z(i, j)) => b.z[i * b.z_cols + j],
            Expr::Neg(e) => -e.eval(b)?,
            Expr::Bin(op, l, r) => {
                let (lv, rv) = (l.eval(b)?, r.eval(b)?);
                match op {
                    BinOp::Add => lv + rv,
                    BinOp::Sub => lv - rv,
                    BinOp::Mul => lv * rv,
                    BinOp::Div => {
                        if rv == 0.0 {
                            return Err(EvalError::DivisionByZero {
                                expr: self.to_string(),
                            });
                        }
                        lv / rv
                    }
                    BinOp::Pow => lv.powf(rv),
                }
            }
            Expr::Call(func, args) => {
                let a = args[0].eval(b)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Tanh => a.tanh(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(b)?),
                    Func::Max => a.max(args[1].eval(b)?),
                }
            }
        })
    }

    /// Whether any `z` variable occurs in the expression.
    pub fn mentions_z(&self) -> bool {
        self.mentions(&|v| matches!(v, Var::Z(..)))
    }

    /// Whether some variable satisfying `pred` occurs in the expression.
    pub fn mentions(&self, pred: &dyn Fn(Var) -> bool) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => pred(*v),
            Expr::Neg(e) => e.mentions(pred),
            Expr::Bin(_, l, r) => l.mentions(pred) || r.mentions(pred),
            Expr::Call(_, args) => args.iter().any(|a| a.mentions(pred)),
        }
    }
}

/// Evaluates a list of component expressions into a vector.
pub fn eval_vector(exprs: &[Expr], b: &Bindings<'_>) -> Result<DVector<f64>, EvalError> {
    let values = exprs
        .iter()
        .map(|e| e.eval(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(values))
}

/// Convenience wrapper matching the operation name used in the docs.
pub fn eval_expr(e: &Expr, b: &Bindings<'_>) -> Result<f64, EvalError> {
    e.eval(b)
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Y(i) => write!(f, "y{}", i + 1),
            Var::Z(i, 0) => write!(f, "z{}", i + 1),
            Var::Z(i, j) => write!(f, "z{}_{}", i + 1, j + 1),
        }
    }
}

/// Fully parenthesised output; reparsing yields the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}
