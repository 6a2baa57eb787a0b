//! Scalar expressions in the spatial variables `x` and `y`.
//!
//! Expressions are parsed from infix text, evaluated in IEEE double
//! precision and differentiated symbolically. The grammar is documented in
//! `docs/expressions.md`:
//!
//! ```text
//! expr    = term , { ("+" | "-") , term } ;
//! term    = unary , { ("*" | "/") , unary } ;
//! unary   = "-" , unary | power ;
//! power   = primary , [ "^" , [ "+" | "-" ] , integer ] ;
//! primary = number | "x" | "y" | "pi" | func , "(" , expr , ")" | "(" , expr , ")" ;
//! func    = "sin" | "cos" | "exp" | "log" | "sqrt" ;
//! ```
//!
//! Nodes are reference counted and immutable, so an [`Expr`] can be cloned
//! cheaply and evaluated from many threads at once.

use std::fmt;
use std::ops;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

/// A point of the chart. One-dimensional problems leave `y = 0`.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
}

impl Var {
    fn index(self) -> usize {
        match self {
            Var::X => 0,
            Var::Y => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, i32),
    Call(Func, Expr),
}

/// Immutable expression tree.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at offset {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            ParseError::Empty => None,
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => {
                Some(*offset)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero at ({x}, {y})")]
    DivisionByZero { x: f64, y: f64 },
    #[error("{func} of {arg} is outside its real domain at ({x}, {y})")]
    Domain {
        func: &'static str,
        arg: f64,
        x: f64,
        y: f64,
    },
    #[error("non-finite value at ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
}

impl Expr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    /// True when both handles point at the same tree.
    pub fn ptr_eq(&self, other: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn wrap(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn constant(v: f64) -> Expr {
        Expr::wrap(Node::Const(v))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn var(v: Var) -> Expr {
        Expr::wrap(Node::Var(v))
    }

    pub fn x() -> Expr {
        Expr::var(Var::X)
    }

    pub fn y() -> Expr {
        Expr::var(Var::Y)
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    // Folding only fires when the folded literal is finite, so a division by
    // a literal zero stays in the tree and fails at evaluation.
    fn fold(v: f64) -> Option<Expr> {
        v.is_finite().then(|| Expr::constant(v))
    }

    pub fn neg(a: Expr) -> Expr {
        if let Some(c) = a.as_const() {
            return Expr::constant(-c);
        }
        Expr::wrap(Node::Neg(a))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if let (Some(p), Some(q)) = (a.as_const(), b.as_const()) {
            if let Some(e) = Expr::fold(p + q) {
                return e;
            }
        }
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        Expr::wrap(Node::Add(a, b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if let (Some(p), Some(q)) = (a.as_const(), b.as_const()) {
            if let Some(e) = Expr::fold(p - q) {
                return e;
            }
        }
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        Expr::wrap(Node::Sub(a, b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if let (Some(p), Some(q)) = (a.as_const(), b.as_const()) {
            if let Some(e) = Expr::fold(p * q) {
                return e;
            }
        }
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        Expr::wrap(Node::Mul(a, b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if let (Some(p), Some(q)) = (a.as_const(), b.as_const()) {
            if q != 0.0 {
                if let Some(e) = Expr::fold(p / q) {
                    return e;
                }
            }
        }
        if b.is_one() {
            return a;
        }
        if a.is_zero() && b.as_const().is_some_and(|q| q != 0.0) {
            return Expr::zero();
        }
        Expr::wrap(Node::Div(a, b))
    }

    pub fn powi(a: Expr, n: i32) -> Expr {
        if n == 1 {
            return a;
        }
        if n == 0 {
            return Expr::one();
        }
        if let Some(c) = a.as_const() {
            if c != 0.0 || n > 0 {
                if let Some(e) = Expr::fold(c.powi(n)) {
                    return e;
                }
            }
        }
        Expr::wrap(Node::Pow(a, n))
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        if let Some(c) = a.as_const() {
            let v = match f {
                Func::Sin => Some(c.sin()),
                Func::Cos => Some(c.cos()),
                Func::Exp => Some(c.exp()),
                Func::Log => (c > 0.0).then(|| c.ln()),
                Func::Sqrt => (c >= 0.0).then(|| c.sqrt()),
            };
            if let Some(e) = v.and_then(Expr::fold) {
                return e;
            }
        }
        Expr::wrap(Node::Call(f, a))
    }

    pub fn sin(self) -> Expr {
        Expr::call(Func::Sin, self)
    }

    pub fn cos(self) -> Expr {
        Expr::call(Func::Cos, self)
    }

    pub fn exp(self) -> Expr {
        Expr::call(Func::Exp, self)
    }

    pub fn ln(self) -> Expr {
        Expr::call(Func::Log, self)
    }

    pub fn sqrt(self) -> Expr {
        Expr::call(Func::Sqrt, self)
    }

    pub fn eval_at(&self, p: Point) -> Result<f64, EvalError> {
        let v = self.eval_inner(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite { x: p[0], y: p[1] })
        }
    }

    fn eval_inner(&self, p: Point) -> Result<f64, EvalError> {
        let domain = |func: &'static str, arg: f64| EvalError::Domain {
            func,
            arg,
            x: p[0],
            y: p[1],
        };
        Ok(match self.node() {
            Node::Const(c) => *c,
            Node::Var(v) => p[v.index()],
            Node::Neg(a) => -a.eval_inner(p)?,
            Node::Add(a, b) => a.eval_inner(p)? + b.eval_inner(p)?,
            Node::Sub(a, b) => a.eval_inner(p)? - b.eval_inner(p)?,
            Node::Mul(a, b) => a.eval_inner(p)? * b.eval_inner(p)?,
            Node::Div(a, b) => {
                let num = a.eval_inner(p)?;
                let den = b.eval_inner(p)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero { x: p[0], y: p[1] });
                }
                num / den
            }
            Node::Pow(a, n) => {
                let base = a.eval_inner(p)?;
                if base == 0.0 && *n < 0 {
                    return Err(EvalError::DivisionByZero { x: p[0], y: p[1] });
                }
                base.powi(*n)
            }
            Node::Call(f, a) => {
                let arg = a.eval_inner(p)?;
                match f {
                    Func::Sin => arg.sin(),
                    Func::Cos => arg.cos(),
                    Func::Exp => arg.exp(),
                    Func::Log => {
                        if arg <= 0.0 {
                            return Err(domain("log", arg));
                        }
                        arg.ln()
                    }
                    Func::Sqrt => {
                        if arg < 0.0 {
                            return Err(domain("sqrt", arg));
                        }
                        arg.sqrt()
                    }
                }
            }
        })
    }

    /// Exact partial derivative with respect to `var`.
    pub fn differentiate(&self, var: Var) -> Expr {
        match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Var(v) => {
                if *v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Neg(a) => Expr::neg(a.differentiate(var)),
            Node::Add(a, b) => Expr::add(a.differentiate(var), b.differentiate(var)),
            Node::Sub(a, b) => Expr::sub(a.differentiate(var), b.differentiate(var)),
            Node::Mul(a, b) => Expr::add(
                Expr::mul(a.differentiate(var), b.clone()),
                Expr::mul(a.clone(), b.differentiate(var)),
            ),
            Node::Div(a, b) => {
                // (a'b - ab') / b^2
                let num = Expr::sub(
                    Expr::mul(a.differentiate(var), b.clone()),
                    Expr::mul(a.clone(), b.differentiate(var)),
                );
                Expr::div(num, Expr::powi(b.clone(), 2))
            }
            Node::Pow(a, n) => Expr::mul(
                Expr::mul(Expr::constant(*n as f64), Expr::powi(a.clone(), n - 1)),
                a.differentiate(var),
            ),
            Node::Call(f, a) => {
                let inner = a.differentiate(var);
                let outer = match f {
                    Func::Sin => a.clone().cos(),
                    Func::Cos => Expr::neg(a.clone().sin()),
                    Func::Exp => a.clone().exp(),
                    Func::Log => Expr::div(Expr::one(), a.clone()),
                    Func::Sqrt => Expr::div(Expr::constant(0.5), a.clone().sqrt()),
                };
                Expr::mul(outer, inner)
            }
        }
    }

    pub fn gradient(&self) -> [Expr; 2] {
        [self.differentiate(Var::X), self.differentiate(Var::Y)]
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self.node() {
            Node::Const(_) => false,
            Node::Var(v) => *v == var,
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.depends_on(var),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Node::Var(Var::X) => f.write_str("x"),
            Node::Var(Var::Y) => f.write_str("y"),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Pow(a, n) => match a.node() {
                Node::Pow(..) => write!(f, "({a})^{n}"),
                _ => write!(f, "{a}^{n}"),
            },
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $ctor:path) => {
        impl ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $ctor(self, rhs)
            }
        }
        impl ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                $ctor(self.clone(), rhs.clone())
            }
        }
        impl ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                $ctor(self, Expr::constant(rhs))
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                $ctor(Expr::constant(self), rhs)
            }
        }
    };
}

binop!(Add, add, Expr::add);
binop!(Sub, sub, Expr::sub);
binop!(Mul, mul, Expr::mul);
binop!(Div, div, Expr::div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Expr, ParseError> {
        parse(s)
    }
}

/// Parses an infix expression.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let mut parser = Parser { src, pos: 0 };
    parser.skip_ws();
    if parser.pos == src.len() {
        return Err(ParseError::Empty);
    }
    let e = parser.expr()?;
    parser.skip_ws();
    if parser.pos != src.len() {
        return Err(parser.error("an operator or end of input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn found(&self) -> String {
        match self.src[self.pos..].chars().next() {
            Some(c) => format!("`{c}`"),
            None => "end of input".to_string(),
        }
    }

    fn error(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            expected: expected.to_string(),
            found: self.found(),
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = Expr::sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = Expr::div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            return Ok(Expr::neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        self.skip_ws();
        let start = self.pos;
        if matches!(self.peek(), Some(b'-' | b'+')) {
            self.pos += 1;
        }
        let digits = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits {
            self.pos = digits;
            return Err(self.error("an integer exponent"));
        }
        if matches!(self.peek(), Some(b'.' | b'e' | b'E')) {
            return Err(self.error("an integer exponent"));
        }
        let n: i32 = self.src[start..self.pos].parse().map_err(|_| ParseError::Syntax {
            offset: start,
            expected: "an exponent within 32-bit range".to_string(),
            found: format!("`{}`", &self.src[start..self.pos]),
        })?;
        Ok(Expr::powi(base, n))
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("`)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                while self
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
                {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                match name {
                    "x" => return Ok(Expr::x()),
                    "y" => return Ok(Expr::y()),
                    "pi" => return Ok(Expr::constant(std::f64::consts::PI)),
                    _ => {}
                }
                let Some(func) = Func::from_name(name) else {
                    return Err(ParseError::UnknownIdentifier {
                        offset: start,
                        name: name.to_string(),
                    });
                };
                if !self.eat(b'(') {
                    return Err(self.error("`(` after function name"));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("`)`"));
                }
                Ok(Expr::call(func, arg))
            }
            _ => Err(self.error("a number, variable, function or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut i = self.pos;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            let exp_digits = j;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > exp_digits {
                i = j;
            }
        }
        let text = &self.src[start..i];
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok(Expr::constant(v))
            }
            _ => Err(self.error("a finite number")),
        }
    }
}

/// A scalar field with its symbolic gradient cached.
#[derive(Debug, Clone)]
pub struct ScalarField {
    expr: Expr,
    gradient: [Expr; 2],
}

impl ScalarField {
    pub fn new(expr: Expr) -> Self {
        let gradient = expr.gradient();
        Self { expr, gradient }
    }

    pub fn parse(src: &str) -> Result<Self, ParseError> {
        parse(src).map(Self::new)
    }

    pub fn zero() -> Self {
        Self::new(Expr::zero())
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Expr::constant(c))
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn gradient_exprs(&self) -> &[Expr; 2] {
        &self.gradient
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero()
    }

    pub fn value(&self, p: Point) -> Result<f64, EvalError> {
        self.expr.eval_at(p)
    }

    pub fn gradient(&self, p: Point) -> Result<Vector2<f64>, EvalError> {
        Ok(Vector2::new(
            self.gradient[0].eval_at(p)?,
            self.gradient[1].eval_at(p)?,
        ))
    }
}

impl From<Expr> for ScalarField {
    fn from(e: Expr) -> Self {
        Self::new(e)
    }
}

/// A d×d matrix of expressions, d ∈ {1, 2}.
#[derive(Debug, Clone)]
pub struct TensorField {
    dim: usize,
    entries: Vec<Vec<Expr>>,
    symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorFieldError {
    #[error("dimension {0} is not supported (expected 1 or 2)")]
    Dimension(usize),
    #[error("expected {expected} rows of upper-triangular entries, got shape {shape:?}")]
    Shape {
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("entry ({row}, {col}): {source}")]
    Parse {
        row: usize,
        col: usize,
        source: ParseError,
    },
}

impl TensorField {
    /// Builds a symmetric field from its upper triangle; `upper[i]` holds the
    /// entries `(i, i..d)`. Mirrored entries share the same tree.
    pub fn symmetric_from_upper(upper: Vec<Vec<Expr>>) -> Result<Self, TensorFieldError> {
        let dim = upper.len();
        if !(1..=2).contains(&dim) {
            return Err(TensorFieldError::Dimension(dim));
        }
        let shape: Vec<usize> = upper.iter().map(Vec::len).collect();
        if shape.iter().enumerate().any(|(i, &n)| n != dim - i) {
            return Err(TensorFieldError::Shape {
                expected: dim,
                shape,
            });
        }
        let mut entries = vec![vec![Expr::zero(); dim]; dim];
        for (i, row) in upper.into_iter().enumerate() {
            for (off, e) in row.into_iter().enumerate() {
                let j = i + off;
                entries[j][i] = e.clone();
                entries[i][j] = e;
            }
        }
        Ok(Self {
            dim,
            entries,
            symmetric: true,
        })
    }

    pub fn parse_upper(upper: &[Vec<String>]) -> Result<Self, TensorFieldError> {
        let mut rows = Vec::with_capacity(upper.len());
        for (i, row) in upper.iter().enumerate() {
            let mut parsed = Vec::with_capacity(row.len());
            for (off, src) in row.iter().enumerate() {
                parsed.push(parse(src).map_err(|source| TensorFieldError::Parse {
                    row: i,
                    col: i + off,
                    source,
                })?);
            }
            rows.push(parsed);
        }
        Self::symmetric_from_upper(rows)
    }

    /// A general (not necessarily symmetric) field.
    pub fn from_rows(rows: Vec<Vec<Expr>>) -> Result<Self, TensorFieldError> {
        let dim = rows.len();
        if !(1..=2).contains(&dim) {
            return Err(TensorFieldError::Dimension(dim));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TensorFieldError::Shape {
                expected: dim,
                shape: rows.iter().map(Vec::len).collect(),
            });
        }
        Ok(Self {
            dim,
            entries: rows,
            symmetric: false,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar_multiple(dim, Expr::one())
    }

    pub fn zeros(dim: usize) -> Self {
        Self::scalar_multiple(dim, Expr::zero())
    }

    /// `f · I`.
    pub fn scalar_multiple(dim: usize, f: Expr) -> Self {
        let upper = (0..dim)
            .map(|i| {
                (i..dim)
                    .map(|j| if i == j { f.clone() } else { Expr::zero() })
                    .collect()
            })
            .collect();
        Self::symmetric_from_upper(upper).expect("dimension checked by caller")
    }

    /// Multiplies every entry by `c`, preserving sharing of mirrored entries.
    pub fn scaled(&self, c: f64) -> Self {
        self.map(|e| Expr::mul(Expr::constant(c), e.clone()))
    }

    pub fn map(&self, f: impl Fn(&Expr) -> Expr) -> Self {
        if self.symmetric {
            let upper = (0..self.dim)
                .map(|i| (i..self.dim).map(|j| f(&self.entries[i][j])).collect())
                .collect();
            Self::symmetric_from_upper(upper).expect("same shape")
        } else {
            Self {
                dim: self.dim,
                entries: self
                    .entries
                    .iter()
                    .map(|r| r.iter().map(&f).collect())
                    .collect(),
                symmetric: false,
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.entries[i][j]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().flatten().all(Expr::is_zero)
    }

    pub fn is_identity(&self) -> bool {
        (0..self.dim).all(|i| {
            (0..self.dim).all(|j| {
                let c = self.entries[i][j].as_const();
                c == Some(if i == j { 1.0 } else { 0.0 })
            })
        })
    }

    /// Value at `p`, zero padded to 2×2 for one-dimensional fields.
    pub fn eval(&self, p: Point) -> Result<Matrix2<f64>, EvalError> {
        let mut m = Matrix2::zeros();
        for i in 0..self.dim {
            for j in 0..self.dim {
                m[(i, j)] = if self.symmetric && j < i {
                    m[(j, i)]
                } else {
                    self.entries[i][j].eval_at(p)?
                };
            }
        }
        Ok(m)
    }
}

/// A d-vector of expressions.
#[derive(Debug, Clone)]
pub struct VectorField {
    components: Vec<Expr>,
}

impl VectorField {
    pub fn new(components: Vec<Expr>) -> Result<Self, TensorFieldError> {
        if !(1..=2).contains(&components.len()) {
            return Err(TensorFieldError::Dimension(components.len()));
        }
        Ok(Self { components })
    }

    pub fn parse(srcs: &[String]) -> Result<Self, TensorFieldError> {
        let comps = srcs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                parse(s).map_err(|source| TensorFieldError::Parse {
                    row: i,
                    col: 0,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(comps)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            components: vec![Expr::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, i: usize) -> &Expr {
        &self.components[i]
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Expr::is_zero)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|e| Expr::mul(Expr::constant(c), e.clone()))
                .collect(),
        }
    }

    pub fn eval(&self, p: Point) -> Result<Vector2<f64>, EvalError> {
        let mut v = Vector2::zeros();
        for (i, c) in self.components.iter().enumerate() {
            v[i] = c.eval_at(p)?;
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        parse(src).unwrap().eval_at([x, y]).unwrap()
    }

    #[test]
    fn basic_evaluation() {
        assert_eq!(ev("x^2 + y^2", 1.0, 2.0), 5.0);
        assert_eq!(ev("exp(x*y)", 0.0, 3.0), 1.0);
        assert_eq!(ev("sin(x)*y", PI / 2.0, 2.0), 2.0);
        assert_eq!(ev("x - x", 7.3, 0.0), 0.0);
        assert_eq!(ev("-x^2", 3.0, 0.0), -9.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("1.5e1 - 2*pi/pi", 0.0, 0.0), 13.0);
    }

    #[test]
    fn syntax_error_reports_offset() {
        let err = parse("x +* y").unwrap_err();
        assert_eq!(err.offset(), Some(3), "{err}");
        assert!(matches!(err, ParseError::Syntax { .. }));
        assert_eq!(parse("   ").unwrap_err(), ParseError::Empty);
        assert!(matches!(
            parse("x^2.5").unwrap_err(),
            ParseError::Syntax { .. }
        ));
        assert!(matches!(parse("(x + y").unwrap_err(), ParseError::Syntax { .. }));
    }

    #[test]
    fn unknown_identifier() {
        let err = parse("x + z").unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                offset: 4,
                name: "z".into()
            }
        );
        assert!(matches!(
            parse("tan(x)").unwrap_err(),
            ParseError::UnknownIdentifier { .. }
        ));
    }

    #[test]
    fn domain_errors_are_reported() {
        let e = parse("1/x").unwrap();
        assert!(matches!(
            e.eval_at([0.0, 0.0]),
            Err(EvalError::DivisionByZero { .. })
        ));
        let e = parse("log(x)").unwrap();
        assert!(matches!(e.eval_at([-1.0, 0.0]), Err(EvalError::Domain { .. })));
        let e = parse("sqrt(x - 1)").unwrap();
        assert!(matches!(e.eval_at([0.0, 0.0]), Err(EvalError::Domain { .. })));
        let e = parse("x^-2").unwrap();
        assert!(e.eval_at([0.0, 0.0]).is_err());
        // literal division by zero is not folded away
        assert!(parse("1/0").unwrap().eval_at([0.0, 0.0]).is_err());
    }

    #[test]
    fn derivative_examples() {
        let d = parse("x^2*y").unwrap().differentiate(Var::X);
        assert_eq!(d.eval_at([1.0, 3.0]).unwrap(), 6.0);
        let d = parse("exp(x*y)").unwrap().differentiate(Var::Y);
        assert_eq!(d.eval_at([1.0, 0.0]).unwrap(), 1.0);
        let d = parse("x^2*y").unwrap().differentiate(Var::Y);
        assert_eq!(d.eval_at([3.0, 5.0]).unwrap(), 9.0);
    }

    #[test]
    fn sine_derivative_matches_central_difference() {
        let e = parse("sin(x)").unwrap();
        let d = e.differentiate(Var::X);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let fd = (e.eval_at([x + delta, 0.0]).unwrap() - e.eval_at([x - delta, 0.0]).unwrap())
                / (2.0 * delta);
            worst = worst.max((fd - d.eval_at([x, 0.0]).unwrap()).abs());
        }
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn display_round_trips() {
        for src in [
            "x^2 + y^2",
            "exp(-x*y) / (1 + x^2)",
            "sqrt(2 + sin(x)) * cos(3*y) - log(1 + x^2)",
            "-0.1 * x^-3 + 1e-7",
            "(x - y)^5",
        ] {
            let e = parse(src).unwrap();
            let back = parse(&e.to_string()).unwrap();
            for p in [[0.3, 0.7], [1.1, -0.4], [-0.9, 0.2]] {
                assert_eq!(e.eval_at(p).unwrap(), back.eval_at(p).unwrap(), "{src}");
            }
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let e = parse("exp(sin(3*x*y)) / (2 + cos(x)) + sqrt(1 + y^2)").unwrap();
        let a = e.eval_at([0.123, 0.456]).unwrap();
        let b = e.clone().eval_at([0.123, 0.456]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn symmetric_tensor_shares_trees() {
        let t = TensorField::parse_upper(&[
            vec!["x".into(), "x*y".into()],
            vec!["y^2".into()],
        ])
        .unwrap();
        assert!(t.is_symmetric());
        assert!(t.entry(0, 1).ptr_eq(t.entry(1, 0)));
        let m = t.eval([2.0, 3.0]).unwrap();
        assert_eq!(m, Matrix2::new(2.0, 6.0, 6.0, 9.0));
        assert!(TensorField::parse_upper(&[vec!["x".into()], vec!["y".into()]]).is_err());
        assert!(TensorField::identity(2).is_identity());
        let s = t.scaled(2.0);
        assert!(s.entry(0, 1).ptr_eq(s.entry(1, 0)));
    }

    #[test]
    fn scalar_field_gradient_matches_central_difference() {
        let f = ScalarField::parse("exp(0.3*x) * sin(2*y) + x^3*y").unwrap();
        let delta = 1e-5;
        for p in [[0.2, 0.4], [-0.7, 1.3], [1.5, -0.2]] {
            let g = f.gradient(p).unwrap();
            let fx = (f.value([p[0] + delta, p[1]]).unwrap() - f.value([p[0] - delta, p[1]]).unwrap())
                / (2.0 * delta);
            let fy = (f.value([p[0], p[1] + delta]).unwrap() - f.value([p[0], p[1] - delta]).unwrap())
                / (2.0 * delta);
            assert!((g[0] - fx).abs() <= 1e-6 * g[0].abs().max(1.0));
            assert!((g[1] - fy).abs() <= 1e-6 * g[1].abs().max(1.0));
        }
    }

    // Random well-formed expressions for the algebraic properties below.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(Expr::constant),
            Just(Expr::x()),
            Just(Expr::y()),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
                (inner.clone(), 0i32..4).prop_map(|(a, n)| Expr::powi(a, n)),
                inner.clone().prop_map(Expr::sin),
                inner.clone().prop_map(Expr::cos),
                inner.clone().prop_map(|a| (a * 0.3).exp()),
                inner.prop_map(|a| (Expr::powi(a, 2) + 1.0).ln()),
            ]
        })
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn mixed_partials_commute(e in arb_expr(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let dxy = e.differentiate(Var::X).differentiate(Var::Y).eval_at([x, y]);
            let dyx = e.differentiate(Var::Y).differentiate(Var::X).eval_at([x, y]);
            if let (Ok(a), Ok(b)) = (dxy, dyx) {
                prop_assert!(close(a, b, 1e-10), "{a} vs {b} for {e}");
            }
        }

        #[test]
        fn derivative_is_linear(e1 in arb_expr(), e2 in arb_expr(), a in -2.0f64..2.0, b in -2.0f64..2.0,
                                x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let combo = (a * e1.clone()) + (b * e2.clone());
            let lhs = combo.differentiate(Var::X).eval_at([x, y]);
            let d1 = e1.differentiate(Var::X).eval_at([x, y]);
            let d2 = e2.differentiate(Var::X).eval_at([x, y]);
            if let (Ok(l), Ok(d1), Ok(d2)) = (lhs, d1, d2) {
                prop_assert!(close(l, a * d1 + b * d2, 1e-12));
            }
        }

        #[test]
        fn product_rule(e1 in arb_expr(), e2 in arb_expr(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let p = [x, y];
            let lhs = (e1.clone() * e2.clone()).differentiate(Var::Y).eval_at(p);
            let parts = (
                e1.differentiate(Var::Y).eval_at(p),
                e2.eval_at(p),
                e1.eval_at(p),
                e2.differentiate(Var::Y).eval_at(p),
            );
            if let (Ok(l), (Ok(d1), Ok(v2), Ok(v1), Ok(d2))) = (lhs, parts) {
                prop_assert!(close(l, d1 * v2 + v1 * d2, 1e-10));
            }
        }

        #[test]
        fn print_parse_round_trip(e in arb_expr(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let back = parse(&e.to_string()).unwrap();
            match (e.eval_at([x, y]), back.eval_at([x, y])) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "mismatch {:?}", other),
            }
        }

        #[test]
        fn parser_is_total(s in "[xy0-9 .eE+*/^()sincoexplqrtp-]{0,24}") {
            match parse(&s) {
                Ok(_) | Err(ParseError::Empty) => {}
                Err(err) => prop_assert!(err.offset().unwrap() <= s.len()),
            }
        }
    }

    #[test]
    fn parser_survives_ten_thousand_fuzzed_inputs() {
        let alphabet: Vec<char> = "xy0123456789 .eE+-*/^()sincoexplqrtz_,".chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..10_000 {
            let len = rng.random_range(0..20);
            let s: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let _ = parse(&s);
        }
    }
}
