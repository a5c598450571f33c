//! A small expression language for boundary data and mean-curvature fields.
//!
//! Grammar (whitespace insignificant, no implicit multiplication):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | atom ('^' uint)?
//! atom   := number | ident | '(' expr ')' | func '(' expr ')'
//! func   := sin | cos | exp | sqrt | atan
//! ident  := x1 ... x9 | t
//! ```
//!
//! Expressions evaluate over plain floats, over [`Jet`]s (for tangential
//! Taylor data at a base point), and over `t`-Taylor stacks of jets. The
//! elementary functions act on jets and series by Taylor composition around
//! the base value, which is exact on the retained truncation orders.

use crate::error::{CmcError, Result};
use crate::jet::Jet;
use crate::series::LogSeries;
use std::fmt;

/// Variables: tangential coordinates `x1..x9` and the height coordinate `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Tangential coordinate `x{k}` with `k` in `1..=9` (1-based).
    X(u8),
    /// The height coordinate.
    T,
}

/// Binary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementary functions available in the language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Atan,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Atan => "atan",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            "atan" => Some(Func::Atan),
            _ => None,
        }
    }
}

/// Abstract syntax tree of an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Numeric literal (nonnegative in parsed trees; negatives come from
    /// [`Expr::Neg`]).
    Num(f64),
    /// Variable reference.
    Var(Var),
    /// Unary minus.
    Neg(Box<Expr>),
    /// Binary operation.
    Bin(BinOp, Box<Expr>, Box<Expr>),
    /// Integer power.
    Pow(Box<Expr>, u32),
    /// Elementary function application.
    Func(Func, Box<Expr>),
}

impl Expr {
    /// Literal constant; negative values become `Neg` of the magnitude so the
    /// tree stays canonical (printable and reparseable to an equal tree).
    pub fn num(v: f64) -> Expr {
        assert!(v.is_finite(), "expression literals must be finite, got {v}");
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-v)))
        } else {
            Expr::Num(v)
        }
    }

    /// Tangential variable `x{k}` (1-based, `1..=9`).
    pub fn x(k: u8) -> Expr {
        assert!((1..=9).contains(&k), "tangential variables are x1..x9");
        Expr::Var(Var::X(k))
    }

    /// The height variable `t`.
    pub fn t() -> Expr {
        Expr::Var(Var::T)
    }

    /// Integer power.
    pub fn pow(self, k: u32) -> Expr {
        Expr::Pow(Box::new(self), k)
    }

    /// Apply an elementary function.
    pub fn apply(self, f: Func) -> Expr {
        Expr::Func(f, Box::new(self))
    }

    /// Square root (convenience for [`Expr::apply`]).
    pub fn sqrt(self) -> Expr {
        self.apply(Func::Sqrt)
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Add, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Sub, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Mul, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Bin(BinOp::Div, Box::new(self), Box::new(rhs))
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

/// Binding strength used to decide parenthesization when printing.
fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, _, _) => 0,
        Expr::Bin(BinOp::Mul | BinOp::Div, _, _) => 1,
        Expr::Neg(_) => 2,
        Expr::Num(v) if *v < 0.0 => 2, // prints with a leading '-'
        Expr::Pow(_, _) => 3,
        Expr::Num(_) | Expr::Var(_) | Expr::Func(_, _) => 4,
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    let prec = precedence(e);
    let parens = prec < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Num(v) => write!(f, "{v:?}")?,
        Expr::Var(Var::X(k)) => write!(f, "x{k}")?,
        Expr::Var(Var::T) => write!(f, "t")?,
        Expr::Neg(inner) => {
            write!(f, "-")?;
            write_expr(f, inner, 3)?;
        }
        Expr::Bin(op, a, b) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 0, 0),
                // '-' and '/' are left-associative: the right operand must
                // bind strictly tighter to survive a round-trip.
                BinOp::Sub => ("-", 0, 1),
                BinOp::Mul => ("*", 1, 1),
                BinOp::Div => ("/", 1, 2),
            };
            write_expr(f, a, lp)?;
            write!(f, " {sym} ")?;
            write_expr(f, b, rp)?;
        }
        Expr::Pow(base, k) => {
            write_expr(f, base, 4)?;
            write!(f, "^{k}")?;
        }
        Expr::Func(func, arg) => {
            write!(f, "{}(", func.name())?;
            write_expr(f, arg, 0)?;
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self, 0)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(Tok, usize)>> {
        let mut lx = Lexer { src: src.as_bytes(), pos: 0 };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            let start = lx.pos;
            let tok = lx.next_token()?;
            let done = tok == Tok::Eof;
            out.push((tok, start));
            if done {
                return Ok(out);
            }
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next_token(&mut self) -> Result<Tok> {
        if self.pos >= self.src.len() {
            return Ok(Tok::Eof);
        }
        let start = self.pos;
        let b = self.src[self.pos];
        let simple = match b {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(tok) = simple {
            self.pos += 1;
            return Ok(tok);
        }
        if b.is_ascii_digit() {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos] == b'.' {
                self.pos += 1;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
            if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
                let mark = self.pos;
                self.pos += 1;
                if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-') {
                    self.pos += 1;
                }
                if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                } else {
                    // Not an exponent after all (e.g. "2e" followed by junk).
                    self.pos = mark;
                }
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
            let value: f64 = text.parse().map_err(|_| CmcError::Parse {
                offset: start,
                message: format!("invalid numeric literal '{text}'"),
            })?;
            return Ok(Tok::Num(value));
        }
        if b.is_ascii_alphabetic() {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii ident");
            return Ok(Tok::Ident(text.to_string()));
        }
        Err(CmcError::Parse {
            offset: start,
            message: format!("unexpected character '{}'", char::from(b)),
        })
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let tok = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        tok
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut acc = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(acc),
            };
            self.bump();
            let rhs = self.term()?;
            acc = Expr::Bin(op, Box::new(acc), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(acc),
            };
            self.bump();
            let rhs = self.factor()?;
            acc = Expr::Bin(op, Box::new(acc), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let atom = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let off = self.offset();
            match self.bump() {
                Tok::Num(v) if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) => {
                    Ok(Expr::Pow(Box::new(atom), v as u32))
                }
                _ => Err(CmcError::Parse {
                    offset: off,
                    message: "exponent must be a nonnegative integer literal".to_string(),
                }),
            }
        } else {
            Ok(atom)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let off = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    let o = self.offset();
                    if self.bump() != Tok::LParen {
                        return Err(CmcError::Parse {
                            offset: o,
                            message: format!("expected '(' after function '{name}'"),
                        });
                    }
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Func(func, Box::new(arg)));
                }
                if name == "t" {
                    return Ok(Expr::Var(Var::T));
                }
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(k) = rest.parse::<u8>() {
                        if (1..=9).contains(&k) {
                            return Ok(Expr::Var(Var::X(k)));
                        }
                    }
                }
                Err(CmcError::Parse {
                    offset: off,
                    message: format!(
                        "unknown identifier '{name}' (expected x1..x9, t, or a function name)"
                    ),
                })
            }
            tok => Err(CmcError::Parse {
                offset: off,
                message: format!("unexpected token {tok:?}"),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        let off = self.offset();
        if self.bump() == Tok::RParen {
            Ok(())
        } else {
            Err(CmcError::Parse { offset: off, message: "expected ')'".to_string() })
        }
    }
}

/// Parse an expression from source text. Errors carry the byte offset of the
/// offending token.
pub fn parse_expr(src: &str) -> Result<Expr> {
    let toks = Lexer::tokens(src)?;
    let mut parser = Parser { toks, pos: 0 };
    let expr = parser.expr()?;
    if *parser.peek() != Tok::Eof {
        return Err(CmcError::Parse {
            offset: parser.offset(),
            message: format!(
                "unexpected trailing token {:?} (note: implicit multiplication is not supported)",
                parser.peek()
            ),
        });
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Rings an expression can be evaluated in: floats, jets, and jet-coefficient
/// `t`-series. Elementary functions are applied by Taylor composition around
/// [`AnalyticRing::base_value`], using [`AnalyticRing::taylor_terms`] terms
/// (one more than the nilpotency degree of `self - base`).
pub trait AnalyticRing: Sized + Clone {
    fn rg_add(&self, rhs: &Self) -> Result<Self>;
    fn rg_sub(&self, rhs: &Self) -> Result<Self>;
    fn rg_mul(&self, rhs: &Self) -> Result<Self>;
    fn rg_neg(&self) -> Self;
    fn rg_recip(&self) -> Result<Self>;
    fn rg_sqrt(&self) -> Result<Self>;
    /// A constant element of the same shape as `self`.
    fn rg_const(&self, v: f64) -> Self;
    /// Scalar value at the base point.
    fn base_value(&self) -> f64;
    /// Number of Taylor terms needed to represent `f(self)` exactly on the
    /// retained truncation (nilpotency degree of `self - base`, plus one).
    fn taylor_terms(&self) -> usize;
}

impl AnalyticRing for f64 {
    fn rg_add(&self, rhs: &Self) -> Result<Self> {
        Ok(self + rhs)
    }
    fn rg_sub(&self, rhs: &Self) -> Result<Self> {
        Ok(self - rhs)
    }
    fn rg_mul(&self, rhs: &Self) -> Result<Self> {
        Ok(self * rhs)
    }
    fn rg_neg(&self) -> Self {
        -self
    }
    fn rg_recip(&self) -> Result<Self> {
        if *self == 0.0 {
            return Err(CmcError::Singular("division by zero".to_string()));
        }
        Ok(1.0 / self)
    }
    fn rg_sqrt(&self) -> Result<Self> {
        if *self <= 0.0 {
            return Err(CmcError::Singular(format!("sqrt of nonpositive value {self}")));
        }
        Ok(f64::sqrt(*self))
    }
    fn rg_const(&self, v: f64) -> Self {
        v
    }
    fn base_value(&self) -> f64 {
        *self
    }
    fn taylor_terms(&self) -> usize {
        1
    }
}

impl AnalyticRing for Jet<f64> {
    fn rg_add(&self, rhs: &Self) -> Result<Self> {
        self.add(rhs)
    }
    fn rg_sub(&self, rhs: &Self) -> Result<Self> {
        self.sub(rhs)
    }
    fn rg_mul(&self, rhs: &Self) -> Result<Self> {
        self.mul(rhs)
    }
    fn rg_neg(&self) -> Self {
        self.neg()
    }
    fn rg_recip(&self) -> Result<Self> {
        self.recip()
    }
    fn rg_sqrt(&self) -> Result<Self> {
        self.sqrt()
    }
    fn rg_const(&self, v: f64) -> Self {
        Jet::constant(self.dim(), self.order(), v)
    }
    fn base_value(&self) -> f64 {
        *self.constant_term()
    }
    fn taylor_terms(&self) -> usize {
        self.order() + 1
    }
}

impl AnalyticRing for LogSeries<f64> {
    fn rg_add(&self, rhs: &Self) -> Result<Self> {
        self.add(rhs)
    }
    fn rg_sub(&self, rhs: &Self) -> Result<Self> {
        self.sub(rhs)
    }
    fn rg_mul(&self, rhs: &Self) -> Result<Self> {
        self.mul(rhs)
    }
    fn rg_neg(&self) -> Self {
        self.neg()
    }
    fn rg_recip(&self) -> Result<Self> {
        self.recip()
    }
    fn rg_sqrt(&self) -> Result<Self> {
        self.sqrt()
    }
    fn rg_const(&self, v: f64) -> Self {
        let mut s = LogSeries::zero(self.dim(), self.jet_order(), self.t_order(), self.log_cap());
        if v != 0.0 {
            s.insert(0, 0, Jet::constant(self.dim(), self.jet_order(), v))
                .expect("constant term is always a legal slot");
        }
        s
    }
    fn base_value(&self) -> f64 {
        *self.coeff(0, 0).constant_term()
    }
    fn taylor_terms(&self) -> usize {
        self.jet_order() + self.t_order() + 1
    }
}

/// Scalar Taylor coefficients `c_k` of `f(a + z) = sum c_k z^k`.
fn scalar_taylor(f: Func, a: f64, count: usize) -> Result<Vec<f64>> {
    let mut c = Vec::with_capacity(count);
    match f {
        Func::Exp => {
            let ea = a.exp();
            let mut factorial = 1.0;
            for k in 0..count {
                if k > 0 {
                    factorial *= k as f64;
                }
                c.push(ea / factorial);
            }
        }
        Func::Sin | Func::Cos => {
            // Derivatives of sin/cos cycle with period 4.
            let (s, co) = a.sin_cos();
            let cycle: [f64; 4] = if f == Func::Sin { [s, co, -s, -co] } else { [co, -s, -co, s] };
            let mut factorial = 1.0;
            for k in 0..count {
                if k > 0 {
                    factorial *= k as f64;
                }
                c.push(cycle[k % 4] / factorial);
            }
        }
        Func::Atan => {
            // atan'(a + z) = 1 / ((1 + a^2) + 2a z + z^2); expand the
            // reciprocal by its three-term recurrence, then integrate.
            let q0 = 1.0 + a * a;
            c.push(a.atan());
            let mut d_prev2 = 0.0;
            let mut d_prev1 = 0.0;
            for k in 1..count {
                let j = k - 1; // coefficient index of the derivative series
                let d = if j == 0 {
                    1.0 / q0
                } else {
                    -(2.0 * a * d_prev1 + d_prev2) / q0
                };
                d_prev2 = d_prev1;
                d_prev1 = d;
                c.push(d / k as f64);
            }
        }
        Func::Sqrt => {
            unreachable!("sqrt is applied through the ring's native square root")
        }
    }
    Ok(c)
}

fn apply_func<R: AnalyticRing>(f: Func, x: &R) -> Result<R> {
    if f == Func::Sqrt {
        return x.rg_sqrt();
    }
    let a = x.base_value();
    if !a.is_finite() {
        return Err(CmcError::Domain(format!(
            "cannot expand {} around non-finite base value {a}",
            f.name()
        )));
    }
    let count = x.taylor_terms();
    let coeffs = scalar_taylor(f, a, count)?;
    let z = x.rg_sub(&x.rg_const(a))?;
    // Horner evaluation in the nilpotent part z.
    let mut acc = x.rg_const(*coeffs.last().expect("count >= 1"));
    for &ck in coeffs.iter().rev().skip(1) {
        acc = acc.rg_mul(&z)?.rg_add(&x.rg_const(ck))?;
    }
    Ok(acc)
}

fn powi<R: AnalyticRing>(x: &R, k: u32) -> Result<R> {
    let mut acc = x.rg_const(1.0);
    for _ in 0..k {
        acc = acc.rg_mul(x)?;
    }
    Ok(acc)
}

/// Evaluate an expression in any [`AnalyticRing`], resolving variables
/// through the provided lookup.
pub fn eval_in<R: AnalyticRing>(e: &Expr, vars: &dyn Fn(Var) -> Result<R>) -> Result<R> {
    match e {
        Expr::Num(v) => {
            // Materialize the constant in the right shape via a probe value.
            let probe = vars(Var::T)?;
            Ok(probe.rg_const(*v))
        }
        Expr::Var(v) => vars(*v),
        Expr::Neg(inner) => Ok(eval_in(inner, vars)?.rg_neg()),
        Expr::Bin(op, a, b) => {
            let a = eval_in(a, vars)?;
            let b = eval_in(b, vars)?;
            match op {
                BinOp::Add => a.rg_add(&b),
                BinOp::Sub => a.rg_sub(&b),
                BinOp::Mul => a.rg_mul(&b),
                BinOp::Div => a.rg_mul(&b.rg_recip()?),
            }
        }
        Expr::Pow(base, k) => powi(&eval_in(base, vars)?, *k),
        Expr::Func(f, arg) => apply_func(*f, &eval_in(arg, vars)?),
    }
}

fn check_x_index(k: u8, dim: usize) -> Result<usize> {
    let idx = (k - 1) as usize;
    if idx < dim {
        Ok(idx)
    } else {
        Err(CmcError::Domain(format!(
            "variable x{k} is out of range: only {dim} tangential variable(s) available"
        )))
    }
}

/// Evaluate to a float at tangential point `x` and height `t`.
pub fn eval_real(e: &Expr, x: &[f64], t: f64) -> Result<f64> {
    eval_in(e, &|v| match v {
        Var::T => Ok(t),
        Var::X(k) => check_x_index(k, x.len()).map(|i| x[i]),
    })
}

/// Evaluate to a tangential jet at `base`, with `t` frozen to a constant.
pub fn eval_jet(e: &Expr, order: usize, base: &[f64], t: f64) -> Result<Jet<f64>> {
    let dim = base.len();
    eval_in(e, &|v| match v {
        Var::T => Ok(Jet::constant(dim, order, t)),
        Var::X(k) => check_x_index(k, dim).map(|i| Jet::variable(dim, order, i, base[i])),
    })
}

/// Evaluate to a `t`-Taylor stack of jets around `t = 0`: the result's entry
/// `i` is the jet coefficient of `t^i`, for `i <= t_order`.
pub fn eval_t_series(
    e: &Expr,
    jet_order: usize,
    t_order: usize,
    base: &[f64],
) -> Result<Vec<Jet<f64>>> {
    let dim = base.len();
    let series = eval_in(e, &|v| match v {
        Var::T => {
            let t_jet = Jet::constant(dim, jet_order, 1.0);
            LogSeries::monomial(t_order, 0, 1, 0, t_jet)
        }
        Var::X(k) => {
            let i = check_x_index(k, dim)?;
            LogSeries::monomial(t_order, 0, 0, 0, Jet::variable(dim, jet_order, i, base[i]))
        }
    })?;
    Ok((0..=t_order).map(|i| series.coeff(i, 0)).collect())
}
