//! Closed-form scalar expressions over `z1..zn`.
//!
//! Expressions are parsed from a small grammar, evaluated in double precision and
//! differentiated symbolically. Variables are stored 0-based; `z1` is `Var(0)`.

use std::fmt;
use std::ops;

use crate::error::{Error, Result};

/// A point `z` in phase space.
pub type Point = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
}

use Expr::*;

impl Expr {
    pub fn c(x: f64) -> Expr {
        Const(x)
    }

    /// Variable with 0-based index.
    pub fn v(i: usize) -> Expr {
        Var(i)
    }

    pub fn pow(self, e: Expr) -> Expr {
        Pow(Box::new(self), Box::new(e))
    }

    pub fn powf(self, p: f64) -> Expr {
        self.pow(Const(p))
    }

    pub fn exp(self) -> Expr {
        Call(Func::Exp, Box::new(self))
    }

    pub fn log(self) -> Expr {
        Call(Func::Log, Box::new(self))
    }

    pub fn sqrt(self) -> Expr {
        Call(Func::Sqrt, Box::new(self))
    }

    /// Sum of a list; the empty sum is zero.
    pub fn sum<I: IntoIterator<Item = Expr>>(items: I) -> Expr {
        let mut it = items.into_iter();
        match it.next() {
            None => Const(0.0),
            Some(first) => it.fold(first, |acc, e| acc + e),
        }
    }

    pub fn parse(text: &str, arity: usize) -> Result<Expr> {
        Parser::new(text, arity)?.parse_all()
    }

    /// Largest 0-based variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Const(_) => None,
            Var(i) => Some(*i),
            Neg(a) | Call(_, a) => a.max_var(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, None) => x,
                    (None, y) => y,
                }
            }
        }
    }

    pub fn check_arity(&self, arity: usize) -> Result<()> {
        match self.max_var() {
            Some(i) if i >= arity => Err(Error::Arity {
                index: i + 1,
                arity,
            }),
            _ => Ok(()),
        }
    }

    pub fn depends_on(&self, i: usize) -> bool {
        match self {
            Const(_) => false,
            Var(j) => *j == i,
            Neg(a) | Call(_, a) => a.depends_on(i),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                a.depends_on(i) || b.depends_on(i)
            }
        }
    }

    /// Constant value if the simplified expression is a literal.
    pub fn as_const(&self) -> Option<f64> {
        match self.simplify() {
            Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Const(_) | Var(_) => 1,
            Neg(a) | Call(_, a) => 1 + a.node_count(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => {
                1 + a.node_count() + b.node_count()
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let v = match self {
            Const(c) => *c,
            Var(i) => *z.get(*i).ok_or(Error::Arity {
                index: i + 1,
                arity: z.len(),
            })?,
            Neg(a) => -a.eval(z)?,
            Call(f, a) => {
                let x = a.eval(z)?;
                match f {
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(self.domain(format!("log of nonpositive value {x}")));
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(self.domain(format!("sqrt of negative value {x}")));
                        }
                        x.sqrt()
                    }
                }
            }
            Add(a, b) => a.eval(z)? + b.eval(z)?,
            Sub(a, b) => a.eval(z)? - b.eval(z)?,
            Mul(a, b) => a.eval(z)? * b.eval(z)?,
            Div(a, b) => {
                let d = b.eval(z)?;
                if d == 0.0 {
                    return Err(self.domain("division by zero".into()));
                }
                a.eval(z)? / d
            }
            Pow(a, b) => {
                let x = a.eval(z)?;
                let p = b.eval(z)?;
                pow_checked(x, p).map_err(|r| self.domain(r))?
            }
        };
        if !v.is_finite() {
            return Err(self.domain(format!("non-finite result {v}")));
        }
        Ok(v)
    }

    fn domain(&self, reason: String) -> Error {
        Error::Domain {
            expr: self.to_string(),
            reason,
        }
    }

    /// Partial derivative with respect to the 0-based variable `i`, simplified.
    pub fn diff(&self, i: usize) -> Expr {
        self.raw_diff(i).simplify()
    }

    fn raw_diff(&self, i: usize) -> Expr {
        if !self.depends_on(i) {
            return Const(0.0);
        }
        match self {
            Const(_) => Const(0.0),
            Var(j) => Const(if *j == i { 1.0 } else { 0.0 }),
            Neg(a) => -a.raw_diff(i),
            Call(Func::Exp, a) => self.clone() * a.raw_diff(i),
            Call(Func::Log, a) => a.raw_diff(i) / (**a).clone(),
            Call(Func::Sqrt, a) => a.raw_diff(i) / (Const(2.0) * self.clone()),
            Add(a, b) => a.raw_diff(i) + b.raw_diff(i),
            Sub(a, b) => a.raw_diff(i) - b.raw_diff(i),
            Mul(a, b) => a.raw_diff(i) * (**b).clone() + (**a).clone() * b.raw_diff(i),
            Div(a, b) => {
                (a.raw_diff(i) * (**b).clone() - (**a).clone() * b.raw_diff(i))
                    / (**b).clone().powf(2.0)
            }
            Pow(a, b) => {
                if b.max_var().is_none() {
                    (**b).clone() * (**a).clone().pow((**b).clone() - Const(1.0)) * a.raw_diff(i)
                } else {
                    self.clone()
                        * (b.raw_diff(i) * (**a).clone().log()
                            + (**b).clone() * a.raw_diff(i) / (**a).clone())
                }
            }
        }
    }

    pub fn gradient(&self, n: usize) -> Vec<Expr> {
        (0..n).map(|i| self.diff(i)).collect()
    }

    /// Hessian as an `n x n` table; entries `i <= j` are built and mirrored.
    pub fn hessian(&self, n: usize) -> Vec<Vec<Expr>> {
        let g = self.gradient(n);
        hessian_from_gradient(&g)
    }

    /// Replace every `Var(i)` by `vals[i]`.
    pub fn substitute(&self, vals: &[Expr]) -> Expr {
        self.subst_raw(vals).simplify()
    }

    fn subst_raw(&self, vals: &[Expr]) -> Expr {
        match self {
            Const(c) => Const(*c),
            Var(i) => vals[*i].clone(),
            Neg(a) => Neg(Box::new(a.subst_raw(vals))),
            Call(f, a) => Call(*f, Box::new(a.subst_raw(vals))),
            Add(a, b) => Add(Box::new(a.subst_raw(vals)), Box::new(b.subst_raw(vals))),
            Sub(a, b) => Sub(Box::new(a.subst_raw(vals)), Box::new(b.subst_raw(vals))),
            Mul(a, b) => Mul(Box::new(a.subst_raw(vals)), Box::new(b.subst_raw(vals))),
            Div(a, b) => Div(Box::new(a.subst_raw(vals)), Box::new(b.subst_raw(vals))),
            Pow(a, b) => Pow(Box::new(a.subst_raw(vals)), Box::new(b.subst_raw(vals))),
        }
    }

    /// Local constant folding and identity elimination, iterated to a fixpoint.
    pub fn simplify(&self) -> Expr {
        let mut cur = self.clone();
        for _ in 0..64 {
            let next = simplify_once(&cur);
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }
}

pub(crate) fn hessian_from_gradient(g: &[Expr]) -> Vec<Vec<Expr>> {
    let n = g.len();
    let mut h = vec![vec![Const(0.0); n]; n];
    for i in 0..n {
        for j in i..n {
            let d = g[i].diff(j);
            h[j][i] = d.clone();
            h[i][j] = d;
        }
    }
    h
}

fn pow_checked(x: f64, p: f64) -> std::result::Result<f64, String> {
    if p.fract() == 0.0 && p.abs() < 2.0e9 {
        if x == 0.0 && p < 0.0 {
            return Err("zero raised to a negative power".into());
        }
        Ok(x.powi(p as i32))
    } else if x > 0.0 {
        Ok(x.powf(p))
    } else {
        Err(format!("non-integer power {p} of nonpositive base {x}"))
    }
}

fn is_c(e: &Expr, v: f64) -> bool {
    matches!(e, Const(c) if *c == v)
}

fn simplify_once(e: &Expr) -> Expr {
    match e {
        Const(_) | Var(_) => e.clone(),
        Neg(a) => match simplify_once(a) {
            Const(c) => Const(-c),
            Neg(x) => *x,
            x => Neg(Box::new(x)),
        },
        Call(f, a) => {
            let a = simplify_once(a);
            if let Const(c) = a {
                let folded = Call(*f, Box::new(Const(c)));
                if let Ok(v) = folded.eval(&[]) {
                    return Const(v);
                }
                return folded;
            }
            Call(*f, Box::new(a))
        }
        Add(a, b) => {
            let (a, b) = (simplify_once(a), simplify_once(b));
            match (a, b) {
                (Const(x), Const(y)) => Const(x + y),
                (x, y) if is_c(&x, 0.0) => y,
                (x, y) if is_c(&y, 0.0) => x,
                (x, Neg(y)) => Sub(Box::new(x), y),
                (Neg(x), y) => Sub(Box::new(y), x),
                (x, y) => Add(Box::new(x), Box::new(y)),
            }
        }
        Sub(a, b) => {
            let (a, b) = (simplify_once(a), simplify_once(b));
            match (a, b) {
                (Const(x), Const(y)) => Const(x - y),
                (x, y) if is_c(&y, 0.0) => x,
                (x, y) if is_c(&x, 0.0) => Neg(Box::new(y)),
                (x, y) if x == y => Const(0.0),
                (x, Neg(y)) => Add(Box::new(x), y),
                (x, y) => Sub(Box::new(x), Box::new(y)),
            }
        }
        Mul(a, b) => {
            let (a, b) = (simplify_once(a), simplify_once(b));
            match (a, b) {
                (Const(x), Const(y)) => Const(x * y),
                (x, y) if is_c(&x, 0.0) || is_c(&y, 0.0) => Const(0.0),
                (x, y) if is_c(&x, 1.0) => y,
                (x, y) if is_c(&y, 1.0) => x,
                (x, y) if is_c(&x, -1.0) => Neg(Box::new(y)),
                (x, Const(c)) => Mul(Box::new(Const(c)), Box::new(x)),
                (Const(c), Mul(p, q)) if matches!(*p, Const(_)) => {
                    let Const(d) = *p else { unreachable!() };
                    Mul(Box::new(Const(c * d)), q)
                }
                (Neg(x), y) => Neg(Box::new(Mul(x, Box::new(y)))),
                (x, Neg(y)) => Neg(Box::new(Mul(Box::new(x), y))),
                (x, y) => Mul(Box::new(x), Box::new(y)),
            }
        }
        Div(a, b) => {
            let (a, b) = (simplify_once(a), simplify_once(b));
            match (a, b) {
                (Const(x), Const(y)) if y != 0.0 => Const(x / y),
                (x, y) if is_c(&x, 0.0) && !is_c(&y, 0.0) => Const(0.0),
                (x, y) if is_c(&y, 1.0) => x,
                (Neg(x), y) => Neg(Box::new(Div(x, Box::new(y)))),
                (x, y) => Div(Box::new(x), Box::new(y)),
            }
        }
        Pow(a, b) => {
            let (a, b) = (simplify_once(a), simplify_once(b));
            match (a, b) {
                (Const(x), Const(p)) => match pow_checked(x, p) {
                    Ok(v) if v.is_finite() => Const(v),
                    _ => Pow(Box::new(Const(x)), Box::new(Const(p))),
                },
                (_, y) if is_c(&y, 0.0) => Const(1.0),
                (x, y) if is_c(&y, 1.0) => x,
                (x, _) if is_c(&x, 1.0) => Const(1.0),
                (Pow(x, inner), Const(q)) if q.fract() == 0.0 && matches!(*inner, Const(_)) => {
                    let Const(p) = *inner else { unreachable!() };
                    Pow(x, Box::new(Const(p * q)))
                }
                (x, y) => Pow(Box::new(x), Box::new(y)),
            }
        }
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Add(Box::new(self), Box::new(rhs))
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Sub(Box::new(self), Box::new(rhs))
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Mul(Box::new(self), Box::new(rhs))
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Div(Box::new(self), Box::new(rhs))
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Neg(Box::new(self))
    }
}

// Printing levels: 0 sum, 1 product, 2 signed factor, 3 power, 4 atom.
fn level(e: &Expr) -> u8 {
    match e {
        Add(..) | Sub(..) => 0,
        Mul(..) | Div(..) => 1,
        Neg(_) => 2,
        Const(c) if c.is_sign_negative() => 2,
        Pow(..) => 3,
        Const(_) | Var(_) | Call(..) => 4,
    }
}

fn fmt_num(c: f64) -> String {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        format!("{}", c as i64)
    } else {
        format!("{c:?}")
    }
}

fn write_at(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if level(e) < min {
        f.write_str("(")?;
        write_at(e, 0, f)?;
        return f.write_str(")");
    }
    match e {
        Const(c) => {
            if c.is_sign_negative() {
                write!(f, "-{}", fmt_num(-c))
            } else {
                f.write_str(&fmt_num(*c))
            }
        }
        Var(i) => write!(f, "z{}", i + 1),
        Neg(a) => {
            f.write_str("-")?;
            write_at(a, 3, f)
        }
        Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_at(a, 0, f)?;
            f.write_str(")")
        }
        Add(a, b) => {
            write_at(a, 0, f)?;
            f.write_str(" + ")?;
            write_at(b, 1, f)
        }
        Sub(a, b) => {
            write_at(a, 0, f)?;
            f.write_str(" - ")?;
            write_at(b, 1, f)
        }
        Mul(a, b) => {
            write_at(a, 1, f)?;
            f.write_str("*")?;
            write_at(b, 2, f)
        }
        Div(a, b) => {
            write_at(a, 1, f)?;
            f.write_str("/")?;
            write_at(b, 2, f)
        }
        Pow(a, b) => {
            write_at(a, 4, f)?;
            f.write_str("^")?;
            write_at(b, 4, f)
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_at(self, 0, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    End,
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    arity: usize,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| Error::Syntax {
                    offset: start,
                    msg: format!("malformed number `{s}`"),
                })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            c if c.is_ascii_alphabetic() => {
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push((Tok::Ident(text[start..i].to_string()), start));
                continue;
            }
            _ => {
                return Err(Error::Syntax {
                    offset: start,
                    msg: format!("unexpected character `{}`", text[start..].chars().next().unwrap()),
                })
            }
        };
        out.push((tok, start));
        i += 1;
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

impl Parser {
    fn new(text: &str, arity: usize) -> Result<Self> {
        Ok(Parser {
            toks: tokenize(text)?,
            pos: 0,
            arity,
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Syntax {
            offset: self.offset(),
            msg: msg.to_string(),
        })
    }

    fn parse_all(mut self) -> Result<Expr> {
        let e = self.expr()?;
        if *self.peek() != Tok::End {
            return self.fail("unexpected trailing input");
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = lhs + self.term()?;
                }
                Tok::Minus => {
                    self.bump();
                    lhs = lhs - self.term()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = lhs * self.factor()?;
                }
                Tok::Slash => {
                    self.bump();
                    lhs = lhs / self.factor()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(-self.power()?);
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let e = self.atom()?;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let off = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Const(v)),
            Tok::LParen => {
                let e = self.expr()?;
                if self.bump() != Tok::RParen {
                    return Err(Error::Syntax {
                        offset: self.toks[self.pos.saturating_sub(1)].1,
                        msg: "expected `)`".into(),
                    });
                }
                Ok(e)
            }
            Tok::Ident(name) => {
                let func = match name.as_str() {
                    "exp" => Some(Func::Exp),
                    "log" => Some(Func::Log),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(func) = func {
                    if *self.peek() != Tok::LParen {
                        return self.fail("expected `(` after function name");
                    }
                    self.bump();
                    let arg = self.expr()?;
                    if *self.peek() != Tok::RParen {
                        return self.fail("expected `)`");
                    }
                    self.bump();
                    return Ok(Call(func, Box::new(arg)));
                }
                let idx = name
                    .strip_prefix('z')
                    .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|d| d.parse::<usize>().ok());
                match idx {
                    Some(k) if k >= 1 && k <= self.arity => Ok(Var(k - 1)),
                    Some(_) => Err(Error::UnknownVariable {
                        name,
                        offset: off,
                        arity: self.arity,
                    }),
                    None => Err(Error::Syntax {
                        offset: off,
                        msg: format!("unknown identifier `{name}`"),
                    }),
                }
            }
            Tok::End => Err(Error::Syntax {
                offset: off,
                msg: "unexpected end of input".into(),
            }),
            t => Err(Error::Syntax {
                offset: off,
                msg: format!("unexpected token {t:?}"),
            }),
        }
    }
}

/// An expression together with its symbolic gradient, Hessian and optionally third derivatives.
#[derive(Clone, Debug)]
pub struct Jet {
    pub n: usize,
    pub expr: Expr,
    pub grad: Vec<Expr>,
    pub hess: Vec<Vec<Expr>>,
    third: Option<Vec<Expr>>,
}

/// Numerical values of a [`Jet`] at a point; `h` is row-major `n x n`, `t` is `n^3`.
#[derive(Clone, Debug, Default)]
pub struct JetValue {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl JetValue {
    pub fn h(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.g.len() + j]
    }

    pub fn t(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.g.len();
        self.t[(i * n + j) * n + k]
    }
}

impl Jet {
    pub fn new(expr: Expr, n: usize, with_third: bool) -> Result<Jet> {
        expr.check_arity(n)?;
        let expr = expr.simplify();
        let grad = expr.gradient(n);
        let hess = hessian_from_gradient(&grad);
        let third = if with_third {
            let mut t = vec![Const(0.0); n * n * n];
            for i in 0..n {
                for j in i..n {
                    for k in j..n {
                        let d = hess[i][j].diff(k);
                        for (a, b, c) in perms(i, j, k) {
                            t[(a * n + b) * n + c] = d.clone();
                        }
                    }
                }
            }
            Some(t)
        } else {
            None
        };
        Ok(Jet {
            n,
            expr,
            grad,
            hess,
            third,
        })
    }

    pub fn has_third(&self) -> bool {
        self.third.is_some()
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        self.expr.eval(z)
    }

    /// Evaluate up to `order` (0..=3); third order requires construction `with_third`.
    pub fn eval(&self, z: &[f64], order: usize) -> Result<JetValue> {
        let n = self.n;
        let mut out = JetValue {
            v: self.expr.eval(z)?,
            ..Default::default()
        };
        if order >= 1 {
            out.g = self.grad.iter().map(|e| e.eval(z)).collect::<Result<_>>()?;
        }
        if order >= 2 {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = self.hess[i][j].eval(z)?;
                    h[i * n + j] = v;
                    h[j * n + i] = v;
                }
            }
            out.h = h;
        }
        if order >= 3 {
            let third = self
                .third
                .as_ref()
                .ok_or_else(|| Error::Invalid("third derivatives not built".into()))?;
            let mut t = vec![0.0; n * n * n];
            for i in 0..n {
                for j in i..n {
                    for k in j..n {
                        let v = third[(i * n + j) * n + k].eval(z)?;
                        for (a, b, c) in perms(i, j, k) {
                            t[(a * n + b) * n + c] = v;
                        }
                    }
                }
            }
            out.t = t;
        }
        Ok(out)
    }

    /// True if every third derivative simplifies to the literal zero.
    pub fn third_vanishes_symbolically(&self) -> Option<bool> {
        self.third
            .as_ref()
            .map(|t| t.iter().all(|e| matches!(e, Const(c) if *c == 0.0)))
    }
}

fn perms(i: usize, j: usize, k: usize) -> [(usize, usize, usize); 6] {
    [
        (i, j, k),
        (i, k, j),
        (j, i, k),
        (j, k, i),
        (k, i, j),
        (k, j, i),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str, n: usize) -> Expr {
        Expr::parse(s, n).unwrap()
    }

    #[test]
    fn parse_shape() {
        let e = p("z1 + 0.5*z2^2", 2);
        let want = Var(0) + Const(0.5) * Var(1).pow(Const(2.0));
        assert_eq!(e, want);
    }

    #[test]
    fn unknown_variable() {
        let err = Expr::parse("exp(z1)*z3", 2).unwrap_err();
        assert!(matches!(err, Error::UnknownVariable { ref name, offset: 8, .. } if name == "z3"));
        assert!(matches!(
            Expr::parse("z0", 2),
            Err(Error::UnknownVariable { .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert!(matches!(Expr::parse("z1 +", 1), Err(Error::Syntax { offset: 4, .. })));
        assert!(matches!(Expr::parse("(z1", 1), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("z1 $ 2", 1), Err(Error::Syntax { offset: 3, .. })));
        assert!(matches!(Expr::parse("sin(z1)", 1), Err(Error::Syntax { offset: 0, .. })));
        assert!(matches!(Expr::parse("2^3^2", 1), Err(Error::Syntax { .. })));
    }

    #[test]
    fn precedence() {
        assert_eq!(p("-2^2", 0).eval(&[]).unwrap(), -4.0);
        assert_eq!(p("2*3+4/2-1", 0).eval(&[]).unwrap(), 7.0);
        assert_eq!(p("8/2/2", 0).eval(&[]).unwrap(), 2.0);
        assert!(Expr::parse("2^-1", 0).is_err());
        assert_eq!(p("2^(-1)", 0).eval(&[]).unwrap(), 0.5);
        assert_eq!(p("1.5e1 + .5 + 2E-1", 0).eval(&[]).unwrap(), 15.7);
    }

    #[test]
    fn identity_simplifies_to_zero() {
        assert_eq!(p("-(z1 - z1)", 1).simplify(), Const(0.0));
    }

    #[test]
    fn eval_examples() {
        assert_eq!(p("z1+0.5*z2^2", 2).eval(&[1.0, 2.0]).unwrap(), 3.0);
        assert!(matches!(
            p("log(z1)", 1).eval(&[-1.0]),
            Err(Error::Domain { ref expr, .. }) if expr == "log(z1)"
        ));
        assert_eq!(p("z1^0", 1).eval(&[7.0]).unwrap(), 1.0);
        assert!(p("z1^0.5", 1).eval(&[-1.0]).is_err());
        assert!(p("1/(z1-1)", 1).eval(&[1.0]).is_err());
        assert_eq!(p("(-2)^3", 0).eval(&[]).unwrap(), -8.0);
    }

    #[test]
    fn domain_error_names_subexpression() {
        let e = p("z2 + sqrt(z1 - 3)", 2);
        match e.eval(&[1.0, 0.0]) {
            Err(Error::Domain { expr, .. }) => assert_eq!(expr, "sqrt(z1 - 3)"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diff_examples() {
        assert_eq!(p("z1+0.5*z2^2", 2).diff(1), Var(1));
        assert_eq!(p("exp(z1)", 1).diff(0), p("exp(z1)", 1));
        assert_eq!(p("z1*z2", 2).diff(0).diff(1), Const(1.0));
    }

    #[test]
    fn hessian_examples() {
        let h = p("0.5*(z2^2+z3^2)", 3).hessian(3);
        for (i, row) in h.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                let want = if i == j && i > 0 { 1.0 } else { 0.0 };
                assert_eq!(e.eval(&[0.3, -0.2, 1.1]).unwrap(), want);
            }
        }
        let h = p("z1*z2", 2).hessian(2);
        assert_eq!(h[0][1], Const(1.0));
        assert_eq!(h[1][0], Const(1.0));
        assert_eq!(h[0][0], Const(0.0));
    }

    #[test]
    fn printing_round_trips_structure() {
        for s in [
            "z1^(-2)",
            "-z1^2",
            "(z1 + z2)*(z1 - z2)",
            "z1 - (z2 - z3)",
            "z1/(z2*z3)",
            "exp(-z1)*z2",
            "(z1^2)^0.5",
            "-(-z1)",
            "2^(z1 + 1)",
            "z1*-3",
        ] {
            let e = p(s, 3);
            let back = p(&e.to_string(), 3);
            assert_eq!(back, e, "{s} printed as {e}");
        }
        assert_eq!(p("z1^(-2)", 1).to_string(), "z1^(-2)");
    }

    #[test]
    fn substitution() {
        let e = p("z1*z2 + z1", 2);
        let s = e.substitute(&[p("2*z1", 1), Const(3.0)]);
        assert_eq!(s.eval(&[1.5]).unwrap(), 12.0);
    }

    #[test]
    fn jet_third_derivatives() {
        let j = Jet::new(p("z1*z2^2 + exp(z3)", 3), 3, true).unwrap();
        let v = j.eval(&[1.0, 2.0, 0.0], 3).unwrap();
        assert_eq!(v.t(0, 1, 1), 2.0);
        assert_eq!(v.t(1, 0, 1), 2.0);
        assert_eq!(v.t(2, 2, 2), 1.0);
        assert_eq!(v.t(0, 0, 1), 0.0);
        let w = Jet::new(p("z1 + 0.5*z2^2", 2), 2, true).unwrap();
        assert_eq!(w.third_vanishes_symbolically(), Some(true));
    }

    fn arb_expr(n: usize) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(|c| Const((c * 8.0).round() / 8.0)),
            (0..n).prop_map(Var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| a / (Const(3.0) + b.clone() * b)),
                inner.clone().prop_map(|a| -a),
                inner.clone().prop_map(|a| (Const(0.2) * a).exp()),
                inner.clone().prop_map(|a| (Const(1.0) + a.clone() * a).log()),
                inner.clone().prop_map(|a| (Const(0.5) + a.clone() * a).sqrt()),
                (inner.clone(), 0u8..4).prop_map(|(a, k)| a.powf(k as f64)),
                inner.prop_map(|a| (Const(1.0) + a.clone() * a).powf(0.5)),
            ]
        })
    }

    fn points(seed: u64, n: usize, count: usize) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn print_parse_round_trip(e in arb_expr(3), seed in 0u64..1000) {
            let back = Expr::parse(&e.to_string(), 3).unwrap();
            for z in points(seed, 3, 100) {
                match (e.eval(&z), back.eval(&z)) {
                    (Ok(a), Ok(b)) => prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "mismatch {:?} {:?}", a, b),
                }
            }
        }

        #[test]
        fn simplify_idempotent_and_value_preserving(e in arb_expr(3), seed in 0u64..1000) {
            let s = e.simplify();
            prop_assert_eq!(s.simplify(), s.clone());
            for z in points(seed, 3, 20) {
                if let (Ok(a), Ok(b)) = (e.eval(&z), s.eval(&z)) {
                    prop_assert!(close(a, b, 1e-12));
                }
            }
        }

        #[test]
        fn gradient_matches_central_differences(e in arb_expr(3), seed in 0u64..1000) {
            let g = e.gradient(3);
            let h = 1e-5;
            for z in points(seed, 3, 100) {
                for (i, gi) in g.iter().enumerate() {
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[i] += h;
                    zm[i] -= h;
                    if let (Ok(a), Ok(fp), Ok(fm)) = (gi.eval(&z), e.eval(&zp), e.eval(&zm)) {
                        let fd = (fp - fm) / (2.0 * h);
                        let scale = 1.0 + fp.abs().max(fm.abs());
                        prop_assert!((a - fd).abs() <= 1e-6 * scale, "d{} {} vs {} for {}", i, a, fd, e);
                    }
                }
            }
        }

        #[test]
        fn hessian_matches_finite_differences(e in arb_expr(2), seed in 0u64..1000) {
            let hs = e.hessian(2);
            let g = e.gradient(2);
            let h = 1e-5;
            for z in points(seed, 2, 20) {
                for i in 0..2 {
                    for j in 0..2 {
                        let (mut zp, mut zm) = (z.clone(), z.clone());
                        zp[j] += h;
                        zm[j] -= h;
                        if let (Ok(a), Ok(gp), Ok(gm)) = (hs[i][j].eval(&z), g[i].eval(&zp), g[i].eval(&zm)) {
                            let fd = (gp - gm) / (2.0 * h);
                            let scale = 1.0 + gp.abs().max(gm.abs());
                            prop_assert!((a - fd).abs() <= 1e-4 * scale);
                        }
                    }
                }
            }
        }

        #[test]
        fn hessian_exactly_symmetric(e in arb_expr(3)) {
            let h = e.hessian(3);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(&h[i][j], &h[j][i]);
                }
            }
        }

        #[test]
        fn diff_is_linear(e1 in arb_expr(2), e2 in arb_expr(2), a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let combo = Const(a) * e1.clone() + Const(b) * e2.clone();
            for i in 0..2 {
                let lhs = combo.diff(i);
                let (d1, d2) = (e1.diff(i), e2.diff(i));
                for z in points(seed, 2, 10) {
                    if let (Ok(l), Ok(x), Ok(y)) = (lhs.eval(&z), d1.eval(&z), d2.eval(&z)) {
                        prop_assert!(close(l, a * x + b * y, 1e-12));
                    }
                }
            }
        }
    }
}
