//! Structural-equation expressions and their text syntax.
//!
//! Syntax summary:
//!
//! ```text
//! alpha*T + U_X                sums, products, unary minus, parentheses
//! X / 2                        division by a constant subexpression only
//! min(a, b)  max(a, b)
//! indicator(e)                 1 if e > 0, else 0
//! indicator(a > b)             also <, >=, <=
//! table(A, B; 0,0 => 1.5; 0,1 => 2)
//! ```
//!
//! Names resolve to a parameter first, then a noise, then a variable.
//! Parameters are substituted by value at parse time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Noise(String),
    Var(String),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    /// `1{e > 0}`.
    Indicator(Box<Expr>),
    /// Lookup keyed by the exact values of `inputs` (noise or variable refs).
    Table {
        inputs: Vec<Expr>,
        rows: Vec<(Vec<f64>, f64)>,
    },
}

// builder names read like the operators they build; `Expr` is not `Add`
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn noise(name: &str) -> Expr {
        Expr::Noise(name.to_string())
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(Expr::Neg(Box::new(b))))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::Neg(Box::new(a))
    }

    pub fn indicator(a: Expr) -> Expr {
        Expr::Indicator(Box::new(a))
    }

    /// `1{e == level}` for integer-valued `e`.
    pub fn is_level(e: Expr, level: f64) -> Expr {
        Expr::mul(
            Expr::indicator(Expr::add(e.clone(), Expr::c(0.5 - level))),
            Expr::indicator(Expr::add(Expr::c(level + 0.5), Expr::neg(e))),
        )
    }

    /// Sum of terms, left-associated; empty sums are `0`.
    pub fn sum(terms: impl IntoIterator<Item = Expr>) -> Expr {
        terms.into_iter().reduce(Expr::add).unwrap_or(Expr::Const(0.0))
    }

    /// Variable names referenced anywhere in the tree.
    pub fn var_refs(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(n) = e {
                out.push(n.as_str());
            }
        });
        out
    }

    pub fn noise_refs(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Noise(n) = e {
                out.push(n.as_str());
            }
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Noise(_) | Expr::Var(_) => {}
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Min(a, b) | Expr::Max(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Neg(a) | Expr::Indicator(a) => a.visit(f),
            Expr::Table { inputs, .. } => inputs.iter().for_each(|i| i.visit(f)),
        }
    }

    /// Rebuilds the tree bottom-up, replacing nodes where `f` returns `Some`.
    pub fn map_refs(&self, f: &impl Fn(&Expr) -> Option<Expr>) -> Expr {
        if let Some(r) = f(self) {
            return r;
        }
        let bx = |e: &Expr| Box::new(e.map_refs(f));
        match self {
            Expr::Const(_) | Expr::Noise(_) | Expr::Var(_) => self.clone(),
            Expr::Add(a, b) => Expr::Add(bx(a), bx(b)),
            Expr::Mul(a, b) => Expr::Mul(bx(a), bx(b)),
            Expr::Min(a, b) => Expr::Min(bx(a), bx(b)),
            Expr::Max(a, b) => Expr::Max(bx(a), bx(b)),
            Expr::Neg(a) => Expr::Neg(bx(a)),
            Expr::Indicator(a) => Expr::Indicator(bx(a)),
            Expr::Table { inputs, rows } => {
                Expr::Table { inputs: inputs.iter().map(|i| i.map_refs(f)).collect(), rows: rows.clone() }
            }
        }
    }

    /// Replaces `Var(name)` by `with` everywhere.
    pub fn substitute(&self, name: &str, with: &Expr) -> Expr {
        self.map_refs(&|e| match e {
            Expr::Var(n) if n == name => Some(with.clone()),
            _ => None,
        })
    }

    /// Evaluates a tree free of references.
    pub fn eval_const(&self) -> Option<f64> {
        Some(match self {
            Expr::Const(v) => *v,
            Expr::Noise(_) | Expr::Var(_) | Expr::Table { .. } => return None,
            Expr::Add(a, b) => a.eval_const()? + b.eval_const()?,
            Expr::Mul(a, b) => a.eval_const()? * b.eval_const()?,
            Expr::Min(a, b) => a.eval_const()?.min(b.eval_const()?),
            Expr::Max(a, b) => a.eval_const()?.max(b.eval_const()?),
            Expr::Neg(a) => -a.eval_const()?,
            Expr::Indicator(a) => indicator(a.eval_const()?),
        })
    }
}

#[inline]
pub fn indicator(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) if v.is_sign_negative() => write!(f, "({})", fmt_num(*v)),
            Expr::Const(v) => write!(f, "{}", fmt_num(*v)),
            Expr::Noise(n) | Expr::Var(n) => write!(f, "{n}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Indicator(a) => write!(f, "indicator({a})"),
            Expr::Table { inputs, rows } => {
                write!(f, "table(")?;
                for (i, inp) in inputs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{inp}")?;
                }
                for (key, out) in rows {
                    write!(f, "; ")?;
                    let k: Vec<String> = key.iter().map(|v| fmt_num(*v)).collect();
                    write!(f, "{} => {}", k.join(", "), fmt_num(*out))?;
                }
                write!(f, ")")
            }
        }
    }
}

/// What a bare identifier may denote while parsing.
#[derive(Debug, Default, Clone)]
pub struct Scope {
    pub params: BTreeMap<String, f64>,
    pub noises: HashSet<String>,
    pub vars: HashSet<String>,
}

impl Scope {
    pub fn new(
        params: &BTreeMap<String, f64>,
        noises: impl IntoIterator<Item = String>,
        vars: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let scope =
            Scope { params: params.clone(), noises: noises.into_iter().collect(), vars: vars.into_iter().collect() };
        for n in &scope.noises {
            if scope.params.contains_key(n) || scope.vars.contains(n) {
                return Err(Error::DuplicateName(n.clone()));
            }
        }
        for v in &scope.vars {
            if scope.params.contains_key(v) {
                return Err(Error::DuplicateName(v.clone()));
            }
        }
        Ok(scope)
    }

    fn resolve(&self, name: &str) -> Option<Expr> {
        if let Some(v) = self.params.get(name) {
            Some(Expr::Const(*v))
        } else if self.noises.contains(name) {
            Some(Expr::Noise(name.to_string()))
        } else if self.vars.contains(name) {
            Some(Expr::Var(name.to_string()))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(&'static str),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v = text.parse::<f64>().map_err(|_| parse_err(start, format!("bad number `{text}`")))?;
            out.push((Tok::Num(v), start));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let two = src.get(i..i + 2).unwrap_or("");
            let sym = match two {
                "=>" => Some("=>"),
                ">=" => Some(">="),
                "<=" => Some("<="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push((Tok::Sym(s), i));
                i += 2;
                continue;
            }
            let s = match c {
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '/' => "/",
                '(' => "(",
                ')' => ")",
                ',' => ",",
                ';' => ";",
                '>' => ">",
                '<' => "<",
                _ => return Err(parse_err(i, format!("unexpected character `{c}`"))),
            };
            out.push((Tok::Sym(s), i));
            i += 1;
        }
    }
    Ok(out)
}

fn parse_err(col: usize, message: String) -> Error {
    Error::Parse { location: format!("column {}", col + 1), message }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    scope: &'a Scope,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end)
    }

    fn eat(&mut self, s: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(x)) if *x == s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(parse_err(self.col(), format!("expected `{s}`")))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            if self.eat("+") {
                lhs = Expr::add(lhs, self.product()?);
            } else if self.eat("-") {
                lhs = Expr::sub(lhs, self.product()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat("*") {
                lhs = Expr::mul(lhs, self.unary()?);
            } else if self.eat("/") {
                let col = self.col();
                let d = self.unary()?;
                let v = d.eval_const().ok_or_else(|| parse_err(col, "divisor must be constant".into()))?;
                if v == 0.0 {
                    return Err(parse_err(col, "division by zero".into()));
                }
                lhs = Expr::mul(lhs, Expr::Const(1.0 / v));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat("-") {
            if let Some(Tok::Num(v)) = self.peek() {
                let v = *v;
                self.pos += 1;
                return Ok(Expr::Const(-v));
            }
            return Ok(Expr::neg(self.unary()?));
        }
        self.primary()
    }

    fn signed_number(&mut self) -> Result<f64> {
        let neg = self.eat("-");
        match self.peek() {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(if neg { -v } else { v })
            }
            _ => Err(parse_err(self.col(), "expected a number".into())),
        }
    }

    fn comparison(&mut self) -> Result<Expr> {
        let lhs = self.sum()?;
        let op = match self.peek() {
            Some(Tok::Sym(s @ (">" | "<" | ">=" | "<="))) => *s,
            _ => return Ok(Expr::indicator(lhs)),
        };
        self.pos += 1;
        let rhs = self.sum()?;
        Ok(match op {
            ">" => Expr::indicator(Expr::sub(lhs, rhs)),
            "<" => Expr::indicator(Expr::sub(rhs, lhs)),
            ">=" => Expr::sub(Expr::c(1.0), Expr::indicator(Expr::sub(rhs, lhs))),
            _ => Expr::sub(Expr::c(1.0), Expr::indicator(Expr::sub(lhs, rhs))),
        })
    }

    fn primary(&mut self) -> Result<Expr> {
        let col = self.col();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat("(") {
                    return self.call(&name, col);
                }
                self.scope.resolve(&name).ok_or(Error::UnknownReference(name))
            }
            _ => Err(parse_err(col, "expected an expression".into())),
        }
    }

    fn call(&mut self, name: &str, col: usize) -> Result<Expr> {
        match name {
            "min" | "max" => {
                let a = self.sum()?;
                self.expect(",")?;
                let b = self.sum()?;
                self.expect(")")?;
                Ok(if name == "min" {
                    Expr::Min(Box::new(a), Box::new(b))
                } else {
                    Expr::Max(Box::new(a), Box::new(b))
                })
            }
            "indicator" => {
                let e = self.comparison()?;
                self.expect(")")?;
                Ok(e)
            }
            "table" => {
                let mut inputs = Vec::new();
                loop {
                    let c = self.col();
                    let e = self.primary()?;
                    if !matches!(e, Expr::Var(_) | Expr::Noise(_)) {
                        return Err(parse_err(c, "table inputs must be variable or noise names".into()));
                    }
                    inputs.push(e);
                    if !self.eat(",") {
                        break;
                    }
                }
                let mut rows = Vec::new();
                while self.eat(";") {
                    let mut key = Vec::with_capacity(inputs.len());
                    for k in 0..inputs.len() {
                        if k > 0 {
                            self.expect(",")?;
                        }
                        key.push(self.signed_number()?);
                    }
                    self.expect("=>")?;
                    rows.push((key, self.signed_number()?));
                }
                self.expect(")")?;
                Ok(Expr::Table { inputs, rows })
            }
            _ => Err(parse_err(col, format!("unknown function `{name}`"))),
        }
    }
}

/// Parses an expression against `scope`.
pub fn parse_expr(src: &str, scope: &Scope) -> Result<Expr> {
    let toks = tokenize(src)?;
    let mut p = Parser { toks, pos: 0, end: src.len(), scope };
    let e = p.sum()?;
    if p.pos != p.toks.len() {
        return Err(parse_err(p.col(), "trailing input".into()));
    }
    Ok(e)
}

/// Splits `"X = alpha*T + U_X"` into the defined name and the right-hand side.
pub fn split_equation(line: &str) -> Result<(String, &str)> {
    let (lhs, rhs) = line.split_once('=').ok_or_else(|| Error::Parse {
        location: format!("equation `{line}`"),
        message: "expected `NAME = expression`".into(),
    })?;
    let name = lhs.trim();
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_alphanumeric() || c == '_')
        && !name.starts_with(|c: char| c.is_ascii_digit());
    if !ok {
        return Err(Error::Parse {
            location: format!("equation `{line}`"),
            message: format!("`{name}` is not a valid variable name"),
        });
    }
    Ok((name.to_string(), rhs))
}

/// Which variables take finitely many values, given the discrete noises.
/// `defs` must be listed in a topological order.
pub fn discrete_valued(defs: &[(&str, &Expr)], discrete_noises: &HashSet<String>) -> HashMap<String, bool> {
    fn walk(e: &Expr, known: &HashMap<String, bool>, dn: &HashSet<String>) -> bool {
        match e {
            Expr::Const(_) | Expr::Indicator(_) | Expr::Table { .. } => true,
            Expr::Noise(n) => dn.contains(n),
            Expr::Var(v) => known.get(v).copied().unwrap_or(false),
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Min(a, b) | Expr::Max(a, b) => {
                walk(a, known, dn) && walk(b, known, dn)
            }
            Expr::Neg(a) => walk(a, known, dn),
        }
    }
    let mut known = HashMap::new();
    for (name, e) in defs {
        let d = walk(e, &known, discrete_noises);
        known.insert(name.to_string(), d);
    }
    known
}
