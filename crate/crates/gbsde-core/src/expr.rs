//! A small expression language for user-supplied coefficients and
//! generators, so problems can be described in config files.
//!
//! Variables: `t`, `x1..xk`, `y1..yn`, `z1..zd`. The `z` variables always
//! refer to the own component's row of the Z matrix, so a generator can
//! never reference another component's z — the diagonal-in-z structure is
//! enforced by the grammar itself. Operators `+ - * / ^` with the usual
//! precedence (`^` binds tighter than unary minus), functions `sin cos exp
//! log abs sqrt max min pow tanh`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Which variables an expression may reference, and the declared problem
/// dimensions used to validate indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarSpace {
    /// State dimension (x1..xk).
    pub k: usize,
    /// Component count (y1..yn).
    pub n: usize,
    /// Brownian dimension (z1..zd).
    pub d: usize,
    pub allow_t: bool,
    pub allow_y: bool,
    pub allow_z: bool,
}

impl VarSpace {
    /// Coefficients of the forward dynamics: functions of (t, x).
    pub fn dynamics(k: usize) -> Self {
        VarSpace { k, n: 0, d: 0, allow_t: true, allow_y: false, allow_z: false }
    }

    /// Terminal data: functions of x only.
    pub fn terminal(k: usize) -> Self {
        VarSpace { k, n: 0, d: 0, allow_t: false, allow_y: false, allow_z: false }
    }

    /// Generators f^l, g^l_ij: functions of (t, x, y, z^l).
    pub fn generator(k: usize, n: usize, d: usize) -> Self {
        VarSpace { k, n, d, allow_t: true, allow_y: true, allow_z: true }
    }
}

/// Evaluation point. Slices must match the declared dimensions.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

impl<'a> EvalContext<'a> {
    pub fn new(t: f64, x: &'a [f64], y: &'a [f64], z: &'a [f64]) -> Self {
        EvalContext { t, x, y, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Tanh,
}

impl Func1 {
    fn name(self) -> &'static str {
        match self {
            Func1::Sin => "sin",
            Func1::Cos => "cos",
            Func1::Exp => "exp",
            Func1::Log => "log",
            Func1::Abs => "abs",
            Func1::Sqrt => "sqrt",
            Func1::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func2 {
    Max,
    Min,
    Pow,
}

impl Func2 {
    fn name(self) -> &'static str {
        match self {
            Func2::Max => "max",
            Func2::Min => "min",
            Func2::Pow => "pow",
        }
    }
}

/// Abstract syntax tree of an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Time,
    /// 0-based index into the state vector.
    X(usize),
    /// 0-based index into the y vector.
    Y(usize),
    /// 0-based index into the (own-component) z vector.
    Z(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call1(Func1, Box<Expr>),
    Call2(Func2, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str, space: &VarSpace) -> Result<Expr> {
        Parser::new(src, *space).parse()
    }

    /// Constant value, if the expression is a literal (possibly negated).
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Neg(e) => e.as_const().map(|c| -c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    /// True if any node satisfies the predicate.
    pub fn any_node(&self, pred: &impl Fn(&Expr) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Const(_) | Expr::Time | Expr::X(_) | Expr::Y(_) | Expr::Z(_) => false,
            Expr::Neg(e) | Expr::Call1(_, e) => e.any_node(pred),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Call2(_, a, b) => a.any_node(pred) || b.any_node(pred),
        }
    }

    /// Does the expression read the state vector?
    pub fn uses_x(&self) -> bool {
        self.any_node(&|e| matches!(e, Expr::X(_)))
    }

    /// IEEE-754 double evaluation. Domain violations and non-finite
    /// intermediates surface as errors naming the offending subexpression.
    pub fn eval(&self, ctx: &EvalContext) -> Result<f64> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Time => ctx.t,
            Expr::X(i) => ctx.x[*i],
            Expr::Y(i) => ctx.y[*i],
            Expr::Z(i) => ctx.z[*i],
            Expr::Neg(e) => -e.eval(ctx)?,
            Expr::Add(a, b) => a.eval(ctx)? + b.eval(ctx)?,
            Expr::Sub(a, b) => a.eval(ctx)? - b.eval(ctx)?,
            Expr::Mul(a, b) => a.eval(ctx)? * b.eval(ctx)?,
            Expr::Div(a, b) => {
                let den = b.eval(ctx)?;
                if den == 0.0 {
                    return Err(self.domain_error("division by zero"));
                }
                a.eval(ctx)? / den
            }
            Expr::Pow(a, b) => a.eval(ctx)?.powf(b.eval(ctx)?),
            Expr::Call1(f, a) => {
                let v = a.eval(ctx)?;
                match f {
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                    Func1::Exp => v.exp(),
                    Func1::Log => {
                        if v <= 0.0 {
                            return Err(self.domain_error("log of a non-positive value"));
                        }
                        v.ln()
                    }
                    Func1::Abs => v.abs(),
                    Func1::Sqrt => {
                        if v < 0.0 {
                            return Err(self.domain_error("sqrt of a negative value"));
                        }
                        v.sqrt()
                    }
                    Func1::Tanh => v.tanh(),
                }
            }
            Expr::Call2(f, a, b) => {
                let va = a.eval(ctx)?;
                let vb = b.eval(ctx)?;
                match f {
                    Func2::Max => va.max(vb),
                    Func2::Min => va.min(vb),
                    Func2::Pow => va.powf(vb),
                }
            }
        };
        if !v.is_finite() {
            return Err(self.domain_error("non-finite value"));
        }
        Ok(v)
    }

    fn domain_error(&self, msg: &str) -> Error {
        Error::NumericalDomain { context: self.to_string(), msg: msg.to_string() }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = self.precedence();
        if prec < min_prec {
            write!(f, "(")?;
            self.fmt_prec(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Time => write!(f, "t"),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::Y(i) => write!(f, "y{}", i + 1),
            Expr::Z(i) => write!(f, "z{}", i + 1),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 4)
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "*")?;
                b.fmt_prec(f, 3)
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "/")?;
                b.fmt_prec(f, 3)
            }
            Expr::Pow(a, b) => {
                a.fmt_prec(f, 5)?;
                write!(f, "^")?;
                b.fmt_prec(f, 3)
            }
            Expr::Call1(func, a) => write!(f, "{}({})", func.name(), a),
            Expr::Call2(func, a, b) => write!(f, "{}({}, {})", func.name(), a, b),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    src_len: usize,
    space: VarSpace,
    line_starts: Vec<usize>,
}

impl Parser {
    fn new(src: &str, space: VarSpace) -> Self {
        let mut line_starts = vec![0];
        for (i, c) in src.char_indices() {
            if c == '\n' {
                line_starts.push(i + 1);
            }
        }
        let mut parser =
            Parser { tokens: Vec::new(), pos: 0, src_len: src.len(), space, line_starts };
        parser.tokens = parser.lex(src).unwrap_or_default();
        parser
    }

    fn line_col(&self, offset: usize) -> (usize, usize) {
        let line = match self.line_starts.binary_search(&offset) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (line + 1, offset - self.line_starts[line] + 1)
    }

    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        let (line, col) = self.line_col(offset);
        Error::Parse { line, col, msg: msg.into() }
    }

    fn lex(&self, src: &str) -> Result<Vec<(Token, usize)>> {
        let bytes = src.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            match c {
                ' ' | '\t' | '\r' | '\n' => i += 1,
                '+' => {
                    out.push((Token::Plus, i));
                    i += 1;
                }
                '-' => {
                    out.push((Token::Minus, i));
                    i += 1;
                }
                '*' => {
                    out.push((Token::Star, i));
                    i += 1;
                }
                '/' => {
                    out.push((Token::Slash, i));
                    i += 1;
                }
                '^' => {
                    out.push((Token::Caret, i));
                    i += 1;
                }
                '(' => {
                    out.push((Token::LParen, i));
                    i += 1;
                }
                ')' => {
                    out.push((Token::RParen, i));
                    i += 1;
                }
                ',' => {
                    out.push((Token::Comma, i));
                    i += 1;
                }
                '0'..='9' | '.' => {
                    let start = i;
                    while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                        i += 1;
                    }
                    // exponent part
                    if i < bytes.len()
                        && matches!(bytes[i] as char, 'e' | 'E')
                        && i + 1 < bytes.len()
                        && matches!(bytes[i + 1] as char, '0'..='9' | '+' | '-')
                    {
                        i += 2;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                    let text = &src[start..i];
                    let v: f64 = text
                        .parse()
                        .map_err(|_| self.err_at(start, format!("invalid number `{text}`")))?;
                    out.push((Token::Num(v), start));
                }
                'a'..='z' | 'A'..='Z' | '_' => {
                    let start = i;
                    while i < bytes.len()
                        && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                    {
                        i += 1;
                    }
                    out.push((Token::Ident(src[start..i].to_string()), start));
                }
                _ => return Err(self.err_at(i, format!("unexpected character `{c}`"))),
            }
        }
        Ok(out)
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<(Token, usize)> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn cur_offset(&self) -> usize {
        self.tokens.get(self.pos).map(|&(_, o)| o).unwrap_or(self.src_len)
    }

    fn parse(&mut self) -> Result<Expr> {
        if self.tokens.is_empty() {
            return Err(self.err_at(0, "empty expression"));
        }
        let e = self.parse_sum()?;
        if let Some((_, off)) = self.next() {
            return Err(self.err_at(off, "trailing input after expression"));
        }
        Ok(e)
    }

    fn parse_sum(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_product()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.next();
                    let rhs = self.parse_product()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Minus) => {
                    self.next();
                    let rhs = self.parse_product()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_product(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.next();
                    let rhs = self.parse_unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(Token::Slash) => {
                    self.next();
                    let rhs = self.parse_unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<Expr> {
        if let Some(Token::Minus) = self.peek() {
            self.next();
            let inner = self.parse_unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr> {
        let base = self.parse_atom()?;
        if let Some(Token::Caret) = self.peek() {
            self.next();
            // right-associative; the exponent may carry a unary minus
            let exp = self.parse_unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Expr> {
        let offset = self.cur_offset();
        match self.next() {
            Some((Token::Num(v), _)) => Ok(Expr::Const(v)),
            Some((Token::LParen, _)) => {
                let e = self.parse_sum()?;
                match self.next() {
                    Some((Token::RParen, _)) => Ok(e),
                    other => Err(self.err_at(
                        other.map(|(_, o)| o).unwrap_or(self.src_len),
                        "expected `)`",
                    )),
                }
            }
            Some((Token::Ident(name), off)) => {
                if let Some(Token::LParen) = self.peek() {
                    self.parse_call(&name, off)
                } else {
                    self.resolve_var(&name, off)
                }
            }
            Some((tok, off)) => Err(self.err_at(off, format!("unexpected token `{tok:?}`"))),
            None => Err(self.err_at(offset, "unexpected end of expression")),
        }
    }

    fn parse_call(&mut self, name: &str, off: usize) -> Result<Expr> {
        self.next(); // consume '('
        let mut args = vec![self.parse_sum()?];
        loop {
            match self.next() {
                Some((Token::Comma, _)) => args.push(self.parse_sum()?),
                Some((Token::RParen, _)) => break,
                other => {
                    return Err(self.err_at(
                        other.map(|(_, o)| o).unwrap_or(self.src_len),
                        "expected `,` or `)` in argument list",
                    ))
                }
            }
        }
        let f1 = match name {
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "exp" => Some(Func1::Exp),
            "log" => Some(Func1::Log),
            "abs" => Some(Func1::Abs),
            "sqrt" => Some(Func1::Sqrt),
            "tanh" => Some(Func1::Tanh),
            _ => None,
        };
        if let Some(f) = f1 {
            if args.len() != 1 {
                return Err(self.err_at(
                    off,
                    format!("`{name}` takes 1 argument, got {}", args.len()),
                ));
            }
            return Ok(Expr::Call1(f, Box::new(args.pop().unwrap())));
        }
        let f2 = match name {
            "max" => Some(Func2::Max),
            "min" => Some(Func2::Min),
            "pow" => Some(Func2::Pow),
            _ => None,
        };
        if let Some(f) = f2 {
            if args.len() != 2 {
                return Err(self.err_at(
                    off,
                    format!("`{name}` takes 2 arguments, got {}", args.len()),
                ));
            }
            let b = args.pop().unwrap();
            let a = args.pop().unwrap();
            return Ok(Expr::Call2(f, Box::new(a), Box::new(b)));
        }
        Err(self.err_at(off, format!("unknown function `{name}`")))
    }

    fn resolve_var(&self, name: &str, off: usize) -> Result<Expr> {
        if name == "t" {
            if !self.space.allow_t {
                return Err(self.err_at(off, "variable `t` is not allowed here"));
            }
            return Ok(Expr::Time);
        }
        let (head, rest) = name.split_at(1);
        let index: Option<usize> = rest.parse().ok().filter(|&i| i >= 1);
        match (head, index) {
            ("x", Some(i)) => {
                if i > self.space.k {
                    Err(self.err_at(
                        off,
                        format!("variable `{name}` out of range: k = {}", self.space.k),
                    ))
                } else {
                    Ok(Expr::X(i - 1))
                }
            }
            ("y", Some(i)) => {
                if !self.space.allow_y {
                    Err(self.err_at(off, format!("variable `{name}` is not allowed here")))
                } else if i > self.space.n {
                    Err(self.err_at(
                        off,
                        format!("variable `{name}` out of range: n = {}", self.space.n),
                    ))
                } else {
                    Ok(Expr::Y(i - 1))
                }
            }
            ("z", Some(i)) => {
                if !self.space.allow_z {
                    Err(self.err_at(off, format!("variable `{name}` is not allowed here")))
                } else if i > self.space.d {
                    Err(self.err_at(
                        off,
                        format!("variable `{name}` out of range: d = {}", self.space.d),
                    ))
                } else {
                    Ok(Expr::Z(i - 1))
                }
            }
            _ => Err(self.err_at(off, format!("unknown identifier `{name}`"))),
        }
    }
}

/// Rectangular sampling box for [`lipschitz_probe`].
#[derive(Debug, Clone)]
pub struct ProbeBox {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
    pub z: Vec<(f64, f64)>,
}

impl ProbeBox {
    /// Symmetric box [-r, r] in every coordinate.
    pub fn symmetric(space: &VarSpace, r: f64) -> Self {
        ProbeBox {
            t: (0.0, 1.0),
            x: vec![(-r, r); space.k],
            y: vec![(-r, r); space.n],
            z: vec![(-r, r); space.d],
        }
    }
}

/// Result of the numeric Lipschitz admissibility probe.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzEstimate {
    /// Lower estimate of the Lipschitz constant in (y, z).
    pub estimate: f64,
    /// Set when the estimate exceeds the declared constant.
    pub exceeds_declared: bool,
}

/// Estimates the Lipschitz constant of `e` in the (y, z) variables over a
/// box, with t and x frozen per pair. Mixes paired small perturbations
/// (single coordinate and full random direction), far pairs and box-corner
/// probes, and returns the maximal observed ratio |Δe| / (|Δy| + |Δz|).
/// Evaluation failures (domain holes) are skipped, never raised.
pub fn lipschitz_probe(
    e: &Expr,
    bbox: &ProbeBox,
    samples: usize,
    declared: Option<f64>,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if samples < 100 {
        return Err(Error::Config(format!("lipschitz_probe needs samples >= 100, got {samples}")));
    }
    let n = bbox.y.len();
    let d = bbox.z.len();
    if n + d == 0 {
        return Ok(LipschitzEstimate { estimate: 0.0, exceeds_declared: false });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;

    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };

    let ratio = |t: f64, x: &[f64], y1: &[f64], z1: &[f64], y2: &[f64], z2: &[f64]| -> Option<f64> {
        let v1 = e.eval(&EvalContext::new(t, x, y1, z1)).ok()?;
        let v2 = e.eval(&EvalContext::new(t, x, y2, z2)).ok()?;
        let dy: f64 = y1.iter().zip(y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let dz: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = dy + dz;
        if den == 0.0 {
            return None;
        }
        Some((v1 - v2).abs() / den)
    };

    // Corner probes: one-sided inward perturbation along each coordinate.
    let corners = 1usize << (n + d).min(12);
    for corner in 0..corners {
        let t = bbox.t.0;
        let x: Vec<f64> = bbox.x.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut y: Vec<f64> = Vec::with_capacity(n);
        let mut z: Vec<f64> = Vec::with_capacity(d);
        for (j, &(lo, hi)) in bbox.y.iter().enumerate() {
            y.push(if corner >> j & 1 == 1 { hi } else { lo });
        }
        for (j, &(lo, hi)) in bbox.z.iter().enumerate() {
            z.push(if corner >> (n + j) & 1 == 1 { hi } else { lo });
        }
        for coord in 0..n + d {
            let mut y2 = y.clone();
            let mut z2 = z.clone();
            let (at_hi, range) = if coord < n {
                (y[coord] >= bbox.y[coord].1, bbox.y[coord].1 - bbox.y[coord].0)
            } else {
                (z[coord - n] >= bbox.z[coord - n].1, bbox.z[coord - n].1 - bbox.z[coord - n].0)
            };
            let delta = 1e-6 * range.max(1.0) * if at_hi { -1.0 } else { 1.0 };
            if coord < n {
                y2[coord] += delta;
            } else {
                z2[coord - n] += delta;
            }
            if let Some(r) = ratio(t, &x, &y, &z, &y2, &z2) {
                best = best.max(r);
            }
        }
    }

    for s in 0..samples {
        let t = draw(&mut rng, bbox.t);
        let x: Vec<f64> = bbox.x.iter().map(|&b| draw(&mut rng, b)).collect();
        let y: Vec<f64> = bbox.y.iter().map(|&b| draw(&mut rng, b)).collect();
        let z: Vec<f64> = bbox.z.iter().map(|&b| draw(&mut rng, b)).collect();
        let (y2, z2) = match s % 3 {
            // paired perturbation of a single random coordinate
            0 => {
                let coord = rng.gen_range(0..n + d);
                let mut y2 = y.clone();
                let mut z2 = z.clone();
                let range = if coord < n {
                    bbox.y[coord].1 - bbox.y[coord].0
                } else {
                    bbox.z[coord - n].1 - bbox.z[coord - n].0
                };
                let delta = 1e-6 * range.max(1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                if coord < n {
                    y2[coord] += delta;
                } else {
                    z2[coord - n] += delta;
                }
                (y2, z2)
            }
            // paired perturbation in a random direction
            1 => {
                let mut y2 = y.clone();
                let mut z2 = z.clone();
                for (j, v) in y2.iter_mut().enumerate() {
                    let range = bbox.y[j].1 - bbox.y[j].0;
                    *v += 1e-6 * range.max(1.0) * (rng.gen::<f64>() - 0.5);
                }
                for (j, v) in z2.iter_mut().enumerate() {
                    let range = bbox.z[j].1 - bbox.z[j].0;
                    *v += 1e-6 * range.max(1.0) * (rng.gen::<f64>() - 0.5);
                }
                (y2, z2)
            }
            // far pair
            _ => {
                let y2: Vec<f64> = bbox.y.iter().map(|&b| draw(&mut rng, b)).collect();
                let z2: Vec<f64> = bbox.z.iter().map(|&b| draw(&mut rng, b)).collect();
                (y2, z2)
            }
        };
        if let Some(r) = ratio(t, &x, &y, &z, &y2, &z2) {
            best = best.max(r);
        }
    }

    let exceeds = declared.map(|l| best > l * (1.0 + 1e-9)).unwrap_or(false);
    Ok(LipschitzEstimate { estimate: best, exceeds_declared: exceeds })
}
