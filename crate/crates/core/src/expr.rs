//! A small expression language for coefficients `a(x)`, matrix entries and
//! integrands `f(x, y, xi)`, with symbolic partial derivatives in `xi`.
//!
//! Grammar (EBNF):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' integer)?
//! base   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')' | '-' base
//! ```
//!
//! Precedence is `^` > unary `-` > `*`,`/` > `+`,`-`; `pi` is a built-in
//! constant. Exponents are (signed) integers only. Variables are `x1..xN`,
//! `y1..yN` and `xi1..xid`.

use crate::error::Error;
use crate::Result;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Macro variable `x{i+1}`.
    X(usize),
    /// Micro variable `y{i+1}`.
    Y(usize),
    /// Vector slot `xi{i+1}`.
    Xi(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Min,
    Max,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Func::Sin | Func::Cos | Func::Exp | Func::Abs => 1,
            Func::Min | Func::Max => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

/// Abstract syntax tree of an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i64),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for evaluation. Missing slots simply have length zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub xi: &'a [f64],
}

impl<'a> Bindings<'a> {
    fn get(&self, v: Var) -> Option<f64> {
        match v {
            Var::X(i) => self.x.get(i).copied(),
            Var::Y(i) => self.y.get(i).copied(),
            Var::Xi(i) => self.xi.get(i).copied(),
        }
    }
}

fn var_name(v: Var) -> String {
    match v {
        Var::X(i) => format!("x{}", i + 1),
        Var::Y(i) => format!("y{}", i + 1),
        Var::Xi(i) => format!("xi{}", i + 1),
    }
}

impl Expr {
    /// Checked evaluation; errors on unbound variables and division by zero.
    pub fn eval(&self, env: Bindings) -> Result<f64> {
        match self {
            Expr::Num(c) => Ok(*c),
            Expr::Var(v) => env.get(*v).ok_or_else(|| Error::UnboundVariable {
                name: var_name(*v),
            }),
            Expr::Neg(e) => Ok(-e.eval(env)?),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(env)?, b.eval(env)?);
                match op {
                    BinOp::Add => Ok(a + b),
                    BinOp::Sub => Ok(a - b),
                    BinOp::Mul => Ok(a * b),
                    BinOp::Div => {
                        if b == 0.0 {
                            Err(Error::DivisionByZero)
                        } else {
                            Ok(a / b)
                        }
                    }
                }
            }
            Expr::Pow(e, n) => Ok(powi(e.eval(env)?, *n)),
            Expr::Call(f, args) => {
                let a = args[0].eval(env)?;
                Ok(match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(env)?),
                    Func::Max => a.max(args[1].eval(env)?),
                })
            }
        }
    }

    /// True if the subtree reads any `xi` slot.
    pub fn depends_on_xi(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => matches!(v, Var::Xi(_)),
            Expr::Neg(e) => e.depends_on_xi(),
            Expr::Bin(_, a, b) => a.depends_on_xi() || b.depends_on_xi(),
            Expr::Pow(e, _) => e.depends_on_xi(),
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on_xi()),
        }
    }

    /// True if the subtree reads any `y` slot.
    pub fn depends_on_y(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => matches!(v, Var::Y(_)),
            Expr::Neg(e) => e.depends_on_y(),
            Expr::Bin(_, a, b) => a.depends_on_y() || b.depends_on_y(),
            Expr::Pow(e, _) => e.depends_on_y(),
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on_y()),
        }
    }

    /// Largest variable index used per slot, as `(n_x, n_y, n_xi)` counts.
    pub fn arity(&self) -> (usize, usize, usize) {
        fn walk(e: &Expr, m: &mut (usize, usize, usize)) {
            match e {
                Expr::Num(_) => {}
                Expr::Var(Var::X(i)) => m.0 = m.0.max(i + 1),
                Expr::Var(Var::Y(i)) => m.1 = m.1.max(i + 1),
                Expr::Var(Var::Xi(i)) => m.2 = m.2.max(i + 1),
                Expr::Neg(a) => walk(a, m),
                Expr::Bin(_, a, b) => {
                    walk(a, m);
                    walk(b, m);
                }
                Expr::Pow(a, _) => walk(a, m),
                Expr::Call(_, args) => args.iter().for_each(|a| walk(a, m)),
            }
        }
        let mut m = (0, 0, 0);
        walk(self, &mut m);
        m
    }

    /// Symbolic partial derivative with respect to `xi{i+1}`.
    ///
    /// `abs`, `min` and `max` over `xi`-dependent subtrees are rejected with
    /// `NonDifferentiable`; callers fall back to finite differences.
    pub fn d_xi(&self, i: usize) -> Result<Expr> {
        Ok(match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(v) => {
                if *v == Var::Xi(i) {
                    Expr::Num(1.0)
                } else {
                    Expr::Num(0.0)
                }
            }
            Expr::Neg(e) => neg(e.d_xi(i)?),
            Expr::Bin(BinOp::Add, a, b) => add(a.d_xi(i)?, b.d_xi(i)?),
            Expr::Bin(BinOp::Sub, a, b) => sub(a.d_xi(i)?, b.d_xi(i)?),
            Expr::Bin(BinOp::Mul, a, b) => add(
                mul(a.d_xi(i)?, (**b).clone()),
                mul((**a).clone(), b.d_xi(i)?),
            ),
            Expr::Bin(BinOp::Div, a, b) => {
                // (a/b)' = a'/b - a b'/b^2
                let da = a.d_xi(i)?;
                let db = b.d_xi(i)?;
                sub(
                    div(da, (**b).clone()),
                    div(mul((**a).clone(), db), Expr::Pow(b.clone(), 2)),
                )
            }
            Expr::Pow(e, n) => {
                if *n == 0 {
                    Expr::Num(0.0)
                } else {
                    mul(
                        mul(Expr::Num(*n as f64), Expr::Pow(e.clone(), *n - 1)),
                        e.d_xi(i)?,
                    )
                }
            }
            Expr::Call(f, args) => match f {
                Func::Sin => mul(Expr::Call(Func::Cos, args.clone()), args[0].d_xi(i)?),
                Func::Cos => neg(mul(Expr::Call(Func::Sin, args.clone()), args[0].d_xi(i)?)),
                Func::Exp => mul(Expr::Call(Func::Exp, args.clone()), args[0].d_xi(i)?),
                Func::Abs | Func::Min | Func::Max => {
                    if args.iter().any(|a| a.depends_on_xi()) {
                        return Err(Error::NonDifferentiable {
                            location: format!("{}(..) with xi-dependent argument", f.name()),
                        });
                    }
                    Expr::Num(0.0)
                }
            },
        })
    }

    /// Gradient in `xi`, one expression per slot.
    pub fn grad_xi(&self, d: usize) -> Result<Vec<Expr>> {
        (0..d).map(|i| self.d_xi(i)).collect()
    }

    /// Compile to a postfix program for fast repeated evaluation.
    pub fn compile(&self) -> Program {
        let mut instrs = Vec::new();
        fn emit(e: &Expr, out: &mut Vec<Instr>) {
            match e {
                Expr::Num(c) => out.push(Instr::Const(*c)),
                Expr::Var(Var::X(i)) => out.push(Instr::LoadX(*i)),
                Expr::Var(Var::Y(i)) => out.push(Instr::LoadY(*i)),
                Expr::Var(Var::Xi(i)) => out.push(Instr::LoadXi(*i)),
                Expr::Neg(a) => {
                    emit(a, out);
                    out.push(Instr::Neg);
                }
                Expr::Bin(op, a, b) => {
                    emit(a, out);
                    emit(b, out);
                    out.push(match op {
                        BinOp::Add => Instr::Add,
                        BinOp::Sub => Instr::Sub,
                        BinOp::Mul => Instr::Mul,
                        BinOp::Div => Instr::Div,
                    });
                }
                Expr::Pow(a, n) => {
                    emit(a, out);
                    out.push(Instr::PowInt(*n));
                }
                Expr::Call(f, args) => {
                    for a in args {
                        emit(a, out);
                    }
                    out.push(match f {
                        Func::Sin => Instr::Sin,
                        Func::Cos => Instr::Cos,
                        Func::Exp => Instr::Exp,
                        Func::Abs => Instr::Abs,
                        Func::Min => Instr::Min,
                        Func::Max => Instr::Max,
                    });
                }
            }
        }
        emit(self, &mut instrs);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for ins in &instrs {
            match ins {
                Instr::Const(_) | Instr::LoadX(_) | Instr::LoadY(_) | Instr::LoadXi(_) => {
                    depth += 1;
                }
                Instr::Add | Instr::Sub | Instr::Mul | Instr::Div | Instr::Min | Instr::Max => {
                    depth -= 1;
                }
                _ => {}
            }
            max_depth = max_depth.max(depth);
        }
        Program {
            instrs: Arc::from(instrs.into_boxed_slice()),
            stack_depth: max_depth,
        }
    }
}

fn powi(base: f64, n: i64) -> f64 {
    if n >= 0 {
        base.powi(n.min(i32::MAX as i64) as i32)
    } else {
        1.0 / base.powi((-n).min(i32::MAX as i64) as i32)
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (Expr::Num(z), _) if *z == 0.0 => b,
        (_, Expr::Num(z)) if *z == 0.0 => a,
        _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (_, Expr::Num(z)) if *z == 0.0 => a,
        (Expr::Num(z), _) if *z == 0.0 => neg(b),
        _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (Expr::Num(z), _) | (_, Expr::Num(z)) if *z == 0.0 => Expr::Num(0.0),
        (Expr::Num(o), _) if *o == 1.0 => b,
        (_, Expr::Num(o)) if *o == 1.0 => a,
        _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(z), _) if *z == 0.0 => Expr::Num(0.0),
        (_, Expr::Num(o)) if *o == 1.0 => a,
        _ => Expr::Bin(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => Expr::Num(-x),
        Expr::Neg(inner) => *inner,
        _ => Expr::Neg(Box::new(a)),
    }
}

/// Flat postfix form of an [`Expr`], cheap to evaluate in inner loops.
#[derive(Debug, Clone)]
pub struct Program {
    instrs: Arc<[Instr]>,
    stack_depth: usize,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    LoadX(usize),
    LoadY(usize),
    LoadXi(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    PowInt(i64),
    Sin,
    Cos,
    Exp,
    Abs,
    Min,
    Max,
}

impl Program {
    /// Unchecked evaluation: division by zero yields IEEE inf/nan, and out of
    /// range variable indices read as 0. Callers on hot paths guard for
    /// finiteness themselves; use [`Expr::eval`] for the checked semantics.
    #[inline]
    pub fn eval_fast(&self, env: Bindings) -> f64 {
        debug_assert!(self.stack_depth <= 64);
        let mut stack = [0.0f64; 64];
        let mut sp = 0usize;
        for ins in self.instrs.iter() {
            match *ins {
                Instr::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Instr::LoadX(i) => {
                    stack[sp] = env.x.get(i).copied().unwrap_or(0.0);
                    sp += 1;
                }
                Instr::LoadY(i) => {
                    stack[sp] = env.y.get(i).copied().unwrap_or(0.0);
                    sp += 1;
                }
                Instr::LoadXi(i) => {
                    stack[sp] = env.xi.get(i).copied().unwrap_or(0.0);
                    sp += 1;
                }
                Instr::Add => {
                    sp -= 1;
                    stack[sp - 1] += stack[sp];
                }
                Instr::Sub => {
                    sp -= 1;
                    stack[sp - 1] -= stack[sp];
                }
                Instr::Mul => {
                    sp -= 1;
                    stack[sp - 1] *= stack[sp];
                }
                Instr::Div => {
                    sp -= 1;
                    stack[sp - 1] /= stack[sp];
                }
                Instr::Neg => stack[sp - 1] = -stack[sp - 1],
                Instr::PowInt(n) => stack[sp - 1] = powi(stack[sp - 1], n),
                Instr::Sin => stack[sp - 1] = stack[sp - 1].sin(),
                Instr::Cos => stack[sp - 1] = stack[sp - 1].cos(),
                Instr::Exp => stack[sp - 1] = stack[sp - 1].exp(),
                Instr::Abs => stack[sp - 1] = stack[sp - 1].abs(),
                Instr::Min => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].min(stack[sp]);
                }
                Instr::Max => {
                    sp -= 1;
                    stack[sp - 1] = stack[sp - 1].max(stack[sp]);
                }
            }
        }
        stack[0]
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Parse `text` into an expression tree.
pub fn parse(text: &str) -> Result<Expr> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.skip_ws();
    if p.pos >= p.src.len() {
        return Err(Error::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(Error::Syntax {
            offset: p.pos,
            message: format!("unexpected `{}`", p.src[p.pos] as char),
        });
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // `-` binds looser than `^`, so the operand of a unary minus is a full
    // factor: `-x^2` parses as `-(x^2)`.
    fn factor(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let n = self.integer()?;
            return Ok(Expr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(Error::Syntax {
                offset: self.pos,
                message: "unexpected end of input".into(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => Err(Error::Syntax {
                offset: self.pos,
                message: format!("unexpected `{}`", c as char),
            }),
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Syntax {
                offset: self.pos,
                message: format!("expected `{}`", c as char),
            })
        }
    }

    fn integer(&mut self) -> Result<i64> {
        self.skip_ws();
        let start = self.pos;
        if self.src.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(Error::Syntax {
                offset: start,
                message: "expected integer exponent".into(),
            });
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Syntax {
                offset: start,
                message: "integer exponent out of range".into(),
            })
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark; // `e` belonged to an identifier context; back off
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse().map(Expr::Num).map_err(|_| Error::Syntax {
            offset: start,
            message: format!("bad number `{text}`"),
        })
    }

    fn ident(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if self.peek() == Some(b'(') {
            let func = match name {
                "sin" => Func::Sin,
                "cos" => Func::Cos,
                "exp" => Func::Exp,
                "abs" => Func::Abs,
                "min" => Func::Min,
                "max" => Func::Max,
                _ => {
                    return Err(Error::UnknownIdentifier {
                        name: name.into(),
                        offset: start,
                    })
                }
            };
            self.pos += 1; // consume '('
            let mut args = vec![self.expr()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
            self.expect(b')')?;
            if args.len() != func.arity() {
                return Err(Error::Syntax {
                    offset: start,
                    message: format!(
                        "{} takes {} argument(s), got {}",
                        func.name(),
                        func.arity(),
                        args.len()
                    ),
                });
            }
            return Ok(Expr::Call(func, args));
        }
        if name == "pi" {
            return Ok(Expr::Num(std::f64::consts::PI));
        }
        if let Some(rest) = name.strip_prefix("xi") {
            if let Ok(i) = rest.parse::<usize>() {
                if i >= 1 {
                    return Ok(Expr::Var(Var::Xi(i - 1)));
                }
            }
        } else if let Some(rest) = name.strip_prefix('x') {
            if let Ok(i) = rest.parse::<usize>() {
                if i >= 1 {
                    return Ok(Expr::Var(Var::X(i - 1)));
                }
            }
        } else if let Some(rest) = name.strip_prefix('y') {
            if let Ok(i) = rest.parse::<usize>() {
                if i >= 1 {
                    return Ok(Expr::Var(Var::Y(i - 1)));
                }
            }
        }
        Err(Error::UnknownIdentifier {
            name: name.into(),
            offset: start,
        })
    }
}

// ---------------------------------------------------------------------------
// Canonical printer
// ---------------------------------------------------------------------------

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // precedence levels: 0 additive, 1 multiplicative, 2 unary, 3 power/atom
        fn prec(e: &Expr) -> u8 {
            match e {
                Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 0,
                Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 1,
                Expr::Neg(_) => 2,
                Expr::Pow(..) | Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 3,
            }
        }
        fn write_at(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let p = prec(e);
            let parens = p < min || matches!(e, Expr::Num(c) if *c < 0.0 && min > 0);
            if parens {
                write!(f, "(")?;
            }
            match e {
                Expr::Num(c) => write!(f, "{c}")?,
                Expr::Var(v) => write!(f, "{}", var_name(*v))?,
                Expr::Neg(a) => {
                    write!(f, "-")?;
                    write_at(a, 2, f)?;
                }
                Expr::Bin(op, a, b) => {
                    let (sym, lp, rp) = match op {
                        BinOp::Add => ("+", 0, 0),
                        BinOp::Sub => ("-", 0, 1),
                        BinOp::Mul => ("*", 1, 1),
                        BinOp::Div => ("/", 1, 2),
                    };
                    write_at(a, lp, f)?;
                    write!(f, " {sym} ")?;
                    write_at(b, rp, f)?;
                }
                Expr::Pow(a, n) => {
                    // the exponent base must be an atom to re-parse identically
                    let atom = matches!(a.as_ref(), Expr::Num(c) if *c >= 0.0)
                        || matches!(a.as_ref(), Expr::Var(_) | Expr::Call(..));
                    if atom {
                        write_at(a, 3, f)?;
                    } else {
                        write!(f, "(")?;
                        write_at(a, 0, f)?;
                        write!(f, ")")?;
                    }
                    write!(f, "^{n}")?;
                }
                Expr::Call(func, args) => {
                    write!(f, "{}(", func.name())?;
                    for (i, a) in args.iter().enumerate() {
                        if i > 0 {
                            write!(f, ", ")?;
                        }
                        write_at(a, 0, f)?;
                    }
                    write!(f, ")")?;
                }
            }
            if parens {
                write!(f, ")")?;
            }
            Ok(())
        }
        write_at(self, 0, f)
    }
}

/// Central finite-difference gradient in `xi`; the fallback used when the
/// symbolic derivative is unavailable.
pub fn fd_grad_xi(program: &Program, x: &[f64], y: &[f64], xi: &[f64], out: &mut [f64]) {
    let mut pert = xi.to_vec();
    for i in 0..xi.len() {
        let h = 1e-6 * (1.0 + xi[i].abs());
        pert[i] = xi[i] + h;
        let fp = program.eval_fast(Bindings { x, y, xi: &pert });
        pert[i] = xi[i] - h;
        let fm = program.eval_fast(Bindings { x, y, xi: &pert });
        pert[i] = xi[i];
        out[i] = (fp - fm) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(src: &str, x: &[f64], y: &[f64], xi: &[f64]) -> f64 {
        parse(src).unwrap().eval(Bindings { x, y, xi }).unwrap()
    }

    #[test]
    fn parses_coefficient_and_integrand_examples() {
        parse("0.5 + 0.25*(1+sin(2*pi*x1))/2").unwrap();
        parse("(xi1^2 + xi2^2 - 1)^2").unwrap();
    }

    #[test]
    fn syntax_error_carries_offset() {
        match parse("xi1^") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(matches!(
            parse("foo + 1"),
            Err(Error::UnknownIdentifier { offset: 0, .. })
        ));
    }

    #[test]
    fn eval_examples() {
        assert_eq!(ev("(xi1^2+xi2^2-1)^2", &[], &[], &[1.0, 0.0]), 0.0);
        assert_relative_eq!(ev("2+sin(2*pi*y1)", &[], &[0.25], &[]), 3.0, epsilon = 1e-15);
        assert_eq!(ev("abs(xi1)", &[], &[], &[-2.0]), 2.0);
    }

    #[test]
    fn eval_errors() {
        let e = parse("x3 + 1").unwrap();
        assert!(matches!(
            e.eval(Bindings { x: &[0.0, 0.0], y: &[], xi: &[] }),
            Err(Error::UnboundVariable { .. })
        ));
        let e = parse("1/(x1-1)").unwrap();
        assert!(matches!(
            e.eval(Bindings { x: &[1.0], y: &[], xi: &[] }),
            Err(Error::DivisionByZero)
        ));
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        assert_eq!(ev("-x1^2", &[3.0], &[], &[]), -9.0);
        assert_eq!(ev("(-x1)^2", &[3.0], &[], &[]), 9.0);
    }

    #[test]
    fn grad_of_double_well_matches_power_rule() {
        let e = parse("(xi1^2+xi2^2-1)^2").unwrap();
        let g = e.grad_xi(2).unwrap();
        // d/dxi1 = 2(|xi|^2-1)*2 xi1
        let at = |xi: &[f64]| g[0].eval(Bindings { x: &[], y: &[], xi }).unwrap();
        for xi in [[0.3, -0.7], [1.5, 0.2], [0.0, 0.0]] {
            let expect = 4.0 * (xi[0] * xi[0] + xi[1] * xi[1] - 1.0) * xi[0];
            assert_relative_eq!(at(&xi), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let e = parse("3.5 + sin(2*pi*x1)").unwrap();
        let g = e.grad_xi(2).unwrap();
        assert_eq!(g, vec![Expr::Num(0.0), Expr::Num(0.0)]);
    }

    #[test]
    fn abs_of_xi_is_not_differentiable() {
        let e = parse("abs(xi1)").unwrap();
        assert!(matches!(
            e.grad_xi(1),
            Err(Error::NonDifferentiable { .. })
        ));
        // abs of a xi-free subtree is fine
        let e = parse("abs(x1)*xi1").unwrap();
        e.grad_xi(1).unwrap();
    }

    #[test]
    fn symbolic_gradient_matches_central_differences() {
        let e = parse("xi1^3*xi2 - 2*xi2^2 + xi1/(1+xi2^2) + sin(xi1*xi2)").unwrap();
        let g = e.grad_xi(2).unwrap();
        let prog = e.compile();
        let mut fd = [0.0f64; 2];
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        for _ in 0..100 {
            let xi = [next(), next()];
            fd_grad_xi(&prog, &[], &[], &xi, &mut fd);
            for i in 0..2 {
                let sym = g[i].eval(Bindings { x: &[], y: &[], xi: &xi }).unwrap();
                let scale = sym.abs().max(1.0);
                assert!(
                    (sym - fd[i]).abs() <= 1e-5 * scale,
                    "xi={xi:?} i={i} sym={sym} fd={}",
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn compiled_program_agrees_with_tree_eval() {
        let e = parse("min(xi1, 2)*max(x1, y1) - exp(-x1^2)/(2 + cos(2*pi*y1))").unwrap();
        let p = e.compile();
        let env = Bindings {
            x: &[0.37],
            y: &[0.81],
            xi: &[1.25],
        };
        assert_relative_eq!(p.eval_fast(env), e.eval(env).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn printer_round_trips() {
        for src in [
            "0.5 + 0.25*(1+sin(2*pi*x1))/2",
            "(xi1^2 + xi2^2 - 1)^2",
            "-x1^2 - (x1 - x2)^3",
            "xi1/(0.75+cos(2*pi*x2)/8)^2 + xi2^2",
            "min(3/4 + sin(2*pi*x1)/4, 1 - 1e-9)",
            "1 - 2/x1/x2",
            "2^-2 + x1^-1",
        ] {
            let e = parse(src).unwrap();
            let printed = e.to_string();
            let re = parse(&printed).unwrap_or_else(|err| panic!("reparse `{printed}`: {err}"));
            assert_eq!(e, re, "round trip failed for `{src}` -> `{printed}`");
        }
    }
}
