//! Small expression language for scalar coefficients in scenario files.
//!
//! Variables: `x` (state), `m1` (mean), `m2` (second moment), `mtanh` (mean of tanh),
//! `z`, `a`, `t`, and the constant `pi`. Functions: sin, cos, tanh, exp, log, abs, sqrt,
//! min, max. Operators: `+ - * / ^` with the usual precedence; `^` is right-associative.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X,
    M1,
    M2,
    MTanh,
    Z,
    A,
    T,
}

/// Values bound to the variables at evaluation time.
#[derive(Clone, Copy, Debug, Default)]
pub struct Env {
    pub x: f64,
    pub m1: f64,
    pub m2: f64,
    pub mtanh: f64,
    pub z: f64,
    pub a: f64,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Log,
    Abs,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func2 {
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Debug)]
enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// A parsed expression.
#[derive(Clone, Debug)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, len: src.len() };
        let root = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(err(t.offset, format!("unexpected `{}`", t.text)));
        }
        Ok(Self { root, source: src.to_string() })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses(&self, v: Var) -> bool {
        fn walk(n: &Node, v: Var) -> bool {
            match n {
                Node::Const(_) => false,
                Node::Var(w) => *w == v,
                Node::Neg(a) | Node::Call(_, a) => walk(a, v),
                Node::Bin(_, a, b) | Node::Call2(_, a, b) => walk(a, v) || walk(b, v),
            }
        }
        walk(&self.root, v)
    }

    pub fn eval(&self, env: &Env) -> f64 {
        eval(&self.root, env)
    }
}

fn eval(n: &Node, e: &Env) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::Var(v) => match v {
            Var::X => e.x,
            Var::M1 => e.m1,
            Var::M2 => e.m2,
            Var::MTanh => e.mtanh,
            Var::Z => e.z,
            Var::A => e.a,
            Var::T => e.t,
        },
        Node::Neg(a) => -eval(a, e),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, e), eval(b, e));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => {
                    if b == b.trunc() && b.abs() <= 16.0 {
                        a.powi(b as i32)
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
        Node::Call(f, a) => {
            let a = eval(a, e);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Abs => a.abs(),
                Func::Sqrt => a.sqrt(),
            }
        }
        Node::Call2(f, a, b) => {
            let (a, b) = (eval(a, e), eval(b, e));
            match f {
                Func2::Min => a.min(b),
                Func2::Max => a.max(b),
            }
        }
    }
}

/// Offset-carrying error; the scenario layer converts offsets to line/column.
#[derive(Clone, Debug)]
struct Tok {
    text: String,
    offset: usize,
}

fn err(offset: usize, message: String) -> Error {
    // Column within the expression, 1-based; line is fixed up by the caller.
    Error::Parse { line: 1, column: offset + 1, message }
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let save = i;
                i += 1;
                if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
                    i += 1;
                }
                if i < b.len() && (b[i] as char).is_ascii_digit() {
                    while i < b.len() && (b[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            out.push(Tok { text: src[start..i].to_string(), offset: start });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push(Tok { text: src[start..i].to_string(), offset: start });
        } else if "+-*/^(),".contains(c) {
            out.push(Tok { text: c.to_string(), offset: i });
            i += 1;
        } else {
            return Err(err(i, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.peek().is_some_and(|t| t.text == s) {
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
            let off = self.peek().map_or(self.len, |t| t.offset);
            Err(err(off, format!("expected `{s}`")))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat("+") {
                Op::Add
            } else if self.eat("-") {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat("*") {
                Op::Mul
            } else if self.eat("/") {
                Op::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat("-") {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat("+") {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat("^") {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return Err(err(self.len, "unexpected end of expression".into()));
        };
        self.pos += 1;
        if tok.text == "(" {
            let e = self.expr()?;
            self.expect(")")?;
            return Ok(e);
        }
        let first = tok.text.chars().next().unwrap();
        if first.is_ascii_digit() || first == '.' {
            return tok
                .text
                .parse::<f64>()
                .map(Node::Const)
                .map_err(|_| err(tok.offset, format!("bad number `{}`", tok.text)));
        }
        if first.is_ascii_alphabetic() || first == '_' {
            let var = match tok.text.as_str() {
                "x" => Some(Var::X),
                "m1" => Some(Var::M1),
                "m2" => Some(Var::M2),
                "mtanh" => Some(Var::MTanh),
                "z" => Some(Var::Z),
                "a" => Some(Var::A),
                "t" => Some(Var::T),
                _ => None,
            };
            if let Some(v) = var {
                return Ok(Node::Var(v));
            }
            if tok.text == "pi" {
                return Ok(Node::Const(std::f64::consts::PI));
            }
            let f1 = match tok.text.as_str() {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "tanh" => Some(Func::Tanh),
                "exp" => Some(Func::Exp),
                "log" => Some(Func::Log),
                "abs" => Some(Func::Abs),
                "sqrt" => Some(Func::Sqrt),
                _ => None,
            };
            if let Some(f) = f1 {
                self.expect("(")?;
                let a = self.expr()?;
                self.expect(")")?;
                return Ok(Node::Call(f, Box::new(a)));
            }
            let f2 = match tok.text.as_str() {
                "min" => Some(Func2::Min),
                "max" => Some(Func2::Max),
                _ => None,
            };
            if let Some(f) = f2 {
                self.expect("(")?;
                let a = self.expr()?;
                self.expect(",")?;
                let b = self.expr()?;
                self.expect(")")?;
                return Ok(Node::Call2(f, Box::new(a), Box::new(b)));
            }
            return Err(err(tok.offset, format!("unknown identifier `{}`", tok.text)));
        }
        Err(err(tok.offset, format!("unexpected `{}`", tok.text)))
    }
}
