//! A small arithmetic language over `x1 … xN` and `t` for coefficient and
//! boundary-data expressions.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | 't' | 'x'k | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func  := sin | cos | exp | abs | sqrt | min | max
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    X(usize),
    T,
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func1 {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func2 {
    Min,
    Max,
}

/// A parsed expression in `n` spatial variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    n: usize,
    root: Node,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            let found = self.peek().map(|b| format!("'{}'", b as char)).unwrap_or_else(|| "end of input".into());
            self.err(self.pos, format!("expected '{}', found {found}", c as char))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat(b'+') {
                Op::Add
            } else if self.eat(b'-') {
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
            let op = if self.eat(b'*') {
                Op::Mul
            } else if self.eat(b'/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let start = {
            self.skip_ws();
            self.pos
        };
        match self.peek() {
            None => self.err(start, "unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(start),
            Some(c) if c.is_ascii_alphabetic() => {
                while self.pos < self.bytes.len()
                    && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let ident = &self.src[start..self.pos];
                self.ident(ident, start)
            }
            Some(c) => self.err(start, format!("unexpected character '{}'", c as char)),
        }
    }

    fn number(&mut self, start: usize) -> Result<Node> {
        let b = self.bytes;
        let mut i = self.pos;
        while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
            i += 1;
        }
        if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
            let mut j = i + 1;
            if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                j += 1;
            }
            if j < b.len() && b[j].is_ascii_digit() {
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = &self.src[start..i];
        self.pos = i;
        text.parse::<f64>()
            .map(Node::Num)
            .or_else(|_| self.err(start, format!("malformed number '{text}'")))
    }

    fn ident(&mut self, ident: &str, start: usize) -> Result<Node> {
        match ident {
            "t" => return Ok(Node::T),
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            _ => {}
        }
        if let Some(k) = ident.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
            if k == 0 || k > self.n {
                return self.err(start, format!("variable '{ident}' outside x1..x{}", self.n));
            }
            return Ok(Node::X(k - 1));
        }
        let f1 = match ident {
            "sin" => Some(Func1::Sin),
            "cos" => Some(Func1::Cos),
            "exp" => Some(Func1::Exp),
            "abs" => Some(Func1::Abs),
            "sqrt" => Some(Func1::Sqrt),
            _ => None,
        };
        let f2 = match ident {
            "min" => Some(Func2::Min),
            "max" => Some(Func2::Max),
            _ => None,
        };
        if f1.is_none() && f2.is_none() {
            return self.err(start, format!("unknown identifier '{ident}'"));
        }
        self.expect(b'(')?;
        let a = self.expr()?;
        let node = if let Some(f) = f1 {
            Node::Call1(f, Box::new(a))
        } else {
            self.expect(b',')?;
            let b = self.expr()?;
            Node::Call2(f2.unwrap(), Box::new(a), Box::new(b))
        };
        self.expect(b')')?;
        Ok(node)
    }
}

impl Expr {
    /// Parses `src` over the variables `x1 … xn` and `t`.
    pub fn parse(src: &str, n: usize) -> Result<Expr> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            n,
        };
        let root = p.expr()?;
        if let Some(c) = p.peek() {
            return p.err(p.pos, format!("unexpected trailing '{}'", c as char));
        }
        Ok(Expr {
            source: src.to_string(),
            n,
            root,
        })
    }

    pub fn constant(v: f64, n: usize) -> Expr {
        Expr {
            source: format!("{v}"),
            n,
            root: Node::Num(v),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        eval(&self.root, x, t)
    }

    /// Constant value when the expression mentions no variable.
    pub fn as_constant(&self) -> Option<f64> {
        if uses_vars(&self.root, &mut |_| true) {
            None
        } else {
            Some(self.eval(&vec![0.0; self.n], 0.0))
        }
    }

    /// Whether the expression depends on any spatial variable.
    pub fn depends_on_space(&self) -> bool {
        uses_vars(&self.root, &mut |v| v.is_some())
    }
}

/// Visits variables; `None` stands for `t`.
fn uses_vars(node: &Node, pred: &mut dyn FnMut(Option<usize>) -> bool) -> bool {
    match node {
        Node::Num(_) => false,
        Node::X(k) => pred(Some(*k)),
        Node::T => pred(None),
        Node::Neg(a) | Node::Call1(_, a) => uses_vars(a, pred),
        Node::Bin(_, a, b) | Node::Call2(_, a, b) => uses_vars(a, pred) || uses_vars(b, pred),
    }
}

fn eval(node: &Node, x: &[f64], t: f64) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::X(k) => x[*k],
        Node::T => t,
        Node::Neg(a) => -eval(a, x, t),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, x, t), eval(b, x, t));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => a.powf(b),
            }
        }
        Node::Call1(f, a) => {
            let a = eval(a, x, t);
            match f {
                Func1::Sin => a.sin(),
                Func1::Cos => a.cos(),
                Func1::Exp => a.exp(),
                Func1::Abs => a.abs(),
                Func1::Sqrt => a.sqrt(),
            }
        }
        Node::Call2(f, a, b) => {
            let (a, b) = (eval(a, x, t), eval(b, x, t));
            match f {
                Func2::Min => a.min(b),
                Func2::Max => a.max(b),
            }
        }
    }
}
