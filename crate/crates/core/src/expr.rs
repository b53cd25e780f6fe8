//! Arithmetic expressions in the macroscopic coordinates, used for initial
//! profiles, test functions and curves in configuration files.
//!
//! Variables: `x`, `y`, `z`, `w` (coordinates 1..4), `t`, and the constants
//! `pi`, `e`. Functions: `sin cos tan exp log sqrt abs tanh floor min max`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Time,
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(String, Vec<Node>),
}

/// A parsed expression; evaluate with [`Expr::eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    dim: usize,
}

const UNARY: [&str; 10] = ["sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "floor", "sign"];
const BINARY: [&str; 2] = ["min", "max"];

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    src: &'a str,
    dim: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Expression(format!("{msg} at column {} in `{}`", self.pos + 1, self.src)))
    }

    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => self.err("unexpected end"),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return self.err("expected `)`");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => self.err(&format!("unexpected `{c}`")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit() || *c == '.') {
            self.pos += 1;
        }
        if self.chars.get(self.pos).is_some_and(|c| *c == 'e' || *c == 'E') {
            let save = self.pos;
            self.pos += 1;
            if self.chars.get(self.pos).is_some_and(|c| *c == '+' || *c == '-') {
                self.pos += 1;
            }
            if self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                while self.chars.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        match text.parse() {
            Ok(v) => Ok(Node::Num(v)),
            Err(_) => self.err(&format!("bad number `{text}`")),
        }
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.chars.get(self.pos).is_some_and(|c| c.is_ascii_alphanumeric() || *c == '_') {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        if self.peek() == Some('(') {
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.peek() == Some(',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
            if self.peek() != Some(')') {
                return self.err("expected `)` after arguments");
            }
            self.pos += 1;
            let arity = if UNARY.contains(&name.as_str()) {
                1
            } else if BINARY.contains(&name.as_str()) {
                2
            } else {
                return self.err(&format!("unknown function `{name}`"));
            };
            if args.len() != arity {
                return self.err(&format!("`{name}` takes {arity} argument(s)"));
            }
            return Ok(Node::Call(name, args));
        }
        match name.as_str() {
            "pi" => Ok(Node::Num(std::f64::consts::PI)),
            "e" => Ok(Node::Num(std::f64::consts::E)),
            "t" => Ok(Node::Time),
            "x" | "y" | "z" | "w" => {
                let k = "xyzw".find(&name).unwrap();
                if k >= self.dim {
                    return self.err(&format!("variable `{name}` not available in dimension {}", self.dim));
                }
                Ok(Node::Var(k))
            }
            _ => self.err(&format!("unknown identifier `{name}`")),
        }
    }
}

impl Expr {
    pub fn parse(src: &str, dim: usize) -> Result<Expr> {
        let mut p = Parser { chars: src.chars().collect(), pos: 0, src, dim };
        let root = p.expr()?;
        if p.peek().is_some() {
            return p.err("trailing input");
        }
        Ok(Expr { source: src.to_string(), root, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.eval_at(v, 0.0)
    }

    pub fn eval_at(&self, v: &[f64], t: f64) -> f64 {
        eval(&self.root, v, t)
    }
}

fn eval(n: &Node, v: &[f64], t: f64) -> f64 {
    match n {
        Node::Num(x) => *x,
        Node::Var(k) => v[*k],
        Node::Time => t,
        Node::Neg(a) => -eval(a, v, t),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, v, t), eval(b, v, t));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], v, t);
            match f.as_str() {
                "sin" => a.sin(),
                "cos" => a.cos(),
                "tan" => a.tan(),
                "exp" => a.exp(),
                "log" => a.ln(),
                "sqrt" => a.sqrt(),
                "abs" => a.abs(),
                "tanh" => a.tanh(),
                "floor" => a.floor(),
                "sign" => a.signum(),
                "min" => a.min(eval(&args[1], v, t)),
                _ => a.max(eval(&args[1], v, t)),
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let e = Expr::parse("1 + 2*3^2 - -4/2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]), 1.0 + 18.0 + 2.0);
        assert_eq!(Expr::parse("-2^2", 1).unwrap().eval(&[0.0]), -4.0);
        assert_eq!(Expr::parse("2^3^2", 1).unwrap().eval(&[0.0]), 512.0);
        assert_eq!(Expr::parse("1.5e-1*2E1", 1).unwrap().eval(&[0.0]), 3.0);
    }

    #[test]
    fn variables_and_functions() {
        let e = Expr::parse("0.5 + 0.3*sin(2*pi*x) * cos(2*pi*y)", 2).unwrap();
        assert!((e.eval(&[0.25, 0.0]) - 0.8).abs() < 1e-15);
        let f = Expr::parse("max(x, t) + min(1, abs(-3)) + sqrt(exp(log(4)))", 1).unwrap();
        assert!((f.eval_at(&[0.1], 0.7) - 3.7).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        for bad in ["", "1 +", "sin(1,2)", "foo(1)", "y", "(1", "1 2", "q"] {
            assert!(matches!(Expr::parse(bad, 1), Err(Error::Expression(_))), "{bad}");
        }
    }
}
