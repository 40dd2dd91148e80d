//! Arithmetic expression language for initial data, forcings, and exact
//! solutions in config files.
//!
//! Variables `x`, `y`, `t`; constants `pi`, `L`; functions `sin`, `cos`,
//! `exp`, `tanh`; operators `+ - * / ^` with the usual precedence, `^`
//! binding tighter than unary minus and associating to the right. Hand-rolled
//! recursive descent; errors carry the byte offset of the offending token.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sym {
    X,
    Y,
    T,
    Pi,
    BigL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    Sym(Sym),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Parse failure with the byte offset of the offending token in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for ParseError {}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { offset, message: message.into() })
}

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
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self { src: src.as_bytes(), pos: 0 }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token with its starting byte offset; None at end of input.
    fn next(&mut self) -> Result<Option<(usize, Tok)>, ParseError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'0'..=b'9' => return self.number(start).map(Some),
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
                return Ok(Some((start, Tok::Ident(name))));
            }
            _ => return err(start, format!("unexpected character {:?}", c as char)),
        };
        self.pos += 1;
        Ok(Some((start, tok)))
    }

    fn number(&mut self, start: usize) -> Result<(usize, Tok), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            let frac = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == frac {
                return err(frac, "digit expected after decimal point");
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                // "2e" starts an identifier-free mess; report at the 'e'.
                return err(mark, "digit expected in exponent");
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match text.parse::<f64>() {
            Ok(v) => Ok((start, Tok::Num(v))),
            Err(_) => err(start, format!("bad numeric literal {text:?}")),
        }
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    cursor: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.toks.get(self.cursor)
    }

    fn bump(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.cursor).cloned();
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|&(o, _)| o).unwrap_or(self.end)
    }

    fn expect_rparen(&mut self, opened_at: usize) -> Result<(), ParseError> {
        match self.bump() {
            Some((_, Tok::RParen)) => Ok(()),
            Some((o, _)) => err(o, "expected ')'"),
            None => err(opened_at, "unclosed '('"),
        }
    }

    // additive := multiplicative (('+' | '-') multiplicative)*
    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        while let Some(&(_, ref t)) = self.peek() {
            let op = match t {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.multiplicative()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // multiplicative := signed (('*' | '/') signed)*
    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.signed()?;
        while let Some(&(_, ref t)) = self.peek() {
            let op = match t {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.signed()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // signed := '-' signed | power. A chain of minuses nests.
    fn signed(&mut self) -> Result<Expr, ParseError> {
        if let Some(&(_, Tok::Minus)) = self.peek() {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.signed()?)));
        }
        self.power()
    }

    // power := atom ('^' signed)?  The exponent re-enters `signed`, which
    // makes '^' right-associative and lets a bare negated exponent through,
    // while '-2^2' still reads as '-(2^2)'.
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(&(_, Tok::Caret)) = self.peek() {
            self.bump();
            let exponent = self.signed()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.bump() {
            Some((_, Tok::Num(v))) => Ok(Expr::Lit(v)),
            Some((o, Tok::Ident(name))) => self.ident(o, &name),
            Some((o, Tok::LParen)) => {
                let inner = self.additive()?;
                self.expect_rparen(o)?;
                Ok(inner)
            }
            Some((o, _)) => err(o, "expected a value"),
            None => err(self.end, "unexpected end of expression"),
        }
    }

    fn ident(&mut self, offset: usize, name: &str) -> Result<Expr, ParseError> {
        let sym = match name {
            "x" => Some(Sym::X),
            "y" => Some(Sym::Y),
            "t" => Some(Sym::T),
            "pi" => Some(Sym::Pi),
            "L" => Some(Sym::BigL),
            _ => None,
        };
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "tanh" => Some(Func::Tanh),
            _ => None,
        };
        let next_is_lparen = matches!(self.peek(), Some(&(_, Tok::LParen)));
        match (sym, func) {
            (Some(s), _) if !next_is_lparen => Ok(Expr::Sym(s)),
            (Some(_), _) => err(offset, format!("{name:?} is not a function")),
            (_, Some(f)) if next_is_lparen => {
                let (open, _) = self.bump().unwrap();
                if matches!(self.peek(), Some(&(_, Tok::RParen))) {
                    return err(self.here(), format!("{name} takes exactly one argument"));
                }
                let arg = self.additive()?;
                if matches!(self.peek(), Some(&(_, Tok::Comma))) {
                    return err(self.here(), format!("{name} takes exactly one argument"));
                }
                self.expect_rparen(open)?;
                Ok(Expr::Call(f, Box::new(arg)))
            }
            (_, Some(_)) => err(offset, format!("{name} needs a parenthesized argument")),
            _ => err(offset, format!("unknown identifier {name:?}")),
        }
    }
}

/// Parse one expression; the whole source must be consumed.
pub fn parse_expression(src: &str) -> Result<Expr, ParseError> {
    let mut lexer = Lexer::new(src);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    if toks.is_empty() {
        return err(0, "empty expression");
    }
    let mut parser = Parser { toks, cursor: 0, end: src.len() };
    let expr = parser.additive()?;
    if let Some(&(o, _)) = parser.peek() {
        return err(o, "trailing input after expression");
    }
    Ok(expr)
}

impl Expr {
    /// IEEE double evaluation at one point. Non-finite results propagate;
    /// config validation rejects them when sampling over a grid.
    pub fn eval(&self, x: f64, y: f64, t: f64, l: f64) -> f64 {
        match self {
            Expr::Lit(v) => *v,
            Expr::Sym(Sym::X) => x,
            Expr::Sym(Sym::Y) => y,
            Expr::Sym(Sym::T) => t,
            Expr::Sym(Sym::Pi) => std::f64::consts::PI,
            Expr::Sym(Sym::BigL) => l,
            Expr::Neg(e) => -e.eval(x, y, t, l),
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, y, t, l);
                let b = b.eval(x, y, t, l);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, e) => {
                let v = e.eval(x, y, t, l);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Tanh => v.tanh(),
                }
            }
        }
    }

    /// Minimal-parenthesis rendering; parsing the result reproduces the tree.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.render(&mut out);
        out
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            Expr::Lit(_) | Expr::Sym(_) | Expr::Call(..) => 5,
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            Expr::Lit(v) => {
                // `{}` on f64 is the shortest decimal form that parses back
                // exactly; it never switches to exponent notation, so a
                // literal written as 1e10 prints expanded.
                out.push_str(&format!("{v}"));
            }
            Expr::Sym(s) => out.push_str(match s {
                Sym::X => "x",
                Sym::Y => "y",
                Sym::T => "t",
                Sym::Pi => "pi",
                Sym::BigL => "L",
            }),
            Expr::Neg(e) => {
                out.push('-');
                // The negated operand must bind at least as tightly as the
                // minus itself, except '^' which already outranks it.
                self.child(e, e.precedence() < 3, out);
            }
            Expr::Bin(op, a, b) => {
                let (sym, prec) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    // Right-associative: parenthesize a left child of equal
                    // precedence; a bare unary minus is legal on the right.
                    self.child(a, a.precedence() <= prec, out);
                    out.push_str(sym);
                    self.child(b, b.precedence() < 3, out);
                } else {
                    self.child(a, a.precedence() < prec, out);
                    out.push_str(sym);
                    // Left-associative: equal precedence on the right needs
                    // parens ('a-(b-c)'), and a bare '-' after '-' or '/'
                    // stays legal but unreadable, so wrap those too.
                    let need = b.precedence() < prec
                        || (b.precedence() == prec && matches!(op, BinOp::Sub | BinOp::Div | BinOp::Add | BinOp::Mul))
                        || matches!(b.as_ref(), Expr::Neg(_));
                    self.child(b, need, out);
                }
            }
            Expr::Call(f, e) => {
                out.push_str(match f {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                    Func::Tanh => "tanh",
                });
                out.push('(');
                e.render(out);
                out.push(')');
            }
        }
    }

    fn child(&self, e: &Expr, parens: bool, out: &mut String) {
        if parens {
            out.push('(');
            e.render(out);
            out.push(')');
        } else {
            e.render(out);
        }
    }
}

/// Expressions the pretty-printer reproduces verbatim up to whitespace.
/// Exercised here and by the acceptance suite.
pub const CORPUS: [&str; 50] = [
    "2+3*4",
    "sin(x)*exp(-t)",
    "2^3^2",
    "pi",
    "cos(0)",
    "x-x",
    "x+y+t",
    "x*y*t",
    "x-(y-t)",
    "x/(y/t)",
    "x/y/t",
    "-x",
    "--x",
    "-(x+y)",
    "-(x*y)",
    "-x*y",
    "-2^2",
    "2^-3",
    "(-2)^2",
    "(x+y)^2",
    "x^2+y^2",
    "sin(pi*x)",
    "cos(2*pi*y/L)",
    "exp(-t/2)",
    "tanh(10*(y-L/2))",
    "0.2*cos(t)*cos(2*pi*y)*cos(x)",
    "0.2*cos(t)*sin(2*pi*y)*sin(x)",
    "-0.2*(1+sin(t))*2*pi*sin(pi*y/L)^2*cos(x)",
    "0.1*(1+sin(t))*sin(2*pi*y)*sin(x)",
    "2*pi*(0.08*(1+sin(t))-0.1*cos(t))*sin(x)",
    "1/(1+x^2)",
    "x^(y+t)",
    "(x^y)^t",
    "x^y^t",
    "sin(cos(exp(tanh(x))))",
    "1+2-3+4",
    "1*2/3*4",
    "3.5",
    "0.001",
    "exp(-(x^2+y^2))",
    "x^2*y^2",
    "L",
    "L^2-y^2",
    "(L^2-y^2)*y/L^2",
    "y*(1-y)*(1+y)",
    "sin(x)^3",
    "sin(x^3)",
    "exp(x)*exp(-x)",
    "(1+tanh(y))/2",
    "pi*L/2",
];
