//! Arithmetic expressions over variant parameters, e.g. `a + b * 2`.
//!
//! Grammar: `expr := term (('+'|'-') term)*`, `term := unary (('*'|'/'|'%') unary)*`,
//! `unary := '-' unary | atom ('^' unary)?`, `atom := number | ident | '(' expr ')'`.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unexpected `{found}` at position {pos}")]
    Unexpected { found: String, pos: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Param(String),
    Neg(Box<Expr>),
    Binary(Box<Expr>, Op, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse().map_err(|_| ExprError::Unexpected {
                found: text.clone(),
                pos: start,
            })?;
            out.push((start, Token::Num(value)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start, Token::Ident(chars[start..i].iter().collect())));
        } else if "+-*/%^()".contains(c) {
            out.push((i, Token::Sym(c)));
            i += 1;
        } else {
            return Err(ExprError::Unexpected {
                found: c.to_string(),
                pos: i,
            });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn eat(&mut self, sym: char) -> bool {
        if self.peek() == Some(&Token::Sym(sym)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Binary(Box::new(lhs), op, Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else if self.eat('%') {
                Op::Rem
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Binary(Box::new(lhs), op, Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat('^') {
            return Ok(Expr::Binary(Box::new(base), Op::Pow, Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some((pos, token)) = self.tokens.get(self.pos).cloned() else {
            return Err(ExprError::UnexpectedEnd);
        };
        self.pos += 1;
        match token {
            Token::Num(n) => Ok(Expr::Number(n)),
            Token::Ident(name) => Ok(Expr::Param(name)),
            Token::Sym('(') => {
                let inner = self.expr()?;
                if self.eat(')') {
                    Ok(inner)
                } else {
                    match self.tokens.get(self.pos) {
                        Some((pos, t)) => Err(ExprError::Unexpected {
                            found: format!("{t:?}"),
                            pos: *pos,
                        }),
                        None => Err(ExprError::UnexpectedEnd),
                    }
                }
            }
            Token::Sym(c) => Err(ExprError::Unexpected {
                found: c.to_string(),
                pos,
            }),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let mut parser = Parser {
            tokens: tokenize(src)?,
            pos: 0,
        };
        let expr = parser.expr()?;
        if let Some((pos, t)) = parser.tokens.get(parser.pos) {
            return Err(ExprError::Unexpected {
                found: format!("{t:?}"),
                pos: *pos,
            });
        }
        Ok(expr)
    }

    pub fn params(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Number(_) => {}
            Expr::Param(name) => out.push(name),
            Expr::Neg(inner) => inner.collect_params(out),
            Expr::Binary(l, _, r) => {
                l.collect_params(out);
                r.collect_params(out);
            }
        }
    }

    pub fn eval(&self, params: &BTreeMap<String, f64>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Number(n) => *n,
            Expr::Param(name) => *params
                .get(name)
                .ok_or_else(|| ExprError::UnknownParameter(name.clone()))?,
            Expr::Neg(inner) => -inner.eval(params)?,
            Expr::Binary(l, op, r) => {
                let (l, r) = (l.eval(params)?, r.eval(params)?);
                match op {
                    Op::Add => l + r,
                    Op::Sub => l - r,
                    Op::Mul => l * r,
                    Op::Div | Op::Rem if r == 0.0 => return Err(ExprError::DivisionByZero),
                    Op::Div => l / r,
                    Op::Rem => l % r,
                    Op::Pow => l.powf(r),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str, vars: &[(&str, f64)]) -> Result<f64, ExprError> {
        let params = vars.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        Expr::parse(src)?.eval(&params)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("1 + 2 * 3", &[]).unwrap(), 7.0);
        assert_eq!(eval("(1 + 2) * 3", &[]).unwrap(), 9.0);
        assert_eq!(eval("10 - 4 - 3", &[]).unwrap(), 3.0);
        assert_eq!(eval("2 ^ 3 ^ 2", &[]).unwrap(), 512.0);
        assert_eq!(eval("-2 * 3", &[]).unwrap(), -6.0);
        assert_eq!(eval("7 % 4", &[]).unwrap(), 3.0);
    }

    #[test]
    fn parameters() {
        assert_eq!(eval("a + b", &[("a", 4.0), ("b", 5.0)]).unwrap(), 9.0);
        assert_eq!(
            eval("a + c", &[("a", 1.0)]),
            Err(ExprError::UnknownParameter("c".into()))
        );
        assert_eq!(Expr::parse("a*(b+a)").unwrap().params(), vec!["a", "b", "a"]);
    }

    #[test]
    fn malformed() {
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("a $ b").is_err());
        assert_eq!(eval("1 / 0", &[]), Err(ExprError::DivisionByZero));
    }
}
