//! Boolean regulatory rules: parsing and truth-table compilation.
//!
//! Accepted syntax: identifiers, parentheses, negation (`¬`, `!`, `~`,
//! `not`), conjunction (`∧`, `&`, `&&`, `and`) and disjunction (`∨`, `|`,
//! `||`, `or`). Negation binds tightest, then conjunction.

use crate::error::{PfiError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Not,
    And,
    Or,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '¬' | '!' | '~' => {
                out.push(Tok::Not);
                i += 1;
            }
            '∧' => {
                out.push(Tok::And);
                i += 1;
            }
            '∨' => {
                out.push(Tok::Or);
                i += 1;
            }
            '&' | '|' => {
                out.push(if c == '&' { Tok::And } else { Tok::Or });
                i += 1;
                if i < chars.len() && chars[i] == c {
                    i += 1;
                }
            }
            c if c.is_alphanumeric() || c == '_' || c == '-' || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '-' | '.')) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(match word.to_ascii_lowercase().as_str() {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    _ => Tok::Ident(word),
                });
            }
            other => return Err(PfiError::Parse(format!("unexpected character '{other}' in rule '{src}'"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Not) => Ok(Expr::Not(Box::new(self.factor()?))),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(PfiError::Parse("missing ')'".into())),
                }
            }
            Some(Tok::Ident(name)) => Ok(Expr::Var(name)),
            other => Err(PfiError::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return Err(PfiError::Parse("empty rule".into()));
    }
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(PfiError::Parse(format!("trailing input in rule '{src}'")));
    }
    Ok(e)
}

impl Expr {
    /// Variables in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect(&self, out: &mut Vec<String>) {
        match self {
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Not(e) => e.collect(out),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }

    pub fn eval(&self, value: &dyn Fn(&str) -> bool) -> bool {
        match self {
            Expr::Var(v) => value(v),
            Expr::Not(e) => !e.eval(value),
            Expr::And(a, b) => a.eval(value) && b.eval(value),
            Expr::Or(a, b) => a.eval(value) || b.eval(value),
        }
    }
}

/// Compile a rule into its regulator list and a 0/1 weight per
/// configuration; configuration `mask` has regulator `i` bound iff bit `i`
/// is set.
pub fn truth_table(rule: &str) -> Result<(Vec<String>, Vec<f64>)> {
    let expr = parse(rule)?;
    let vars = expr.variables();
    let r = vars.len();
    if r > 16 {
        return Err(PfiError::Parse(format!("rule with {r} regulators is too large")));
    }
    let alpha = (0..1usize << r)
        .map(|mask| {
            let on = |name: &str| {
                let idx = vars.iter().position(|v| v == name).expect("variable collected");
                mask >> idx & 1 == 1
            };
            if expr.eval(&on) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((vars, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_syntax_variants() {
        let a = parse("¬C ∧ ¬E ∧ S").unwrap();
        let b = parse("!C & !E && S").unwrap();
        let c = parse("not C and not E and S").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let (vars, alpha) = truth_table("A | B & !C").unwrap();
        assert_eq!(vars, vec!["A", "B", "C"]);
        // A alone true; B alone true; B with C false.
        assert_eq!(alpha[0b001], 1.0);
        assert_eq!(alpha[0b010], 1.0);
        assert_eq!(alpha[0b110], 0.0);
        assert_eq!(alpha[0b000], 0.0);
    }

    #[test]
    fn errors_are_reported() {
        assert!(parse("(A & B").is_err());
        assert!(parse("A B").is_err());
        assert!(parse("").is_err());
        assert!(parse("A $ B").is_err());
    }
}
