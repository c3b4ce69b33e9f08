use thiserror::Error;

use super::{Atom, CompareOp, GuidelineRule};
use crate::code::{is_namespace, is_token_char, Code, FactValue};
use crate::patient::EventKind;

const MAX_DEPTH: usize = 64;

/// Syntax error with a 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: expected {expected}, found {found}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: String,
    pub found: String,
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    depth: usize,
}

/// Parses DSL text into a rule tree.
pub fn parse_rule(text: &str) -> Result<GuidelineRule, ParseError> {
    let mut p = Parser { chars: text.chars().collect(), pos: 0, depth: 0 };
    let rule = p.rule()?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error_here("end of input"));
    }
    Ok(rule)
}

/// Numeric literal: optional minus, digits, optional fraction.
pub(crate) fn parse_number(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |t: &str| !t.is_empty() && t.chars().all(|c| c.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok()
}

impl Parser {
    fn position_of(&self, index: usize) -> (usize, usize) {
        let mut line = 1;
        let mut column = 1;
        for &c in &self.chars[..index.min(self.chars.len())] {
            if c == '\n' {
                line += 1;
                column = 1;
            } else {
                column += 1;
            }
        }
        (line, column)
    }

    fn error_at(&self, index: usize, expected: &str, found: String) -> ParseError {
        let (line, column) = self.position_of(index);
        ParseError { line, column, expected: expected.to_owned(), found }
    }

    fn error_here(&self, expected: &str) -> ParseError {
        let found = match self.chars.get(self.pos) {
            Some(c) => format!("`{c}`"),
            None => "end of input".to_owned(),
        };
        self.error_at(self.pos, expected, found)
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

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error_here(&format!("`{c}`")))
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.chars.get(self.pos).is_some_and(|&c| pred(c)) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn token(&mut self, what: &str) -> Result<(usize, String), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let t = self.take_while(is_token_char);
        if t.is_empty() {
            return Err(self.error_here(what));
        }
        Ok((start, t))
    }

    fn int(&mut self) -> Result<(usize, usize), ParseError> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.take_while(|c| c.is_ascii_digit());
        if digits.is_empty() {
            return Err(self.error_here("integer"));
        }
        digits
            .parse()
            .map(|n| (start, n))
            .map_err(|_| self.error_at(start, "integer", format!("`{digits}`")))
    }

    fn code(&mut self) -> Result<Code, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let ns = self.take_while(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-');
        if ns.is_empty() || !is_namespace(&ns) {
            self.pos = start;
            return Err(self.error_here("code namespace"));
        }
        if self.chars.get(self.pos) != Some(&':') {
            return Err(self.error_here("`:` in code"));
        }
        self.pos += 1;
        let value = self.take_while(is_token_char);
        if value.is_empty() {
            return Err(self.error_here("code value"));
        }
        Code::new(&ns, &value).map_err(|e| self.error_at(start, "code", format!("`{}`", e.text)))
    }

    fn rule(&mut self) -> Result<GuidelineRule, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let word = self.take_while(|c| c.is_ascii_alphabetic());
        if word.is_empty() {
            return Err(self.error_here("rule"));
        }
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.error_at(start, "shallower nesting", format!("depth {}", self.depth)));
        }
        self.expect('(')?;
        let rule = match word.as_str() {
            "ANY" => GuidelineRule::Any(self.rules()?),
            "ALL" => GuidelineRule::All(self.rules()?),
            "NOT" => GuidelineRule::Not(Box::new(self.rule()?)),
            "ATLEAST" => {
                let (n_at, n) = self.int()?;
                self.expect(',')?;
                let children = self.rules()?;
                if n < 1 || n > children.len() {
                    return Err(self.error_at(
                        n_at,
                        &format!("threshold between 1 and {}", children.len()),
                        n.to_string(),
                    ));
                }
                GuidelineRule::AtLeast(n, children)
            }
            "has" => GuidelineRule::Atom(Atom::HasFact(self.code()?)),
            "cmp" => GuidelineRule::Atom(self.compare()?),
            "demo" => {
                let (_, key) = self.token("demographic key")?;
                self.expect('=')?;
                let (_, value) = self.token("demographic value")?;
                GuidelineRule::Atom(Atom::Demo { key, value })
            }
            "event" => GuidelineRule::Atom(self.event()?),
            _ => {
                return Err(self.error_at(
                    start,
                    "ANY, ALL, ATLEAST, NOT, has, cmp, demo or event",
                    format!("`{word}`"),
                ))
            }
        };
        self.expect(')')?;
        self.depth -= 1;
        Ok(rule)
    }

    fn rules(&mut self) -> Result<Vec<GuidelineRule>, ParseError> {
        let mut out = vec![self.rule()?];
        while self.peek() == Some(',') {
            self.pos += 1;
            out.push(self.rule()?);
        }
        Ok(out)
    }

    fn compare(&mut self) -> Result<Atom, ParseError> {
        let code = self.code()?;
        self.skip_ws();
        let next = self.chars.get(self.pos + 1).copied();
        let (op, width) = match (self.chars.get(self.pos).copied(), next) {
            (Some('<'), Some('=')) => (CompareOp::Le, 2),
            (Some('>'), Some('=')) => (CompareOp::Ge, 2),
            (Some('!'), Some('=')) => (CompareOp::Ne, 2),
            (Some('<'), _) => (CompareOp::Lt, 1),
            (Some('>'), _) => (CompareOp::Gt, 1),
            (Some('='), _) => (CompareOp::Eq, 1),
            _ => return Err(self.error_here("comparison operator")),
        };
        self.pos += width;
        let (lit_at, lit) = self.token("literal")?;
        let value = match parse_number(&lit) {
            Some(n) => FactValue::Number(n),
            None if op.is_ordering() => {
                return Err(self.error_at(lit_at, "numeric literal", format!("`{lit}`")))
            }
            None => FactValue::Label(lit),
        };
        Ok(Atom::Compare { code, op, value })
    }

    fn event(&mut self) -> Result<Atom, ParseError> {
        let (kind_at, kind_text) = self.token("event kind")?;
        let kind: EventKind = kind_text
            .parse()
            .map_err(|_| self.error_at(kind_at, "event kind", format!("`{kind_text}`")))?;
        self.expect(',')?;
        let code = self.code()?;
        let mut within_days = None;
        if self.peek() == Some(',') {
            self.pos += 1;
            self.skip_ws();
            let kw_at = self.pos;
            let kw = self.take_while(|c| c.is_ascii_alphabetic());
            if kw != "within" {
                return Err(self.error_at(kw_at, "`within`", format!("`{kw}`")));
            }
            let (_, days) = self.int()?;
            self.expect('d')?;
            within_days = Some(
                u32::try_from(days)
                    .map_err(|_| self.error_at(kw_at, "day count", days.to_string()))?,
            );
        }
        Ok(Atom::HadEvent { kind, code, within_days })
    }
}
