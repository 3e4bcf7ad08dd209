//! Tokenizer and recursive-descent parser for the model DSL.

use super::{CovEdge, Edge, ModelSpec, Slot, SpecError};
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Tilde,
    DoubleTilde,
    Plus,
    Star,
    Minus,
    Colon,
    Comma,
    Sep,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(v) => format!("number `{v}`"),
            Tok::Tilde => "`~`".into(),
            Tok::DoubleTilde => "`~~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Star => "`*`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Sep => "end of statement".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, Pos)>, SpecError> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let pos = Pos {
                line: li + 1,
                col: i + 1,
            };
            if c == '#' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '~' {
                if chars.get(i + 1) == Some(&'~') {
                    out.push((Tok::DoubleTilde, pos));
                    i += 2;
                } else {
                    out.push((Tok::Tilde, pos));
                    i += 1;
                }
                continue;
            }
            let simple = match c {
                '+' => Some(Tok::Plus),
                '*' => Some(Tok::Star),
                '-' => Some(Tok::Minus),
                ':' => Some(Tok::Colon),
                ',' => Some(Tok::Comma),
                ';' => Some(Tok::Sep),
                _ => None,
            };
            if let Some(t) = simple {
                out.push((t, pos));
                i += 1;
                continue;
            }
            if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let v: f64 = s.parse().map_err(|_| SpecError::Syntax {
                    line: pos.line,
                    col: pos.col,
                    expected: "a number".into(),
                    found: format!("`{s}`"),
                })?;
                out.push((Tok::Number(v), pos));
                continue;
            }
            if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
                continue;
            }
            return Err(SpecError::Syntax {
                line: pos.line,
                col: pos.col,
                expected: "a statement".into(),
                found: format!("character `{c}`"),
            });
        }
        out.push((
            Tok::Sep,
            Pos {
                line: li + 1,
                col: chars.len() + 1,
            },
        ));
    }
    let end = Pos {
        line: text.lines().count().max(1),
        col: 1,
    };
    out.push((Tok::Eof, end));
    Ok(out)
}

#[derive(Debug, Clone)]
enum Modifier {
    Fixed(f64),
    Label(String),
}

#[derive(Debug, Clone)]
enum Rhs {
    Intercept,
    Name(String),
}

#[derive(Debug, Clone)]
struct Term {
    modifier: Option<Modifier>,
    rhs: Rhs,
    pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DeclKind {
    Latent,
    Endogenous,
    Exogenous,
}

#[derive(Debug, Clone)]
enum Stmt {
    Decl(DeclKind, Vec<(String, Pos)>),
    Regression(String, Pos, Vec<Term>),
    Covariance(String, Pos, Vec<Term>),
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> SpecError {
        let p = self.pos();
        SpecError::Syntax {
            line: p.line,
            col: p.col,
            expected: expected.into(),
            found: self.peek().describe(),
        }
    }

    fn ident(&mut self, expected: &str) -> Result<(String, Pos), SpecError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let p = self.bump().1;
                Ok((s, p))
            }
            _ => Err(self.err(expected)),
        }
    }

    fn program(&mut self) -> Result<Vec<Stmt>, SpecError> {
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Tok::Eof => return Ok(out),
                Tok::Sep => {
                    self.bump();
                }
                _ => {
                    out.push(self.statement()?);
                    match self.peek() {
                        Tok::Sep | Tok::Eof => {}
                        _ => return Err(self.err("`+`, `;` or end of line")),
                    }
                }
            }
        }
    }

    fn statement(&mut self) -> Result<Stmt, SpecError> {
        let (name, pos) = self.ident("a variable name or declaration")?;
        if *self.peek() == Tok::Colon {
            let kind = match name.as_str() {
                "latent" => DeclKind::Latent,
                "endogenous" => DeclKind::Endogenous,
                "exogenous" => DeclKind::Exogenous,
                _ => {
                    return Err(SpecError::Syntax {
                        line: pos.line,
                        col: pos.col,
                        expected: "`latent`, `endogenous` or `exogenous` before `:`".into(),
                        found: format!("identifier `{name}`"),
                    })
                }
            };
            self.bump();
            let mut names = vec![self.ident("a variable name")?];
            while *self.peek() == Tok::Comma {
                self.bump();
                names.push(self.ident("a variable name")?);
            }
            return Ok(Stmt::Decl(kind, names));
        }
        let cov = match self.peek() {
            Tok::Tilde => false,
            Tok::DoubleTilde => true,
            _ => return Err(self.err("`~` or `~~`")),
        };
        self.bump();
        let mut terms = vec![self.term(cov)?];
        while *self.peek() == Tok::Plus {
            self.bump();
            terms.push(self.term(cov)?);
        }
        Ok(if cov {
            Stmt::Covariance(name, pos, terms)
        } else {
            Stmt::Regression(name, pos, terms)
        })
    }

    fn number(&mut self) -> Result<f64, SpecError> {
        let neg = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => Err(self.err("a number")),
        }
    }

    fn term(&mut self, cov: bool) -> Result<Term, SpecError> {
        let pos = self.pos();
        let head_is_mod = matches!(self.peek2(), Tok::Star);
        let modifier = match self.peek().clone() {
            Tok::Minus => {
                let v = self.number()?;
                if *self.peek() != Tok::Star {
                    return Err(self.err("`*`"));
                }
                self.bump();
                Some(Modifier::Fixed(v))
            }
            Tok::Number(v) if head_is_mod => {
                self.bump();
                self.bump();
                Some(Modifier::Fixed(v))
            }
            Tok::Ident(s) if head_is_mod => {
                self.bump();
                self.bump();
                Some(Modifier::Label(s))
            }
            _ => None,
        };
        let rhs_expected = if cov {
            "a variable name"
        } else {
            "a variable name or `1`"
        };
        let rhs = match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Rhs::Name(s)
            }
            Tok::Number(v) if !cov && v == 1.0 => {
                self.bump();
                Rhs::Intercept
            }
            _ => return Err(self.err(rhs_expected)),
        };
        Ok(Term { modifier, rhs, pos })
    }
}

fn slot_of(m: &Option<Modifier>, auto: String) -> Slot {
    match m {
        None => Slot::Free(auto),
        Some(Modifier::Fixed(v)) => Slot::Fixed(*v),
        Some(Modifier::Label(l)) => Slot::Shared(l.clone()),
    }
}

fn invalid(pos: Pos, msg: String) -> SpecError {
    SpecError::Invalid {
        line: pos.line,
        col: pos.col,
        msg,
    }
}

/// Ordered set that remembers the first position a name was seen at.
#[derive(Default)]
struct NameList {
    names: Vec<String>,
    seen: HashMap<String, Pos>,
}

impl NameList {
    fn push(&mut self, n: &str, p: Pos) {
        if !self.seen.contains_key(n) {
            self.seen.insert(n.to_string(), p);
            self.names.push(n.to_string());
        }
    }
    fn contains(&self, n: &str) -> bool {
        self.seen.contains_key(n)
    }
}

pub(crate) fn parse(text: &str) -> Result<ModelSpec, SpecError> {
    let toks = tokenize(text)?;
    let mut parser = Parser { toks, at: 0 };
    let stmts = parser.program()?;
    if stmts.is_empty() {
        return Err(SpecError::Empty);
    }

    let mut decl_lat = NameList::default();
    let mut decl_endo = NameList::default();
    let mut decl_exo = NameList::default();
    for s in &stmts {
        if let Stmt::Decl(kind, names) = s {
            for (n, p) in names {
                if decl_lat.contains(n) || decl_endo.contains(n) || decl_exo.contains(n) {
                    return Err(invalid(*p, format!("variable `{n}` declared twice")));
                }
                match kind {
                    DeclKind::Latent => decl_lat.push(n, *p),
                    DeclKind::Endogenous => decl_endo.push(n, *p),
                    DeclKind::Exogenous => decl_exo.push(n, *p),
                }
            }
        }
    }

    let mut lhs_names = NameList::default();
    let mut sources = NameList::default();
    for s in &stmts {
        if let Stmt::Regression(lhs, p, terms) = s {
            lhs_names.push(lhs, *p);
            for t in terms {
                if let Rhs::Name(n) = &t.rhs {
                    sources.push(n, t.pos);
                }
            }
        }
    }

    let mut cov_names = NameList::default();
    for s in &stmts {
        if let Stmt::Covariance(lhs, p, terms) = s {
            cov_names.push(lhs, *p);
            for t in terms {
                if let Rhs::Name(n) = &t.rhs {
                    cov_names.push(n, t.pos);
                }
            }
        }
    }

    let mut latent = NameList::default();
    for n in &decl_lat.names {
        latent.push(n, decl_lat.seen[n]);
    }
    // A predictor with a residual variance is latent.
    for n in &sources.names {
        if cov_names.contains(n) && !lhs_names.contains(n) && !decl_exo.contains(n) && !decl_endo.contains(n) {
            latent.push(n, sources.seen[n]);
        }
    }
    for n in &lhs_names.names {
        if sources.contains(n) && !decl_endo.contains(n) {
            if decl_exo.contains(n) {
                return Err(invalid(
                    lhs_names.seen[n],
                    format!("exogenous variable `{n}` cannot be regressed"),
                ));
            }
            latent.push(n, lhs_names.seen[n]);
        }
    }
    let mut endogenous = NameList::default();
    for n in &decl_endo.names {
        endogenous.push(n, decl_endo.seen[n]);
    }
    for n in &lhs_names.names {
        if latent.contains(n) {
            continue;
        }
        if decl_exo.contains(n) {
            return Err(invalid(
                lhs_names.seen[n],
                format!("exogenous variable `{n}` cannot be regressed"),
            ));
        }
        endogenous.push(n, lhs_names.seen[n]);
    }
    for n in &sources.names {
        if endogenous.contains(n) {
            return Err(invalid(
                sources.seen[n],
                format!("endogenous variable `{n}` cannot be used as a predictor"),
            ));
        }
    }
    let mut exogenous = NameList::default();
    for n in &decl_exo.names {
        exogenous.push(n, decl_exo.seen[n]);
    }
    for n in &sources.names {
        if !latent.contains(n) {
            exogenous.push(n, sources.seen[n]);
        }
    }

    let m = endogenous.names.len();
    let q = latent.names.len();
    if m == 0 {
        return Err(invalid(
            Pos { line: 1, col: 1 },
            "model has no endogenous variable".into(),
        ));
    }

    let mut nu: Vec<Option<Slot>> = vec![None; m];
    let mut alpha: Vec<Option<Slot>> = vec![None; q];
    let mut measurement = Vec::new();
    let mut structural = Vec::new();
    let mut covariances: Vec<CovEdge> = Vec::new();
    let mut seen_edges: HashSet<(String, String)> = HashSet::new();
    let mut seen_cov: HashSet<(String, String)> = HashSet::new();
    let idx = |list: &NameList, n: &str| list.names.iter().position(|x| x == n);

    for s in &stmts {
        match s {
            Stmt::Decl(..) => {}
            Stmt::Regression(lhs, _, terms) => {
                for t in terms {
                    match &t.rhs {
                        Rhs::Intercept => {
                            let auto = format!("{lhs}~1");
                            let slot = slot_of(&t.modifier, auto);
                            let target = if let Some(j) = idx(&endogenous, lhs) {
                                &mut nu[j]
                            } else {
                                &mut alpha[idx(&latent, lhs).expect("lhs classified")]
                            };
                            if target.is_some() {
                                return Err(SpecError::Duplicate {
                                    line: t.pos.line,
                                    col: t.pos.col,
                                    edge: format!("{lhs} ~ 1"),
                                });
                            }
                            *target = Some(slot);
                        }
                        Rhs::Name(src) => {
                            if src == lhs {
                                return Err(invalid(
                                    t.pos,
                                    format!("`{lhs}` cannot be regressed on itself"),
                                ));
                            }
                            if !seen_edges.insert((lhs.clone(), src.clone())) {
                                return Err(SpecError::Duplicate {
                                    line: t.pos.line,
                                    col: t.pos.col,
                                    edge: format!("{lhs} ~ {src}"),
                                });
                            }
                            let edge = Edge {
                                target: lhs.clone(),
                                source: src.clone(),
                                slot: slot_of(&t.modifier, format!("{lhs}~{src}")),
                            };
                            if endogenous.contains(lhs) {
                                measurement.push((edge, t.modifier.is_none()));
                            } else {
                                structural.push(edge);
                            }
                        }
                    }
                }
            }
            Stmt::Covariance(lhs, lpos, terms) => {
                for t in terms {
                    let Rhs::Name(rhs) = &t.rhs else {
                        unreachable!("covariance terms are names")
                    };
                    for (n, p) in [(lhs, *lpos), (rhs, t.pos)] {
                        if exogenous.contains(n) {
                            return Err(invalid(
                                p,
                                format!("exogenous variable `{n}` has no residual (co)variance"),
                            ));
                        }
                        if !endogenous.contains(n) && !latent.contains(n) {
                            return Err(SpecError::Undeclared {
                                line: p.line,
                                col: p.col,
                                name: n.clone(),
                            });
                        }
                    }
                    if endogenous.contains(lhs) != endogenous.contains(rhs) {
                        return Err(invalid(
                            t.pos,
                            format!(
                                "covariance between endogenous and latent residuals `{lhs} ~~ {rhs}`"
                            ),
                        ));
                    }
                    let key = if lhs <= rhs {
                        (lhs.clone(), rhs.clone())
                    } else {
                        (rhs.clone(), lhs.clone())
                    };
                    if !seen_cov.insert(key) {
                        return Err(SpecError::Duplicate {
                            line: t.pos.line,
                            col: t.pos.col,
                            edge: format!("{lhs} ~~ {rhs}"),
                        });
                    }
                    covariances.push(CovEdge {
                        a: lhs.clone(),
                        b: rhs.clone(),
                        slot: slot_of(&t.modifier, format!("{lhs}~~{rhs}")),
                    });
                }
            }
        }
    }

    for (k, n) in latent.names.iter().enumerate() {
        if !measurement.iter().any(|(e, _)| &e.source == n) {
            return Err(invalid(
                latent.seen[n],
                format!("latent variable `{n}` has no measurement edge"),
            ));
        }
        let var_fixed = covariances
            .iter()
            .any(|c| &c.a == n && &c.b == n && matches!(c.slot, Slot::Fixed(_)));
        let loading_fixed = measurement
            .iter()
            .any(|(e, _)| &e.source == n && matches!(e.slot, Slot::Fixed(_)));
        if !var_fixed && !loading_fixed {
            if let Some((e, _)) = measurement
                .iter_mut()
                .find(|(e, unmodified)| &e.source == n && *unmodified)
            {
                e.slot = Slot::Fixed(1.0);
            }
        }
        if alpha[k].is_none() {
            alpha[k] = Some(Slot::Fixed(0.0));
        }
    }
    for n in endogenous.names.iter().chain(latent.names.iter()) {
        if !covariances.iter().any(|c| &c.a == n && &c.b == n) {
            covariances.push(CovEdge {
                a: n.clone(),
                b: n.clone(),
                slot: Slot::Free(format!("{n}~~{n}")),
            });
        }
    }
    let nu = nu
        .into_iter()
        .zip(&endogenous.names)
        .map(|(s, n)| s.unwrap_or_else(|| Slot::Free(format!("{n}~1"))))
        .collect();
    let alpha = alpha.into_iter().map(|s| s.expect("filled above")).collect();

    Ok(ModelSpec {
        endogenous: endogenous.names,
        latent: latent.names,
        exogenous: exogenous.names,
        measurement_edges: measurement.into_iter().map(|(e, _)| e).collect(),
        structural_edges: structural,
        covariance_edges: covariances,
        nu,
        alpha,
    })
}
