//! The textual form language.
//!
//! Grammar (whitespace-insensitive; every printed form parses back):
//!
//! ```text
//! form   := term ('+' term)*
//! term   := factor
//! factor := int | var ('^' int)? | '(' form ')' | 'sum(' ivar '>=' int ')' factor
//!           | factor '*' factor
//! var    := name '[' index (',' index)? ']'
//! index  := int | ivar
//! ```
//!
//! A `sum` binds its index variable in everything to its right within the
//! term, so `3*sum(i>=1) x[i]*sum(j>=1) y[i,j]^2` is the double tail
//! `3·Σᵢ xᵢ·Σⱼ y²`. Only catalog shapes lower successfully: finite
//! polynomials, pure power tails `sum(i>=s) f[i]^e` (optionally with a fixed
//! leading coordinate `f[j,i]`), mixed double tails, and a finite multiplier
//! times a power tail. Three aliases expand in place: `Vinf`, `V(r)`, and
//! `Vp{p1; p2; ...}` with finite multiplier polynomials.

use crate::canon::{self, CanonError};
use crate::forms::{GeneratorTerm, MixedFamily, PowerFamily, StructuredForm};
use crate::poly::{Monomial, SparsePoly};
use crate::scalar::{Field, Scalar};
use crate::vars::VarId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DslError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: u32, col: u32, msg: String },
    #[error("inhomogeneous form: degree-{found} term in a degree-{expected} form")]
    Inhomogeneous { expected: u32, found: u32 },
    #[error("outside the catalog at line {line}, column {col}: {msg}")]
    OutsideCatalog { line: u32, col: u32, msg: String },
    #[error(transparent)]
    Pencil(#[from] CanonError),
}

/// Parse a form in the text language over the given field.
pub fn parse_form(field: &Field, text: &str) -> Result<StructuredForm, DslError> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        field: field.clone(),
        tokens,
        pos: 0,
        scope: Vec::new(),
    };
    let terms = p.parse_terms()?;
    p.expect_end()?;
    p.lower(terms)
}

/// Parse a finite polynomial (a form with no tails).
pub fn parse_poly(field: &Field, text: &str) -> Result<SparsePoly, DslError> {
    let form = parse_form(field, text)?;
    form.as_finite().ok_or(DslError::OutsideCatalog {
        line: 1,
        col: 1,
        msg: "expected a finite polynomial, found an infinite tail".into(),
    })
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Name(String),
    Int(u64),
    Sym(char),
    Ge,
}

#[derive(Clone, Copy, Debug)]
struct Pos {
    line: u32,
    col: u32,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, Pos)>, DslError> {
    let mut out = Vec::new();
    let mut line = 1u32;
    let mut col = 1u32;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            '(' | ')' | '[' | ']' | '{' | '}' | ',' | ';' | '^' | '*' | '+' => {
                chars.next();
                col += 1;
                out.push((Tok::Sym(c), pos));
            }
            '>' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    out.push((Tok::Ge, pos));
                } else {
                    return Err(DslError::Parse {
                        line: pos.line,
                        col: pos.col,
                        msg: "expected `>=`".into(),
                    });
                }
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() {
                        s.push(d);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let n: u64 = s.parse().map_err(|_| DslError::Parse {
                    line: pos.line,
                    col: pos.col,
                    msg: format!("integer literal `{s}` is too large"),
                })?;
                out.push((Tok::Int(n), pos));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(d);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                out.push((Tok::Name(s), pos));
            }
            other => {
                return Err(DslError::Parse {
                    line,
                    col,
                    msg: format!("unexpected character `{other}`"),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Index {
    Int(u32),
    Var(String),
}

#[derive(Clone, Debug)]
struct VarRef {
    family: String,
    first: Index,
    second: Option<Index>,
    pos: Pos,
}

#[derive(Clone, Debug)]
enum Atom {
    Scalar(u64),
    VarPow(VarRef, u32),
    Paren(Vec<Chain>, Pos),
    Sum {
        ivar: String,
        start: u32,
        body: Chain,
        pos: Pos,
    },
    /// An alias expanded in place (`Vinf`, `V(r)`, `Vp{...}`).
    Alias(StructuredForm, Pos),
}

type Chain = Vec<Atom>;

struct Parser {
    field: Field,
    tokens: Vec<(Tok, Pos)>,
    pos: usize,
    scope: Vec<String>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn peek_pos(&self) -> Pos {
        self.tokens
            .get(self.pos)
            .or_else(|| self.tokens.last())
            .map(|(_, p)| *p)
            .unwrap_or(Pos { line: 1, col: 1 })
    }

    fn bump(&mut self) -> Option<(Tok, Pos)> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, DslError> {
        let p = self.peek_pos();
        Err(DslError::Parse {
            line: p.line,
            col: p.col,
            msg: msg.into(),
        })
    }

    fn expect_sym(&mut self, c: char) -> Result<Pos, DslError> {
        match self.peek() {
            Some(Tok::Sym(s)) if *s == c => Ok(self.bump().unwrap().1),
            _ => self.err(format!("expected `{c}`")),
        }
    }

    fn expect_end(&self) -> Result<(), DslError> {
        if self.pos < self.tokens.len() {
            return self.err("unexpected trailing input");
        }
        Ok(())
    }

    fn expect_u32(&mut self, what: &str, min: u32) -> Result<u32, DslError> {
        let p = self.peek_pos();
        match self.peek() {
            Some(Tok::Int(n)) => {
                let n = *n;
                self.bump();
                if n < min as u64 || n > u32::MAX as u64 {
                    return Err(DslError::Parse {
                        line: p.line,
                        col: p.col,
                        msg: format!("{what} must be between {min} and {}", u32::MAX),
                    });
                }
                Ok(n as u32)
            }
            _ => self.err(format!("expected an integer {what}")),
        }
    }

    /// Terms separated by `+`, up to a closing symbol or the end; the caller
    /// consumes its own closer.
    fn parse_terms(&mut self) -> Result<Vec<Chain>, DslError> {
        let mut terms = vec![self.parse_chain()?];
        loop {
            match self.peek() {
                Some(Tok::Sym('+')) => {
                    self.bump();
                    terms.push(self.parse_chain()?);
                }
                Some(Tok::Sym(c)) if matches!(c, ')' | '}' | ';') => break,
                None => break,
                _ => return self.err("expected `+` between terms"),
            }
        }
        Ok(terms)
    }

    /// A `*`-joined product; a `sum` header swallows the rest of the chain
    /// as its body.
    fn parse_chain(&mut self) -> Result<Chain, DslError> {
        if let Some(Tok::Name(n)) = self.peek() {
            if n == "sum" && matches!(self.tokens.get(self.pos + 1), Some((Tok::Sym('('), _))) {
                let pos = self.peek_pos();
                self.bump(); // sum
                self.bump(); // (
                let ivar = match self.bump() {
                    Some((Tok::Name(v), _)) => v,
                    _ => return self.err("expected an index variable after `sum(`"),
                };
                if self.scope.contains(&ivar) {
                    return self.err(format!("index variable `{ivar}` is already bound"));
                }
                match self.peek() {
                    Some(Tok::Ge) => {
                        self.bump();
                    }
                    _ => return self.err("expected `>=` in a sum header"),
                }
                let start = self.expect_u32("tail start", 1)?;
                self.expect_sym(')')?;
                self.scope.push(ivar.clone());
                let body = self.parse_chain()?;
                self.scope.pop();
                return Ok(vec![Atom::Sum {
                    ivar,
                    start,
                    body,
                    pos,
                }]);
            }
        }
        let atom = self.parse_atom()?;
        if matches!(self.peek(), Some(Tok::Sym('*'))) {
            self.bump();
            let mut rest = self.parse_chain()?;
            rest.insert(0, atom);
            Ok(rest)
        } else {
            Ok(vec![atom])
        }
    }

    fn parse_atom(&mut self) -> Result<Atom, DslError> {
        let pos = self.peek_pos();
        match self.peek().cloned() {
            Some(Tok::Int(n)) => {
                self.bump();
                Ok(Atom::Scalar(n))
            }
            Some(Tok::Sym('(')) => {
                self.bump();
                let terms = self.parse_terms()?;
                self.expect_sym(')')?;
                Ok(Atom::Paren(terms, pos))
            }
            Some(Tok::Name(name)) => {
                self.bump();
                // Aliases: a name not followed by `[` expands in place.
                match self.peek() {
                    Some(Tok::Sym('[')) => {
                        self.bump();
                        let first = self.parse_index()?;
                        let second = if matches!(self.peek(), Some(Tok::Sym(','))) {
                            self.bump();
                            Some(self.parse_index()?)
                        } else {
                            None
                        };
                        self.expect_sym(']')?;
                        let exp = if matches!(self.peek(), Some(Tok::Sym('^'))) {
                            self.bump();
                            self.expect_u32("exponent", 1)?
                        } else {
                            1
                        };
                        Ok(Atom::VarPow(
                            VarRef {
                                family: name,
                                first,
                                second,
                                pos,
                            },
                            exp,
                        ))
                    }
                    _ => self.parse_alias(&name, pos),
                }
            }
            _ => self.err("expected an integer, a variable, `(`, or `sum(`"),
        }
    }

    fn parse_alias(&mut self, name: &str, pos: Pos) -> Result<Atom, DslError> {
        match name {
            "Vinf" => Ok(Atom::Alias(canon::v_infinity(&self.field), pos)),
            "V" if matches!(self.peek(), Some(Tok::Sym('('))) => {
                self.bump();
                let r = self.expect_u32("rank", 0)?;
                self.expect_sym(')')?;
                Ok(Atom::Alias(canon::v_r(&self.field, r), pos))
            }
            "Vp" if matches!(self.peek(), Some(Tok::Sym('{'))) => {
                self.bump();
                let mut polys = Vec::new();
                loop {
                    let terms = self.parse_terms()?;
                    let form = self.lower(terms)?;
                    let poly = form.as_finite().ok_or_else(|| DslError::OutsideCatalog {
                        line: pos.line,
                        col: pos.col,
                        msg: "Vp multipliers must be finite polynomials".into(),
                    })?;
                    polys.push(poly);
                    match self.peek() {
                        Some(Tok::Sym(';')) => {
                            self.bump();
                        }
                        Some(Tok::Sym('}')) => {
                            self.bump();
                            break;
                        }
                        _ => return self.err("expected `;` or `}` in Vp{...}"),
                    }
                }
                if polys.iter().any(|p| p.is_zero()) {
                    return Err(DslError::OutsideCatalog {
                        line: pos.line,
                        col: pos.col,
                        msg: "Vp multipliers must be nonzero".into(),
                    });
                }
                let degree = polys[0].degree() + 2;
                Ok(Atom::Alias(
                    canon::v_p(&self.field, degree, &polys)?,
                    pos,
                ))
            }
            _ => Err(DslError::Parse {
                line: pos.line,
                col: pos.col,
                msg: format!("expected `[` after the variable family `{name}`"),
            }),
        }
    }

    fn parse_index(&mut self) -> Result<Index, DslError> {
        match self.peek().cloned() {
            Some(Tok::Int(_)) => Ok(Index::Int(self.expect_u32("index", 1)?)),
            Some(Tok::Name(v)) => {
                if !self.scope.contains(&v) {
                    return self.err(format!("unbound index variable `{v}`"));
                }
                self.bump();
                Ok(Index::Var(v))
            }
            _ => self.err("expected an index (integer or bound index variable)"),
        }
    }

    // ---- lowering: chains of atoms to catalog generator terms ----

    fn lower(&self, terms: Vec<Chain>) -> Result<StructuredForm, DslError> {
        let mut pieces = Vec::new();
        for chain in terms {
            pieces.push(self.lower_term(chain)?);
        }
        // Degree check before assembly, so inhomogeneity is an error rather
        // than a panic. Zero pieces are degree-agnostic and dropped.
        let mut degree: Option<u32> = None;
        let mut flat: Vec<TermPiece> = Vec::new();
        for piece in pieces {
            let (d, zero) = match &piece {
                TermPiece::Poly(p) => (p.degree(), p.is_zero()),
                TermPiece::Gen(g) => (g.degree(), false),
                TermPiece::Spliced(gs) => match gs.first() {
                    Some(g) => (g.degree(), false),
                    None => (0, true),
                },
            };
            if zero {
                continue;
            }
            match degree {
                None => degree = Some(d),
                Some(d0) if d0 != d => {
                    return Err(DslError::Inhomogeneous {
                        expected: d0,
                        found: d,
                    })
                }
                Some(_) => {}
            }
            flat.push(piece);
        }
        let degree = match degree {
            Some(d) => d,
            // The zero form; degree defaults to cubic.
            None => return Ok(StructuredForm::zero(&self.field, 3)),
        };
        // Merge adjacent finite pieces into single polynomial terms, keeping
        // the positions of tail terms.
        let mut out: Vec<GeneratorTerm> = Vec::new();
        let mut run: Option<SparsePoly> = None;
        let flush = |run: &mut Option<SparsePoly>, out: &mut Vec<GeneratorTerm>| {
            if let Some(p) = run.take() {
                if !p.is_zero() {
                    out.push(GeneratorTerm::Finite(p));
                }
            }
        };
        for piece in flat {
            match piece {
                TermPiece::Poly(p) => {
                    run = Some(match run.take() {
                        Some(acc) => acc.add(&p),
                        None => p,
                    });
                }
                TermPiece::Gen(g) => {
                    flush(&mut run, &mut out);
                    out.push(g);
                }
                TermPiece::Spliced(gs) => {
                    flush(&mut run, &mut out);
                    out.extend(gs);
                }
            }
        }
        flush(&mut run, &mut out);
        Ok(StructuredForm::from_terms(&self.field, degree, out))
    }

    fn lower_term(&self, chain: Chain) -> Result<TermPiece, DslError> {
        let mut coeff = self.field.one();
        let mut poly_parts: Vec<SparsePoly> = Vec::new();
        let mut mono: Vec<(VarId, u32)> = Vec::new();
        let mut tail: Option<(GeneratorTerm, Pos)> = None;
        let mut alias: Option<(StructuredForm, Pos)> = None;
        for atom in chain {
            if let Some((_, pos)) = &tail {
                return Err(DslError::OutsideCatalog {
                    line: pos.line,
                    col: pos.col,
                    msg: "nothing may follow a tail in a product".into(),
                });
            }
            match atom {
                Atom::Scalar(n) => coeff = &coeff * &self.field.scalar_u64(n),
                Atom::VarPow(v, e) => {
                    let var = self.ground_var(&v)?;
                    mono.push((var, e));
                }
                Atom::Paren(terms, pos) => {
                    let form = self.lower(terms)?;
                    let poly = form.as_finite().ok_or(DslError::OutsideCatalog {
                        line: pos.line,
                        col: pos.col,
                        msg: "a parenthesized factor must be finite".into(),
                    })?;
                    poly_parts.push(poly);
                }
                Atom::Sum {
                    ivar,
                    start,
                    body,
                    pos,
                } => {
                    tail = Some((self.lower_sum(&ivar, start, body, pos)?, pos));
                }
                Atom::Alias(form, pos) => {
                    if alias.is_some() {
                        return Err(DslError::OutsideCatalog {
                            line: pos.line,
                            col: pos.col,
                            msg: "at most one alias per term".into(),
                        });
                    }
                    alias = Some((form, pos));
                }
            }
        }
        // Assemble the finite multiplier out of the monomial and any
        // parenthesized polynomials.
        let mut multiplier: Option<SparsePoly> = if mono.is_empty() {
            None
        } else {
            let m = Monomial::from_powers(&mono);
            let d = m.degree();
            Some(SparsePoly::from_terms(
                &self.field,
                d,
                vec![(m, self.field.one())],
            ))
        };
        for p in poly_parts {
            multiplier = Some(match multiplier {
                Some(acc) => acc.mul(&p),
                None => p,
            });
        }
        if let Some((form, pos)) = alias {
            if tail.is_some() || multiplier.is_some() {
                return Err(DslError::OutsideCatalog {
                    line: pos.line,
                    col: pos.col,
                    msg: "an alias may only be scaled, not multiplied by variables".into(),
                });
            }
            let scaled = form.scale(&coeff);
            return Ok(TermPiece::Spliced(scaled.terms().to_vec()));
        }
        match tail {
            None => {
                let poly = multiplier
                    .unwrap_or_else(|| {
                        // A bare scalar: a degree-0 constant.
                        SparsePoly::from_terms(
                            &self.field,
                            0,
                            vec![(Monomial::one(), self.field.one())],
                        )
                    })
                    .scale(&coeff);
                Ok(TermPiece::Poly(poly))
            }
            Some((gen, pos)) => {
                let gen = scale_gen(&gen, &coeff);
                match (multiplier, gen) {
                    (None, g) => Ok(TermPiece::Gen(g)),
                    (Some(p), GeneratorTerm::Power(pf)) => {
                        Ok(TermPiece::Gen(GeneratorTerm::Scaled(p, pf)))
                    }
                    (Some(_), _) => Err(DslError::OutsideCatalog {
                        line: pos.line,
                        col: pos.col,
                        msg: "only a pure power tail may carry a finite multiplier".into(),
                    }),
                }
            }
        }
    }

    /// A sum body must be a catalog tail: a power of one running coordinate,
    /// or a linear outer coordinate times an inner power tail.
    fn lower_sum(
        &self,
        ivar: &str,
        start: u32,
        body: Chain,
        pos: Pos,
    ) -> Result<GeneratorTerm, DslError> {
        let outside = |p: Pos, msg: &str| DslError::OutsideCatalog {
            line: p.line,
            col: p.col,
            msg: msg.into(),
        };
        let mut coeff = self.field.one();
        let mut structural: Vec<Atom> = Vec::new();
        for atom in body {
            match atom {
                Atom::Scalar(n) => coeff = &coeff * &self.field.scalar_u64(n),
                other => structural.push(other),
            }
        }
        match structural.as_slice() {
            [Atom::VarPow(v, e)] => {
                let pf = self.power_tail(ivar, start, v, *e, &coeff)?;
                Ok(GeneratorTerm::Power(pf))
            }
            [Atom::VarPow(v, e), Atom::Sum {
                ivar: jvar,
                start: inner_start,
                body: inner_body,
                pos: inner_pos,
            }] => {
                if *e != 1 {
                    return Err(outside(
                        v.pos,
                        "the outer factor of a double tail must be linear",
                    ));
                }
                let outer = match (&v.first, &v.second) {
                    (Index::Var(w), None) if w == ivar => v.family.clone(),
                    _ => {
                        return Err(outside(
                            v.pos,
                            "the outer factor must be the running coordinate of its sum",
                        ))
                    }
                };
                let mut inner_coeff = coeff.clone();
                let mut inner_structural: Vec<Atom> = Vec::new();
                for atom in inner_body.iter().cloned() {
                    match atom {
                        Atom::Scalar(n) => {
                            inner_coeff = &inner_coeff * &self.field.scalar_u64(n)
                        }
                        other => inner_structural.push(other),
                    }
                }
                match inner_structural.as_slice() {
                    [Atom::VarPow(w, exp)] => match (&w.first, &w.second) {
                        (Index::Var(a), Some(Index::Var(b))) if a == ivar && b == jvar => {
                            Ok(GeneratorTerm::Mixed(MixedFamily {
                                coeff: inner_coeff,
                                outer,
                                outer_start: start,
                                inner: w.family.clone(),
                                inner_exp: *exp,
                                inner_start: *inner_start,
                            }))
                        }
                        _ => Err(outside(
                            w.pos,
                            "the inner coordinate of a double tail must be indexed \
                             by the outer then the inner running index",
                        )),
                    },
                    _ => Err(outside(
                        *inner_pos,
                        "the inner sum of a double tail must be a power of one coordinate",
                    )),
                }
            }
            [] => Err(outside(pos, "a sum needs a coordinate under it")),
            _ => Err(outside(
                pos,
                "a sum must be a power tail or a double tail",
            )),
        }
    }

    fn power_tail(
        &self,
        ivar: &str,
        start: u32,
        v: &VarRef,
        exp: u32,
        coeff: &Scalar,
    ) -> Result<PowerFamily, DslError> {
        let outside = |msg: &str| DslError::OutsideCatalog {
            line: v.pos.line,
            col: v.pos.col,
            msg: msg.into(),
        };
        let fixed = match (&v.first, &v.second) {
            (Index::Var(w), None) if w == ivar => None,
            (Index::Int(j), Some(Index::Var(w))) if w == ivar => Some(*j),
            (Index::Var(_), Some(Index::Int(_))) => {
                return Err(outside(
                    "the running index must be the last coordinate of a tail variable",
                ))
            }
            _ => {
                return Err(outside(
                    "a power tail must run over exactly its sum's index variable",
                ))
            }
        };
        Ok(PowerFamily {
            family: v.family.clone(),
            fixed,
            coeff: coeff.clone(),
            exp,
            start,
        })
    }

    /// A variable reference with integer indices only.
    fn ground_var(&self, v: &VarRef) -> Result<VarId, DslError> {
        let bad = || DslError::OutsideCatalog {
            line: v.pos.line,
            col: v.pos.col,
            msg: "index variables may only appear under their sum".into(),
        };
        match (&v.first, &v.second) {
            (Index::Int(i), None) => Ok(VarId::single(&v.family, *i)),
            (Index::Int(i), Some(Index::Int(j))) => Ok(VarId::pair(&v.family, *i, *j)),
            _ => Err(bad()),
        }
    }
}

enum TermPiece {
    Poly(SparsePoly),
    Gen(GeneratorTerm),
    Spliced(Vec<GeneratorTerm>),
}

fn scale_gen(g: &GeneratorTerm, a: &Scalar) -> GeneratorTerm {
    match g {
        GeneratorTerm::Finite(p) => GeneratorTerm::Finite(p.scale(a)),
        GeneratorTerm::Power(pf) => GeneratorTerm::Power(PowerFamily {
            coeff: &pf.coeff * a,
            ..pf.clone()
        }),
        GeneratorTerm::Mixed(mf) => GeneratorTerm::Mixed(MixedFamily {
            coeff: &mf.coeff * a,
            ..mf.clone()
        }),
        GeneratorTerm::Scaled(p, pf) => GeneratorTerm::Scaled(
            p.clone(),
            PowerFamily {
                coeff: &pf.coeff * a,
                ..pf.clone()
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(field: &Field, form: &StructuredForm) {
        let printed = form.to_string();
        let back = parse_form(field, &printed)
            .unwrap_or_else(|e| panic!("printed form `{printed}` failed to parse: {e}"));
        assert_eq!(&back, form, "round-trip changed `{printed}`");
    }

    #[test]
    fn pure_cube_tail_parses_to_one_power_term() {
        let f = Field::default_field();
        let form = parse_form(&f, "sum(i>=1) x[i]^3").unwrap();
        let expected = StructuredForm::from_terms(
            &f,
            3,
            vec![GeneratorTerm::Power(PowerFamily {
                family: "x".into(),
                fixed: None,
                coeff: f.one(),
                exp: 3,
                start: 1,
            })],
        );
        assert_eq!(form, expected);
    }

    #[test]
    fn double_tail_parses_to_the_infinite_model() {
        let f = Field::default_field();
        let form = parse_form(&f, "3*sum(i>=1) x[i]*sum(j>=1) y[i,j]^2").unwrap();
        assert_eq!(form, canon::v_infinity(&f));
    }

    #[test]
    fn canonical_forms_roundtrip_through_print_and_parse() {
        let f = Field::default_field();
        roundtrip(&f, &canon::v_infinity(&f));
        for r in 0..=4 {
            roundtrip(&f, &canon::v_r(&f, r));
        }
        let p1 = parse_poly(&f, "x[1]^2 + x[2]^2").unwrap();
        let p2 = parse_poly(&f, "x[1]*x[2]").unwrap();
        roundtrip(&f, &canon::v_p(&f, 4, &[p1, p2]).unwrap());
    }

    #[test]
    fn parsed_forms_roundtrip_idempotently() {
        let f = Field::default_field();
        let text = "(x[1] + 2*x[2])*5*sum(k>=3) y[2,k]^2 + 7*sum(i>=2) z[i]^3 \
                    + x[3]^3 + 4*x[1]*x[2]*x[3]";
        let once = parse_form(&f, text).unwrap();
        roundtrip(&f, &once);
        assert_eq!(once.terms().len(), 3, "scaled + power + merged finite");
    }

    #[test]
    fn aliases_expand_in_place() {
        let f = Field::default_field();
        assert_eq!(parse_form(&f, "Vinf").unwrap(), canon::v_infinity(&f));
        assert_eq!(parse_form(&f, "V(3)").unwrap(), canon::v_r(&f, 3));
        assert_eq!(parse_form(&f, "V(0)").unwrap(), canon::v_r(&f, 0));
        let p1 = parse_poly(&f, "x[1]^2+x[2]^2").unwrap();
        let p2 = parse_poly(&f, "x[1]*x[2]").unwrap();
        assert_eq!(
            parse_form(&f, "Vp{x[1]^2+x[2]^2; x[1]*x[2]}").unwrap(),
            canon::v_p(&f, 4, &[p1, p2]).unwrap()
        );
        // Aliases compose additively and scale.
        let sum = parse_form(&f, "Vinf + x[1]^3").unwrap();
        assert_eq!(sum.terms().len(), 2);
        let doubled = parse_form(&f, "2*Vinf").unwrap();
        assert_eq!(doubled, canon::v_infinity(&f).scale(&f.scalar_u64(2)));
    }

    #[test]
    fn inhomogeneous_input_is_an_error() {
        let f = Field::default_field();
        match parse_form(&f, "x[1]^2 + 2") {
            Err(DslError::Inhomogeneous { expected: 2, found: 0 }) => {}
            other => panic!("expected inhomogeneity error, got {other:?}"),
        }
        match parse_form(&f, "x[1]^2 + x[1]^3") {
            Err(DslError::Inhomogeneous { .. }) => {}
            other => panic!("expected inhomogeneity error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_positions() {
        let f = Field::default_field();
        match parse_form(&f, "sum(i>=1) q[j]^2") {
            Err(DslError::Parse { line: 1, col, msg }) => {
                assert!(msg.contains("unbound"), "message was {msg}");
                assert!(col > 10, "column {col} should point into the body");
            }
            other => panic!("expected an unbound-index error, got {other:?}"),
        }
        match parse_form(&f, "x[0]^2") {
            Err(DslError::Parse { .. }) => {}
            other => panic!("expected an index-range error, got {other:?}"),
        }
        match parse_form(&f, "x[1]^2 +") {
            Err(DslError::Parse { .. }) => {}
            other => panic!("expected a truncated-input error, got {other:?}"),
        }
    }

    #[test]
    fn non_catalog_sums_are_rejected() {
        let f = Field::default_field();
        for text in [
            "sum(i>=1) x[i]*y[i]",
            "sum(i>=1) y[i,1]^2",
            "sum(i>=1) 3",
            "sum(i>=1) x[i]^2*sum(j>=1) y[i,j]^2",
            "sum(i>=1) (x[1] + x[2])*x[i]^2",
        ] {
            match parse_form(&f, text) {
                Err(DslError::OutsideCatalog { .. }) => {}
                other => panic!("`{text}` should be outside the catalog, got {other:?}"),
            }
        }
    }

    #[test]
    fn zero_and_constants_parse() {
        let f = Field::default_field();
        let zero = parse_form(&f, "0").unwrap();
        assert!(zero.terms().is_empty());
        roundtrip(&f, &zero);
        let c = parse_form(&f, "7").unwrap();
        assert_eq!(c.degree(), 0);
        assert_eq!(c.evaluate(&crate::poly::Vector::zero()), f.scalar_u64(7));
    }

    #[test]
    fn finite_polynomials_extract_and_tails_refuse() {
        let f = Field::default_field();
        let p = parse_poly(&f, "x[1]^2*x[2] + 100*x[3]^3").unwrap();
        assert_eq!(p.degree(), 3);
        assert!(parse_poly(&f, "sum(i>=1) x[i]^3").is_err());
    }

    #[test]
    fn fixed_leading_coordinate_tails_parse() {
        let f = Field::default_field();
        let form = parse_form(&f, "5*sum(j>=2) y[4,j]^2").unwrap();
        let expected = StructuredForm::from_terms(
            &f,
            2,
            vec![GeneratorTerm::Power(PowerFamily {
                family: "y".into(),
                fixed: Some(4),
                coeff: f.scalar_u64(5),
                exp: 2,
                start: 2,
            })],
        );
        assert_eq!(form, expected);
        roundtrip(&f, &form);
    }
}
