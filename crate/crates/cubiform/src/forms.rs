//! Structured forms: homogeneous forms in countably many variables, described
//! finitely by a closed generator catalog.
//!
//! The catalog has four term kinds: finite sparse polynomials, single power
//! families `c·Σ_{i≥s} fam[i]^d` (optionally with a fixed first index,
//! `c·Σ_{k≥s} fam[j,k]^d`), mixed families `c·Σ_{i≥s} out[i]·Σ_{j≥t}
//! in[i,j]^e`, and scaled products `p·(power family)` with a finite
//! polynomial `p`. Every truncation of a term is a homogeneous sparse
//! polynomial, truncations are coherent across window sizes, and the catalog
//! is closed under formal differentiation — which is what keeps residual-rank
//! computations exact downstream.

use crate::poly::{Monomial, SparsePoly, Vector};
use crate::scalar::{Field, Scalar};
use crate::vars::VarId;
use std::fmt;

/// `coeff · Σ_{k ≥ start} fam[k]^exp` when `fixed` is None, or
/// `coeff · Σ_{k ≥ start} fam[fixed,k]^exp` when the first index is pinned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PowerFamily {
    pub family: String,
    pub fixed: Option<u32>,
    pub coeff: Scalar,
    pub exp: u32,
    pub start: u32,
}

impl PowerFamily {
    pub fn var_at(&self, k: u32) -> VarId {
        match self.fixed {
            None => VarId::single(&self.family, k),
            Some(j) => VarId::pair(&self.family, j, k),
        }
    }

    /// The running index of `v` if it belongs to this family pattern.
    pub fn running_index(&self, v: &VarId) -> Option<u32> {
        if v.family() != self.family {
            return None;
        }
        let k = match (self.fixed, v.idx2()) {
            (None, None) => v.idx1(),
            (Some(j), Some(k2)) if v.idx1() == j => k2,
            _ => return None,
        };
        (k >= self.start).then_some(k)
    }

    pub fn degree(&self) -> u32 {
        self.exp
    }

    pub fn truncate(&self, field: &Field, n: u32) -> SparsePoly {
        let mut terms = Vec::new();
        if self.fixed.map_or(true, |j| j <= n) {
            for k in self.start..=n.max(self.start.saturating_sub(1)) {
                if k > n {
                    break;
                }
                terms.push((
                    Monomial::from_powers(&[(self.var_at(k), self.exp)]),
                    self.coeff.clone(),
                ));
            }
        }
        SparsePoly::from_terms(field, self.exp, terms)
    }
}

/// `coeff · Σ_{i ≥ outer_start} outer[i] · Σ_{j ≥ inner_start} inner[i,j]^inner_exp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedFamily {
    pub coeff: Scalar,
    pub outer: String,
    pub outer_start: u32,
    pub inner: String,
    pub inner_exp: u32,
    pub inner_start: u32,
}

impl MixedFamily {
    pub fn degree(&self) -> u32 {
        1 + self.inner_exp
    }

    /// The inner tail for one outer index, as a power family.
    pub fn inner_tail(&self, i: u32) -> PowerFamily {
        PowerFamily {
            family: self.inner.clone(),
            fixed: Some(i),
            coeff: self.coeff.clone(),
            exp: self.inner_exp,
            start: self.inner_start,
        }
    }

    pub fn truncate(&self, field: &Field, n: u32) -> SparsePoly {
        let mut acc = SparsePoly::zero(field, self.degree());
        for i in self.outer_start..=n.max(self.outer_start.saturating_sub(1)) {
            if i > n {
                break;
            }
            let outer_var = SparsePoly::var(field, VarId::single(&self.outer, i));
            acc = acc.add(&outer_var.mul(&self.inner_tail(i).truncate(field, n)));
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeneratorTerm {
    /// A finite sparse polynomial.
    Finite(SparsePoly),
    /// A power family (infinite tail of pure powers).
    Power(PowerFamily),
    /// A mixed family (outer linear factor times inner power tails).
    Mixed(MixedFamily),
    /// A finite polynomial times a power family.
    Scaled(SparsePoly, PowerFamily),
}

impl GeneratorTerm {
    pub fn degree(&self) -> u32 {
        match self {
            GeneratorTerm::Finite(p) => p.degree(),
            GeneratorTerm::Power(pf) => pf.degree(),
            GeneratorTerm::Mixed(mf) => mf.degree(),
            GeneratorTerm::Scaled(p, pf) => p.degree() + pf.degree(),
        }
    }

    pub fn truncate(&self, field: &Field, n: u32) -> SparsePoly {
        match self {
            GeneratorTerm::Finite(p) => p.truncate(n),
            GeneratorTerm::Power(pf) => pf.truncate(field, n),
            GeneratorTerm::Mixed(mf) => mf.truncate(field, n),
            GeneratorTerm::Scaled(p, pf) => p.truncate(n).mul(&pf.truncate(field, n)),
        }
    }

    fn scale(&self, a: &Scalar) -> GeneratorTerm {
        match self {
            GeneratorTerm::Finite(p) => GeneratorTerm::Finite(p.scale(a)),
            GeneratorTerm::Power(pf) => GeneratorTerm::Power(PowerFamily {
                coeff: &pf.coeff * a,
                ..pf.clone()
            }),
            GeneratorTerm::Mixed(mf) => GeneratorTerm::Mixed(MixedFamily {
                coeff: &mf.coeff * a,
                ..mf.clone()
            }),
            GeneratorTerm::Scaled(p, pf) => GeneratorTerm::Scaled(p.scale(a), pf.clone()),
        }
    }

    fn is_zero_term(&self) -> bool {
        match self {
            GeneratorTerm::Finite(p) => p.is_zero(),
            GeneratorTerm::Power(pf) => pf.coeff.is_zero(),
            GeneratorTerm::Mixed(mf) => mf.coeff.is_zero(),
            GeneratorTerm::Scaled(p, pf) => p.is_zero() || pf.coeff.is_zero(),
        }
    }
}

/// A homogeneous form of countable support, as a finite list of generator
/// terms of one common degree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredForm {
    field: Field,
    degree: u32,
    terms: Vec<GeneratorTerm>,
}

impl StructuredForm {
    pub fn zero(field: &Field, degree: u32) -> StructuredForm {
        StructuredForm {
            field: field.clone(),
            degree,
            terms: Vec::new(),
        }
    }

    pub fn finite(poly: SparsePoly) -> StructuredForm {
        let field = poly.field().clone();
        let degree = poly.degree();
        StructuredForm::from_terms(&field, degree, vec![GeneratorTerm::Finite(poly)])
    }

    pub fn from_terms(field: &Field, degree: u32, terms: Vec<GeneratorTerm>) -> StructuredForm {
        for t in &terms {
            assert_eq!(
                t.degree(),
                degree,
                "generator term of degree {} in a degree-{} form",
                t.degree(),
                degree
            );
        }
        StructuredForm {
            field: field.clone(),
            degree,
            terms: terms.into_iter().filter(|t| !t.is_zero_term()).collect(),
        }
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn terms(&self) -> &[GeneratorTerm] {
        &self.terms
    }

    /// Is the whole description finite (no infinite tails)?
    pub fn is_finitely_supported(&self) -> bool {
        self.terms
            .iter()
            .all(|t| matches!(t, GeneratorTerm::Finite(_)))
    }

    /// Collapse to a single sparse polynomial when finitely supported.
    pub fn as_finite(&self) -> Option<SparsePoly> {
        if !self.is_finitely_supported() {
            return None;
        }
        let mut acc = SparsePoly::zero(&self.field, self.degree);
        for t in &self.terms {
            let GeneratorTerm::Finite(p) = t else {
                unreachable!()
            };
            acc = acc.add(p);
        }
        Some(acc)
    }

    pub fn add(&self, other: &StructuredForm) -> StructuredForm {
        assert_eq!(self.degree, other.degree, "degree mismatch in add");
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        StructuredForm::from_terms(&self.field, self.degree, terms)
    }

    pub fn scale(&self, a: &Scalar) -> StructuredForm {
        StructuredForm::from_terms(
            &self.field,
            self.degree,
            self.terms.iter().map(|t| t.scale(a)).collect(),
        )
    }

    /// Restriction to all family indices ≤ N, as a sparse polynomial.
    pub fn truncate(&self, n: u32) -> SparsePoly {
        let mut acc = SparsePoly::zero(&self.field, self.degree);
        for t in &self.terms {
            acc = acc.add(&t.truncate(&self.field, n));
        }
        acc
    }

    /// Exact evaluation at a finitely supported vector.
    pub fn evaluate(&self, v: &Vector) -> Scalar {
        self.truncate(v.max_index()).evaluate(v)
    }

    /// Formal partial derivative; stays in the catalog.
    pub fn partial_derivative(&self, v: &VarId) -> StructuredForm {
        let field = &self.field;
        let degree = self.degree.saturating_sub(1);
        let mut out: Vec<GeneratorTerm> = Vec::new();
        for t in &self.terms {
            match t {
                GeneratorTerm::Finite(p) => {
                    let d = p.partial_derivative(v);
                    if !d.is_zero() {
                        out.push(GeneratorTerm::Finite(d));
                    }
                }
                GeneratorTerm::Power(pf) => {
                    if let Some(k) = pf.running_index(v) {
                        debug_assert_eq!(pf.var_at(k), *v);
                        let c = &pf.coeff * &field.scalar_u64(pf.exp as u64);
                        let mono = Monomial::from_powers(&[(v.clone(), pf.exp - 1)]);
                        out.push(GeneratorTerm::Finite(SparsePoly::monomial(field, mono, c)));
                    }
                }
                GeneratorTerm::Mixed(mf) => {
                    if v.family() == mf.outer && v.idx2().is_none() && v.idx1() >= mf.outer_start
                    {
                        // ∂/∂ outer[i] = coeff · Σ_j inner[i,j]^e
                        out.push(GeneratorTerm::Power(mf.inner_tail(v.idx1())));
                    }
                    if v.family() == mf.inner {
                        if let (i, Some(j)) = (v.idx1(), v.idx2()) {
                            if i >= mf.outer_start && j >= mf.inner_start {
                                // ∂/∂ inner[i,j] = coeff·e · outer[i] · inner[i,j]^{e−1}
                                let c = &mf.coeff * &field.scalar_u64(mf.inner_exp as u64);
                                let mono = Monomial::from_powers(&[
                                    (VarId::single(&mf.outer, i), 1),
                                    (v.clone(), mf.inner_exp - 1),
                                ]);
                                out.push(GeneratorTerm::Finite(SparsePoly::monomial(
                                    field, mono, c,
                                )));
                            }
                        }
                    }
                }
                GeneratorTerm::Scaled(p, pf) => {
                    let dp = p.partial_derivative(v);
                    if !dp.is_zero() {
                        if dp.degree() == 0 {
                            // Constant × tail: fold into the family coefficient.
                            let c = dp.coeff(&Monomial::one());
                            out.push(GeneratorTerm::Power(PowerFamily {
                                coeff: &pf.coeff * &c,
                                ..pf.clone()
                            }));
                        } else {
                            out.push(GeneratorTerm::Scaled(dp, pf.clone()));
                        }
                    }
                    if let Some(k) = pf.running_index(v) {
                        debug_assert_eq!(pf.var_at(k), *v);
                        // ∂/∂v of p·c·v^e adds p · c·e·v^{e−1}, a finite term.
                        let c = &pf.coeff * &field.scalar_u64(pf.exp as u64);
                        let mono = Monomial::from_powers(&[(v.clone(), pf.exp - 1)]);
                        let vm = SparsePoly::monomial(field, mono, c);
                        out.push(GeneratorTerm::Finite(p.mul(&vm)));
                    }
                }
            }
        }
        StructuredForm::from_terms(field, degree, out)
    }

    /// Directional derivative along a finitely supported vector:
    /// `f_v = Σ_u v_u · ∂f/∂u`.
    pub fn directional_derivative(&self, v: &Vector) -> StructuredForm {
        let mut acc = StructuredForm::zero(&self.field, self.degree.saturating_sub(1));
        for (u, c) in v.iter() {
            acc = acc.add(&self.partial_derivative(u).scale(c));
        }
        acc
    }

    /// The symmetric trilinear polarization ⟨u,v,w⟩ with ⟨v,v,v⟩ = f(v),
    /// computed exactly as
    /// (1/6)[f(u+v+w) − f(u+v) − f(u+w) − f(v+w) + f(u) + f(v) + f(w)].
    pub fn trilinear(&self, u: &Vector, v: &Vector, w: &Vector) -> Scalar {
        assert_eq!(self.degree, 3, "polarization needs a cubic form");
        let f = |x: &Vector| self.evaluate(x);
        let six_inv = self
            .field
            .scalar_u64(6)
            .inv()
            .expect("6 invertible away from char 2,3");
        let uv = u.add(v);
        let uw = u.add(w);
        let vw = v.add(w);
        let uvw = uv.add(w);
        let total = f(&uvw) - f(&uv) - f(&uw) - f(&vw) + f(u) + f(v) + f(w);
        total * six_inv
    }

    /// Largest explicit index named in the description (tails continue past
    /// it; this bounds where the finite data lives).
    pub fn described_index(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| match t {
                GeneratorTerm::Finite(p) => p.max_index(),
                GeneratorTerm::Power(pf) => pf.fixed.unwrap_or(0).max(pf.start),
                GeneratorTerm::Mixed(mf) => mf.outer_start.max(mf.inner_start),
                GeneratorTerm::Scaled(p, pf) => {
                    p.max_index().max(pf.fixed.unwrap_or(0)).max(pf.start)
                }
            })
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for StructuredForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut parts = Vec::new();
        for t in &self.terms {
            match t {
                GeneratorTerm::Finite(p) => parts.push(p.to_string()),
                GeneratorTerm::Power(pf) => parts.push(format_power(pf, None)),
                GeneratorTerm::Mixed(mf) => {
                    let outer = format!("sum(i>={}) {}[i]*", mf.outer_start, mf.outer);
                    let inner = format!(
                        "sum(j>={}) {}[i,j]^{}",
                        mf.inner_start, mf.inner, mf.inner_exp
                    );
                    let c = if mf.coeff.is_one() {
                        String::new()
                    } else {
                        format!("{}*", mf.coeff)
                    };
                    parts.push(format!("{c}{outer}{inner}"));
                }
                GeneratorTerm::Scaled(p, pf) => {
                    parts.push(format!("({})*{}", p, format_power(pf, Some("k"))));
                }
            }
        }
        write!(f, "{}", parts.join(" + "))
    }
}

/// A form presented only through its finite windows: a rule `N ↦ f|≤N`.
/// This is the boundary of exactness — operations on streams are windowed
/// and, where they must answer a global question, heuristic.
#[derive(Clone)]
pub struct TruncationStream {
    degree: u32,
    rule: std::sync::Arc<dyn Fn(u32) -> SparsePoly + Send + Sync>,
}

impl TruncationStream {
    pub fn new(
        degree: u32,
        rule: impl Fn(u32) -> SparsePoly + Send + Sync + 'static,
    ) -> TruncationStream {
        TruncationStream {
            degree,
            rule: std::sync::Arc::new(rule),
        }
    }

    /// Present a structured form through its windows.
    pub fn from_form(form: &StructuredForm) -> TruncationStream {
        let form = form.clone();
        TruncationStream::new(form.degree(), move |n| form.truncate(n))
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// The window at N; panics if the rule produces the wrong degree.
    pub fn window(&self, n: u32) -> SparsePoly {
        let w = (self.rule)(n);
        assert!(
            w.is_zero() || w.degree() == self.degree,
            "stream window degree mismatch"
        );
        assert!(w.max_index() <= n, "stream window leaks indices above {n}");
        w
    }

    /// Coherence check: windows must agree under further truncation.
    /// Returns the first violating pair.
    pub fn check_coherence(&self, sizes: &[u32]) -> Result<(), (u32, u32)> {
        for (a, b) in sizes.iter().zip(sizes.iter().skip(1)) {
            let (m, n) = (*a.min(b), *a.max(b));
            if self.window(n).truncate(m) != self.window(m) {
                return Err((m, n));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for TruncationStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TruncationStream(degree={})", self.degree)
    }
}

fn format_power(pf: &PowerFamily, ivar: Option<&str>) -> String {
    let iv = ivar.unwrap_or("i");
    let c = if pf.coeff.is_one() {
        String::new()
    } else {
        format!("{}*", pf.coeff)
    };
    match pf.fixed {
        None => format!("{c}sum({iv}>={}) {}[{iv}]^{}", pf.start, pf.family, pf.exp),
        Some(j) => format!(
            "{c}sum({iv}>={}) {}[{},{iv}]^{}",
            pf.start, pf.family, j, pf.exp
        ),
    }
}
