//! Sparse exact polynomials and finitely-supported vectors.
//!
//! `SparsePoly` is a finite map monomial → scalar with a declared homogeneous
//! degree; the zero polynomial of any degree is allowed and never stores
//! coefficients. Monomials are ordered graded-lexicographically over the
//! variable order, which makes printing and every downstream pivot choice
//! deterministic.

use crate::scalar::{Field, Scalar};
use crate::vars::VarId;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A multiset of variables: map variable → exponent ≥ 1.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct Monomial(BTreeMap<VarId, u32>);

impl Monomial {
    pub fn one() -> Monomial {
        Monomial(BTreeMap::new())
    }

    pub fn var(v: VarId) -> Monomial {
        Monomial(BTreeMap::from([(v, 1)]))
    }

    pub fn from_powers(powers: &[(VarId, u32)]) -> Monomial {
        let mut m = BTreeMap::new();
        for (v, e) in powers {
            if *e > 0 {
                *m.entry(v.clone()).or_insert(0) += e;
            }
        }
        Monomial(m)
    }

    pub fn degree(&self) -> u32 {
        self.0.values().sum()
    }

    pub fn exponent(&self, v: &VarId) -> u32 {
        self.0.get(v).copied().unwrap_or(0)
    }

    pub fn powers(&self) -> impl Iterator<Item = (&VarId, u32)> {
        self.0.iter().map(|(v, e)| (v, *e))
    }

    pub fn vars(&self) -> impl Iterator<Item = &VarId> {
        self.0.keys()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut m = self.0.clone();
        for (v, e) in &other.0 {
            *m.entry(v.clone()).or_insert(0) += e;
        }
        Monomial(m)
    }

    /// Divide by one power of `v`; None if `v` does not occur.
    fn div_var(&self, v: &VarId) -> Option<Monomial> {
        let e = self.0.get(v)?;
        let mut m = self.0.clone();
        if *e == 1 {
            m.remove(v);
        } else {
            m.insert(v.clone(), e - 1);
        }
        Some(Monomial(m))
    }

    /// Largest variable index occurring (0 for the empty monomial).
    pub fn max_index(&self) -> u32 {
        self.0.keys().map(VarId::max_index).max().unwrap_or(0)
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Graded lexicographic: total degree first, then the (variable,
        // exponent) sequence in variable order.
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(v, e)| {
                if *e == 1 {
                    v.to_string()
                } else {
                    format!("{v}^{e}")
                }
            })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// A vector of the ambient space: finitely many nonzero coordinates.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Vector {
    entries: BTreeMap<VarId, Scalar>,
}

impl Vector {
    pub fn zero() -> Vector {
        Vector {
            entries: BTreeMap::new(),
        }
    }

    pub fn unit(field: &Field, v: VarId) -> Vector {
        let mut entries = BTreeMap::new();
        entries.insert(v, field.one());
        Vector { entries }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (VarId, Scalar)>) -> Vector {
        let mut out = BTreeMap::new();
        for (v, c) in entries {
            if !c.is_zero() {
                out.insert(v, c);
            }
        }
        Vector { entries: out }
    }

    pub fn get(&self, v: &VarId) -> Option<&Scalar> {
        self.entries.get(v)
    }

    pub fn set(&mut self, v: VarId, c: Scalar) {
        if c.is_zero() {
            self.entries.remove(&v);
        } else {
            self.entries.insert(v, c);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn support(&self) -> impl Iterator<Item = &VarId> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarId, &Scalar)> {
        self.entries.iter()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        let mut out = self.entries.clone();
        for (v, c) in &other.entries {
            let cur = match out.get(v) {
                Some(x) => x + c,
                None => c.clone(),
            };
            if cur.is_zero() {
                out.remove(v);
            } else {
                out.insert(v.clone(), cur);
            }
        }
        Vector { entries: out }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.add(&other.scale_neg())
    }

    fn scale_neg(&self) -> Vector {
        Vector {
            entries: self
                .entries
                .iter()
                .map(|(v, c)| (v.clone(), -c))
                .collect(),
        }
    }

    pub fn scale(&self, a: &Scalar) -> Vector {
        if a.is_zero() {
            return Vector::zero();
        }
        Vector {
            entries: self
                .entries
                .iter()
                .map(|(v, c)| (v.clone(), a * c))
                .collect(),
        }
    }

    /// Largest index used by the support (0 for the zero vector).
    pub fn max_index(&self) -> u32 {
        self.entries.keys().map(VarId::max_index).max().unwrap_or(0)
    }
}

impl fmt::Display for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|(v, c)| {
                if c.is_one() {
                    v.to_string()
                } else {
                    format!("{c}*{v}")
                }
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// A finite exact polynomial, homogeneous of a declared degree.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SparsePoly {
    field: Field,
    degree: u32,
    terms: BTreeMap<Monomial, Scalar>,
}

impl SparsePoly {
    pub fn zero(field: &Field, degree: u32) -> SparsePoly {
        SparsePoly {
            field: field.clone(),
            degree,
            terms: BTreeMap::new(),
        }
    }

    pub fn var(field: &Field, v: VarId) -> SparsePoly {
        SparsePoly::from_terms(field, 1, [(Monomial::var(v), field.one())])
    }

    pub fn monomial(field: &Field, m: Monomial, c: Scalar) -> SparsePoly {
        let degree = m.degree();
        SparsePoly::from_terms(field, degree, [(m, c)])
    }

    pub fn from_terms(
        field: &Field,
        degree: u32,
        terms: impl IntoIterator<Item = (Monomial, Scalar)>,
    ) -> SparsePoly {
        let mut out: BTreeMap<Monomial, Scalar> = BTreeMap::new();
        for (m, c) in terms {
            assert_eq!(m.degree(), degree, "inhomogeneous term {m} in degree-{degree} polynomial");
            if c.is_zero() {
                continue;
            }
            let cur = match out.get(&m) {
                Some(x) => x + &c,
                None => c,
            };
            if cur.is_zero() {
                out.remove(&m);
            } else {
                out.insert(m, cur);
            }
        }
        SparsePoly {
            field: field.clone(),
            degree,
            terms: out,
        }
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Scalar)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> Scalar {
        self.terms
            .get(m)
            .cloned()
            .unwrap_or_else(|| self.field.zero())
    }

    pub fn support(&self) -> BTreeSet<VarId> {
        self.terms
            .keys()
            .flat_map(|m| m.vars().cloned())
            .collect()
    }

    pub fn max_index(&self) -> u32 {
        self.terms.keys().map(Monomial::max_index).max().unwrap_or(0)
    }

    pub fn add(&self, other: &SparsePoly) -> SparsePoly {
        assert_eq!(self.degree, other.degree, "degree mismatch in add");
        let mut out = self.terms.clone();
        for (m, c) in &other.terms {
            let cur = match out.get(m) {
                Some(x) => x + c,
                None => c.clone(),
            };
            if cur.is_zero() {
                out.remove(m);
            } else {
                out.insert(m.clone(), cur);
            }
        }
        SparsePoly {
            field: self.field.clone(),
            degree: self.degree,
            terms: out,
        }
    }

    pub fn sub(&self, other: &SparsePoly) -> SparsePoly {
        self.add(&other.scale(&-self.field.one()))
    }

    pub fn scale(&self, a: &Scalar) -> SparsePoly {
        if a.is_zero() {
            return SparsePoly::zero(&self.field, self.degree);
        }
        SparsePoly {
            field: self.field.clone(),
            degree: self.degree,
            terms: self
                .terms
                .iter()
                .map(|(m, c)| (m.clone(), a * c))
                .collect(),
        }
    }

    pub fn mul(&self, other: &SparsePoly) -> SparsePoly {
        let mut out: BTreeMap<Monomial, Scalar> = BTreeMap::new();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                let m = m1.mul(m2);
                let c = c1 * c2;
                let cur = match out.get(&m) {
                    Some(x) => x + &c,
                    None => c,
                };
                if cur.is_zero() {
                    out.remove(&m);
                } else {
                    out.insert(m, cur);
                }
            }
        }
        SparsePoly {
            field: self.field.clone(),
            degree: self.degree + other.degree,
            terms: out,
        }
    }

    pub fn pow(&self, e: u32) -> SparsePoly {
        let mut acc = SparsePoly::from_terms(&self.field, 0, [(Monomial::one(), self.field.one())]);
        for _ in 0..e {
            acc = acc.mul(self);
        }
        acc
    }

    /// Formal partial derivative.
    pub fn partial_derivative(&self, v: &VarId) -> SparsePoly {
        let degree = self.degree.saturating_sub(1);
        let mut terms = Vec::new();
        for (m, c) in &self.terms {
            let e = m.exponent(v);
            if e == 0 {
                continue;
            }
            let dm = m.div_var(v).unwrap();
            terms.push((dm, c * &self.field.scalar_u64(e as u64)));
        }
        SparsePoly::from_terms(&self.field, degree, terms)
    }

    pub fn evaluate(&self, at: &Vector) -> Scalar {
        let mut total = self.field.zero();
        'outer: for (m, c) in &self.terms {
            let mut prod = c.clone();
            for (v, e) in m.powers() {
                match at.get(v) {
                    Some(x) => prod = prod * x.pow_u64(e as u64),
                    None => continue 'outer,
                }
            }
            total = total + prod;
        }
        total
    }

    /// Substitute every variable through `image` (a total rule; callers pass
    /// zero images for retired variables). Images need not be linear; the
    /// result's declared degree is `self.degree × d` only when all images are
    /// homogeneous of one degree d, so the result recomputes its degree from
    /// surviving terms and falls back to the declared input degree when all
    /// terms cancel.
    pub fn substitute(&self, image: impl Fn(&VarId) -> SparsePoly) -> SparsePoly {
        let mut acc: Option<SparsePoly> = None;
        for (m, c) in &self.terms {
            let mut term = SparsePoly::from_terms(
                &self.field,
                0,
                [(Monomial::one(), c.clone())],
            );
            for (v, e) in m.powers() {
                let img = image(v);
                term = term.mul(&img.pow(e));
                if term.is_zero() {
                    break;
                }
            }
            acc = Some(match acc {
                None => term,
                Some(a) => {
                    if a.is_zero() {
                        term
                    } else if term.is_zero() {
                        a
                    } else {
                        a.add(&term)
                    }
                }
            });
        }
        acc.unwrap_or_else(|| SparsePoly::zero(&self.field, self.degree))
    }

    /// Keep only monomials all of whose variables satisfy the predicate.
    pub fn restrict(&self, keep: impl Fn(&VarId) -> bool) -> SparsePoly {
        SparsePoly {
            field: self.field.clone(),
            degree: self.degree,
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.vars().all(&keep))
                .map(|(m, c)| (m.clone(), c.clone()))
                .collect(),
        }
    }

    /// Truncate to variables with all indices ≤ N.
    pub fn truncate(&self, n: u32) -> SparsePoly {
        self.restrict(|v| v.max_index() <= n)
    }
}

impl fmt::Display for SparsePoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .rev()
            .map(|(m, c)| {
                if m.degree() == 0 {
                    format!("{c}")
                } else if c.is_one() {
                    m.to_string()
                } else {
                    format!("{c}*{m}")
                }
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x(i: u32) -> VarId {
        VarId::single("x", i)
    }

    #[test]
    fn derivative_of_cube() {
        let f = Field::default_field();
        let p = SparsePoly::var(&f, x(1)).pow(3);
        let d = p.partial_derivative(&x(1));
        let expected = SparsePoly::monomial(
            &f,
            Monomial::from_powers(&[(x(1), 2)]),
            f.scalar_u64(3),
        );
        assert_eq!(d, expected);
        assert!(p.partial_derivative(&x(2)).is_zero());
    }

    #[test]
    fn evaluate_sum_of_cubes() {
        let f = Field::default_field();
        let p = SparsePoly::var(&f, x(1))
            .pow(3)
            .add(&SparsePoly::var(&f, x(2)).pow(3));
        let v = Vector::from_entries([
            (x(1), f.scalar_u64(1)),
            (x(2), f.scalar_u64(2)),
        ]);
        assert_eq!(p.evaluate(&v), f.scalar_u64(9));
        assert_eq!(p.evaluate(&Vector::zero()), f.zero());
    }

    fn random_poly(f: &Field, rng: &mut ChaCha8Rng, degree: u32, nvars: u32) -> SparsePoly {
        let mut terms = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            let mut powers = Vec::new();
            let mut left = degree;
            while left > 0 {
                let e = rng.gen_range(1..=left);
                powers.push((x(rng.gen_range(1..=nvars)), e));
                left -= e;
            }
            terms.push((Monomial::from_powers(&powers), f.random_base(rng)));
        }
        SparsePoly::from_terms(f, degree, terms)
    }

    #[test]
    fn ring_axioms_on_random_polys() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..40 {
            let a = random_poly(&f, &mut rng, 2, 4);
            let b = random_poly(&f, &mut rng, 2, 4);
            let c = random_poly(&f, &mut rng, 3, 4);
            assert_eq!(a.mul(&b), b.mul(&a));
            assert_eq!(a.mul(&b).mul(&c), a.mul(&b.mul(&c)));
            assert_eq!(a.add(&b).mul(&c), a.mul(&c).add(&b.mul(&c)));
        }
    }

    #[test]
    fn derivative_is_linear_and_commutes() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..40 {
            let a = random_poly(&f, &mut rng, 3, 4);
            let b = random_poly(&f, &mut rng, 3, 4);
            let v = x(rng.gen_range(1..=4));
            let w = x(rng.gen_range(1..=4));
            assert_eq!(
                a.add(&b).partial_derivative(&v),
                a.partial_derivative(&v).add(&b.partial_derivative(&v))
            );
            assert_eq!(
                a.partial_derivative(&v).partial_derivative(&w),
                a.partial_derivative(&w).partial_derivative(&v)
            );
        }
    }

    #[test]
    fn substitution_composes() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let p = random_poly(&f, &mut rng, 3, 3);
            // s: x1 ↦ x1 + 2x2, others fixed; t: x2 ↦ 5x3, others fixed.
            let s = |v: &VarId| -> SparsePoly {
                if *v == x(1) {
                    SparsePoly::var(&f, x(1))
                        .add(&SparsePoly::var(&f, x(2)).scale(&f.scalar_u64(2)))
                } else {
                    SparsePoly::var(&f, v.clone())
                }
            };
            let t = |v: &VarId| -> SparsePoly {
                if *v == x(2) {
                    SparsePoly::var(&f, x(3)).scale(&f.scalar_u64(5))
                } else {
                    SparsePoly::var(&f, v.clone())
                }
            };
            let st = |v: &VarId| -> SparsePoly { s(v).substitute(t) };
            assert_eq!(p.substitute(s).substitute(t), p.substitute(st));
        }
    }

    #[test]
    fn truncation_is_coherent() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let p = random_poly(&f, &mut rng, 3, 8);
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=n);
            assert_eq!(p.truncate(n).truncate(m), p.truncate(m));
        }
    }

    #[test]
    fn display_is_deterministic_and_graded() {
        let f = Field::default_field();
        let p = SparsePoly::from_terms(
            &f,
            3,
            [
                (
                    Monomial::from_powers(&[(x(2), 3)]),
                    f.one(),
                ),
                (
                    Monomial::from_powers(&[(x(1), 1), (VarId::pair("y", 1, 1), 2)]),
                    f.scalar_u64(3),
                ),
            ],
        );
        assert_eq!(p.to_string(), "x[2]^3 + 3*x[1]*y[1,1]^2");
    }
}
