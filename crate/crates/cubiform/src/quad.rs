//! Quadratic spaces: ranks, diagonalization, sums of squares, strength,
//! orthonormal sequences, isometry extension, and embeddings of quadratic
//! spaces into infinite-strength targets.
//!
//! A quadratic form is stored as a finite sparse Gram table plus a list of
//! square tails (whole families of squared variables at once). The convention
//! is `q = Σ G_{uu}·u² + Σ_{u<v} G_{uv}·uv`: the table stores monomial
//! coefficients, and the associated bilinear form is `b(u,v) = G_{uv}/2` off
//! the diagonal, `b(u,u) = G_{uu}` (characteristic ≠ 2 throughout).
//!
//! Everything here is exact. Isometry extension does not perform a reflection
//! cascade; instead both sides are completed to standard orthonormal frames —
//! the scalar tower supplies square roots on demand, so every nondegenerate
//! finite form is constructively equivalent to the identity diagonal, and the
//! frame-matching map is an isometry by construction.

use crate::forms::{GeneratorTerm, PowerFamily, StructuredForm, TruncationStream};
use crate::linalg::Matrix;
use crate::poly::{Monomial, SparsePoly, Vector};
use crate::scalar::{Field, Scalar};
use crate::subst::{IndexExpr, IndexMatcher, IndexSel, Substitution, TailRule, UnmatchedPolicy};
use crate::vars::VarId;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// A rank or strength value: a natural number or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rank {
    Finite(usize),
    Infinite,
}

impl Rank {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Rank::Infinite)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Finite(n) => write!(f, "{n}"),
            Rank::Infinite => write!(f, "INF"),
        }
    }
}

/// Whether a reported value is exact or a windowed stabilization guess.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exactness {
    Exact,
    Heuristic,
}

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("not a quadratic form in catalog shape: {0}")]
    NotQuadratic(String),
    #[error("operation needs a finitely supported form, but square tails are present")]
    TailPresent,
    #[error("operation needs infinite strength, but the form has finite rank")]
    FiniteStrength,
    #[error("ambient window is degenerate")]
    DegenerateWindow,
    #[error("the two vector lists are not isometric (Gram tables differ)")]
    NotIsometric,
    #[error("vector list is linearly dependent")]
    NotInjective,
    #[error("vector lists have different lengths")]
    DimensionMismatch,
    #[error("witness search budget exhausted")]
    SearchBudgetExhausted,
}

/// A quadratic form: finite Gram table plus square tails.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    field: Field,
    /// Key `(u, v)` with `u ≤ v`; value is the coefficient of the monomial
    /// `uv` (or `u²` on the diagonal).
    gram: BTreeMap<(VarId, VarId), Scalar>,
    /// Exponent-2 power families, normalized: at most one per
    /// (family, fixed) pattern, with nonzero eventual coefficient.
    tails: Vec<PowerFamily>,
}

impl QuadraticForm {
    pub fn zero(field: &Field) -> QuadraticForm {
        QuadraticForm {
            field: field.clone(),
            gram: BTreeMap::new(),
            tails: Vec::new(),
        }
    }

    pub fn from_poly(p: &SparsePoly) -> Result<QuadraticForm, QuadError> {
        if !p.is_zero() && p.degree() != 2 {
            return Err(QuadError::NotQuadratic(format!(
                "degree {} polynomial",
                p.degree()
            )));
        }
        let mut q = QuadraticForm::zero(p.field());
        for (m, c) in p.terms() {
            let vars: Vec<(&VarId, u32)> = m.powers().collect();
            match vars.as_slice() {
                [(u, 2)] => q.add_entry((*u).clone(), (*u).clone(), c.clone()),
                [(u, 1), (v, 1)] => q.add_entry((*u).clone(), (*v).clone(), c.clone()),
                _ => unreachable!("homogeneous degree-2 monomial"),
            }
        }
        Ok(q)
    }

    /// Read a degree-2 structured form: finite terms feed the Gram table,
    /// exponent-2 power families become tails. Mixed and scaled terms have no
    /// finite Gram presentation and are rejected.
    pub fn from_structured(form: &StructuredForm) -> Result<QuadraticForm, QuadError> {
        if form.degree() != 2 {
            return Err(QuadError::NotQuadratic(format!(
                "degree {} form",
                form.degree()
            )));
        }
        let mut q = QuadraticForm::zero(form.field());
        for t in form.terms() {
            match t {
                GeneratorTerm::Finite(p) => {
                    let part = QuadraticForm::from_poly(p)?;
                    for ((u, v), c) in part.gram {
                        q.add_entry(u, v, c);
                    }
                }
                GeneratorTerm::Power(pf) => {
                    q.tails.push(pf.clone());
                }
                GeneratorTerm::Mixed(_) | GeneratorTerm::Scaled(..) => {
                    return Err(QuadError::NotQuadratic(
                        "mixed/scaled terms have no Gram presentation".into(),
                    ));
                }
            }
        }
        q.normalize_tails();
        Ok(q)
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    /// Add `c` to the coefficient of the monomial `uv`.
    pub fn add_entry(&mut self, u: VarId, v: VarId, c: Scalar) {
        let key = if u <= v { (u, v) } else { (v, u) };
        let cur = self.gram.remove(&key).unwrap_or_else(|| self.field.zero());
        let next = &cur + &c;
        if !next.is_zero() {
            self.gram.insert(key, next);
        }
    }

    /// Append a square tail (exponent must be 2) and re-normalize.
    pub fn add_tail(&mut self, pf: PowerFamily) -> Result<(), QuadError> {
        if pf.exp != 2 {
            return Err(QuadError::NotQuadratic(format!(
                "tail exponent {} is not 2",
                pf.exp
            )));
        }
        self.tails.push(pf);
        self.normalize_tails();
        Ok(())
    }

    /// Merge tails per (family, fixed) pattern. Overlapping tails with
    /// different starts cancel exactly: members below the last start fold
    /// into the Gram table with their running partial coefficient, and a
    /// group whose eventual coefficient vanishes disappears entirely.
    fn normalize_tails(&mut self) {
        let mut groups: BTreeMap<(String, Option<u32>), Vec<(u32, Scalar)>> = BTreeMap::new();
        for pf in self.tails.drain(..) {
            groups
                .entry((pf.family.clone(), pf.fixed))
                .or_default()
                .push((pf.start, pf.coeff));
        }
        for ((family, fixed), mut members) in groups {
            members.sort_by_key(|(s, _)| *s);
            let last_start = members.last().expect("nonempty group").0;
            let first_start = members[0].0;
            let mut eventual = self.field.zero();
            for (_, c) in &members {
                eventual = &eventual + c;
            }
            // Fold the ramp-up members into the Gram table.
            for k in first_start..last_start {
                let mut partial = self.field.zero();
                for (s, c) in &members {
                    if *s <= k {
                        partial = &partial + c;
                    }
                }
                if !partial.is_zero() {
                    let v = match fixed {
                        None => VarId::single(&family, k),
                        Some(j) => VarId::pair(&family, j, k),
                    };
                    self.add_entry(v.clone(), v, partial);
                }
            }
            if !eventual.is_zero() {
                self.tails.push(PowerFamily {
                    family,
                    fixed,
                    coeff: eventual,
                    exp: 2,
                    start: last_start,
                });
            }
        }
    }

    pub fn gram_entries(&self) -> impl Iterator<Item = (&(VarId, VarId), &Scalar)> {
        self.gram.iter()
    }

    pub fn tails(&self) -> &[PowerFamily] {
        &self.tails
    }

    pub fn is_finitely_supported(&self) -> bool {
        self.tails.is_empty()
    }

    /// Sorted list of variables appearing in the finite Gram table.
    pub fn support(&self) -> Vec<VarId> {
        let mut out: Vec<VarId> = Vec::new();
        for (u, v) in self.gram.keys() {
            out.push(u.clone());
            out.push(v.clone());
        }
        out.sort();
        out.dedup();
        out
    }

    /// The finite part as a polynomial.
    pub fn finite_part(&self) -> SparsePoly {
        let terms = self.gram.iter().map(|((u, v), c)| {
            let m = if u == v {
                Monomial::from_powers(&[(u.clone(), 2)])
            } else {
                Monomial::from_powers(&[(u.clone(), 1), (v.clone(), 1)])
            };
            (m, c.clone())
        });
        SparsePoly::from_terms(&self.field, 2, terms.collect::<Vec<_>>())
    }

    pub fn to_structured(&self) -> StructuredForm {
        let mut terms = Vec::new();
        if !self.gram.is_empty() {
            terms.push(GeneratorTerm::Finite(self.finite_part()));
        }
        for pf in &self.tails {
            terms.push(GeneratorTerm::Power(pf.clone()));
        }
        StructuredForm::from_terms(&self.field, 2, terms)
    }

    pub fn truncate(&self, n: u32) -> SparsePoly {
        self.to_structured().truncate(n)
    }

    pub fn evaluate(&self, at: &Vector) -> Scalar {
        let mut acc = self.finite_part().evaluate(at);
        for pf in &self.tails {
            for (v, c) in at.iter() {
                if pf.running_index(v).is_some() {
                    acc = &acc + &(&pf.coeff * &(c * c));
                }
            }
        }
        acc
    }

    /// The symmetric bilinear form `b(x,y) = (q(x+y) − q(x) − q(y))/2`,
    /// computed directly from the tables.
    pub fn bilinear(&self, x: &Vector, y: &Vector) -> Scalar {
        let half = self
            .field
            .scalar_u64(2)
            .inv()
            .expect("2 invertible in odd characteristic");
        let mut acc = self.field.zero();
        for ((u, v), c) in &self.gram {
            if u == v {
                if let (Some(a), Some(b)) = (x.get(u), y.get(u)) {
                    acc = &acc + &(c * &(a * b));
                }
            } else {
                let term_uv = match (x.get(u), y.get(v)) {
                    (Some(a), Some(b)) => a * b,
                    _ => self.field.zero(),
                };
                let term_vu = match (x.get(v), y.get(u)) {
                    (Some(a), Some(b)) => a * b,
                    _ => self.field.zero(),
                };
                let cross = &term_uv + &term_vu;
                acc = &acc + &(&(c * &half) * &cross);
            }
        }
        for pf in &self.tails {
            for (v, a) in x.iter() {
                if pf.running_index(v).is_some() {
                    if let Some(b) = y.get(v) {
                        acc = &acc + &(&pf.coeff * &(a * b));
                    }
                }
            }
        }
        acc
    }

    /// Bilinear Gram matrix on an ordered window of variables
    /// (B_uu = G_uu, B_uv = G_uv/2, plus tail diagonals).
    pub fn gram_matrix(&self, vars: &[VarId]) -> Matrix {
        let n = vars.len();
        let mut m = Matrix::zeros(&self.field, n, n);
        for (i, u) in vars.iter().enumerate() {
            for (j, v) in vars.iter().enumerate().skip(i) {
                let b = self.bilinear(&Vector::unit(&self.field, u.clone()), &Vector::unit(&self.field, v.clone()));
                m.set(i, j, b.clone());
                m.set(j, i, b);
            }
        }
        m
    }

    /// Rank of the Gram table; infinite exactly when a (normalized) square
    /// tail is present.
    pub fn gram_rank(&self) -> Rank {
        if !self.tails.is_empty() {
            return Rank::Infinite;
        }
        let vars = self.support();
        Rank::Finite(self.gram_matrix(&vars).rank())
    }

    /// Strength of a quadratic form: the least s with q = Σ_{i≤s} g_i·h_i
    /// for linear g, h. Exactly ⌈rank/2⌉ in odd characteristic.
    pub fn strength(&self) -> Rank {
        match self.gram_rank() {
            Rank::Infinite => Rank::Infinite,
            Rank::Finite(r) => Rank::Finite(r.div_ceil(2)),
        }
    }

    /// Diagonalize the finite part by symmetric congruence: an invertible
    /// change of basis under which the form becomes `Σ d_j·u_j²`, with
    /// exactly rank-many nonzero `d_j`.
    pub fn diagonalize(&self, fresh_family: &str) -> Result<Diagonalization, QuadError> {
        if !self.tails.is_empty() {
            return Err(QuadError::TailPresent);
        }
        let vars = self.support();
        let b = self.gram_matrix(&vars);
        let (q, diag) = congruent_diagonalize(&self.field, &b);
        Ok(Diagonalization {
            field: self.field.clone(),
            vars,
            fresh_family: fresh_family.to_string(),
            forward: q,
            diag,
        })
    }

    /// Write the form as a sum of squares of linear forms: the finite part
    /// contributes exactly rank-many squares; each tail passes through as a
    /// stream of scaled squares. Every source variable appears in finitely
    /// many of the linear forms.
    pub fn sos_decompose(&self) -> SosDecomposition {
        let finite_only = QuadraticForm {
            field: self.field.clone(),
            gram: self.gram.clone(),
            tails: Vec::new(),
        };
        let d = finite_only
            .diagonalize("u")
            .expect("finite part diagonalizes");
        let n = d.vars.len();
        let mut finite = Vec::new();
        if n > 0 {
            let inv = d
                .forward
                .inverse()
                .expect("congruence transform is invertible");
            // u_j = Σ_i inv[j][i]·x_i; the form is Σ d_j·u_j², so the squares
            // are (√d_j · u_j)².
            for j in 0..n {
                if d.diag[j].is_zero() {
                    continue;
                }
                let root = d.diag[j].sqrt_or_extend();
                let mut ell = SparsePoly::zero(&self.field, 1);
                for (i, v) in d.vars.iter().enumerate() {
                    let c = inv.get(j, i);
                    if !c.is_zero() {
                        ell = ell.add(&SparsePoly::var(&self.field, v.clone()).scale(c));
                    }
                }
                finite.push(ell.scale(&root));
            }
        }
        let streams = self
            .tails
            .iter()
            .map(|pf| SquareStream {
                scale: pf.coeff.sqrt_or_extend(),
                family: pf.family.clone(),
                fixed: pf.fixed,
                start: pf.start,
            })
            .collect();
        SosDecomposition {
            field: self.field.clone(),
            finite,
            streams,
        }
    }

    /// Exhibit `strength()`-many products of linear forms summing to the
    /// form exactly. Only for finitely supported forms.
    pub fn strength_products(&self) -> Result<Vec<(SparsePoly, SparsePoly)>, QuadError> {
        if !self.tails.is_empty() {
            return Err(QuadError::TailPresent);
        }
        let d = self.diagonalize("u")?;
        let n = d.vars.len();
        let mut axes: Vec<(SparsePoly, Scalar)> = Vec::new();
        if n > 0 {
            let inv = d.forward.inverse().expect("invertible");
            for j in 0..n {
                if d.diag[j].is_zero() {
                    continue;
                }
                let mut ell = SparsePoly::zero(&self.field, 1);
                for (i, v) in d.vars.iter().enumerate() {
                    let c = inv.get(j, i);
                    if !c.is_zero() {
                        ell = ell.add(&SparsePoly::var(&self.field, v.clone()).scale(c));
                    }
                }
                axes.push((ell, d.diag[j].clone()));
            }
        }
        // Pair axes hyperbolically: d₁u² + d₂v² = (αu + βv)(αu − βv) with
        // α = √d₁, β = √(−d₂); a leftover odd axis is (d·u)·u.
        let mut out = Vec::new();
        let mut it = axes.chunks(2);
        for chunk in &mut it {
            match chunk {
                [(u, du), (v, dv)] => {
                    let alpha = du.sqrt_or_extend();
                    let beta = (-dv).sqrt_or_extend();
                    let left = u.scale(&alpha).add(&v.scale(&beta));
                    let right = u.scale(&alpha).sub(&v.scale(&beta));
                    out.push((left, right));
                }
                [(u, du)] => {
                    out.push((u.scale(du), u.clone()));
                }
                _ => unreachable!(),
            }
        }
        Ok(out)
    }

    /// For an infinite-strength form, produce `n` vectors with `q(vᵢ) = 1`
    /// and `b(vᵢ,vⱼ) = 0` for i ≠ j. Exact: fresh members of a square tail,
    /// taken above the finite support, are orthogonal by disjointness.
    pub fn orthonormal_sequence(&self, n: usize) -> Result<Vec<Vector>, QuadError> {
        let pf = self.tails.first().ok_or(QuadError::FiniteStrength)?;
        let floor = self
            .support()
            .iter()
            .map(VarId::max_index)
            .max()
            .unwrap_or(0);
        let k0 = pf.start.max(floor + 1);
        let inv_root = pf
            .coeff
            .sqrt_or_extend()
            .inv()
            .expect("nonzero tail coefficient");
        let mut out = Vec::new();
        for t in 0..n {
            let v = pf.var_at(k0 + t as u32);
            out.push(Vector::unit(&self.field, v).scale(&inv_root));
        }
        Ok(out)
    }
}

impl fmt::Display for QuadraticForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_structured())
    }
}

/// Result of symmetric-congruence diagonalization: under the invertible
/// change of basis `v_i ↦ Σ_j forward[i][j]·fresh[j]`, the form becomes
/// `Σ_j diag[j]·fresh[j]²`.
#[derive(Clone, Debug)]
pub struct Diagonalization {
    field: Field,
    pub vars: Vec<VarId>,
    pub fresh_family: String,
    pub forward: Matrix,
    pub diag: Vec<Scalar>,
}

impl Diagonalization {
    /// The change of basis as a substitution on the original variables.
    pub fn substitution(&self) -> Substitution {
        let mut s = Substitution::new(&self.field, UnmatchedPolicy::Keep);
        for (i, v) in self.vars.iter().enumerate() {
            let mut img = SparsePoly::zero(&self.field, 1);
            for j in 0..self.vars.len() {
                let c = self.forward.get(i, j);
                if !c.is_zero() {
                    img = img.add(
                        &SparsePoly::var(&self.field, VarId::single(&self.fresh_family, j as u32 + 1))
                            .scale(c),
                    );
                }
            }
            s.map(v.clone(), img).expect("linear image");
        }
        s
    }

    /// The diagonal form `Σ diag[j]·fresh[j]²` as a polynomial.
    pub fn diagonal_poly(&self) -> SparsePoly {
        let terms: Vec<(Monomial, Scalar)> = self
            .diag
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.is_zero())
            .map(|(j, d)| {
                (
                    Monomial::from_powers(&[(
                        VarId::single(&self.fresh_family, j as u32 + 1),
                        2,
                    )]),
                    d.clone(),
                )
            })
            .collect();
        SparsePoly::from_terms(&self.field, 2, terms)
    }

    pub fn rank(&self) -> usize {
        self.diag.iter().filter(|d| !d.is_zero()).count()
    }
}

/// A stream of squared linear forms `(scale·family[fixed?, k])²` for
/// `k ≥ start` — the pass-through image of a square tail.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareStream {
    pub scale: Scalar,
    pub family: String,
    pub fixed: Option<u32>,
    pub start: u32,
}

/// A sum-of-squares certificate: finitely many explicit squares plus square
/// streams.
#[derive(Clone, Debug)]
pub struct SosDecomposition {
    field: Field,
    pub finite: Vec<SparsePoly>,
    pub streams: Vec<SquareStream>,
}

impl SosDecomposition {
    /// Re-expand the decomposition and truncate at N (exact).
    pub fn re_expand_window(&self, n: u32) -> SparsePoly {
        let mut acc = SparsePoly::zero(&self.field, 2);
        for ell in &self.finite {
            acc = acc.add(&ell.truncate(n).pow(2)).truncate(n);
        }
        for s in &self.streams {
            let pf = PowerFamily {
                family: s.family.clone(),
                fixed: s.fixed,
                coeff: &s.scale * &s.scale,
                exp: 2,
                start: s.start,
            };
            acc = acc.add(&pf.truncate(&self.field, n));
        }
        acc
    }

    /// Total number of explicit squares (streams are infinite).
    pub fn finite_square_count(&self) -> usize {
        self.finite.len()
    }
}

/// Symmetric congruence: returns (Q, diag) with QᵀBQ diagonal; the basis
/// change is x = Q·u. Q is invertible (a product of elementary operations).
fn congruent_diagonalize(field: &Field, b: &Matrix) -> (Matrix, Vec<Scalar>) {
    let n = b.nrows();
    let mut m: Vec<Vec<Scalar>> = (0..n)
        .map(|i| (0..n).map(|j| b.get(i, j).clone()).collect())
        .collect();
    let mut q: Vec<Vec<Scalar>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { field.one() } else { field.zero() })
                .collect()
        })
        .collect();
    let col_axpy = |m: &mut Vec<Vec<Scalar>>, dst: usize, src: usize, lam: &Scalar| {
        for row in m.iter_mut() {
            let add = &row[src] * lam;
            row[dst] = &row[dst] + &add;
        }
    };
    let row_axpy = |m: &mut Vec<Vec<Scalar>>, dst: usize, src: usize, lam: &Scalar| {
        let src_row: Vec<Scalar> = m[src].clone();
        for (j, cell) in m[dst].iter_mut().enumerate() {
            *cell = &*cell + &(&src_row[j] * lam);
        }
    };
    for k in 0..n {
        if m[k][k].is_zero() {
            // Try to swap in a nonzero diagonal entry.
            if let Some(i) = (k + 1..n).find(|&i| !m[i][i].is_zero()) {
                m.swap(k, i);
                for row in m.iter_mut() {
                    row.swap(k, i);
                }
                for row in q.iter_mut() {
                    row.swap(k, i);
                }
            }
        }
        if m[k][k].is_zero() {
            // All remaining diagonal entries em row k are zero; pull in an
            // off-diagonal entry (char ≠ 2 makes the new diagonal nonzero).
            if let Some(j) = (k + 1..n).find(|&j| !m[k][j].is_zero()) {
                let one = field.one();
                col_axpy(&mut m, k, j, &one);
                row_axpy(&mut m, k, j, &one);
                for row in q.iter_mut() {
                    let add = row[j].clone();
                    row[k] = &row[k] + &add;
                }
            } else {
                // Row k is zero on and beyond the diagonal: radical
                // direction, d_k = 0.
                continue;
            }
        }
        let pivot = m[k][k].clone();
        let pivot_inv = pivot.inv().expect("nonzero pivot");
        for i in k + 1..n {
            if m[k][i].is_zero() {
                continue;
            }
            let lam = -&(&m[k][i] * &pivot_inv);
            col_axpy(&mut m, i, k, &lam);
            row_axpy(&mut m, i, k, &lam);
            for row in q.iter_mut() {
                let add = &row[k] * &lam;
                row[i] = &row[i] + &add;
            }
        }
    }
    let diag: Vec<Scalar> = (0..n).map(|j| m[j][j].clone()).collect();
    (Matrix::from_rows(field, q), diag)
}

/// An invertible linear map on a finite window of coordinates, preserving a
/// quadratic form exactly. Column `i` of the matrix is the image of the
/// `i`-th window variable.
#[derive(Clone, Debug)]
pub struct Isometry {
    field: Field,
    vars: Vec<VarId>,
    matrix: Matrix,
}

impl Isometry {
    pub fn identity(field: &Field, vars: Vec<VarId>) -> Isometry {
        let n = vars.len();
        Isometry {
            field: field.clone(),
            vars,
            matrix: Matrix::identity(field, n),
        }
    }

    pub fn window(&self) -> &[VarId] {
        &self.vars
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        let n = self.vars.len();
        (0..n).all(|i| {
            (0..n).all(|j| {
                let c = self.matrix.get(i, j);
                if i == j {
                    c.is_one()
                } else {
                    c.is_zero()
                }
            })
        })
    }

    /// Apply to a vector supported on the window.
    pub fn apply(&self, v: &Vector) -> Vector {
        let coords: Vec<Scalar> = self
            .vars
            .iter()
            .map(|u| v.get(u).cloned().unwrap_or_else(|| self.field.zero()))
            .collect();
        let image = self.matrix.mul_vec(&coords);
        Vector::from_entries(
            self.vars
                .iter()
                .cloned()
                .zip(image.into_iter())
                .filter(|(_, c)| !c.is_zero()),
        )
    }

    /// As a substitution on forms: `x_i ↦ Σ_j M[i][j]·x_j`, so that
    /// `q ∘ subst` computes `q(T·x)`.
    pub fn substitution(&self) -> Substitution {
        let mut s = Substitution::new(&self.field, UnmatchedPolicy::Keep);
        for (i, v) in self.vars.iter().enumerate() {
            let mut img = SparsePoly::zero(&self.field, 1);
            for (j, w) in self.vars.iter().enumerate() {
                let c = self.matrix.get(i, j);
                if !c.is_zero() {
                    img = img.add(&SparsePoly::var(&self.field, w.clone()).scale(c));
                }
            }
            s.map(v.clone(), img).expect("linear image");
        }
        s
    }

    /// Exact check: does this map preserve `q` on the window?
    pub fn preserves(&self, q: &QuadraticForm) -> bool {
        let p = q.finite_part();
        let s = self.substitution();
        p.substitute(|v| s.image_of(v)) == p
    }
}

/// Extend a partial isometry to the whole window (Witt extension): given an
/// ambient nondegenerate finite form and two lists of vectors with equal
/// Gram tables, produce an isometry of the window carrying the first list to
/// the second.
///
/// Both lists are completed to full frames: the spanned subspace has its
/// radical paired hyperbolically, and the orthogonal complement is
/// orthonormalized (square roots from the scalar tower). Matching the two
/// frames is then an isometry by construction.
pub fn witt_extend(
    ambient: &QuadraticForm,
    phi: &[Vector],
    psi: &[Vector],
) -> Result<Isometry, QuadError> {
    if !ambient.is_finitely_supported() {
        return Err(QuadError::TailPresent);
    }
    if phi.len() != psi.len() {
        return Err(QuadError::DimensionMismatch);
    }
    let field = ambient.field().clone();
    let vars = ambient.support();
    let n = vars.len();
    let b = ambient.gram_matrix(&vars);
    if b.rank() < n {
        return Err(QuadError::DegenerateWindow);
    }
    let coords = |v: &Vector| -> Vec<Scalar> {
        vars.iter()
            .map(|u| v.get(u).cloned().unwrap_or_else(|| field.zero()))
            .collect()
    };
    // Reject vectors outside the window.
    for v in phi.iter().chain(psi.iter()) {
        for (u, c) in v.iter() {
            if !c.is_zero() && !vars.contains(u) {
                return Err(QuadError::NotQuadratic(format!(
                    "vector touches {u}, outside the ambient window"
                )));
            }
        }
    }
    let k = phi.len();
    let a_rows: Vec<Vec<Scalar>> = phi.iter().map(&coords).collect();
    let c_rows: Vec<Vec<Scalar>> = psi.iter().map(&coords).collect();
    // Independence and isometry of the lists.
    if k > 0 {
        if Matrix::from_rows(&field, a_rows.clone()).rank() < k
            || Matrix::from_rows(&field, c_rows.clone()).rank() < k
        {
            return Err(QuadError::NotInjective);
        }
        for i in 0..k {
            for j in i..k {
                if ambient.bilinear(&phi[i], &phi[j]) != ambient.bilinear(&psi[i], &psi[j]) {
                    return Err(QuadError::NotIsometric);
                }
            }
        }
    }
    // Shared subspace Gram (bilinear) and its radical, in coefficient space.
    let w_gram = Matrix::from_rows(
        &field,
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| ambient.bilinear(&phi[i], &phi[j]))
                    .collect()
            })
            .collect(),
    );
    let rad_coeffs: Vec<Vec<Scalar>> = if k > 0 { w_gram.nullspace() } else { Vec::new() };
    // Complement index set: standard basis vectors extending the radical to
    // all of coefficient space.
    let mut span_rows: Vec<Vec<Scalar>> = rad_coeffs.clone();
    let mut complement_idx: Vec<usize> = Vec::new();
    for i in 0..k {
        let mut e = vec![field.zero(); k];
        e[i] = field.one();
        let mut trial = span_rows.clone();
        trial.push(e.clone());
        if Matrix::from_rows(&field, trial.clone()).rank() == span_rows.len() + 1 {
            span_rows.push(e);
            complement_idx.push(i);
        }
    }
    let combine = |rows: &[Vec<Scalar>], gamma: &[Scalar]| -> Vec<Scalar> {
        let mut out = vec![field.zero(); n];
        for (g, row) in gamma.iter().zip(rows.iter()) {
            for (o, c) in out.iter_mut().zip(row.iter()) {
                *o = &*o + &(g * c);
            }
        }
        out
    };
    // Build both frames: complement part, radical part, hyperbolic partners.
    let build_frame = |rows: &[Vec<Scalar>]| -> Result<Vec<Vec<Scalar>>, QuadError> {
        let mut frame: Vec<Vec<Scalar>> = complement_idx.iter().map(|&i| rows[i].clone()).collect();
        let rad_vecs: Vec<Vec<Scalar>> = rad_coeffs.iter().map(|g| combine(rows, g)).collect();
        let value_of = |x: &[Scalar], y: &[Scalar]| -> Scalar {
            // x·B·yᵀ
            let by = b.mul_vec(y);
            let mut acc = field.zero();
            for (a, c) in x.iter().zip(by.iter()) {
                acc = &acc + &(a * c);
            }
            acc
        };
        let mut partners: Vec<Vec<Scalar>> = Vec::new();
        for (t, r_t) in rad_vecs.iter().enumerate() {
            // Solve b(u, h) = 0 for complement u and earlier partners,
            // b(r_s, h) = δ_st.
            let mut sys_rows: Vec<Vec<Scalar>> = Vec::new();
            let mut rhs: Vec<Scalar> = Vec::new();
            for u in frame.iter().chain(partners.iter()) {
                sys_rows.push(b.mul_vec(u));
                rhs.push(field.zero());
            }
            for (s, r_s) in rad_vecs.iter().enumerate() {
                sys_rows.push(b.mul_vec(r_s));
                rhs.push(if s == t { field.one() } else { field.zero() });
            }
            let sys = Matrix::from_rows(&field, sys_rows);
            let h0 = sys.solve(&rhs).ok_or(QuadError::DegenerateWindow)?;
            // Correct the norm: q(h0 + τ·r_t) = q(h0) + 2τ since r_t is
            // isotropic and pairs to 1 with h0.
            let qh = value_of(&h0, &h0);
            let tau = -&(&qh
                * &field
                    .scalar_u64(2)
                    .inv()
                    .expect("2 invertible"));
            let mut h = h0;
            for (cell, rc) in h.iter_mut().zip(r_t.iter()) {
                *cell = &*cell + &(&tau * rc);
            }
            partners.push(h);
        }
        for r in rad_vecs {
            frame.push(r);
        }
        for h in partners {
            frame.push(h);
        }
        // Orthonormalized complement of the (now nondegenerate) span.
        let perp_basis: Vec<Vec<Scalar>> = if frame.is_empty() {
            (0..n)
                .map(|i| {
                    let mut e = vec![field.zero(); n];
                    e[i] = field.one();
                    e
                })
                .collect()
        } else {
            let cond = Matrix::from_rows(
                &field,
                frame.iter().map(|u| b.mul_vec(u)).collect(),
            );
            cond.nullspace()
        };
        if !perp_basis.is_empty() {
            // Diagonalize the form on the complement and normalize each axis.
            let m = perp_basis.len();
            let mut perp_gram = Matrix::zeros(&field, m, m);
            for i in 0..m {
                for j in 0..m {
                    perp_gram.set(i, j, value_of(&perp_basis[i], &perp_basis[j]));
                }
            }
            let (qm, diag) = congruent_diagonalize(&field, &perp_gram);
            for j in 0..m {
                if diag[j].is_zero() {
                    // The complement of a nondegenerate subspace in a
                    // nondegenerate space is nondegenerate.
                    return Err(QuadError::DegenerateWindow);
                }
                let scale = diag[j]
                    .sqrt_or_extend()
                    .inv()
                    .expect("nonzero diagonal");
                // p_j = (Σ_i qm[i][j]·perp_i) / √d_j
                let mut p = vec![field.zero(); n];
                for i in 0..m {
                    let c = qm.get(i, j);
                    if c.is_zero() {
                        continue;
                    }
                    for (cell, pc) in p.iter_mut().zip(perp_basis[i].iter()) {
                        *cell = &*cell + &(c * pc);
                    }
                }
                for cell in p.iter_mut() {
                    *cell = &*cell * &scale;
                }
                frame.push(p);
            }
        }
        Ok(frame)
    };
    let frame_a = build_frame(&a_rows)?;
    let frame_b = build_frame(&c_rows)?;
    // M · (frame_a as columns) = (frame_b as columns).
    let sa = Matrix::from_rows(&field, frame_a).transpose();
    let sb = Matrix::from_rows(&field, frame_b).transpose();
    let sa_inv = sa.inverse().ok_or(QuadError::DegenerateWindow)?;
    let m = sb.mul(&sa_inv);
    let iso = Isometry {
        field: field.clone(),
        vars,
        matrix: m,
    };
    // Exactness checks: the frames were built to share a Gram table, so this
    // never fires; it guards the implementation, not the mathematics.
    if !iso.preserves(ambient) {
        return Err(QuadError::NotIsometric);
    }
    for (x, y) in phi.iter().zip(psi.iter()) {
        if &iso.apply(x) != y {
            return Err(QuadError::NotIsometric);
        }
    }
    Ok(iso)
}

/// Embed one quadratic form into an infinite-strength target, exactly:
/// returns a row-finite substitution σ on the target's variables with
/// `target ∘ σ = source` as forms. The source's finite part lands in fresh
/// orthonormal slots of the target's first square tail; source tails ride
/// along through strided tail rules.
pub fn embed_quadratic_form(
    source: &QuadraticForm,
    target: &QuadraticForm,
) -> Result<Substitution, QuadError> {
    let field = target.field().clone();
    let tail = target.tails().first().ok_or(QuadError::FiniteStrength)?;
    // Slots start above everything the target's finite part or tail starts
    // mention.
    let floor = target
        .support()
        .iter()
        .map(VarId::max_index)
        .max()
        .unwrap_or(0);
    let k0 = tail.start.max(floor + 1);
    let c_root_inv = tail
        .coeff
        .sqrt_or_extend()
        .inv()
        .expect("nonzero tail coefficient");
    let sos = source.sos_decompose();
    let rho = sos.finite.len() as u32;
    let mut sigma = Substitution::new(&field, UnmatchedPolicy::Zero);
    for (t, ell) in sos.finite.iter().enumerate() {
        sigma
            .map(tail.var_at(k0 + t as u32), ell.scale(&c_root_inv))
            .expect("linear image");
    }
    let stride = sos.streams.len() as u32;
    for (m_idx, stream) in sos.streams.iter().enumerate() {
        let slot_base = k0 + rho + m_idx as u32;
        let coeff = &stream.scale * &c_root_inv;
        let sel = if tail.fixed.is_some() {
            IndexSel::Second
        } else {
            IndexSel::First
        };
        let affine = IndexExpr::Affine {
            from: sel,
            base: slot_base,
            div: stride,
            offset: stream.start,
        };
        let (match1, match2) = match tail.fixed {
            Some(j) => (
                IndexMatcher::exact(j),
                Some(IndexMatcher::stride(slot_base, stride)),
            ),
            None => (IndexMatcher::stride(slot_base, stride), None),
        };
        let (image1, image2) = match stream.fixed {
            Some(jw) => (IndexExpr::Const(jw), Some(affine)),
            None => (affine, None),
        };
        let rule = TailRule::new(
            &tail.family,
            match1,
            match2,
            coeff,
            &stream.family,
            image1,
            image2,
        )
        .expect("slot rule is well-formed");
        sigma.add_rule(rule);
    }
    Ok(sigma)
}

/// One stage of a compatible chain of quadratic embeddings.
#[derive(Clone, Debug)]
pub struct ChainStage {
    pub size: u32,
    pub substitution: Substitution,
}

/// A compatible chain embedding a streamed quadratic form into an
/// infinite-strength target: stage N realizes the window at N, and each
/// stage restricts to the previous one on the earlier window's variables.
#[derive(Clone, Debug)]
pub struct QuadChain {
    pub stages: Vec<ChainStage>,
}

/// Embed a streamed quadratic form window by window. Each stage embeds the
/// window exactly; compatibility with the previous stage is restored by a
/// Witt extension of the finite target window. Stage windows must be
/// nondegenerate.
pub fn embed_quadratic_stream(
    source: &TruncationStream,
    target: &QuadraticForm,
    sizes: &[u32],
) -> Result<QuadChain, QuadError> {
    if source.degree() != 2 {
        return Err(QuadError::NotQuadratic(format!(
            "stream degree {}",
            source.degree()
        )));
    }
    let field = target.field().clone();
    let mut stages: Vec<ChainStage> = Vec::new();
    let mut prev: Option<(u32, Substitution, Vec<VarId>)> = None;
    for &nsize in sizes {
        let window_poly = source.window(nsize);
        let q_w = QuadraticForm::from_poly(&window_poly)?;
        let w_vars: Vec<VarId> = window_poly.support().into_iter().collect();
        if !w_vars.is_empty() {
            let rank = q_w.gram_matrix(&w_vars).rank();
            if rank < w_vars.len() {
                return Err(QuadError::DegenerateWindow);
            }
        }
        let tau = embed_quadratic_form(&q_w, target)?;
        // Image vectors of the source basis under an embedding substitution:
        // φ(e_w)[slot] = coefficient of w in σ(slot).
        let images_under = |sigma: &Substitution, wv: &VarId, slots: &[VarId]| -> Vector {
            let mut entries = Vec::new();
            for s in slots {
                let img = sigma.image_of(s);
                let c = img.coeff(&Monomial::var(wv.clone()));
                if !c.is_zero() {
                    entries.push((s.clone(), c));
                }
            }
            Vector::from_entries(entries)
        };
        let tau_slots: Vec<VarId> = tau.explicit_map().keys().cloned().collect();
        let sigma_n = match &prev {
            None => tau,
            Some((prev_n, prev_sigma, prev_slots)) => {
                // Common finite target window.
                let mut window: Vec<VarId> = tau_slots.clone();
                for s in prev_slots {
                    if !window.contains(s) {
                        window.push(s.clone());
                    }
                }
                window.sort();
                // Ambient form on the window (diagonal from the target tail).
                let mut ambient = QuadraticForm::zero(&field);
                for s in &window {
                    let coeff = target
                        .tails()
                        .iter()
                        .find_map(|pf| pf.running_index(s).map(|_| pf.coeff.clone()))
                        .ok_or(QuadError::DegenerateWindow)?;
                    ambient.add_entry(s.clone(), s.clone(), coeff);
                }
                let old_vars: Vec<VarId> =
                    source.window(*prev_n).support().into_iter().collect();
                let phi_new: Vec<Vector> = old_vars
                    .iter()
                    .map(|w| images_under(&tau, w, &window))
                    .collect();
                let psi_old: Vec<Vector> = old_vars
                    .iter()
                    .map(|w| images_under(prev_sigma, w, &window))
                    .collect();
                let iso = witt_extend(&ambient, &phi_new, &psi_old)?;
                // σ_N(slot) = Σ_w (T·φ_τ(e_w))[slot] · w, over all new vars.
                let new_vars: Vec<VarId> = window_poly.support().into_iter().collect();
                let mut corrected = Substitution::new(&field, UnmatchedPolicy::Zero);
                let mut slot_images: BTreeMap<VarId, SparsePoly> = BTreeMap::new();
                for w in &new_vars {
                    let moved = iso.apply(&images_under(&tau, w, &window));
                    for (slot, c) in moved.iter() {
                        let entry = slot_images
                            .entry(slot.clone())
                            .or_insert_with(|| SparsePoly::zero(&field, 1));
                        *entry =
                            entry.add(&SparsePoly::var(&field, w.clone()).scale(c));
                    }
                }
                for (slot, img) in slot_images {
                    corrected.map(slot, img).expect("linear image");
                }
                corrected
            }
        };
        // Stage exactness: target ∘ σ_N == window at N (images only touch
        // source variables with index ≤ N).
        let realized = sigma_n.apply_window(&target.to_structured(), nsize);
        if realized != window_poly {
            return Err(QuadError::NotIsometric);
        }
        // Compatibility: images of old source variables are unchanged.
        if let Some((prev_n, prev_sigma, prev_slots)) = &prev {
            let mut all_slots: Vec<VarId> = sigma_n.explicit_map().keys().cloned().collect();
            for s in prev_slots {
                if !all_slots.contains(s) {
                    all_slots.push(s.clone());
                }
            }
            for w in source.window(*prev_n).support() {
                let before = images_under(prev_sigma, &w, &all_slots);
                let after = images_under(&sigma_n, &w, &all_slots);
                if before != after {
                    return Err(QuadError::NotIsometric);
                }
            }
        }
        let slots: Vec<VarId> = sigma_n.explicit_map().keys().cloned().collect();
        prev = Some((nsize, sigma_n.clone(), slots));
        stages.push(ChainStage {
            size: nsize,
            substitution: sigma_n,
        });
    }
    Ok(QuadChain { stages })
}

/// Heuristic Gram rank of a streamed quadratic form: evaluated on the window
/// at N = 40; ranks beyond N/2 are reported as infinite.
pub fn stream_gram_rank(source: &TruncationStream) -> (Rank, Exactness) {
    const PROBE: u32 = 40;
    let window = source.window(PROBE);
    let q = match QuadraticForm::from_poly(&window) {
        Ok(q) => q,
        Err(_) => return (Rank::Finite(0), Exactness::Heuristic),
    };
    match q.gram_rank() {
        Rank::Finite(r) if r > (PROBE as usize) / 2 => (Rank::Infinite, Exactness::Heuristic),
        other => (other, Exactness::Heuristic),
    }
}

/// Heuristic strength of a streamed quadratic form (⌈rank/2⌉ on the probe
/// window, infinite past the stabilization threshold).
pub fn stream_strength(source: &TruncationStream) -> (Rank, Exactness) {
    match stream_gram_rank(source) {
        (Rank::Infinite, e) => (Rank::Infinite, e),
        (Rank::Finite(r), e) => (Rank::Finite(r.div_ceil(2)), e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn xv(i: u32) -> VarId {
        VarId::single("x", i)
    }

    fn zv(i: u32) -> VarId {
        VarId::single("z", i)
    }

    fn poly_of(field: &Field, text_terms: &[(&[(&str, u32, u32)], i64)]) -> SparsePoly {
        // Each term: list of (family, index, power) plus integer coefficient.
        let terms: Vec<(Monomial, Scalar)> = text_terms
            .iter()
            .map(|(vars, c)| {
                let m = Monomial::from_powers(
                    &vars
                        .iter()
                        .map(|(f, i, p)| (VarId::single(f, *i), *p))
                        .collect::<Vec<_>>(),
                );
                (m, field.scalar_i64(*c))
            })
            .collect();
        SparsePoly::from_terms(field, 2, terms)
    }

    fn z_tail(field: &Field, coeff: i64, start: u32) -> PowerFamily {
        PowerFamily {
            family: "z".into(),
            fixed: None,
            coeff: field.scalar_i64(coeff),
            exp: 2,
            start,
        }
    }

    #[test]
    fn rank_and_strength_oracles() {
        let f = Field::default_field();
        // x1·x2 + x3²: rank 3, strength 2.
        let q = QuadraticForm::from_poly(&poly_of(
            &f,
            &[
                (&[("x", 1, 1), ("x", 2, 1)], 1),
                (&[("x", 3, 2)], 1),
            ],
        ))
        .unwrap();
        assert_eq!(q.gram_rank(), Rank::Finite(3));
        assert_eq!(q.strength(), Rank::Finite(2));
        // x1·x2: strength 1.
        let h = QuadraticForm::from_poly(&poly_of(&f, &[(&[("x", 1, 1), ("x", 2, 1)], 1)]))
            .unwrap();
        assert_eq!(h.strength(), Rank::Finite(1));
        // x1²+x2²+x3²: strength 2.
        let s3 = QuadraticForm::from_poly(&poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 1), (&[("x", 3, 2)], 1)],
        ))
        .unwrap();
        assert_eq!(s3.strength(), Rank::Finite(2));
        // Σ z_i²: infinite rank and strength.
        let mut inf = QuadraticForm::zero(&f);
        inf.add_tail(z_tail(&f, 1, 1)).unwrap();
        assert_eq!(inf.gram_rank(), Rank::Infinite);
        assert_eq!(inf.strength(), Rank::Infinite);
    }

    #[test]
    fn canceling_tails_normalize_to_finite_rank() {
        let f = Field::default_field();
        // Σ_{k≥1} z_k² − Σ_{k≥3} z_k² = z_1² + z_2².
        let mut q = QuadraticForm::zero(&f);
        q.add_tail(z_tail(&f, 1, 1)).unwrap();
        q.add_tail(z_tail(&f, -1, 3)).unwrap();
        assert_eq!(q.gram_rank(), Rank::Finite(2));
        let expected = poly_of(&f, &[(&[("z", 1, 2)], 1), (&[("z", 2, 2)], 1)]);
        assert_eq!(q.finite_part(), expected);
    }

    #[test]
    fn diagonalize_cross_term_exactly() {
        let f = Field::default_field();
        let p = poly_of(&f, &[(&[("x", 1, 1), ("x", 2, 1)], 1)]);
        let q = QuadraticForm::from_poly(&p).unwrap();
        let d = q.diagonalize("u").unwrap();
        assert_eq!(d.rank(), 2);
        let s = d.substitution();
        assert_eq!(p.substitute(|v| s.image_of(v)), d.diagonal_poly());
        assert!(d.forward.inverse().is_some());
    }

    #[test]
    fn diagonalize_random_forms() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let n = rng.gen_range(1..=5u32);
            let mut terms = Vec::new();
            for i in 1..=n {
                for j in i..=n {
                    let c = rng.gen_range(0..101i64);
                    if c != 0 {
                        let m = if i == j {
                            vec![(xv(i), 2)]
                        } else {
                            vec![(xv(i), 1), (xv(j), 1)]
                        };
                        terms.push((Monomial::from_powers(&m), f.scalar_i64(c)));
                    }
                }
            }
            let p = SparsePoly::from_terms(&f, 2, terms);
            if p.is_zero() {
                continue;
            }
            let q = QuadraticForm::from_poly(&p).unwrap();
            let d = q.diagonalize("u").unwrap();
            let s = d.substitution();
            assert_eq!(
                p.substitute(|v| s.image_of(v)),
                d.diagonal_poly(),
                "trial {trial}"
            );
            assert_eq!(Rank::Finite(d.rank()), q.gram_rank(), "trial {trial}");
        }
    }

    #[test]
    fn sos_re_expands_exactly() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(1..=4u32);
            let mut terms = Vec::new();
            for i in 1..=n {
                for j in i..=n {
                    let c = rng.gen_range(0..101i64);
                    if c != 0 {
                        let m = if i == j {
                            vec![(xv(i), 2)]
                        } else {
                            vec![(xv(i), 1), (xv(j), 1)]
                        };
                        terms.push((Monomial::from_powers(&m), f.scalar_i64(c)));
                    }
                }
            }
            let p = SparsePoly::from_terms(&f, 2, terms);
            let mut q = QuadraticForm::from_poly(&p).unwrap();
            q.add_tail(z_tail(&f, 5, 2)).unwrap();
            let sos = q.sos_decompose();
            // Exactly rank-many explicit squares.
            let finite_rank = QuadraticForm::from_poly(&p).unwrap().gram_rank();
            assert_eq!(Rank::Finite(sos.finite_square_count()), finite_rank);
            for n_win in [10u32, 25, 50] {
                assert_eq!(sos.re_expand_window(n_win), q.truncate(n_win));
            }
        }
    }

    #[test]
    fn strength_products_sum_back() {
        let f = Field::default_field();
        let p = poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 1), (&[("x", 3, 2)], 1)],
        );
        let q = QuadraticForm::from_poly(&p).unwrap();
        let prods = q.strength_products().unwrap();
        assert_eq!(Rank::Finite(prods.len()), q.strength());
        let mut acc = SparsePoly::zero(&f, 2);
        for (g, h) in &prods {
            acc = acc.add(&g.mul(h));
        }
        assert_eq!(acc, p);
    }

    #[test]
    fn orthonormal_sequences() {
        let f = Field::default_field();
        // Σ z_k²: unit vectors.
        let mut q = QuadraticForm::zero(&f);
        q.add_tail(z_tail(&f, 1, 1)).unwrap();
        let seq = q.orthonormal_sequence(3).unwrap();
        for (i, v) in seq.iter().enumerate() {
            assert!(q.evaluate(v).is_one());
            assert_eq!(*v, Vector::unit(&f, zv(1 + i as u32)));
        }
        // Σ 2z_k²: first vector is (1/√2)·z_1.
        let mut q2 = QuadraticForm::zero(&f);
        q2.add_tail(z_tail(&f, 2, 1)).unwrap();
        let seq2 = q2.orthonormal_sequence(1).unwrap();
        assert!(q2.evaluate(&seq2[0]).is_one());
        let c = seq2[0].get(&zv(1)).unwrap();
        assert!((c * c) == f.scalar_u64(2).inv().unwrap());
        // Orthogonality across a longer run.
        let seq3 = q2.orthonormal_sequence(4).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(q2.bilinear(&seq3[i], &seq3[j]).is_zero());
            }
        }
        // A finite form refuses.
        let fin = QuadraticForm::from_poly(&poly_of(&f, &[(&[("x", 1, 2)], 1)])).unwrap();
        assert!(matches!(
            fin.orthonormal_sequence(1),
            Err(QuadError::FiniteStrength)
        ));
    }

    #[test]
    fn witt_identity_cases() {
        let f = Field::default_field();
        let q = QuadraticForm::from_poly(&poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 1)],
        ))
        .unwrap();
        // Empty lists: identity.
        let iso = witt_extend(&q, &[], &[]).unwrap();
        assert!(iso.is_identity());
        // φ = ψ: identity (deterministic frames coincide).
        let v = Vector::unit(&f, xv(1));
        let iso2 = witt_extend(&q, &[v.clone()], &[v]).unwrap();
        assert!(iso2.is_identity());
    }

    #[test]
    fn witt_swaps_unit_vectors() {
        let f = Field::default_field();
        let q = QuadraticForm::from_poly(&poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 1)],
        ))
        .unwrap();
        let e1 = Vector::unit(&f, xv(1));
        let e2 = Vector::unit(&f, xv(2));
        let iso = witt_extend(&q, &[e1.clone()], &[e2.clone()]).unwrap();
        assert_eq!(iso.apply(&e1), e2);
        assert!(iso.preserves(&q));
    }

    #[test]
    fn witt_rejects_bad_inputs() {
        let f = Field::default_field();
        // Degenerate ambient: x1² + 2·x1·x2 + x2² = (x1+x2)².
        let degen2 = QuadraticForm::from_poly(&poly_of(
            &f,
            &[
                (&[("x", 1, 2)], 1),
                (&[("x", 1, 1), ("x", 2, 1)], 2),
                (&[("x", 2, 2)], 1),
            ],
        ))
        .unwrap();
        let e1 = Vector::unit(&f, xv(1));
        assert!(matches!(
            witt_extend(&degen2, &[e1.clone()], &[e1.clone()]),
            Err(QuadError::DegenerateWindow)
        ));
        // Non-isometric lists.
        let q = QuadraticForm::from_poly(&poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 2)],
        ))
        .unwrap();
        let e2 = Vector::unit(&f, xv(2));
        assert!(matches!(
            witt_extend(&q, &[e1.clone()], &[e2.clone()]),
            Err(QuadError::NotIsometric)
        ));
        // Dependent list.
        assert!(matches!(
            witt_extend(&q, &[e1.clone(), e1.clone()], &[e1.clone(), e1.clone()]),
            Err(QuadError::NotInjective)
        ));
    }

    #[test]
    fn witt_random_instances_are_gram_exact() {
        let f = Field::default_field();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // Reference reflections provide known isometries to invert:
        // refl_w(x) = x − (2·b(x,w)/q(w))·w.
        let reflect = |q: &QuadraticForm, w: &Vector, x: &Vector| -> Vector {
            let qw = q.evaluate(w);
            let bxw = q.bilinear(x, w);
            let lam = &(&bxw + &bxw) * &qw.inv().unwrap();
            x.sub(&w.scale(&lam))
        };
        for trial in 0..40 {
            let n = rng.gen_range(2..=5u32);
            // Random nondegenerate diagonal ambient.
            let mut terms = Vec::new();
            for i in 1..=n {
                let c = rng.gen_range(1..101i64);
                terms.push((Monomial::from_powers(&[(xv(i), 2)]), f.scalar_i64(c)));
            }
            // A few random cross terms; fall back to the (always
            // nondegenerate) pure diagonal if they spoil the rank.
            let q = {
                let mut t2 = terms.clone();
                for _ in 0..2 {
                    let i = rng.gen_range(1..=n);
                    let j = rng.gen_range(1..=n);
                    if i < j {
                        let c = rng.gen_range(0..101i64);
                        t2.push((
                            Monomial::from_powers(&[(xv(i), 1), (xv(j), 1)]),
                            f.scalar_i64(c),
                        ));
                    }
                }
                let cand =
                    QuadraticForm::from_poly(&SparsePoly::from_terms(&f, 2, t2)).unwrap();
                let vars = cand.support();
                if vars.len() == n as usize && cand.gram_matrix(&vars).rank() == n as usize {
                    cand
                } else {
                    QuadraticForm::from_poly(&SparsePoly::from_terms(&f, 2, terms.clone()))
                        .unwrap()
                }
            };
            // Random independent φ list.
            let k = rng.gen_range(1..=2usize).min(n as usize);
            let phi: Vec<Vector> = loop {
                let cand: Vec<Vector> = (0..k)
                    .map(|_| {
                        Vector::from_entries((1..=n).filter_map(|i| {
                            let c = rng.gen_range(0..101i64);
                            (c != 0).then(|| (xv(i), f.scalar_i64(c)))
                        }))
                    })
                    .collect();
                let rows: Vec<Vec<Scalar>> = cand
                    .iter()
                    .map(|v| {
                        (1..=n)
                            .map(|i| v.get(&xv(i)).cloned().unwrap_or_else(|| f.zero()))
                            .collect()
                    })
                    .collect();
                if !cand.iter().any(Vector::is_zero)
                    && Matrix::from_rows(&f, rows).rank() == k
                {
                    break cand;
                }
            };
            // ψ = known isometry applied to φ (a couple of reflections).
            let mut psi = phi.clone();
            for _ in 0..2 {
                let w = loop {
                    let cand = Vector::from_entries((1..=n).filter_map(|i| {
                        let c = rng.gen_range(0..101i64);
                        (c != 0).then(|| (xv(i), f.scalar_i64(c)))
                    }));
                    if !cand.is_zero() && !q.evaluate(&cand).is_zero() {
                        break cand;
                    }
                };
                psi = psi.iter().map(|x| reflect(&q, &w, x)).collect();
            }
            let iso = witt_extend(&q, &phi, &psi)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(iso.preserves(&q), "trial {trial}: form not preserved");
            for (x, y) in phi.iter().zip(psi.iter()) {
                assert_eq!(iso.apply(x), *y, "trial {trial}: vector not carried");
            }
        }
    }

    #[test]
    fn embed_finite_forms_into_infinite_target() {
        let f = Field::default_field();
        let mut target = QuadraticForm::zero(&f);
        target.add_tail(z_tail(&f, 1, 1)).unwrap();
        // 5·w1².
        let w = QuadraticForm::from_poly(&poly_of(&f, &[(&[("w", 1, 2)], 5)])).unwrap();
        let sigma = embed_quadratic_form(&w, &target).unwrap();
        for n in [3u32, 8] {
            assert_eq!(
                sigma.apply_window(&target.to_structured(), n),
                w.truncate(n)
            );
        }
        // Hyperbolic plane w1·w2.
        let h = QuadraticForm::from_poly(&poly_of(&f, &[(&[("w", 1, 1), ("w", 2, 1)], 1)]))
            .unwrap();
        let sigma_h = embed_quadratic_form(&h, &target).unwrap();
        for n in [4u32, 9] {
            assert_eq!(
                sigma_h.apply_window(&target.to_structured(), n),
                h.truncate(n)
            );
        }
    }

    #[test]
    fn embed_streamed_diagonal_form() {
        let f = Field::default_field();
        let mut target = QuadraticForm::zero(&f);
        target.add_tail(z_tail(&f, 1, 1)).unwrap();
        // Source: Σ_j 3w_j², presented as a catalog form with a tail.
        let mut source = QuadraticForm::zero(&f);
        source
            .add_tail(PowerFamily {
                family: "w".into(),
                fixed: None,
                coeff: f.scalar_u64(3),
                exp: 2,
                start: 1,
            })
            .unwrap();
        let sigma = embed_quadratic_form(&source, &target).unwrap();
        for n in [5u32, 12, 20] {
            assert_eq!(
                sigma.apply_window(&target.to_structured(), n),
                source.truncate(n),
                "window {n}"
            );
        }
    }

    #[test]
    fn stream_chain_is_compatible() {
        let f = Field::default_field();
        let mut target = QuadraticForm::zero(&f);
        target.add_tail(z_tail(&f, 1, 1)).unwrap();
        let mut source_form = QuadraticForm::zero(&f);
        source_form
            .add_tail(PowerFamily {
                family: "w".into(),
                fixed: None,
                coeff: f.scalar_u64(3),
                exp: 2,
                start: 1,
            })
            .unwrap();
        let structured = source_form.to_structured();
        let stream = TruncationStream::from_form(&structured);
        let chain = embed_quadratic_stream(&stream, &target, &[2, 4, 6]).unwrap();
        assert_eq!(chain.stages.len(), 3);
        // Stage exactness double-check from the outside.
        for stage in &chain.stages {
            let realized = stage
                .substitution
                .apply_window(&target.to_structured(), stage.size);
            assert_eq!(realized, stream.window(stage.size));
        }
    }

    #[test]
    fn stream_rank_heuristics() {
        let f = Field::default_field();
        let mut inf = QuadraticForm::zero(&f);
        inf.add_tail(z_tail(&f, 1, 1)).unwrap();
        let s_inf = TruncationStream::from_form(&inf.to_structured());
        assert_eq!(stream_gram_rank(&s_inf), (Rank::Infinite, Exactness::Heuristic));
        let fin = QuadraticForm::from_poly(&poly_of(
            &f,
            &[(&[("x", 1, 2)], 1), (&[("x", 2, 2)], 1)],
        ))
        .unwrap();
        let s_fin = TruncationStream::from_form(&fin.to_structured());
        assert_eq!(
            stream_gram_rank(&s_fin),
            (Rank::Finite(2), Exactness::Heuristic)
        );
        assert_eq!(
            stream_strength(&s_fin),
            (Rank::Finite(1), Exactness::Heuristic)
        );
    }
}
