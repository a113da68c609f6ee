//! Residual rank: the dimension of the span of derivative residue classes.
//!
//! A quadratic has finite strength exactly when its Gram rank stays bounded
//! over all windows, so the quotient of quadratics by the finite-strength
//! ones is coordinatized by the square tails: the class of a quadratic is its
//! list of infinite square families with their eventual coefficients, and
//! distinct `(family, fixed)` tails are independent in the quotient.
//!
//! On catalog forms the derivative classes can be read off term by term:
//! a mixed family contributes its inner tail at every outer direction, a
//! scaled term `p · tail` with linear `p` contributes its tail at the support
//! of `p`, and every other term has derivatives of bounded window rank, hence
//! class zero. That makes residual rank *exact* on the catalog: it is the
//! rank of a finite matrix of tail coefficients, plus an infinite-family
//! detector for mixed terms whose eventual coefficient does not cancel.
//!
//! Truncation streams carry no structure to read classes from, so they get a
//! windowed *heuristic*: per window, the span of derivative quadratics modulo
//! those of small Gram rank (threshold `2·⌈N/8⌉`, configurable), with the
//! estimate accepted only when the last two windows agree. Heuristic reports
//! are never marked exact.
//!
//! For forms of degree `n ≥ 4` the k-th residual rank with `k = n − 2` is the
//! same computation one derivative level down: only scaled terms with square
//! tails survive k-fold differentiation, and the class matrix is the
//! coefficient table of their degree-k multipliers. Smaller `k` would need a
//! finite-strength test for residues of degree ≥ 3, which no known procedure
//! supplies; those calls are rejected.

use crate::forms::{GeneratorTerm, StructuredForm, TruncationStream};
use crate::poly::Monomial;
use crate::quad::{Exactness, QuadraticForm, Rank};
use crate::scalar::{Field, Scalar};
use crate::vars::VarId;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RrkError {
    #[error("residual rank needs degree ≥ 3 (k-th variant needs ≥ 4), got degree {got}")]
    WrongDegree { got: u32 },
    #[error("k-th residual rank is only decidable for k = degree − 2; got k = {k} at degree {degree}")]
    UnsupportedK { k: u32, degree: u32 },
    #[error("window schedule must be strictly increasing with at least two entries")]
    BadSchedule,
}

/// One infinite square family appearing in a residue class, with its
/// eventual coefficient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyComponent {
    pub family: String,
    pub fixed: Option<u32>,
    pub coeff: Scalar,
}

/// The image of a quadratic in the quotient by finite-strength quadratics:
/// a finite-rank part (class zero) plus a combination of square tails.
#[derive(Clone, Debug)]
pub struct ResidueClass {
    representative: QuadraticForm,
    components: Vec<FamilyComponent>,
}

impl ResidueClass {
    pub fn representative(&self) -> &QuadraticForm {
        &self.representative
    }

    /// The infinite square families of the class, eventual coefficients
    /// already merged and cancellations dropped.
    pub fn components(&self) -> &[FamilyComponent] {
        &self.components
    }

    /// A class is zero exactly when no infinite family survives.
    pub fn is_zero(&self) -> bool {
        self.components.is_empty()
    }
}

/// Split a quadratic into its finite-rank part and its tail combination.
pub fn residue_class(q: &QuadraticForm) -> ResidueClass {
    let components = q
        .tails()
        .iter()
        .map(|pf| FamilyComponent {
            family: pf.family.clone(),
            fixed: pf.fixed,
            coeff: pf.coeff.clone(),
        })
        .collect();
    ResidueClass {
        representative: q.clone(),
        components,
    }
}

/// Evidence from one window of a heuristic computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowEvidence {
    pub window: u32,
    pub rank: usize,
}

/// The result of a residual-rank computation: the value, whether it is exact
/// or a windowed stabilization guess, the derivative directions whose classes
/// are independent, and per-window evidence in heuristic mode.
#[derive(Clone, Debug)]
pub struct ResidualRankReport {
    pub value: Rank,
    pub mode: Exactness,
    pub basis: Vec<String>,
    pub windows: Vec<WindowEvidence>,
}

/// A tail symbol: one infinite square family, identified by name and an
/// optional pinned first index.
pub(crate) type SymKey = (String, Option<u32>);

/// One mixed-term outer family whose eventual inner coefficients do not all
/// cancel: the derivative directions `outer[i]` for `i ≥ start` have
/// pairwise-independent classes, so the form has infinite residual rank.
pub(crate) struct TailClassFamily {
    pub outer: String,
    pub start: u32,
    #[allow(dead_code)] // consumed by the table-growing module's projection constraints
    pub eventual: BTreeMap<String, Scalar>,
}

/// The full derivative-class description of a catalog form: finitely many
/// exceptional directions with explicit classes, plus the unbounded families.
pub(crate) struct ClassTable {
    pub rows: BTreeMap<VarId, BTreeMap<SymKey, Scalar>>,
    pub tails: Vec<TailClassFamily>,
}

/// Read the derivative classes of a catalog form off its generator terms.
pub(crate) fn class_table(f: &StructuredForm) -> Result<ClassTable, RrkError> {
    let n = f.degree();
    if n < 3 {
        return Err(RrkError::WrongDegree { got: n });
    }
    let field = f.field();

    // Mixed terms, grouped by outer family: (outer_start, inner family, coeff).
    let mut groups: BTreeMap<String, Vec<(u32, String, Scalar)>> = BTreeMap::new();
    for t in f.terms() {
        if let GeneratorTerm::Mixed(mf) = t {
            groups.entry(mf.outer.clone()).or_default().push((
                mf.outer_start,
                mf.inner.clone(),
                mf.coeff.clone(),
            ));
        }
    }

    let mut rows: BTreeMap<VarId, BTreeMap<SymKey, Scalar>> = BTreeMap::new();
    let mut add = |v: VarId, key: SymKey, c: &Scalar| {
        let row = rows.entry(v).or_default();
        let entry = row.entry(key).or_insert_with(|| field.zero());
        *entry = &*entry + c;
    };

    let mut tails = Vec::new();
    for (outer, terms) in &groups {
        let min_start = terms.iter().map(|t| t.0).min().expect("nonempty group");
        let max_start = terms.iter().map(|t| t.0).max().expect("nonempty group");
        // Eventual inner coefficients: what the class of ∂/∂outer[i] looks
        // like once every term of the group covers i.
        let mut eventual: BTreeMap<String, Scalar> = BTreeMap::new();
        for (_, inner, c) in terms {
            let entry = eventual
                .entry(inner.clone())
                .or_insert_with(|| field.zero());
            *entry = &*entry + c;
        }
        eventual.retain(|_, c| !c.is_zero());
        if !eventual.is_empty() {
            tails.push(TailClassFamily {
                outer: outer.clone(),
                start: max_start,
                eventual,
            });
        }
        // Exceptional head directions, where only part of the group fires.
        for i in min_start..max_start {
            for (s, inner, c) in terms {
                if *s <= i {
                    add(VarId::single(outer, i), (inner.clone(), Some(i)), c);
                }
            }
        }
    }

    // Scaled terms with a linear multiplier: ∂/∂u (p · tail) ≡ p_u · tail.
    // Multipliers of degree ≥ 2 leave classes of bounded window rank (a
    // single product of two lower-degree forms), hence zero.
    for t in f.terms() {
        if let GeneratorTerm::Scaled(p, pf) = t {
            if p.degree() == 1 {
                for (m, c) in p.terms() {
                    let u = m.vars().next().expect("linear monomial has a variable");
                    let w = c * &pf.coeff;
                    add(u.clone(), (pf.family.clone(), pf.fixed), &w);
                }
            }
        }
    }

    for row in rows.values_mut() {
        row.retain(|_, c| !c.is_zero());
    }
    rows.retain(|_, row| !row.is_empty());
    Ok(ClassTable { rows, tails })
}

/// Exact residual rank of a catalog form of degree ≥ 3.
pub fn residual_rank(f: &StructuredForm) -> Result<ResidualRankReport, RrkError> {
    let table = class_table(f)?;
    if !table.tails.is_empty() {
        let basis = table
            .tails
            .iter()
            .map(|t| format!("{}[i] for i >= {}", t.outer, t.start))
            .collect();
        return Ok(ResidualRankReport {
            value: Rank::Infinite,
            mode: Exactness::Exact,
            basis,
            windows: Vec::new(),
        });
    }
    let mut red = SparseReducer::new(f.field().clone());
    let mut basis = Vec::new();
    for (dir, class) in &table.rows {
        if red.insert(class.clone()) {
            basis.push(dir.to_string());
        }
    }
    Ok(ResidualRankReport {
        value: Rank::Finite(red.rank()),
        mode: Exactness::Exact,
        basis,
        windows: Vec::new(),
    })
}

/// Exact k-th residual rank for forms of degree `n ≥ 4` with `k = n − 2`,
/// where the k-fold derivative residues are quadratics.
pub fn kth_residual_rank(f: &StructuredForm, k: u32) -> Result<ResidualRankReport, RrkError> {
    let n = f.degree();
    if n < 4 {
        return Err(RrkError::WrongDegree { got: n });
    }
    if k != n - 2 {
        return Err(RrkError::UnsupportedK { k, degree: n });
    }
    let field = f.field();

    // Only `p · (square tail)` survives k-fold differentiation with an
    // infinite family intact, and only when all k derivatives land on the
    // degree-k multiplier p: the class of the derivative along the monomial
    // m is  (∂_m p) · tail  =  (coeff_m(p) · ∏ eᵢ!) · tail.
    let mut rows: BTreeMap<Monomial, BTreeMap<SymKey, Scalar>> = BTreeMap::new();
    for t in f.terms() {
        if let GeneratorTerm::Scaled(p, pf) = t {
            if pf.exp == 2 {
                for (m, c) in p.terms() {
                    let mut fac = 1u64;
                    for (_, e) in m.powers() {
                        fac *= (1..=u64::from(e)).product::<u64>();
                    }
                    let w = &(c * &pf.coeff) * &field.scalar_u64(fac);
                    let row = rows.entry(m.clone()).or_default();
                    let entry = row
                        .entry((pf.family.clone(), pf.fixed))
                        .or_insert_with(|| field.zero());
                    *entry = &*entry + &w;
                }
            }
        }
    }
    for row in rows.values_mut() {
        row.retain(|_, c| !c.is_zero());
    }
    rows.retain(|_, row| !row.is_empty());

    let mut red = SparseReducer::new(field.clone());
    let mut basis = Vec::new();
    for (m, class) in &rows {
        if red.insert(class.clone()) {
            basis.push(m.to_string());
        }
    }
    Ok(ResidualRankReport {
        value: Rank::Finite(red.rank()),
        mode: Exactness::Exact,
        basis,
        windows: Vec::new(),
    })
}

/// The default window threshold: a derivative quadratic of Gram rank at most
/// `2·⌈N/8⌉` counts as finite-strength at window N. The bound grows with the
/// window, so genuinely infinite families escape it.
pub fn default_rank_threshold(n: u32) -> usize {
    2 * (n as usize).div_ceil(8)
}

/// Windowed residual-rank estimate for a degree-3 truncation stream, with
/// the default threshold.
pub fn residual_rank_estimate(
    f: &TruncationStream,
    schedule: &[u32],
) -> Result<ResidualRankReport, RrkError> {
    residual_rank_estimate_with_threshold(f, schedule, default_rank_threshold)
}

/// Windowed residual-rank estimate with a caller-chosen rank threshold.
///
/// Per window N, the estimate is the dimension of the span of all derivative
/// quadratics of the window modulo the span of those whose individual Gram
/// rank is at most `threshold(N)`. The value is accepted when the last two
/// windows agree; otherwise the report flags non-stabilization as INFINITE.
/// The mode is always heuristic.
pub fn residual_rank_estimate_with_threshold(
    f: &TruncationStream,
    schedule: &[u32],
    threshold: impl Fn(u32) -> usize,
) -> Result<ResidualRankReport, RrkError> {
    if f.degree() != 3 {
        return Err(RrkError::WrongDegree { got: f.degree() });
    }
    if schedule.len() < 2 || !schedule.windows(2).all(|w| w[0] < w[1]) {
        return Err(RrkError::BadSchedule);
    }

    let mut evidence = Vec::new();
    let mut last_basis = Vec::new();
    for &n in schedule {
        let w = f.window(n);
        let thr = threshold(n);
        let mut low = Vec::new();
        let mut high = Vec::new();
        for u in w.support() {
            let q = w.partial_derivative(&u);
            if q.is_zero() {
                continue;
            }
            let qf = QuadraticForm::from_poly(&q)
                .expect("derivative of a homogeneous cubic window is quadratic");
            let rank = match qf.gram_rank() {
                Rank::Finite(r) => r,
                Rank::Infinite => unreachable!("window forms carry no tails"),
            };
            let row: BTreeMap<Monomial, Scalar> =
                q.terms().map(|(m, c)| (m.clone(), c.clone())).collect();
            if rank <= thr {
                low.push(row);
            } else {
                high.push((u, row));
            }
        }
        let mut red = SparseReducer::new(w.field().clone());
        for row in low {
            red.insert(row);
        }
        let base = red.rank();
        let mut basis = Vec::new();
        for (u, row) in high {
            if red.insert(row) {
                basis.push(u.to_string());
            }
        }
        evidence.push(WindowEvidence {
            window: n,
            rank: red.rank() - base,
        });
        last_basis = basis;
    }

    let k = evidence.len();
    let stabilized = evidence[k - 1].rank == evidence[k - 2].rank;
    Ok(ResidualRankReport {
        value: if stabilized {
            Rank::Finite(evidence[k - 1].rank)
        } else {
            Rank::Infinite
        },
        mode: Exactness::Heuristic,
        basis: last_basis,
        windows: evidence,
    })
}

/// Check `rrk(f + g) ≤ rrk(f) + rrk(g)` exactly on catalog forms.
pub fn rrk_subadditivity_check(
    f: &StructuredForm,
    g: &StructuredForm,
) -> Result<bool, RrkError> {
    let rf = residual_rank(f)?.value;
    let rg = residual_rank(g)?.value;
    let rsum = residual_rank(&f.add(g))?.value;
    let bound = match (rf, rg) {
        (Rank::Finite(a), Rank::Finite(b)) => Rank::Finite(a + b),
        _ => Rank::Infinite,
    };
    Ok(rsum <= bound)
}

/// Incremental Gaussian elimination over sparse rows with ordered keys.
pub(crate) struct SparseReducer<K: Ord + Clone> {
    field: Field,
    pivots: BTreeMap<K, BTreeMap<K, Scalar>>,
}

impl<K: Ord + Clone> SparseReducer<K> {
    pub(crate) fn new(field: Field) -> Self {
        SparseReducer {
            field,
            pivots: BTreeMap::new(),
        }
    }

    /// Reduce a row against the current pivots; store it if independent.
    /// Returns whether the rank grew.
    pub(crate) fn insert(&mut self, mut row: BTreeMap<K, Scalar>) -> bool {
        loop {
            row.retain(|_, c| !c.is_zero());
            let Some((lead, lc)) = row.iter().next().map(|(k, c)| (k.clone(), c.clone())) else {
                return false;
            };
            match self.pivots.get(&lead) {
                None => {
                    let inv = lc.inv().expect("leading coefficient is nonzero");
                    for c in row.values_mut() {
                        *c = &*c * &inv;
                    }
                    self.pivots.insert(lead, row);
                    return true;
                }
                Some(pivot) => {
                    let pivot = pivot.clone();
                    for (k, pc) in pivot {
                        let delta = &pc * &lc;
                        let entry = row.entry(k).or_insert_with(|| self.field.zero());
                        *entry = &*entry - &delta;
                    }
                }
            }
        }
    }

    pub(crate) fn rank(&self) -> usize {
        self.pivots.len()
    }
}
