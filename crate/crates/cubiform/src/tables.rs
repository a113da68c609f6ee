//! Good tables: arrays of vectors grown inside an ambient cubic space whose
//! trilinear pattern copies a canonical space, and the assembly of those
//! arrays into verified embedding certificates.
//!
//! A table holds rows `(v_i; w_{i,1}, w_{i,2}, …)` and, in FIN mode, one
//! final row `u_1, u_2, …`. Goodness asks for three things: (a) the entries
//! are linearly independent, (b) the only nonzero trilinear values among
//! entries are `⟨v_i, w_{i,j}, w_{i,j}⟩ = 1` (FIN adds `⟨u_k, u_k, u_k⟩ = 1`
//! and leaves triples drawn purely from the `v_i` unconstrained), and (c) the
//! residue classes of the derivative quadratics along the entries are
//! independent after zeros are discarded (FIN instead asks every right-side
//! entry to have a finite-strength derivative).
//!
//! Each growth step is phrased as a [`ConstraintSystem`] — one cubic
//! equality, quadratic equalities and vanishings, linear equalities, all
//! restricted to a truncation window — and solved by [`witness_search`]:
//! closed-form candidates first (the zero vector, coordinate directions,
//! rescaled coordinate directions), seeded uniform sampling of the affine
//! solution space of the linear part as a fallback. Every accepted witness is
//! re-checked against the full constraint list, independent of which pass
//! produced it.
//!
//! [`assemble_embedding`] turns an increasing chain of good tables into an
//! [`EmbeddingCertificate`]. INF tables restrict the ambient form to the span
//! of the entries, which reads back the universal space on `x`/`y`
//! coordinates. FIN tables additionally cancel the residual cubic `g` carried
//! by the left column: `g` is written as a sum of cubes of linear forms
//! `ℓ_t`, each cube is absorbed by replacing `v_a` with
//! `v_a − Σ_t ℓ_t[x_a]·u_t`, and the spent `u_1..u_m` are removed, so the
//! surviving final-row entries land on the pure-cube coordinates of the
//! canonical target.

use crate::canon::{v_infinity, v_r};
use crate::embed::{sum_of_cubes, verify_embedding, EmbedError, EmbeddingCertificate};
use crate::forms::StructuredForm;
use crate::linalg::Matrix;
use crate::poly::{Monomial, SparsePoly, Vector};
use crate::quad::{Exactness, QuadError, QuadraticForm, Rank};
use crate::rrk::{class_table, residual_rank, residue_class, RrkError, SparseReducer, SymKey};
use crate::scalar::{Field, Scalar};
use crate::subst::{SubstError, Substitution, UnmatchedPolicy};
use crate::vars::VarId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Default sample budget for one witness search.
pub const DEFAULT_BUDGET: u32 = 10_000;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("tables need a cubic ambient form, got degree {got}")]
    WrongDegree { got: u32 },
    #[error("row {row} is out of range for a table with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("{op} needs a table in {need} mode")]
    WrongMode { op: &'static str, need: &'static str },
    #[error("a FIN table needs an ambient of exact finite residual rank; this one reports {found}")]
    FinAmbient { found: String },
    #[error("input table is not good: {0}")]
    NotGood(String),
    #[error("the linear constraints are inconsistent on the window")]
    InconsistentLinearSystem,
    #[error("witness search exhausted its budget of {samples} samples; nearest miss: {nearest_miss}")]
    BudgetExhausted { samples: u32, nearest_miss: String },
    #[error("no fresh residue class remains: the table already uses all {rank} of the ambient")]
    RankExhausted { rank: usize },
    #[error("a quadratic equality needs a form of nonzero residue class; finite-strength forms go in the vanishing list")]
    EqualityNeedsInfiniteRank,
    #[error("a quadratic vanishing needs a finite-strength form; nonzero-class forms go in the equality list")]
    VanishingNeedsFiniteStrength,
    #[error("table {index} breaks the chain: {reason}")]
    BadChain { index: usize, reason: String },
    #[error(transparent)]
    Rrk(#[from] RrkError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Subst(#[from] SubstError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

// ---------------------------------------------------------------------------
// Constraint systems
// ---------------------------------------------------------------------------

/// A finite list of exact constraints on one vector, restricted to a
/// truncation window: at most one cubic equality, quadratic equalities (whose
/// forms must have nonzero residue class) and vanishings (finite strength
/// required), and linear equalities.
#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    field: Field,
    window: u32,
    cubic: Option<(StructuredForm, Scalar)>,
    quad_eq: Vec<(QuadraticForm, Scalar)>,
    quad_null: Vec<QuadraticForm>,
    linear: Vec<(SparsePoly, Scalar)>,
}

impl ConstraintSystem {
    pub fn new(field: &Field, window: u32) -> ConstraintSystem {
        ConstraintSystem {
            field: field.clone(),
            window,
            cubic: None,
            quad_eq: Vec::new(),
            quad_null: Vec::new(),
            linear: Vec::new(),
        }
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Require `f(x) = a` for a cubic `f`. At most one cubic slot.
    pub fn set_cubic(&mut self, f: StructuredForm, a: Scalar) -> Result<(), TableError> {
        if f.degree() != 3 {
            return Err(TableError::WrongDegree { got: f.degree() });
        }
        self.cubic = Some((f, a));
        Ok(())
    }

    /// Require `q(x) = b`. The form must have a nonzero residue class — that
    /// is what makes the equality solvable in every fresh window.
    pub fn add_quadratic_equality(&mut self, q: QuadraticForm, b: Scalar) -> Result<(), TableError> {
        if residue_class(&q).is_zero() {
            return Err(TableError::EqualityNeedsInfiniteRank);
        }
        self.quad_eq.push((q, b));
        Ok(())
    }

    /// Require `q(x) = 0` for a finite-strength `q`.
    pub fn add_quadratic_vanishing(&mut self, q: QuadraticForm) -> Result<(), TableError> {
        if !residue_class(&q).is_zero() {
            return Err(TableError::VanishingNeedsFiniteStrength);
        }
        self.quad_null.push(q);
        Ok(())
    }

    /// Require `ℓ(x) = c` for a linear form `ℓ`.
    pub fn add_linear(&mut self, l: SparsePoly, c: Scalar) {
        debug_assert!(l.is_zero() || l.degree() == 1, "linear constraint of degree {}", l.degree());
        self.linear.push((l, c));
    }

    /// Every violated constraint, in a fixed evaluation order. Empty means
    /// the vector satisfies the system exactly.
    pub fn violations(&self, x: &Vector) -> Vec<String> {
        self.violations_impl(x, false)
    }

    /// The first violated constraint, if any.
    pub fn first_violation(&self, x: &Vector) -> Option<String> {
        self.violations_impl(x, true).into_iter().next()
    }

    fn violations_impl(&self, x: &Vector, stop_at_first: bool) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! record {
            ($msg:expr) => {
                out.push($msg);
                if stop_at_first {
                    return out;
                }
            };
        }
        if let Some(v) = x.support().find(|v| v.max_index() > self.window) {
            record!(format!("coordinate {v} leaves the window [1..{}]", self.window));
        }
        for (i, (q, b)) in self.quad_eq.iter().enumerate() {
            let got = q.evaluate(x);
            if !(&got - b).is_zero() {
                record!(format!("quadratic equality #{}: got {got}, want {b}", i + 1));
            }
        }
        if let Some((f, a)) = &self.cubic {
            let got = f.evaluate(x);
            if !(&got - a).is_zero() {
                record!(format!("cubic equality: got {got}, want {a}"));
            }
        }
        for (i, q) in self.quad_null.iter().enumerate() {
            let got = q.evaluate(x);
            if !got.is_zero() {
                record!(format!("quadratic vanishing #{}: got {got}, want 0", i + 1));
            }
        }
        for (i, (l, c)) in self.linear.iter().enumerate() {
            let got = l.evaluate(x);
            if !(&got - c).is_zero() {
                record!(format!("linear constraint #{}: got {got}, want {c}", i + 1));
            }
        }
        out
    }

    /// Candidate coordinates: the ambient's window support plus every
    /// variable a constraint can see inside the window.
    fn candidate_vars(&self, ambient: &StructuredForm) -> Vec<VarId> {
        let mut vars: BTreeSet<VarId> = ambient.truncate(self.window).support();
        if let Some((f, _)) = &self.cubic {
            vars.extend(f.truncate(self.window).support());
        }
        for (q, _) in &self.quad_eq {
            self.collect_quad_vars(q, &mut vars);
        }
        for q in &self.quad_null {
            self.collect_quad_vars(q, &mut vars);
        }
        for (l, _) in &self.linear {
            vars.extend(l.support());
        }
        vars.into_iter()
            .filter(|v| v.max_index() <= self.window)
            .collect()
    }

    fn collect_quad_vars(&self, q: &QuadraticForm, vars: &mut BTreeSet<VarId>) {
        vars.extend(q.support());
        for pf in q.tails() {
            for k in pf.start..=self.window {
                vars.insert(pf.var_at(k));
            }
        }
    }

    /// A scalar `s ≠ 0` such that `s·e` can meet the one non-linear target
    /// that `e` misses only by scale — provided everything else already
    /// vanishes at `e`. Returns None when no such single rescale exists.
    fn rescale_factor(&self, e: &Vector) -> Option<Scalar> {
        if self
            .linear
            .iter()
            .any(|(l, c)| !c.is_zero() || !l.evaluate(e).is_zero())
        {
            return None;
        }
        if self.quad_null.iter().any(|q| !q.evaluate(e).is_zero()) {
            return None;
        }
        let mut square_target: Option<Scalar> = None; // the needed s²
        for (q, b) in &self.quad_eq {
            let v = q.evaluate(e);
            match (v.is_zero(), b.is_zero()) {
                (true, true) => continue,
                (false, false) => {
                    if square_target.is_some() {
                        return None; // two targets, one scale: give up
                    }
                    square_target = Some(b * &v.inv().expect("nonzero value"));
                }
                _ => return None,
            }
        }
        let cubic_values = self.cubic.as_ref().map(|(f, a)| (f.evaluate(e), a.clone()));
        match (square_target, cubic_values) {
            (Some(s2), None) => Some(s2.sqrt_or_extend()),
            (Some(s2), Some((v, a))) if v.is_zero() && a.is_zero() => Some(s2.sqrt_or_extend()),
            (None, Some((v, a))) if !v.is_zero() && !a.is_zero() => {
                Some((&a * &v.inv().expect("nonzero value")).cbrt_or_extend())
            }
            _ => None,
        }
    }
}

/// Search for a vector satisfying `c` exactly inside the window, using the
/// ambient `v` to enumerate candidate coordinates.
///
/// Passes, in order: the zero vector; the particular solution of the linear
/// subsystem when it is cheap (that is, the system is empty); coordinate
/// directions in variable order, each also tried with the single rescale
/// that meets one quadratic or cubic target; then `budget` samples
/// `particular + Σ rᵢ·basisᵢ` drawn uniformly from the solution space of the
/// linear subsystem with a seeded generator. The first exact satisfier wins,
/// and every candidate is accepted only after re-evaluating the full
/// constraint list.
pub fn witness_search(
    v: &StructuredForm,
    c: &ConstraintSystem,
    budget: u32,
    seed: u64,
) -> Result<Vector, TableError> {
    let field = c.field.clone();
    let vars = c.candidate_vars(v);

    // Pass 0: the zero vector (covers the empty system).
    let zero = Vector::zero();
    if c.first_violation(&zero).is_none() {
        return Ok(zero);
    }

    // Pass 1/2: coordinate directions, raw and rescaled.
    for d in &vars {
        let e = Vector::unit(&field, d.clone());
        if c.first_violation(&e).is_none() {
            return Ok(e);
        }
        if let Some(s) = c.rescale_factor(&e) {
            if !s.is_zero() {
                let x = e.scale(&s);
                if c.first_violation(&x).is_none() {
                    return Ok(x);
                }
            }
        }
    }

    // Pass 3: solve the linear subsystem and sample its solution space.
    let (particular, basis) = solve_linear_subsystem(&field, c, &vars)?;
    if c.first_violation(&particular).is_none() {
        return Ok(particular);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nearest: Option<(usize, String)> = None;
    for _ in 0..budget {
        let mut x = particular.clone();
        for b in &basis {
            let r = field.random_base(&mut rng);
            if !r.is_zero() {
                x = x.add(&b.scale(&r));
            }
        }
        let viols = c.violations(&x);
        match viols.into_iter().next() {
            None => return Ok(x),
            Some(first) => {
                let count = c.violations(&x).len();
                if nearest.as_ref().map_or(true, |(n, _)| count < *n) {
                    nearest = Some((count, first));
                }
            }
        }
    }
    let nearest_miss = nearest
        .map(|(_, s)| s)
        .or_else(|| c.first_violation(&particular))
        .unwrap_or_else(|| "no candidate evaluated".into());
    Err(TableError::BudgetExhausted {
        samples: budget,
        nearest_miss,
    })
}

/// Particular solution and nullspace basis of the linear subsystem over the
/// candidate coordinates. An empty subsystem leaves every coordinate free.
fn solve_linear_subsystem(
    field: &Field,
    c: &ConstraintSystem,
    vars: &[VarId],
) -> Result<(Vector, Vec<Vector>), TableError> {
    if c.linear.is_empty() {
        let basis = vars
            .iter()
            .map(|d| Vector::unit(field, d.clone()))
            .collect();
        return Ok((Vector::zero(), basis));
    }
    let rows: Vec<Vec<Scalar>> = c
        .linear
        .iter()
        .map(|(l, _)| {
            vars.iter()
                .map(|d| l.coeff(&Monomial::var(d.clone())))
                .collect()
        })
        .collect();
    let rhs: Vec<Scalar> = c.linear.iter().map(|(_, t)| t.clone()).collect();
    let a = Matrix::from_rows(field, rows);
    let sol = a.solve(&rhs).ok_or(TableError::InconsistentLinearSystem)?;
    let to_vector = |coords: &[Scalar]| {
        Vector::from_entries(
            vars.iter()
                .cloned()
                .zip(coords.iter().cloned())
                .filter(|(_, c)| !c.is_zero()),
        )
    };
    let basis = a.nullspace().iter().map(|b| to_vector(b)).collect();
    Ok((to_vector(&sol), basis))
}

// ---------------------------------------------------------------------------
// Good tables
// ---------------------------------------------------------------------------

/// INF tables head for the universal space; FIN tables carry the ambient's
/// residual rank `r` and head for the rank-`r` canonical space.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TableMode {
    Inf,
    Fin(u32),
}

impl fmt::Display for TableMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableMode::Inf => write!(f, "INF"),
            TableMode::Fin(r) => write!(f, "FIN({r})"),
        }
    }
}

/// Outcome of a goodness check: either clean, or the first violated clause.
#[derive(Clone, Debug)]
pub struct GoodnessReport {
    pub ok: bool,
    pub violation: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum EntryLabel {
    V(usize),
    W(usize, usize),
    U(usize),
}

impl fmt::Display for EntryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryLabel::V(i) => write!(f, "v{i}"),
            EntryLabel::W(i, j) => write!(f, "w{i},{j}"),
            EntryLabel::U(k) => write!(f, "u{k}"),
        }
    }
}

/// Which residue-class constraints a growth step imposes on the witness.
#[derive(Clone, Copy, PartialEq, Eq)]
enum ClassConstraint {
    /// None: the step manages classes by coordinate restriction instead.
    None,
    /// Kill the projection onto the span of the existing entries' classes.
    Projection,
    /// Kill the whole class: the witness must have finite-strength derivative.
    Full,
}

/// A growing array of vectors inside one ambient cubic space. Rows hold the
/// left entry `v_i` and its right side `w_{i,1}, w_{i,2}, …`; FIN tables add
/// the final row `u_1, u_2, …` of unit-cube witnesses.
#[derive(Clone, Debug)]
pub struct GoodTable {
    ambient: StructuredForm,
    mode: TableMode,
    rows: Vec<(Vector, Vec<Vector>)>,
    final_row: Vec<Vector>,
}

impl GoodTable {
    /// An empty INF table over `ambient`.
    pub fn new_inf(ambient: &StructuredForm) -> Result<GoodTable, TableError> {
        if ambient.degree() != 3 {
            return Err(TableError::WrongDegree {
                got: ambient.degree(),
            });
        }
        Ok(GoodTable {
            ambient: ambient.clone(),
            mode: TableMode::Inf,
            rows: Vec::new(),
            final_row: Vec::new(),
        })
    }

    /// A FIN table over an ambient of exact finite residual rank `r`, seeded
    /// with the `r` canonical left entries: unit vectors along derivative
    /// directions whose residue classes form a basis.
    pub fn new_fin(ambient: &StructuredForm) -> Result<GoodTable, TableError> {
        if ambient.degree() != 3 {
            return Err(TableError::WrongDegree {
                got: ambient.degree(),
            });
        }
        let report = residual_rank(ambient)?;
        let r = match (report.value, report.mode) {
            (Rank::Finite(r), Exactness::Exact) => r,
            (value, mode) => {
                return Err(TableError::FinAmbient {
                    found: format!("{value:?} ({mode:?})"),
                })
            }
        };
        let field = ambient.field().clone();
        let table = class_table(ambient)?;
        let mut reducer: SparseReducer<SymKey> = SparseReducer::new(field.clone());
        let mut rows = Vec::new();
        for (d, row) in &table.rows {
            if reducer.insert(row.clone()) {
                rows.push((Vector::unit(&field, d.clone()), Vec::new()));
            }
        }
        debug_assert_eq!(rows.len(), r, "class basis disagrees with the rank");
        Ok(GoodTable {
            ambient: ambient.clone(),
            mode: TableMode::Fin(r as u32),
            rows,
            final_row: Vec::new(),
        })
    }

    pub fn ambient(&self) -> &StructuredForm {
        &self.ambient
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    /// The rows `(v_i, [w_{i,1}, …])` in order.
    pub fn rows(&self) -> &[(Vector, Vec<Vector>)] {
        &self.rows
    }

    /// The final row `u_1, u_2, …` (empty for INF tables).
    pub fn final_row(&self) -> &[Vector] {
        &self.final_row
    }

    pub fn entry_count(&self) -> usize {
        self.rows.iter().map(|(_, ws)| 1 + ws.len()).sum::<usize>() + self.final_row.len()
    }

    fn labeled_entries(&self) -> Vec<(EntryLabel, &Vector)> {
        let mut out = Vec::new();
        for (i, (v, ws)) in self.rows.iter().enumerate() {
            out.push((EntryLabel::V(i + 1), v));
            for (j, w) in ws.iter().enumerate() {
                out.push((EntryLabel::W(i + 1, j + 1), w));
            }
        }
        for (k, u) in self.final_row.iter().enumerate() {
            out.push((EntryLabel::U(k + 1), u));
        }
        out
    }

    /// Check the three goodness clauses; report the first violation.
    pub fn check_good(&self) -> GoodnessReport {
        let field = self.ambient.field().clone();
        let entries = self.labeled_entries();
        let fail = |violation: String| GoodnessReport {
            ok: false,
            violation: Some(violation),
        };

        // (a) linear independence of the entries.
        if !entries.is_empty() {
            let vars: Vec<VarId> = entries
                .iter()
                .flat_map(|(_, e)| e.support().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let coord_rows: Vec<Vec<Scalar>> = entries
                .iter()
                .map(|(_, e)| {
                    vars.iter()
                        .map(|d| e.get(d).cloned().unwrap_or_else(|| field.zero()))
                        .collect()
                })
                .collect();
            if Matrix::from_rows(&field, coord_rows).rank() != entries.len() {
                return fail("(a) the table entries are linearly dependent".into());
            }
        }

        // (b) trilinear values follow the canonical pattern.
        let mut qfs = Vec::with_capacity(entries.len());
        for (label, e) in &entries {
            match QuadraticForm::from_structured(&self.ambient.directional_derivative(e)) {
                Ok(q) => qfs.push(q),
                Err(err) => {
                    return fail(format!(
                        "(b) the derivative along {label} is not a catalog quadratic: {err}"
                    ))
                }
            }
        }
        let third = field.scalar_u64(3).inv().expect("3 ≠ 0 in odd characteristic");
        for i in 0..entries.len() {
            for j in i..entries.len() {
                for k in j..entries.len() {
                    let Some(want) =
                        self.expected_triple(&field, entries[i].0, entries[j].0, entries[k].0)
                    else {
                        continue;
                    };
                    let got = &qfs[i].bilinear(entries[j].1, entries[k].1) * &third;
                    if !(&got - &want).is_zero() {
                        return fail(format!(
                            "(b) ⟨{}, {}, {}⟩ = {got}, want {want}",
                            entries[i].0, entries[j].0, entries[k].0
                        ));
                    }
                }
            }
        }

        // (c) residue classes.
        match self.mode {
            TableMode::Inf => {
                let mut reducer: SparseReducer<SymKey> = SparseReducer::new(field.clone());
                for ((label, _), qf) in entries.iter().zip(&qfs) {
                    let class = class_components(&field, qf);
                    if class.is_empty() {
                        continue;
                    }
                    if !reducer.insert(class) {
                        return fail(format!(
                            "(c) the residue class along {label} depends on the earlier entries"
                        ));
                    }
                }
            }
            TableMode::Fin(_) => {
                for ((label, _), qf) in entries.iter().zip(&qfs) {
                    if matches!(label, EntryLabel::V(_)) {
                        continue;
                    }
                    if !residue_class(qf).is_zero() {
                        return fail(format!(
                            "(c) the derivative along {label} has infinite strength"
                        ));
                    }
                }
            }
        }

        GoodnessReport {
            ok: true,
            violation: None,
        }
    }

    /// The required trilinear value of an entry triple; None marks the FIN
    /// triples drawn purely from the left column, which are unconstrained.
    fn expected_triple(
        &self,
        field: &Field,
        a: EntryLabel,
        b: EntryLabel,
        c: EntryLabel,
    ) -> Option<Scalar> {
        let labels = [a, b, c];
        let vs: Vec<usize> = labels
            .iter()
            .filter_map(|l| match l {
                EntryLabel::V(i) => Some(*i),
                _ => None,
            })
            .collect();
        let ws: Vec<(usize, usize)> = labels
            .iter()
            .filter_map(|l| match l {
                EntryLabel::W(i, j) => Some((*i, *j)),
                _ => None,
            })
            .collect();
        let us: Vec<usize> = labels
            .iter()
            .filter_map(|l| match l {
                EntryLabel::U(k) => Some(*k),
                _ => None,
            })
            .collect();
        if vs.len() == 1 && ws.len() == 2 && ws[0] == ws[1] && ws[0].0 == vs[0] {
            return Some(field.one());
        }
        if us.len() == 3 && us[0] == us[1] && us[1] == us[2] {
            return Some(field.one());
        }
        if matches!(self.mode, TableMode::Fin(_)) && vs.len() == 3 {
            return None;
        }
        Some(field.zero())
    }

    fn require_good(&self, op: &str) -> Result<(), TableError> {
        let report = self.check_good();
        if report.ok {
            Ok(())
        } else {
            Err(TableError::NotGood(format!(
                "{op}: {}",
                report.violation.unwrap_or_default()
            )))
        }
    }

    /// Truncation window for the next growth step: far enough to see every
    /// existing entry and at least one fresh index beyond them.
    fn growth_window(&self) -> u32 {
        let mut n = self.ambient.described_index().max(1);
        for (_, e) in self.labeled_entries() {
            n = n.max(e.max_index());
        }
        n + 2
    }

    fn window_vars(&self, window: u32) -> Vec<VarId> {
        let mut vars: BTreeSet<VarId> = self.ambient.truncate(window).support();
        for (_, e) in self.labeled_entries() {
            vars.extend(e.support().cloned());
        }
        vars.into_iter()
            .filter(|v| v.max_index() <= window)
            .collect()
    }

    /// Leading coordinates of the entry span (pivot columns of its reduced
    /// row-echelon form). Zeroing them pins the complement: any vector with
    /// all pivot coordinates zero is linearly independent of the entries.
    fn pivot_vars(&self, field: &Field, vars: &[VarId]) -> Vec<VarId> {
        let entries = self.labeled_entries();
        if entries.is_empty() {
            return Vec::new();
        }
        let rows: Vec<Vec<Scalar>> = entries
            .iter()
            .map(|(_, e)| {
                vars.iter()
                    .map(|d| e.get(d).cloned().unwrap_or_else(|| field.zero()))
                    .collect()
            })
            .collect();
        let (_, pivots) = Matrix::from_rows(field, rows).rref();
        pivots.into_iter().map(|p| vars[p].clone()).collect()
    }

    /// The shared constraint list of a growth step: the cubic target, the
    /// derivative targets along every entry (3 on the distinguished row's
    /// left entry, 0 elsewhere), the trilinear pair constraints, the
    /// linear-independence coordinates, and the residue-class constraints.
    fn growth_system(
        &self,
        window: u32,
        cubic_target: Scalar,
        distinguished_row: Option<usize>,
        classes: ClassConstraint,
    ) -> Result<ConstraintSystem, TableError> {
        let field = self.ambient.field().clone();
        let vars = self.window_vars(window);
        let entries = self.labeled_entries();
        let mut sys = ConstraintSystem::new(&field, window);
        sys.set_cubic(self.ambient.clone(), cubic_target)?;

        let mut qfs = Vec::with_capacity(entries.len());
        for (_, e) in &entries {
            qfs.push(QuadraticForm::from_structured(
                &self.ambient.directional_derivative(e),
            )?);
        }

        // Derivative targets, the distinguished one first so that searching
        // rejects mismatched candidates on the cheapest possible check.
        let three = field.scalar_u64(3);
        let mut order: Vec<usize> = (0..entries.len()).collect();
        if let Some(l) = distinguished_row {
            if let Some(pos) = entries
                .iter()
                .position(|(label, _)| matches!(label, EntryLabel::V(i) if *i == l))
            {
                order.retain(|&i| i != pos);
                order.insert(0, pos);
            }
        }
        for idx in order {
            let target = match (distinguished_row, entries[idx].0) {
                (Some(l), EntryLabel::V(i)) if i == l => three.clone(),
                _ => field.zero(),
            };
            if residue_class(&qfs[idx]).is_zero() {
                if target.is_zero() {
                    sys.add_quadratic_vanishing(qfs[idx].clone())?;
                } else {
                    return Err(TableError::EqualityNeedsInfiniteRank);
                }
            } else {
                sys.add_quadratic_equality(qfs[idx].clone(), target)?;
            }
        }

        // Linear independence from the entries: pivot coordinates vanish.
        for p in self.pivot_vars(&field, &vars) {
            sys.add_linear(SparsePoly::var(&field, p), field.zero());
        }

        // Residue-class constraints, as linear forms in the witness through
        // the per-direction class rows of the ambient.
        let rows = window_class_rows(&self.ambient, &vars)?;
        match classes {
            ClassConstraint::None => {}
            ClassConstraint::Full => {
                let symbols: BTreeSet<SymKey> = rows
                    .values()
                    .flat_map(|row| row.keys().cloned())
                    .collect();
                for s in symbols {
                    let form = class_projection_form(&field, &rows, &vars, &s);
                    if !form.is_zero() {
                        sys.add_linear(form, field.zero());
                    }
                }
            }
            ClassConstraint::Projection => {
                let symbols: Vec<SymKey> = rows
                    .values()
                    .flat_map(|row| row.keys().cloned())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if !entries.is_empty() && !symbols.is_empty() {
                    let class_rows: Vec<Vec<Scalar>> = entries
                        .iter()
                        .map(|(_, e)| {
                            let class = symbol_vector(&field, &rows, e);
                            symbols
                                .iter()
                                .map(|s| class.get(s).cloned().unwrap_or_else(|| field.zero()))
                                .collect()
                        })
                        .collect();
                    let (_, pivot_symbols) = Matrix::from_rows(&field, class_rows).rref();
                    for p in pivot_symbols {
                        let form = class_projection_form(&field, &rows, &vars, &symbols[p]);
                        if !form.is_zero() {
                            sys.add_linear(form, field.zero());
                        }
                    }
                }
            }
        }

        // Trilinear pair constraints ⟨a, b, x⟩ = 0 over all unordered entry
        // pairs, repetition included.
        let third = three.inv().expect("3 ≠ 0 in odd characteristic");
        for i in 0..entries.len() {
            for j in i..entries.len() {
                let form = polarized_linear_form(&field, &qfs[i], entries[j].1).scale(&third);
                if !form.is_zero() {
                    sys.add_linear(form, field.zero());
                }
            }
        }

        Ok(sys)
    }

    /// Append one entry to the right side of row `row` (1-based): a witness
    /// `x` with `f(x) = 0`, `f_{v_row}(x) = 3`, all other entry derivatives
    /// vanishing, `⟨a, b, x⟩ = 0` for all entry pairs, independence from the
    /// entries, and the mode's residue-class constraint (INF: class projected
    /// off the entries' span; FIN: class zero).
    pub fn grow_row(&self, row: usize, budget: u32, seed: u64) -> Result<GoodTable, TableError> {
        if row == 0 || row > self.rows.len() {
            return Err(TableError::RowOutOfRange {
                row,
                rows: self.rows.len(),
            });
        }
        self.require_good("grow_row")?;
        let field = self.ambient.field().clone();
        let classes = match self.mode {
            TableMode::Inf => ClassConstraint::Projection,
            TableMode::Fin(_) => ClassConstraint::Full,
        };
        let sys = self.growth_system(self.growth_window(), field.zero(), Some(row), classes)?;
        let x = witness_search(&self.ambient, &sys, budget, seed)?;
        let mut out = self.clone();
        out.rows[row - 1].1.push(x);
        out.require_good("grow_row produced a table that")?;
        Ok(out)
    }

    /// Start a fresh row (INF only): a witness whose residue class extends
    /// the entries' span, found among fresh class-carrying coordinates with
    /// the first one pinned to 1, subject to `f(x) = 0`, vanishing entry
    /// derivatives, pair constraints, and independence.
    pub fn add_row(&self, budget: u32, seed: u64) -> Result<GoodTable, TableError> {
        if self.mode != TableMode::Inf {
            return Err(TableError::WrongMode {
                op: "add_row",
                need: "INF",
            });
        }
        self.require_good("add_row")?;
        let field = self.ambient.field().clone();
        let entries = self.labeled_entries();

        // Rank bookkeeping: a finite-rank ambient runs out of fresh classes.
        let report = residual_rank(&self.ambient)?;
        let window = self.growth_window();
        let vars = self.window_vars(window);
        let rows = window_class_rows(&self.ambient, &vars)?;
        let mut reducer: SparseReducer<SymKey> = SparseReducer::new(field.clone());
        let mut used = 0usize;
        for (_, e) in &entries {
            if reducer.insert(symbol_vector(&field, &rows, e)) {
                used += 1;
            }
        }
        if let Rank::Finite(r) = report.value {
            if used >= r {
                return Err(TableError::RankExhausted { rank: r });
            }
        }
        // Fresh class-carrying directions, greedily in coordinate order,
        // skipping the pivot coordinates of the entry span (those are pinned
        // to zero by the independence constraints).
        let pivots: BTreeSet<VarId> = self.pivot_vars(&field, &vars).into_iter().collect();
        let fresh: Vec<VarId> = vars
            .iter()
            .filter(|d| {
                !pivots.contains(d)
                    && rows
                        .get(d)
                        .map_or(false, |row| reducer.insert(row.clone()))
            })
            .cloned()
            .collect();
        if fresh.is_empty() {
            return Err(TableError::RankExhausted { rank: used });
        }

        let mut sys = self.growth_system(window, field.zero(), None, ClassConstraint::None)?;
        // Restrict to the fresh directions and normalize the leading one.
        let fresh_set: BTreeSet<&VarId> = fresh.iter().collect();
        sys.add_linear(SparsePoly::var(&field, fresh[0].clone()), field.one());
        for d in &vars {
            if !fresh_set.contains(d) {
                sys.add_linear(SparsePoly::var(&field, d.clone()), field.zero());
            }
        }
        let x = witness_search(&self.ambient, &sys, budget, seed)?;
        let mut out = self.clone();
        out.rows.push((x, Vec::new()));
        out.require_good("add_row produced a table that")?;
        Ok(out)
    }

    /// Append one final-row entry (FIN only): a witness with `f(x) = 1`,
    /// vanishing entry derivatives, pair constraints, independence, and
    /// residue class zero.
    pub fn grow_final_row(&self, budget: u32, seed: u64) -> Result<GoodTable, TableError> {
        if !matches!(self.mode, TableMode::Fin(_)) {
            return Err(TableError::WrongMode {
                op: "grow_final_row",
                need: "FIN",
            });
        }
        self.require_good("grow_final_row")?;
        let field = self.ambient.field().clone();
        let sys = self.growth_system(
            self.growth_window(),
            field.one(),
            None,
            ClassConstraint::Full,
        )?;
        let x = witness_search(&self.ambient, &sys, budget, seed)?;
        let mut out = self.clone();
        out.final_row.push(x);
        out.require_good("grow_final_row produced a table that")?;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Shared linear-form helpers
// ---------------------------------------------------------------------------

fn bump(map: &mut BTreeMap<VarId, Scalar>, field: &Field, v: &VarId, c: Scalar) {
    if c.is_zero() {
        return;
    }
    let e = map.entry(v.clone()).or_insert_with(|| field.zero());
    *e = &*e + &c;
}

/// The linear form `x ↦ B_q(b, x)` for the halved polarization `B_q` of `q`
/// (so `B_q(b, b) = q(b)`).
fn polarized_linear_form(field: &Field, q: &QuadraticForm, b: &Vector) -> SparsePoly {
    let mut coeffs: BTreeMap<VarId, Scalar> = BTreeMap::new();
    let half = field.scalar_u64(2).inv().expect("2 ≠ 0 in odd characteristic");
    for ((u, v), c) in q.gram_entries() {
        if u == v {
            if let Some(a) = b.get(u) {
                bump(&mut coeffs, field, u, c * a);
            }
        } else {
            if let Some(a) = b.get(u) {
                bump(&mut coeffs, field, v, &(c * a) * &half);
            }
            if let Some(a) = b.get(v) {
                bump(&mut coeffs, field, u, &(c * a) * &half);
            }
        }
    }
    for pf in q.tails() {
        for (v, a) in b.iter() {
            if pf.running_index(v).is_some() {
                bump(&mut coeffs, field, v, &pf.coeff * a);
            }
        }
    }
    SparsePoly::from_terms(
        field,
        1,
        coeffs
            .into_iter()
            .filter(|(_, c)| !c.is_zero())
            .map(|(v, c)| (Monomial::var(v), c)),
    )
}

/// Per-direction residue classes of the ambient inside a window: the rows of
/// the class table, with the eventual tail classes materialized at every
/// window coordinate they cover.
fn window_class_rows(
    ambient: &StructuredForm,
    vars: &[VarId],
) -> Result<BTreeMap<VarId, BTreeMap<SymKey, Scalar>>, TableError> {
    let field = ambient.field().clone();
    let table = class_table(ambient)?;
    let mut rows = table.rows.clone();
    for fam in &table.tails {
        for v in vars {
            if v.family() == fam.outer && v.idx2().is_none() && v.idx1() >= fam.start {
                let row = rows.entry(v.clone()).or_default();
                for (inner, c) in &fam.eventual {
                    let key = (inner.clone(), Some(v.idx1()));
                    let e = row.entry(key).or_insert_with(|| field.zero());
                    *e = &*e + c;
                }
            }
        }
    }
    for row in rows.values_mut() {
        row.retain(|_, c| !c.is_zero());
    }
    rows.retain(|_, row| !row.is_empty());
    Ok(rows)
}

/// The residue class of the derivative along `x`, as a symbol vector:
/// linear in `x` through the class rows.
fn symbol_vector(
    field: &Field,
    rows: &BTreeMap<VarId, BTreeMap<SymKey, Scalar>>,
    x: &Vector,
) -> BTreeMap<SymKey, Scalar> {
    let mut acc: BTreeMap<SymKey, Scalar> = BTreeMap::new();
    for (d, c) in x.iter() {
        let Some(row) = rows.get(d) else { continue };
        for (s, a) in row {
            let e = acc.entry(s.clone()).or_insert_with(|| field.zero());
            *e = &*e + &(c * a);
        }
    }
    acc.retain(|_, c| !c.is_zero());
    acc
}

/// The residue class of one quadratic as a symbol vector.
fn class_components(field: &Field, q: &QuadraticForm) -> BTreeMap<SymKey, Scalar> {
    let mut acc: BTreeMap<SymKey, Scalar> = BTreeMap::new();
    for comp in residue_class(q).components() {
        let key = (comp.family.clone(), comp.fixed);
        let e = acc.entry(key).or_insert_with(|| field.zero());
        *e = &*e + &comp.coeff;
    }
    acc.retain(|_, c| !c.is_zero());
    acc
}

/// The linear form `x ↦ (class of f_x)[s]` over the window coordinates.
fn class_projection_form(
    field: &Field,
    rows: &BTreeMap<VarId, BTreeMap<SymKey, Scalar>>,
    vars: &[VarId],
    s: &SymKey,
) -> SparsePoly {
    SparsePoly::from_terms(
        field,
        1,
        vars.iter().filter_map(|d| {
            rows.get(d)
                .and_then(|row| row.get(s))
                .filter(|c| !c.is_zero())
                .map(|c| (Monomial::var(d.clone()), c.clone()))
        }),
    )
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Turn a strictly increasing chain of good tables over one ambient into an
/// embedding certificate of the matching canonical space, verified window by
/// window up to the depth the last table supports.
///
/// INF chains target the universal space: the entries become the images of
/// its `x`/`y` coordinates. FIN chains target the rank-`r` canonical space:
/// the residual cubic `g(x) = Σ ⟨v_a, v_b, v_c⟩ x_a x_b x_c` carried by the
/// left column is written as a sum of `m` cubes of linear forms, the first
/// `m` final-row entries are folded into the left column to cancel it, and
/// the surviving final-row entries become the images of the pure-cube
/// coordinates.
pub fn assemble_embedding(chain: &[GoodTable]) -> Result<EmbeddingCertificate, TableError> {
    if chain.is_empty() {
        return Err(TableError::BadChain {
            index: 0,
            reason: "the chain is empty".into(),
        });
    }
    for (k, t) in chain.iter().enumerate() {
        let report = t.check_good();
        if !report.ok {
            return Err(TableError::BadChain {
                index: k,
                reason: format!("not good: {}", report.violation.unwrap_or_default()),
            });
        }
        if k > 0 {
            if let Err(reason) = extends(&chain[k - 1], t) {
                return Err(TableError::BadChain { index: k, reason });
            }
        }
    }
    let last = chain.len() - 1;
    let t = &chain[last];
    match t.mode {
        TableMode::Inf => assemble_inf(t, last),
        TableMode::Fin(r) => assemble_fin(t, r, last),
    }
}

/// Is `next` an in-place extension of `prev`?
fn extends(prev: &GoodTable, next: &GoodTable) -> Result<(), String> {
    if prev.mode != next.mode {
        return Err(format!("mode changes from {} to {}", prev.mode, next.mode));
    }
    if prev.ambient.to_string() != next.ambient.to_string() {
        return Err("the ambient form changes".into());
    }
    if prev.rows.len() > next.rows.len() {
        return Err("the row count shrinks".into());
    }
    for (i, (pv, pws)) in prev.rows.iter().enumerate() {
        let (nv, nws) = &next.rows[i];
        if pv != nv {
            return Err(format!("row {} changes its left entry", i + 1));
        }
        if pws.len() > nws.len() || nws[..pws.len()] != pws[..] {
            return Err(format!("row {} is not extended in place", i + 1));
        }
    }
    if prev.final_row.len() > next.final_row.len()
        || next.final_row[..prev.final_row.len()] != prev.final_row[..]
    {
        return Err("the final row is not extended in place".into());
    }
    if prev.entry_count() >= next.entry_count() {
        return Err("the chain does not strictly grow".into());
    }
    Ok(())
}

/// Accumulate `coeff · src` into the image of every ambient coordinate in
/// the support of `vec`.
fn accumulate_images(
    images: &mut BTreeMap<VarId, SparsePoly>,
    field: &Field,
    vec: &Vector,
    src: &VarId,
) {
    let src_poly = SparsePoly::var(field, src.clone());
    for (d, c) in vec.iter() {
        let add = src_poly.scale(c);
        let slot = images
            .entry(d.clone())
            .or_insert_with(|| SparsePoly::zero(field, 1));
        *slot = slot.add(&add);
    }
}

fn build_certificate(
    field: &Field,
    images: BTreeMap<VarId, SparsePoly>,
    source: StructuredForm,
    target: StructuredForm,
    cap: u32,
) -> Result<EmbeddingCertificate, TableError> {
    let mut sigma = Substitution::new(field, UnmatchedPolicy::Zero);
    for (d, img) in images {
        sigma.map(d, img)?;
    }
    let mut cert = EmbeddingCertificate {
        substitution: sigma,
        source,
        target,
        verified_windows: Vec::new(),
    };
    cert.verified_windows = (1..=cap)
        .map(|n| (n, verify_embedding(&cert, n).0))
        .collect();
    Ok(cert)
}

fn assemble_inf(t: &GoodTable, index: usize) -> Result<EmbeddingCertificate, TableError> {
    let field = t.ambient.field().clone();
    if t.rows.is_empty() {
        return Err(TableError::BadChain {
            index,
            reason: "the table has no rows to embed along".into(),
        });
    }
    let min_cols = t.rows.iter().map(|(_, ws)| ws.len()).min().unwrap_or(0);
    let cap = (t.rows.len().min(min_cols)) as u32;
    if cap == 0 {
        return Err(TableError::BadChain {
            index,
            reason: "a row has an empty right side".into(),
        });
    }
    let mut images: BTreeMap<VarId, SparsePoly> = BTreeMap::new();
    for (i, (v, ws)) in t.rows.iter().enumerate() {
        accumulate_images(&mut images, &field, v, &VarId::single("x", i as u32 + 1));
        for (j, w) in ws.iter().enumerate() {
            accumulate_images(
                &mut images,
                &field,
                w,
                &VarId::pair("y", i as u32 + 1, j as u32 + 1),
            );
        }
    }
    build_certificate(&field, images, v_infinity(&field), t.ambient.clone(), cap)
}

fn assemble_fin(t: &GoodTable, r: u32, index: usize) -> Result<EmbeddingCertificate, TableError> {
    let field = t.ambient.field().clone();
    debug_assert_eq!(t.rows.len(), r as usize, "FIN arity disagrees with the rows");

    // The residual cubic of the left column, over the canonical x-variables.
    let third = field
        .scalar_u64(3)
        .inv()
        .expect("3 ≠ 0 in odd characteristic");
    let mut qfs = Vec::with_capacity(t.rows.len());
    for (v, _) in &t.rows {
        qfs.push(QuadraticForm::from_structured(
            &t.ambient.directional_derivative(v),
        )?);
    }
    let mut g = SparsePoly::zero(&field, 3);
    for a in 0..t.rows.len() {
        for b in a..t.rows.len() {
            for c in b..t.rows.len() {
                let triple = &qfs[a].bilinear(&t.rows[b].0, &t.rows[c].0) * &third;
                if triple.is_zero() {
                    continue;
                }
                let mult = if a == b && b == c {
                    1u64
                } else if a == b || b == c {
                    3
                } else {
                    6
                };
                let mono = Monomial::from_powers(&[
                    (VarId::single("x", a as u32 + 1), 1),
                    (VarId::single("x", b as u32 + 1), 1),
                    (VarId::single("x", c as u32 + 1), 1),
                ]);
                g = g.add(&SparsePoly::monomial(
                    &field,
                    mono,
                    &triple * &field.scalar_u64(mult),
                ));
            }
        }
    }
    let cubes = if g.is_zero() {
        Vec::new()
    } else {
        sum_of_cubes(&g)?
    };
    let m = cubes.len();
    let big_m = t.final_row.len();
    if big_m <= m {
        return Err(TableError::BadChain {
            index,
            reason: format!(
                "the final row has {big_m} entries but the kernel reduction consumes {m}; grow it further"
            ),
        });
    }

    // Fold the spent final-row entries into the left column:
    // v_a ← v_a − Σ_t ℓ_t[x_a]·u_t, which cancels g against the cubes
    // Σ (−ℓ_t)³ contributed by u_1..u_m.
    let mut images: BTreeMap<VarId, SparsePoly> = BTreeMap::new();
    for (a, (v, ws)) in t.rows.iter().enumerate() {
        let xa = VarId::single("x", a as u32 + 1);
        let mut vtilde = v.clone();
        for (tix, l) in cubes.iter().enumerate() {
            let c = l.coeff(&Monomial::var(xa.clone()));
            if !c.is_zero() {
                vtilde = vtilde.sub(&t.final_row[tix].scale(&c));
            }
        }
        accumulate_images(&mut images, &field, &vtilde, &xa);
        for (j, w) in ws.iter().enumerate() {
            accumulate_images(
                &mut images,
                &field,
                w,
                &VarId::pair("y", a as u32 + 1, j as u32 + 1),
            );
        }
    }
    for (k, u) in t.final_row.iter().enumerate().skip(m) {
        accumulate_images(
            &mut images,
            &field,
            u,
            &VarId::single("z", (k - m) as u32 + 1),
        );
    }

    let min_cols = t.rows.iter().map(|(_, ws)| ws.len()).min().unwrap_or(usize::MAX);
    let cap = min_cols.min(big_m - m) as u32;
    if cap == 0 {
        return Err(TableError::BadChain {
            index,
            reason: "a row has an empty right side".into(),
        });
    }
    build_certificate(&field, images, v_r(&field, r), t.ambient.clone(), cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{GeneratorTerm, MixedFamily, PowerFamily};
    use rand::Rng;

    fn field() -> Field {
        Field::default_field()
    }

    fn x(i: u32) -> VarId {
        VarId::single("x", i)
    }

    fn y(i: u32, j: u32) -> VarId {
        VarId::pair("y", i, j)
    }

    fn z(i: u32) -> VarId {
        VarId::single("z", i)
    }

    fn unit(f: &Field, v: VarId) -> Vector {
        Vector::unit(f, v)
    }

    fn derivative_form(ambient: &StructuredForm, v: &Vector) -> QuadraticForm {
        QuadraticForm::from_structured(&ambient.directional_derivative(v)).unwrap()
    }

    // -- constraint systems and witness search ------------------------------

    #[test]
    fn empty_system_returns_zero() {
        let f = field();
        let amb = v_infinity(&f);
        let sys = ConstraintSystem::new(&f, 3);
        let w = witness_search(&amb, &sys, 10, 0).unwrap();
        assert!(w.is_zero());
    }

    #[test]
    fn canonical_growth_step_picks_the_first_inner_unit() {
        let f = field();
        let amb = v_infinity(&f);
        let mut sys = ConstraintSystem::new(&f, 3);
        sys.set_cubic(amb.clone(), f.zero()).unwrap();
        let qf = derivative_form(&amb, &unit(&f, x(1)));
        sys.add_quadratic_equality(qf, f.scalar_u64(3)).unwrap();
        let w = witness_search(&amb, &sys, DEFAULT_BUDGET, 7).unwrap();
        assert_eq!(w, unit(&f, y(1, 1)));
    }

    #[test]
    fn contradictory_affine_constraints_are_inconsistent() {
        let f = field();
        let amb = v_infinity(&f);
        let mut sys = ConstraintSystem::new(&f, 2);
        let l = SparsePoly::var(&f, x(1));
        sys.add_linear(l.clone(), f.zero());
        sys.add_linear(l, f.one());
        match witness_search(&amb, &sys, 10, 0) {
            Err(TableError::InconsistentLinearSystem) => {}
            other => panic!("expected an inconsistent system, got {other:?}"),
        }
    }

    #[test]
    fn impossible_targets_exhaust_the_budget() {
        let f = field();
        let amb = v_infinity(&f);
        let qf = derivative_form(&amb, &unit(&f, x(1)));
        let mut sys = ConstraintSystem::new(&f, 2);
        sys.add_quadratic_equality(qf.clone(), f.one()).unwrap();
        sys.add_quadratic_equality(qf, f.scalar_u64(2)).unwrap();
        match witness_search(&amb, &sys, 7, 3) {
            Err(TableError::BudgetExhausted {
                samples,
                nearest_miss,
            }) => {
                assert_eq!(samples, 7);
                assert!(nearest_miss.contains("quadratic equality"));
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn rescaling_meets_a_nonunit_quadratic_target() {
        let f = field();
        let amb = v_infinity(&f);
        // f_{v}(x) = 3 with v = 2·x₁: the fresh inner units give 6, so the
        // witness must be rescaled by a square root of 1/2.
        let v = unit(&f, x(1)).scale(&f.scalar_u64(2));
        let mut sys = ConstraintSystem::new(&f, 3);
        sys.set_cubic(amb.clone(), f.zero()).unwrap();
        let qf = derivative_form(&amb, &v);
        sys.add_quadratic_equality(qf.clone(), f.scalar_u64(3)).unwrap();
        let w = witness_search(&amb, &sys, DEFAULT_BUDGET, 11).unwrap();
        assert!((&qf.evaluate(&w) - &f.scalar_u64(3)).is_zero());
        assert!(amb.evaluate(&w).is_zero());
    }

    #[test]
    fn classification_guards_reject_misfiled_forms() {
        let f = field();
        let amb = v_infinity(&f);
        // Finite strength: the derivative along an inner unit.
        let finite = derivative_form(&amb, &unit(&f, y(1, 1)));
        // Infinite strength: the derivative along an outer unit.
        let infinite = derivative_form(&amb, &unit(&f, x(1)));
        let mut sys = ConstraintSystem::new(&f, 3);
        assert!(matches!(
            sys.add_quadratic_equality(finite.clone(), f.one()),
            Err(TableError::EqualityNeedsInfiniteRank)
        ));
        assert!(matches!(
            sys.add_quadratic_vanishing(infinite),
            Err(TableError::VanishingNeedsFiniteStrength)
        ));
        sys.add_quadratic_vanishing(finite).unwrap();
    }

    // -- goodness ------------------------------------------------------------

    fn manual_table(
        ambient: &StructuredForm,
        mode: TableMode,
        rows: Vec<(Vector, Vec<Vector>)>,
        final_row: Vec<Vector>,
    ) -> GoodTable {
        GoodTable {
            ambient: ambient.clone(),
            mode,
            rows,
            final_row,
        }
    }

    #[test]
    fn canonical_seed_table_is_good() {
        let f = field();
        let amb = v_infinity(&f);
        let t = manual_table(
            &amb,
            TableMode::Inf,
            vec![(unit(&f, x(1)), vec![unit(&f, y(1, 1))])],
            vec![],
        );
        let report = t.check_good();
        assert!(report.ok, "{:?}", report.violation);
    }

    #[test]
    fn duplicate_entries_violate_independence() {
        let f = field();
        let amb = v_infinity(&f);
        let t = manual_table(
            &amb,
            TableMode::Inf,
            vec![(unit(&f, x(1)), vec![unit(&f, y(1, 1)), unit(&f, y(1, 1))])],
            vec![],
        );
        let report = t.check_good();
        assert!(!report.ok);
        assert!(report.violation.unwrap().contains("(a)"));
    }

    #[test]
    fn wrong_trilinear_value_violates_the_pattern() {
        let f = field();
        let amb = v_infinity(&f);
        // w = 2·y[1,1] gives ⟨v₁, w, w⟩ = 4 ≠ 1.
        let w = unit(&f, y(1, 1)).scale(&f.scalar_u64(2));
        let t = manual_table(
            &amb,
            TableMode::Inf,
            vec![(unit(&f, x(1)), vec![w])],
            vec![],
        );
        let report = t.check_good();
        assert!(!report.ok);
        assert!(report.violation.unwrap().contains("(b)"));
    }

    #[test]
    fn dependent_residue_classes_violate_inf_goodness() {
        let f = field();
        let amb = v_infinity(&f);
        // Two left entries whose derivative classes agree: x₁ and
        // x₁ + y[2,1] are independent vectors, but the inner unit adds only
        // a finite-strength derivative, so the classes coincide.
        let t = manual_table(
            &amb,
            TableMode::Inf,
            vec![
                (unit(&f, x(1)), vec![]),
                (unit(&f, x(1)).add(&unit(&f, y(2, 1))), vec![]),
            ],
            vec![],
        );
        let report = t.check_good();
        assert!(!report.ok);
        assert!(report.violation.unwrap().contains("(c)"));
    }

    #[test]
    fn infinite_strength_right_side_violates_fin_goodness() {
        let f = field();
        // Rank-1 canonical part plus an extra mixed family the table ignores:
        // a final-row entry leaning on the extra outer direction has a
        // nonzero residue class.
        let extra = StructuredForm::from_terms(
            &f,
            3,
            vec![GeneratorTerm::Mixed(MixedFamily {
                coeff: f.scalar_u64(3),
                outer: "s".into(),
                outer_start: 1,
                inner: "t".into(),
                inner_exp: 2,
                inner_start: 1,
            })],
        );
        let amb = v_r(&f, 1).add(&extra);
        let u = unit(&f, z(1)).add(&unit(&f, VarId::single("s", 1)));
        let t = manual_table(
            &amb,
            TableMode::Fin(1),
            vec![(unit(&f, x(1)), vec![unit(&f, y(1, 1))])],
            vec![u],
        );
        let report = t.check_good();
        assert!(!report.ok);
        assert!(report.violation.unwrap().contains("(c)"));
    }

    #[test]
    fn growth_rejects_bad_input_tables() {
        let f = field();
        let amb = v_infinity(&f);
        let t = manual_table(
            &amb,
            TableMode::Inf,
            vec![(unit(&f, x(1)), vec![unit(&f, y(1, 1)), unit(&f, y(1, 1))])],
            vec![],
        );
        match t.grow_row(1, 10, 0) {
            Err(TableError::NotGood(msg)) => assert!(msg.contains("(a)")),
            other => panic!("expected a goodness rejection, got {other:?}"),
        }
    }

    // -- growth --------------------------------------------------------------

    #[test]
    fn add_row_walks_the_outer_units() {
        let f = field();
        let t0 = GoodTable::new_inf(&v_infinity(&f)).unwrap();
        let t1 = t0.add_row(DEFAULT_BUDGET, 1).unwrap();
        assert_eq!(t1.rows()[0].0, unit(&f, x(1)));
        let t2 = t1.add_row(DEFAULT_BUDGET, 2).unwrap();
        assert_eq!(t2.rows()[1].0, unit(&f, x(2)));
        assert!(t2.check_good().ok);
    }

    #[test]
    fn add_row_exhausts_a_finite_rank_ambient() {
        let f = field();
        let t0 = GoodTable::new_inf(&v_r(&f, 2)).unwrap();
        let t1 = t0.add_row(DEFAULT_BUDGET, 1).unwrap();
        let t2 = t1.add_row(DEFAULT_BUDGET, 2).unwrap();
        assert_eq!(t2.rows().len(), 2);
        match t2.add_row(DEFAULT_BUDGET, 3) {
            Err(TableError::RankExhausted { rank: 2 }) => {}
            other => panic!("expected rank exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn grow_row_appends_fresh_inner_units() {
        let f = field();
        let t = GoodTable::new_inf(&v_infinity(&f))
            .unwrap()
            .add_row(DEFAULT_BUDGET, 1)
            .unwrap()
            .grow_row(1, DEFAULT_BUDGET, 2)
            .unwrap()
            .grow_row(1, DEFAULT_BUDGET, 3)
            .unwrap();
        assert_eq!(t.rows()[0].1, vec![unit(&f, y(1, 1)), unit(&f, y(1, 2))]);
        assert!(matches!(
            t.grow_row(5, DEFAULT_BUDGET, 4),
            Err(TableError::RowOutOfRange { row: 5, rows: 1 })
        ));
    }

    #[test]
    fn fin_tables_seed_and_grow_canonically() {
        let f = field();
        let t0 = GoodTable::new_fin(&v_r(&f, 1)).unwrap();
        assert_eq!(t0.mode(), TableMode::Fin(1));
        assert_eq!(t0.rows()[0].0, unit(&f, x(1)));
        let t1 = t0.grow_row(1, DEFAULT_BUDGET, 5).unwrap();
        assert_eq!(t1.rows()[0].1, vec![unit(&f, y(1, 1))]);
        let t2 = t1.grow_final_row(DEFAULT_BUDGET, 6).unwrap();
        assert_eq!(t2.final_row(), &[unit(&f, z(1))]);
        let t3 = t2.grow_final_row(DEFAULT_BUDGET, 7).unwrap();
        assert_eq!(t3.final_row(), &[unit(&f, z(1)), unit(&f, z(2))]);
        assert!(t3.check_good().ok);
    }

    #[test]
    fn mode_guards_reject_mismatched_operations() {
        let f = field();
        let inf = GoodTable::new_inf(&v_infinity(&f)).unwrap();
        assert!(matches!(
            inf.grow_final_row(10, 0),
            Err(TableError::WrongMode { .. })
        ));
        let fin = GoodTable::new_fin(&v_r(&f, 1)).unwrap();
        assert!(matches!(
            fin.add_row(10, 0),
            Err(TableError::WrongMode { .. })
        ));
        assert!(matches!(
            GoodTable::new_fin(&v_infinity(&f)),
            Err(TableError::FinAmbient { .. })
        ));
    }

    #[test]
    fn growth_is_deterministic_under_pinned_seeds() {
        let f = field();
        let grow = || {
            GoodTable::new_inf(&v_infinity(&f))
                .unwrap()
                .add_row(DEFAULT_BUDGET, 41)
                .unwrap()
                .grow_row(1, DEFAULT_BUDGET, 42)
                .unwrap()
                .add_row(DEFAULT_BUDGET, 43)
                .unwrap()
                .grow_row(2, DEFAULT_BUDGET, 44)
                .unwrap()
        };
        let a = grow();
        let b = grow();
        assert_eq!(a.rows(), b.rows());
        assert_eq!(a.final_row(), b.final_row());
    }

    #[test]
    fn random_growth_sequences_stay_good() {
        let f = field();
        let ambients = [v_infinity(&f), v_r(&f, 2)];
        for seq in 0..10u64 {
            let amb = &ambients[(seq % 2) as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seq);
            let mut t = GoodTable::new_inf(amb).unwrap();
            for step in 0..6 {
                let grown = if t.rows().is_empty() || rng.gen_bool(0.4) {
                    t.add_row(DEFAULT_BUDGET, seq * 100 + step)
                } else {
                    let row = rng.gen_range(1..=t.rows().len());
                    t.grow_row(row, DEFAULT_BUDGET, seq * 100 + step)
                };
                match grown {
                    Ok(next) => {
                        assert!(next.check_good().ok, "sequence {seq} step {step}");
                        t = next;
                    }
                    Err(TableError::RankExhausted { .. }) => break,
                    Err(err) => panic!("sequence {seq} step {step}: {err}"),
                }
            }
        }
    }

    // -- assembly ------------------------------------------------------------

    /// Grow an INF chain with `rows` rows and `cols` entries per row in the
    /// given ambient, recording each intermediate table.
    fn inf_chain(ambient: &StructuredForm, rows: usize, cols: usize) -> Vec<GoodTable> {
        let mut chain = Vec::new();
        let mut t = GoodTable::new_inf(ambient).unwrap();
        let mut seed = 1000;
        for _ in 0..rows {
            t = t.add_row(DEFAULT_BUDGET, seed).unwrap();
            seed += 1;
            chain.push(t.clone());
        }
        for row in 1..=rows {
            for _ in 0..cols {
                t = t.grow_row(row, DEFAULT_BUDGET, seed).unwrap();
                seed += 1;
                chain.push(t.clone());
            }
        }
        chain
    }

    #[test]
    fn canonical_inf_chain_assembles_to_the_identity() {
        let f = field();
        let chain = inf_chain(&v_infinity(&f), 2, 2);
        let cert = assemble_embedding(&chain).unwrap();
        assert_eq!(
            cert.verified_windows,
            vec![(1, true), (2, true)],
            "all caps verified"
        );
        // The canonical growth path reads back the identity on the used
        // coordinates.
        for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(
                cert.substitution.image_of(&y(i, j)),
                SparsePoly::var(&f, y(i, j))
            );
        }
        for i in [1, 2] {
            assert_eq!(cert.substitution.image_of(&x(i)), SparsePoly::var(&f, x(i)));
        }
    }

    #[test]
    fn deep_inf_chain_verifies_on_wide_windows() {
        let f = field();
        let chain = inf_chain(&v_infinity(&f), 5, 5);
        let cert = assemble_embedding(&chain).unwrap();
        assert!(cert.all_verified());
        assert_eq!(cert.verified_windows.len(), 5);
        let (ok, err) = verify_embedding(&cert, 5);
        assert!(ok, "{err:?}");
    }

    #[test]
    fn fin_chain_without_residual_cubic_keeps_every_cube() {
        let f = field();
        let mut chain = Vec::new();
        let mut t = GoodTable::new_fin(&v_r(&f, 1)).unwrap();
        let mut seed = 2000;
        for _ in 0..2 {
            t = t.grow_row(1, DEFAULT_BUDGET, seed).unwrap();
            seed += 1;
            chain.push(t.clone());
        }
        for _ in 0..3 {
            t = t.grow_final_row(DEFAULT_BUDGET, seed).unwrap();
            seed += 1;
            chain.push(t.clone());
        }
        let cert = assemble_embedding(&chain).unwrap();
        assert!(cert.all_verified());
        assert_eq!(cert.verified_windows.len(), 2);
        // No residual cubic: the final row maps straight onto the pure cubes.
        for k in [1, 2, 3] {
            assert_eq!(cert.substitution.image_of(&z(k)), SparsePoly::var(&f, z(k)));
        }
    }

    #[test]
    fn perturbed_fin_chain_spends_one_cube_on_the_reduction() {
        let f = field();
        let cube = SparsePoly::monomial(&f, Monomial::from_powers(&[(x(1), 3)]), f.one());
        let amb = v_r(&f, 2).add(&StructuredForm::finite(cube));
        let mut chain = Vec::new();
        let mut t = GoodTable::new_fin(&amb).unwrap();
        assert_eq!(t.mode(), TableMode::Fin(2));
        let mut seed = 3000;
        for row in [1, 2] {
            for _ in 0..3 {
                t = t.grow_row(row, DEFAULT_BUDGET, seed).unwrap();
                seed += 1;
                chain.push(t.clone());
            }
        }
        for _ in 0..4 {
            t = t.grow_final_row(DEFAULT_BUDGET, seed).unwrap();
            seed += 1;
            chain.push(t.clone());
        }
        let cert = assemble_embedding(&chain).unwrap();
        assert_eq!(cert.verified_windows, vec![(1, true), (2, true), (3, true)]);
        // The residual cubic x₁³ costs exactly one final-row entry: the
        // ambient's first pure cube is redirected to cancel it, and the
        // remaining ones shift down by one.
        let neg_x1 = SparsePoly::var(&f, x(1)).scale(&(-&f.one()));
        assert_eq!(cert.substitution.image_of(&z(1)), neg_x1);
        for k in [2, 3, 4] {
            assert_eq!(
                cert.substitution.image_of(&z(k)),
                SparsePoly::var(&f, z(k - 1))
            );
        }
        let (ok, err) = verify_embedding(&cert, 3);
        assert!(ok, "{err:?}");
    }

    #[test]
    fn rank_zero_ambient_reaches_the_pure_cube_space() {
        let f = field();
        let amb = StructuredForm::from_terms(
            &f,
            3,
            vec![GeneratorTerm::Power(PowerFamily {
                family: "w".into(),
                fixed: None,
                coeff: f.one(),
                exp: 3,
                start: 1,
            })],
        );
        let t0 = GoodTable::new_fin(&amb).unwrap();
        assert_eq!(t0.mode(), TableMode::Fin(0));
        let t1 = t0.grow_final_row(DEFAULT_BUDGET, 1).unwrap();
        let t2 = t1.grow_final_row(DEFAULT_BUDGET, 2).unwrap();
        let cert = assemble_embedding(&[t1, t2]).unwrap();
        assert!(cert.all_verified());
        assert_eq!(cert.verified_windows.len(), 2);
        assert_eq!(
            cert.substitution.image_of(&VarId::single("w", 1)),
            SparsePoly::var(&f, z(1))
        );
    }

    #[test]
    fn assembly_rejects_broken_chains() {
        let f = field();
        let chain = inf_chain(&v_infinity(&f), 2, 1);
        // Reversed order shrinks: index 1 breaks.
        let reversed: Vec<GoodTable> = chain.iter().rev().cloned().collect();
        match assemble_embedding(&reversed) {
            Err(TableError::BadChain { index: 1, .. }) => {}
            other => panic!("expected a chain break at index 1, got {other:?}"),
        }
        // A bad table inside the chain is caught with its index.
        let mut broken = chain.clone();
        broken[0] = manual_table(
            &v_infinity(&f),
            TableMode::Inf,
            vec![(unit(&f, x(1)), vec![unit(&f, y(1, 1)), unit(&f, y(1, 1))])],
            vec![],
        );
        match assemble_embedding(&broken) {
            Err(TableError::BadChain { index: 0, reason }) => {
                assert!(reason.contains("(a)"));
            }
            other => panic!("expected a bad table at index 0, got {other:?}"),
        }
        assert!(matches!(
            assemble_embedding(&[]),
            Err(TableError::BadChain { index: 0, .. })
        ));
    }
}
