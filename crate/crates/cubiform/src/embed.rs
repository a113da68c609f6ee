//! Constructive embeddings into the canonical cubic spaces.
//!
//! An embedding of a cubic form `W` into a target space sends each ambient
//! variable of the target to a linear form in the variables of `W` so that
//! the target form pulls back to `W` exactly, window by window. Three
//! builders live here:
//!
//! * [`greedy_grouping`] factors a finite cubic as an ordered sum
//!   `Σ wᵢ·gᵢ` with quadratic `gᵢ` free of the earlier pivots — the row
//!   skeleton for the mixed-space embedding.
//! * [`sum_of_cubes`] rewrites any finite cubic as a sum of cubes of linear
//!   forms via the classical two- and four-cube identities, at most four
//!   cubes per monomial.
//! * [`embed_into_v_infinity`] and [`embed_into_v_r`] produce verified
//!   [`EmbeddingCertificate`]s into the mixed space `Σ 3·xᵢ·Σⱼ yᵢⱼ²`
//!   and into the rank-`r` space `Σ_{t≤r} 3·x_t·Σⱼ y_tⱼ² + Σ z_k³`. The
//!   rank-`r` builder first measures the residual rank exactly, changes
//!   basis so only the chosen pivot directions carry nonzero derivative
//!   classes, splits the form into per-pivot quadratic groups plus a
//!   cube-friendly remainder, and composes the result with the inverse
//!   basis change.
//!
//! Every certificate records the window checks it passed. Verification is
//! exact arithmetic: the pulled-back window polynomial must equal the
//! source window monomial for monomial.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::canon::{v_infinity, v_r};
use crate::forms::{GeneratorTerm, MixedFamily, PowerFamily, StructuredForm};
use crate::linalg::Matrix;
use crate::poly::{Monomial, SparsePoly};
use crate::quad::{QuadError, QuadraticForm, Rank};
use crate::rrk::{class_table, residual_rank, RrkError, SymKey};
use crate::scalar::{Field, Scalar};
use crate::subst::{
    substitute_structured, IndexExpr, IndexMatcher, IndexSel, SubstError, Substitution, TailRule,
    UnmatchedPolicy,
};
use crate::vars::VarId;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("expected a cubic form, got degree {got}")]
    WrongDegree { got: u32 },
    #[error("residual rank {found} exceeds the target rank {allowed}")]
    RankExceeded { found: Rank, allowed: u32 },
    #[error("no single-variable row image exists: {0}")]
    UnsupportedShape(String),
    #[error(transparent)]
    Ranking(#[from] RrkError),
    #[error(transparent)]
    Substitution(#[from] SubstError),
    #[error(transparent)]
    Quadratic(#[from] QuadError),
}

/// A cubic polynomial written as an ordered sum `Σ wᵢ·gᵢ` with each `gᵢ`
/// quadratic and free of the earlier pivots `w₁, …, wᵢ₋₁`.
#[derive(Clone, Debug)]
pub struct GroupedForm {
    field: Field,
    groups: Vec<(VarId, QuadraticForm)>,
}

impl GroupedForm {
    pub fn groups(&self) -> &[(VarId, QuadraticForm)] {
        &self.groups
    }

    /// Re-expand `Σ wᵢ·gᵢ` (finite groups only).
    pub fn re_expand(&self) -> SparsePoly {
        let mut out = SparsePoly::zero(&self.field, 3);
        for (w, g) in &self.groups {
            debug_assert!(g.is_finitely_supported());
            out = out.add(&SparsePoly::var(&self.field, w.clone()).mul(&g.finite_part()));
        }
        out
    }

    /// Whether each group avoids every earlier pivot.
    pub fn respects_pivot_order(&self) -> bool {
        let mut seen: BTreeSet<VarId> = BTreeSet::new();
        for (w, g) in &self.groups {
            for v in g.support() {
                if seen.contains(&v) {
                    return false;
                }
            }
            for pf in g.tails() {
                let hit = seen.iter().any(|u| {
                    u.family() == pf.family
                        && match (pf.fixed, u.idx2()) {
                            (None, None) => u.idx1() >= pf.start,
                            (Some(j), Some(k)) => u.idx1() == j && k >= pf.start,
                            _ => false,
                        }
                });
                if hit {
                    return false;
                }
            }
            seen.insert(w.clone());
        }
        true
    }
}

/// Remove one power of `w` from a monomial that contains it.
fn divide_once(m: &Monomial, w: &VarId) -> Monomial {
    debug_assert!(m.exponent(w) > 0);
    let powers: Vec<(VarId, u32)> = m
        .powers()
        .map(|(v, e)| (v.clone(), if v == w { e - 1 } else { e }))
        .filter(|(_, e)| *e > 0)
        .collect();
    Monomial::from_powers(&powers)
}

/// Factor a finite cubic greedily over its support in variable order: each
/// pivot takes every remaining monomial it divides, leaving a quadratic
/// cofactor that cannot mention any earlier pivot.
pub fn greedy_grouping(p: &SparsePoly) -> Result<GroupedForm, EmbedError> {
    if p.degree() != 3 {
        return Err(EmbedError::WrongDegree { got: p.degree() });
    }
    let field = p.field().clone();
    let mut remaining: Vec<(Monomial, Scalar)> =
        p.terms().map(|(m, c)| (m.clone(), c.clone())).collect();
    let mut groups = Vec::new();
    for w in p.support() {
        let (mine, rest): (Vec<_>, Vec<_>) = remaining
            .into_iter()
            .partition(|(m, _)| m.exponent(&w) > 0);
        remaining = rest;
        if mine.is_empty() {
            continue;
        }
        let cofactor = SparsePoly::from_terms(
            &field,
            2,
            mine.into_iter().map(|(m, c)| (divide_once(&m, &w), c)),
        );
        groups.push((w, QuadraticForm::from_poly(&cofactor)?));
    }
    debug_assert!(remaining.is_empty(), "every monomial is divisible by its own variables");
    Ok(GroupedForm { field, groups })
}

/// Write a finite cubic exactly as `Σⱼ mⱼ³` with linear `mⱼ`.
///
/// Per monomial: `c·u³` is one cube; `c·u·v²` uses
/// `6uv² = (u+v)³ + (u−v)³ − 2u³` (three cubes); `c·u·v·w` uses
/// `24uvw = (u+v+w)³ + (u−v−w)³ − (u+v−w)³ − (u−v+w)³` (four cubes).
/// Leading coefficients fold in through cube roots, extending the scalar
/// tower when a root is missing. At most four cubes per source monomial.
pub fn sum_of_cubes(p: &SparsePoly) -> Result<Vec<SparsePoly>, EmbedError> {
    if p.degree() != 3 {
        return Err(EmbedError::WrongDegree { got: p.degree() });
    }
    let field = p.field().clone();
    let sixth = field
        .scalar_u64(6)
        .inv()
        .expect("6 is invertible in the base field");
    let twenty_fourth = field
        .scalar_u64(24)
        .inv()
        .expect("24 is invertible in the base field");
    let var = |v: &VarId| SparsePoly::var(&field, v.clone());
    let mut cubes = Vec::new();
    for (m, c) in p.terms() {
        let pattern: Vec<(VarId, u32)> = m.powers().map(|(v, e)| (v.clone(), e)).collect();
        match pattern.as_slice() {
            [(u, 3)] => cubes.push(var(u).scale(&c.cbrt_or_extend())),
            [(a, ea), (b, _)] => {
                let (u, v) = if *ea == 1 { (a, b) } else { (b, a) };
                let s = c * &sixth;
                let k = s.cbrt_or_extend();
                let minus_two_s = -&(&s + &s);
                cubes.push(var(u).add(&var(v)).scale(&k));
                cubes.push(var(u).sub(&var(v)).scale(&k));
                cubes.push(var(u).scale(&minus_two_s.cbrt_or_extend()));
            }
            [(u, 1), (v, 1), (w, 1)] => {
                let s = c * &twenty_fourth;
                let k = s.cbrt_or_extend();
                let k_neg = (-&s).cbrt_or_extend();
                cubes.push(var(u).add(&var(v)).add(&var(w)).scale(&k));
                cubes.push(var(u).sub(&var(v)).sub(&var(w)).scale(&k));
                cubes.push(var(u).add(&var(v)).sub(&var(w)).scale(&k_neg));
                cubes.push(var(u).sub(&var(v)).add(&var(w)).scale(&k_neg));
            }
            _ => unreachable!("a degree-3 monomial mentions at most three variables"),
        }
    }
    Ok(cubes)
}

/// A substitution together with the exact window checks it passed: the
/// target form pulled back through the substitution equals the source on
/// every verified window.
#[derive(Clone, Debug)]
pub struct EmbeddingCertificate {
    pub substitution: Substitution,
    pub source: StructuredForm,
    pub target: StructuredForm,
    pub verified_windows: Vec<(u32, bool)>,
}

impl EmbeddingCertificate {
    pub fn all_verified(&self) -> bool {
        !self.verified_windows.is_empty() && self.verified_windows.iter().all(|(_, ok)| *ok)
    }
}

/// Recompute both sides of a certificate on the window `[1..n]` and compare
/// exactly. On mismatch, names the first differing monomial. Linearity and
/// row-finiteness of the substitution itself are enforced when rows are
/// installed, so window equality is the one remaining question.
pub fn verify_embedding(cert: &EmbeddingCertificate, n: u32) -> (bool, Option<String>) {
    let got = cert.substitution.apply_window(&cert.target, n);
    let want = cert.source.truncate(n);
    let mut monomials: BTreeSet<Monomial> = got.terms().map(|(m, _)| m.clone()).collect();
    monomials.extend(want.terms().map(|(m, _)| m.clone()));
    for m in monomials {
        let delta = &got.coeff(&m) - &want.coeff(&m);
        if !delta.is_zero() {
            return (
                false,
                Some(format!("window {n}: (image − source) starts with {delta}·{m}")),
            );
        }
    }
    (true, None)
}

fn scale_quadratic(q: &QuadraticForm, a: &Scalar) -> QuadraticForm {
    let field = q.field().clone();
    let mut out = QuadraticForm::zero(&field);
    for ((u, v), c) in q.gram_entries() {
        out.add_entry(u.clone(), v.clone(), c * a);
    }
    for pf in q.tails() {
        let mut pf2 = pf.clone();
        pf2.coeff = &pf.coeff * a;
        out.add_tail(pf2).expect("tail exponent unchanged");
    }
    out
}

/// Whether a sum-of-squares decomposition of `q` needs no new square roots:
/// every tail coefficient and every diagonal entry of the finite part must
/// already be a square.
fn sos_is_root_free(q: &QuadraticForm) -> bool {
    if !q.tails().iter().all(|pf| pf.coeff.is_square()) {
        return false;
    }
    let finite =
        QuadraticForm::from_poly(&q.finite_part()).expect("finite part is quadratic");
    match finite.diagonalize("u") {
        Ok(d) => d.diag.iter().all(|c| c.is_zero() || c.is_square()),
        Err(_) => false,
    }
}

/// Install one target row `3·x[row]·Σⱼ y[row,j]²` so that it pulls back to
/// `pivot · g` exactly: `x[row] ↦ α·pivot` and the `y[row,·]` images carry a
/// sum-of-squares decomposition of `g/(3α)`. The scale `α` is chosen to
/// avoid square-root extensions when either `g/3` or `g` decomposes
/// root-free; otherwise roots extend the tower and the identity still holds
/// exactly.
fn install_row(
    sigma: &mut Substitution,
    field: &Field,
    row: u32,
    pivot: &SparsePoly,
    g: &QuadraticForm,
) -> Result<(), EmbedError> {
    let third = field
        .scalar_u64(3)
        .inv()
        .expect("3 is invertible in the base field");
    let g_third = scale_quadratic(g, &third);
    let (alpha, sos_input) = if sos_is_root_free(&g_third) {
        (field.one(), g_third)
    } else if sos_is_root_free(g) {
        (third.clone(), g.clone())
    } else {
        (field.one(), g_third)
    };
    sigma.map(VarId::single("x", row), pivot.scale(&alpha))?;
    let sos = sos_input.sos_decompose();
    for (j, ell) in sos.finite.iter().enumerate() {
        sigma.map(VarId::pair("y", row, 1 + j as u32), ell.clone())?;
    }
    let base = sos.finite.len() as u32;
    let nstreams = sos.streams.len() as u32;
    for (b, st) in sos.streams.iter().enumerate() {
        let first = base + 1 + b as u32;
        let offset = IndexExpr::Affine {
            from: IndexSel::Second,
            base: first,
            div: nstreams,
            offset: st.start,
        };
        let (i1, i2) = match st.fixed {
            None => (offset, None),
            Some(fx) => (IndexExpr::Const(fx), Some(offset)),
        };
        sigma.add_rule(TailRule::new(
            "y",
            IndexMatcher::exact(row),
            Some(IndexMatcher::stride(first, nstreams)),
            st.scale.clone(),
            &st.family,
            i1,
            i2,
        )?);
    }
    Ok(())
}

/// Index expressions sending a stride class of block `b` (first indices
/// `i ≡ base+b (mod nblocks)`, `i ≥ base+b`) onto the members of `pf` in
/// order.
fn block_images(pf: &PowerFamily, first: u32, nblocks: u32) -> (IndexExpr, Option<IndexExpr>) {
    let running = IndexExpr::Affine {
        from: IndexSel::First,
        base: first,
        div: nblocks,
        offset: pf.start,
    };
    match pf.fixed {
        None => (running, None),
        Some(fx) => (IndexExpr::Const(fx), Some(running)),
    }
}

/// Embed a cubic form into the mixed space `Σᵢ 3·xᵢ·Σⱼ yᵢⱼ²`.
///
/// Finite content is grouped greedily into rows `pivot·g`; each tail scaled
/// by a linear head takes one more row; unbounded mixed and pure-power
/// generators interleave into stride classes of rows, one class per
/// generator, so that every row still pulls back to its slice of the source
/// exactly. Ambient variables not used by any row retire to zero.
pub fn embed_into_v_infinity(
    w: &StructuredForm,
    windows: &[u32],
) -> Result<EmbeddingCertificate, EmbedError> {
    if w.degree() != 3 {
        return Err(EmbedError::WrongDegree { got: w.degree() });
    }
    let field = w.field().clone();
    let third = field
        .scalar_u64(3)
        .inv()
        .expect("3 is invertible in the base field");

    let mut finite_acc = SparsePoly::zero(&field, 3);
    let mut scaled_rows: Vec<(SparsePoly, PowerFamily)> = Vec::new();
    let mut mixed_blocks: Vec<MixedFamily> = Vec::new();
    let mut power_blocks: Vec<PowerFamily> = Vec::new();
    for term in w.terms() {
        match term {
            GeneratorTerm::Finite(p) => finite_acc = finite_acc.add(p),
            GeneratorTerm::Power(pf) => power_blocks.push(pf.clone()),
            GeneratorTerm::Mixed(mf) => mixed_blocks.push(mf.clone()),
            GeneratorTerm::Scaled(p, pf) => match p.degree() {
                0 => {
                    let mut pf2 = pf.clone();
                    pf2.coeff = &pf.coeff * &p.coeff(&Monomial::one());
                    if !pf2.coeff.is_zero() {
                        power_blocks.push(pf2);
                    }
                }
                1 => scaled_rows.push((p.clone(), pf.clone())),
                _ => {
                    return Err(EmbedError::UnsupportedShape(
                        "a square tail scaled by a non-linear head needs a product row".into(),
                    ))
                }
            },
        }
    }

    let mut sigma = Substitution::new(&field, UnmatchedPolicy::Zero);
    let mut row = 0u32;
    for (pivot, g) in greedy_grouping(&finite_acc)?.groups {
        row += 1;
        install_row(&mut sigma, &field, row, &SparsePoly::var(&field, pivot), &g)?;
    }
    for (p, pf) in &scaled_rows {
        row += 1;
        sigma.map(VarId::single("x", row), p.scale(&(&pf.coeff * &third)))?;
        let offset = IndexExpr::shift(IndexSel::Second, 1, pf.start);
        let (i1, i2) = match pf.fixed {
            None => (offset, None),
            Some(fx) => (IndexExpr::Const(fx), Some(offset)),
        };
        sigma.add_rule(TailRule::new(
            "y",
            IndexMatcher::exact(row),
            Some(IndexMatcher::from(1)),
            field.one(),
            &pf.family,
            i1,
            i2,
        )?);
    }

    let base0 = row + 1;
    let nblocks = (mixed_blocks.len() + power_blocks.len()) as u32;
    let mut b = 0u32;
    for mf in &mixed_blocks {
        let first = base0 + b;
        let matcher = IndexMatcher::stride(first, nblocks);
        let outer = IndexExpr::Affine {
            from: IndexSel::First,
            base: first,
            div: nblocks,
            offset: mf.outer_start,
        };
        sigma.add_rule(TailRule::new(
            "x",
            matcher.clone(),
            None,
            &mf.coeff * &third,
            &mf.outer,
            outer.clone(),
            None,
        )?);
        sigma.add_rule(TailRule::new(
            "y",
            matcher,
            Some(IndexMatcher::from(1)),
            field.one(),
            &mf.inner,
            outer,
            Some(IndexExpr::shift(IndexSel::Second, 1, mf.inner_start)),
        )?);
        b += 1;
    }
    for pf in &power_blocks {
        let first = base0 + b;
        let matcher = IndexMatcher::stride(first, nblocks);
        let (i1, i2) = block_images(pf, first, nblocks);
        sigma.add_rule(TailRule::new(
            "x",
            matcher.clone(),
            None,
            &pf.coeff * &third,
            &pf.family,
            i1.clone(),
            i2.clone(),
        )?);
        sigma.add_rule(TailRule::new(
            "y",
            matcher,
            Some(IndexMatcher::exact(1)),
            field.one(),
            &pf.family,
            i1,
            i2,
        )?);
        b += 1;
    }

    finish_certificate(sigma, w.clone(), v_infinity(&field), windows)
}

fn finish_certificate(
    substitution: Substitution,
    source: StructuredForm,
    target: StructuredForm,
    windows: &[u32],
) -> Result<EmbeddingCertificate, EmbedError> {
    let mut cert = EmbeddingCertificate {
        substitution,
        source,
        target,
        verified_windows: Vec::new(),
    };
    for &n in windows {
        let (ok, _) = verify_embedding(&cert, n);
        cert.verified_windows.push((n, ok));
    }
    Ok(cert)
}

/// Embed a cubic form of finite residual rank at most `r` into
/// `V(r) = Σ_{t≤r} 3·x_t·Σⱼ y_tⱼ² + Σ_k z_k³`.
///
/// The derivative-class table of the source picks greedy pivot directions;
/// if dependent directions carry nonzero classes, a unipotent basis change
/// concentrates every class onto the pivots first. Each pivot direction
/// then takes one `x`-row carrying its tail content as a sum of squares;
/// everything of finite strength drains into the cube segment through
/// [`sum_of_cubes`] and per-generator stride classes of `z`-rows. The
/// returned substitution is the row map composed with the inverse basis
/// change, so it embeds the original form.
pub fn embed_into_v_r(
    w: &StructuredForm,
    r: u32,
    windows: &[u32],
) -> Result<EmbeddingCertificate, EmbedError> {
    if w.degree() != 3 {
        return Err(EmbedError::WrongDegree { got: w.degree() });
    }
    let field = w.field().clone();
    let report = residual_rank(w)?;
    match report.value {
        Rank::Infinite => {
            return Err(EmbedError::RankExceeded {
                found: Rank::Infinite,
                allowed: r,
            })
        }
        Rank::Finite(k) if k > r as usize => {
            return Err(EmbedError::RankExceeded {
                found: report.value,
                allowed: r,
            })
        }
        Rank::Finite(_) => {}
    }

    // Greedy pivot directions and the dependent directions' coordinates.
    let table = class_table(w)?;
    debug_assert!(table.tails.is_empty(), "finite rank leaves no tail classes");
    let mut reducer = crate::rrk::SparseReducer::new(field.clone());
    let mut basis: Vec<(VarId, BTreeMap<SymKey, Scalar>)> = Vec::new();
    let mut excess: Vec<(VarId, BTreeMap<SymKey, Scalar>)> = Vec::new();
    for (v, row) in &table.rows {
        if reducer.insert(row.clone()) {
            basis.push((v.clone(), row.clone()));
        } else {
            excess.push((v.clone(), row.clone()));
        }
    }

    let syms: Vec<SymKey> = {
        let mut set: BTreeSet<SymKey> = BTreeSet::new();
        for (_, row) in basis.iter().chain(excess.iter()) {
            set.extend(row.keys().cloned());
        }
        set.into_iter().collect()
    };
    let column = |row: &BTreeMap<SymKey, Scalar>| -> Vec<Scalar> {
        syms.iter()
            .map(|s| row.get(s).cloned().unwrap_or_else(|| field.zero()))
            .collect()
    };
    let mut corrections: Vec<(VarId, Vec<Scalar>)> = Vec::new();
    if !excess.is_empty() {
        let a_rows: Vec<Vec<Scalar>> = (0..syms.len())
            .map(|s| {
                basis
                    .iter()
                    .map(|(_, row)| {
                        row.get(&syms[s]).cloned().unwrap_or_else(|| field.zero())
                    })
                    .collect()
            })
            .collect();
        let a = Matrix::from_rows(&field, a_rows);
        for (u, row) in &excess {
            let alpha = a
                .solve(&column(row))
                .expect("a dependent class lies in the span of the pivots");
            corrections.push((u.clone(), alpha));
        }
    }

    // Unipotent basis change concentrating every class on the pivots:
    // pivot ↦ pivot − Σ α·(dependent direction); its inverse flips the sign.
    let mut phi = Substitution::new(&field, UnmatchedPolicy::Keep);
    let mut phi_inv = Substitution::new(&field, UnmatchedPolicy::Keep);
    if !corrections.is_empty() {
        for (t, (d, _)) in basis.iter().enumerate() {
            let mut img = SparsePoly::var(&field, d.clone());
            let mut img_inv = img.clone();
            for (u, alpha) in &corrections {
                if alpha[t].is_zero() {
                    continue;
                }
                let up = SparsePoly::var(&field, u.clone()).scale(&alpha[t]);
                img = img.sub(&up);
                img_inv = img_inv.add(&up);
            }
            phi.map(d.clone(), img)?;
            phi_inv.map(d.clone(), img_inv)?;
        }
    }
    let w2 = if corrections.is_empty() {
        w.clone()
    } else {
        substitute_structured(w, &phi)?
    };

    let basis_set: BTreeSet<VarId> = basis.iter().map(|(d, _)| d.clone()).collect();
    {
        let check = class_table(&w2)?;
        for (v, row) in &check.rows {
            if !basis_set.contains(v) && !row.is_empty() {
                return Err(EmbedError::UnsupportedShape(format!(
                    "derivative class at {v} survives the basis change"
                )));
            }
        }
    }

    // Split the adjusted form into per-pivot groups, scaled/mixed leftovers
    // whose classes all vanish, pure cube streams, and a finite remainder.
    let mut groups: BTreeMap<VarId, QuadraticForm> = basis_set
        .iter()
        .map(|d| (d.clone(), QuadraticForm::zero(&field)))
        .collect();
    let mut finite_acc = SparsePoly::zero(&field, 3);
    let mut power_left: Vec<PowerFamily> = Vec::new();
    let mut scaled_left: Vec<(SparsePoly, u32, SymKey)> = Vec::new();
    let mut mixed_left: Vec<MixedFamily> = Vec::new();

    let push_scaled = |scaled_left: &mut Vec<(SparsePoly, u32, SymKey)>,
                           head: SparsePoly,
                           pf: &PowerFamily| {
        let q = head.scale(&pf.coeff);
        if !q.is_zero() {
            scaled_left.push((q, pf.start, (pf.family.clone(), pf.fixed)));
        }
    };

    for term in w2.terms() {
        match term {
            GeneratorTerm::Finite(p) => finite_acc = finite_acc.add(p),
            GeneratorTerm::Power(pf) => power_left.push(pf.clone()),
            GeneratorTerm::Mixed(mf) => mixed_left.push(mf.clone()),
            GeneratorTerm::Scaled(p, pf) => match p.degree() {
                0 => {
                    let mut pf2 = pf.clone();
                    pf2.coeff = &pf.coeff * &p.coeff(&Monomial::one());
                    if !pf2.coeff.is_zero() {
                        power_left.push(pf2);
                    }
                }
                1 => {
                    let mut rest = SparsePoly::zero(&field, 1);
                    for (m, c) in p.terms() {
                        let v = m.vars().next().expect("linear monomial").clone();
                        if let Some(g) = groups.get_mut(&v) {
                            let mut pf2 = pf.clone();
                            pf2.coeff = &pf.coeff * c;
                            g.add_tail(pf2)?;
                        } else {
                            rest = rest.add(
                                &SparsePoly::var(&field, v).scale(c),
                            );
                        }
                    }
                    push_scaled(&mut scaled_left, rest, pf);
                }
                _ => {
                    return Err(EmbedError::UnsupportedShape(
                        "a square tail scaled by a non-linear head needs a product row".into(),
                    ))
                }
            },
        }
    }

    // Mixed leftovers, per (outer, inner) family pair: pivot indices take
    // their inner tails as group rows, bounded ranges spill into scaled
    // leftovers, and the unbounded remainders must cancel index for index.
    let mut mixed_groups: BTreeMap<(String, String), Vec<MixedFamily>> = BTreeMap::new();
    for mf in mixed_left {
        mixed_groups
            .entry((mf.outer.clone(), mf.inner.clone()))
            .or_default()
            .push(mf);
    }
    for ((outer, inner), members) in mixed_groups {
        let o_star = members
            .iter()
            .map(|mf| mf.outer_start)
            .max()
            .expect("nonempty group");
        let hits: Vec<u32> = basis_set
            .iter()
            .filter(|d| d.family() == outer && d.idx2().is_none() && d.idx1() >= o_star)
            .map(|d| d.idx1())
            .collect();
        let route = |k: u32,
                     mf: &MixedFamily,
                     groups: &mut BTreeMap<VarId, QuadraticForm>,
                     scaled_left: &mut Vec<(SparsePoly, u32, SymKey)>|
         -> Result<(), EmbedError> {
            let xv = VarId::single(&mf.outer, k);
            let tail = mf.inner_tail(k);
            if let Some(g) = groups.get_mut(&xv) {
                g.add_tail(tail)?;
            } else {
                let head = SparsePoly::var(&field, xv);
                let q = head.scale(&tail.coeff);
                if !q.is_zero() {
                    scaled_left.push((q, tail.start, (tail.family.clone(), tail.fixed)));
                }
            }
            Ok(())
        };
        for mf in &members {
            for k in mf.outer_start..o_star {
                route(k, mf, &mut groups, &mut scaled_left)?;
            }
        }
        let mut lo = o_star;
        for &h in &hits {
            for k in lo..h {
                for mf in &members {
                    route(k, mf, &mut groups, &mut scaled_left)?;
                }
            }
            for mf in &members {
                route(h, mf, &mut groups, &mut scaled_left)?;
            }
            lo = h + 1;
        }
        // Unbounded remainder with aligned outer start `lo`: the running
        // inner-coefficient sums must vanish at every inner index, else the
        // residue `Σᵢ xᵢ·(partial)·inner[i,m]²` has no single-variable rows.
        let s_min = members.iter().map(|mf| mf.inner_start).min().unwrap();
        let s_max = members.iter().map(|mf| mf.inner_start).max().unwrap();
        for m in s_min..s_max {
            let mut partial = field.zero();
            for mf in &members {
                if mf.inner_start <= m {
                    partial = &partial + &mf.coeff;
                }
            }
            if !partial.is_zero() {
                return Err(EmbedError::UnsupportedShape(format!(
                    "mixed tails over {outer}/{inner} leave a bounded-inner residue at inner index {m} on every outer direction"
                )));
            }
        }
        let mut total = field.zero();
        for mf in &members {
            total = &total + &mf.coeff;
        }
        if !total.is_zero() {
            return Err(EmbedError::UnsupportedShape(format!(
                "mixed tails over {outer}/{inner} keep an unbounded residue beyond index {lo}"
            )));
        }
    }

    // Scaled leftovers, per square-tail symbol: align every member to the
    // latest start (heads drain into the finite remainder) and check that
    // the aligned head polynomials cancel — they must, because no leftover
    // direction carries a class.
    let mut sym_groups: BTreeMap<SymKey, Vec<(SparsePoly, u32)>> = BTreeMap::new();
    for (q, start, key) in scaled_left {
        sym_groups.entry(key).or_default().push((q, start));
    }
    for ((family, fixed), items) in sym_groups {
        let s_star = items.iter().map(|(_, s)| *s).max().expect("nonempty group");
        let mut total = SparsePoly::zero(&field, 1);
        for (q, start) in &items {
            for k in *start..s_star {
                let t = match fixed {
                    None => VarId::single(&family, k),
                    Some(j) => VarId::pair(&family, j, k),
                };
                let square = SparsePoly::var(&field, t.clone()).mul(&SparsePoly::var(&field, t));
                finite_acc = finite_acc.add(&q.mul(&square));
            }
            total = total.add(q);
        }
        if !total.is_zero() {
            return Err(EmbedError::UnsupportedShape(format!(
                "scaled tails over {family} keep the unbounded residue ({total})·Σ {family}²"
            )));
        }
    }

    // Assemble the row map on the adjusted form.
    let mut sigma = Substitution::new(&field, UnmatchedPolicy::Zero);
    for (t, (d, _)) in basis.iter().enumerate() {
        install_row(
            &mut sigma,
            &field,
            1 + t as u32,
            &SparsePoly::var(&field, d.clone()),
            &groups[d],
        )?;
    }
    let mut zi = 0u32;
    for m in sum_of_cubes(&finite_acc)? {
        zi += 1;
        sigma.map(VarId::single("z", zi), m)?;
    }
    let zbase = zi + 1;
    let nblocks = power_left.len() as u32;
    for (b, pf) in power_left.iter().enumerate() {
        let first = zbase + b as u32;
        let (i1, i2) = block_images(pf, first, nblocks);
        sigma.add_rule(TailRule::new(
            "z",
            IndexMatcher::stride(first, nblocks),
            None,
            pf.coeff.cbrt_or_extend(),
            &pf.family,
            i1,
            i2,
        )?);
    }

    let sigma = if corrections.is_empty() {
        sigma
    } else {
        sigma.compose_finite(&phi_inv)?
    };
    finish_certificate(sigma, w.clone(), v_r(&field, r), windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::TruncationStream;
    use crate::scalar::Field;

    fn field() -> Field {
        Field::default_field()
    }

    fn sp_var(field: &Field, family: &str, i: u32) -> SparsePoly {
        SparsePoly::var(field, VarId::single(family, i))
    }

    fn cubes_total(cubes: &[SparsePoly]) -> SparsePoly {
        let field = cubes
            .first()
            .map(|c| c.field().clone())
            .expect("nonempty cube list");
        let mut total = SparsePoly::zero(&field, 3);
        for m in cubes {
            total = total.add(&m.pow(3));
        }
        total
    }

    fn sum_of_cubes_roundtrip(p: &SparsePoly) {
        let cubes = sum_of_cubes(p).expect("cubic input");
        assert!(cubes.len() <= 4 * p.num_terms());
        if p.is_zero() {
            assert!(cubes.is_empty());
        } else {
            assert_eq!(cubes_total(&cubes), *p);
        }
    }

    #[test]
    fn grouping_factors_simple_cubics() {
        let f = field();
        let w1 = sp_var(&f, "w", 1);
        // w₁³ groups as w₁·(w₁²).
        let g = greedy_grouping(&w1.pow(3)).unwrap();
        assert_eq!(g.groups().len(), 1);
        assert_eq!(g.groups()[0].0, VarId::single("w", 1));
        assert_eq!(g.groups()[0].1.finite_part(), w1.pow(2));
        assert!(g.respects_pivot_order());
        assert_eq!(g.re_expand(), w1.pow(3));

        // w₁w₂w₃ + w₂²w₃: the pivot w₁ takes the first monomial, w₂ the rest.
        let w2 = sp_var(&f, "w", 2);
        let w3 = sp_var(&f, "w", 3);
        let p = w1.mul(&w2).mul(&w3).add(&w2.pow(2).mul(&w3));
        let g = greedy_grouping(&p).unwrap();
        assert_eq!(g.groups().len(), 2);
        assert_eq!(g.groups()[0].0, VarId::single("w", 1));
        assert_eq!(g.groups()[0].1.finite_part(), w2.mul(&w3));
        assert_eq!(g.groups()[1].0, VarId::single("w", 2));
        assert_eq!(g.groups()[1].1.finite_part(), w2.mul(&w3));
        assert!(g.respects_pivot_order());
        assert_eq!(g.re_expand(), p);
    }

    #[test]
    fn grouping_of_mixed_space_window_goes_outer_first() {
        let f = field();
        let window = v_infinity(&f).truncate(3);
        let g = greedy_grouping(&window).unwrap();
        // Every pivot is an outer variable; the cofactors are the inner squares.
        for (pivot, cofactor) in g.groups() {
            assert_eq!(pivot.family(), "x");
            for v in cofactor.support() {
                assert_eq!(v.family(), "y");
            }
        }
        assert!(g.respects_pivot_order());
        assert_eq!(g.re_expand(), window);
    }

    #[test]
    fn grouping_rejects_wrong_degree() {
        let f = field();
        let q = sp_var(&f, "w", 1).pow(2);
        assert!(matches!(
            greedy_grouping(&q),
            Err(EmbedError::WrongDegree { got: 2 })
        ));
    }

    #[test]
    fn cube_identities_re_expand_exactly() {
        let f = field();
        let x = sp_var(&f, "x", 1);
        let y = sp_var(&f, "y", 1);
        let z = sp_var(&f, "z", 1);

        // x³ is a single cube.
        let cubes = sum_of_cubes(&x.pow(3)).unwrap();
        assert_eq!(cubes.len(), 1);
        assert_eq!(cubes[0], x);

        // 6xy² uses the three-cube identity with unit leading roots.
        let p = x.mul(&y.pow(2)).scale(&f.scalar_u64(6));
        let cubes = sum_of_cubes(&p).unwrap();
        assert_eq!(cubes.len(), 3);
        assert_eq!(cubes[0], x.add(&y));
        assert_eq!(cubes[1], x.sub(&y));
        assert_eq!(cubes_total(&cubes), p);

        // 24xyz uses the four-cube identity.
        let p = x.mul(&y).mul(&z).scale(&f.scalar_u64(24));
        let cubes = sum_of_cubes(&p).unwrap();
        assert_eq!(cubes.len(), 4);
        assert_eq!(cubes_total(&cubes), p);
    }

    #[test]
    fn cube_decomposition_handles_general_cubics() {
        let f = field();
        let x = sp_var(&f, "x", 1);
        let y = sp_var(&f, "y", 1);
        let z = sp_var(&f, "z", 1);
        let p = x
            .pow(3)
            .scale(&f.scalar_i64(5))
            .add(&x.mul(&y.pow(2)).scale(&f.scalar_i64(-7)))
            .add(&x.mul(&y).mul(&z).scale(&f.scalar_u64(11)))
            .add(&z.pow(3));
        sum_of_cubes_roundtrip(&p);
        sum_of_cubes_roundtrip(&SparsePoly::zero(&f, 3));
    }

    #[test]
    fn mixed_space_embedding_is_identity_shaped_on_itself() {
        let f = field();
        let vinf = v_infinity(&f);
        let cert = embed_into_v_infinity(&vinf, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        // The rules carry every ambient variable to itself.
        for (v, img) in [
            (VarId::single("x", 1), sp_var(&f, "x", 1)),
            (VarId::single("x", 7), sp_var(&f, "x", 7)),
            (
                VarId::pair("y", 3, 4),
                SparsePoly::var(&f, VarId::pair("y", 3, 4)),
            ),
        ] {
            assert_eq!(cert.substitution.image_of(&v), img);
        }
    }

    #[test]
    fn mixed_space_embedding_of_pure_cube_stream() {
        let f = field();
        let third = f.scalar_u64(3).inv().unwrap();
        let cubes = StructuredForm::from_terms(
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
        let cert = embed_into_v_infinity(&cubes, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        // Row i: x_i ↦ wᵢ/3 and y_{i,1} ↦ wᵢ.
        assert_eq!(
            cert.substitution.image_of(&VarId::single("x", 2)),
            sp_var(&f, "w", 2).scale(&third)
        );
        assert_eq!(
            cert.substitution.image_of(&VarId::pair("y", 2, 1)),
            sp_var(&f, "w", 2)
        );
        assert_eq!(
            cert.substitution.image_of(&VarId::pair("y", 2, 2)),
            SparsePoly::zero(&f, 1)
        );
    }

    #[test]
    fn mixed_space_embedding_of_zero_form_is_trivial() {
        let f = field();
        let zero = StructuredForm::zero(&f, 3);
        let cert = embed_into_v_infinity(&zero, &[5, 10]).unwrap();
        assert!(cert.all_verified());
        assert_eq!(
            cert.substitution.image_of(&VarId::single("x", 1)),
            SparsePoly::zero(&f, 1)
        );
    }

    #[test]
    fn mixed_space_embedding_of_finite_cubics() {
        let f = field();
        let w1 = sp_var(&f, "w", 1);
        let w2 = sp_var(&f, "w", 2);
        let w3 = sp_var(&f, "w", 3);
        let p = w1
            .mul(&w2)
            .mul(&w3)
            .add(&w2.pow(2).mul(&w3))
            .add(&w1.pow(3).scale(&f.scalar_i64(4)));
        let form = StructuredForm::finite(p);
        let cert = embed_into_v_infinity(&form, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
    }

    #[test]
    fn mixed_space_embedding_covers_every_generator_shape() {
        let f = field();
        // Finite + linear-scaled tail + mixed stream + power stream together.
        let p = sp_var(&f, "w", 1).pow(3);
        let head = sp_var(&f, "w", 2).add(&sp_var(&f, "w", 3).scale(&f.scalar_i64(2)));
        let form = StructuredForm::from_terms(
            &f,
            3,
            vec![
                GeneratorTerm::Finite(p),
                GeneratorTerm::Scaled(
                    head,
                    PowerFamily {
                        family: "t".into(),
                        fixed: None,
                        coeff: f.scalar_u64(3),
                        exp: 2,
                        start: 2,
                    },
                ),
                GeneratorTerm::Mixed(MixedFamily {
                    coeff: f.scalar_u64(3),
                    outer: "a".into(),
                    outer_start: 1,
                    inner: "b".into(),
                    inner_exp: 2,
                    inner_start: 1,
                }),
                GeneratorTerm::Power(PowerFamily {
                    family: "c".into(),
                    fixed: None,
                    coeff: f.scalar_i64(-2),
                    exp: 3,
                    start: 3,
                }),
            ],
        );
        let cert = embed_into_v_infinity(&form, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
    }

    #[test]
    fn rank_space_embedding_of_cube_stream_into_rank_zero() {
        let f = field();
        let cubes = StructuredForm::from_terms(
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
        let cert = embed_into_v_r(&cubes, 0, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        // mᵢ = wᵢ: the cube segment maps straight onto the stream.
        for i in [1u32, 4, 9] {
            assert_eq!(
                cert.substitution.image_of(&VarId::single("z", i)),
                sp_var(&f, "w", i)
            );
        }
    }

    #[test]
    fn rank_space_embedding_is_identity_shaped_on_itself() {
        let f = field();
        let f1 = v_r(&f, 1);
        let cert = embed_into_v_r(&f1, 1, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        for (v, img) in [
            (VarId::single("x", 1), sp_var(&f, "x", 1)),
            (VarId::single("z", 5), sp_var(&f, "z", 5)),
            (
                VarId::pair("y", 1, 6),
                SparsePoly::var(&f, VarId::pair("y", 1, 6)),
            ),
        ] {
            assert_eq!(cert.substitution.image_of(&v), img);
        }
    }

    #[test]
    fn rank_space_embedding_handles_tail_plus_cubes() {
        let f = field();
        // x·Σⱼ yⱼ² + Σᵢ wᵢ³ into the rank-1 space.
        let form = StructuredForm::from_terms(
            &f,
            3,
            vec![
                GeneratorTerm::Scaled(
                    sp_var(&f, "x", 1),
                    PowerFamily {
                        family: "y".into(),
                        fixed: None,
                        coeff: f.one(),
                        exp: 2,
                        start: 1,
                    },
                ),
                GeneratorTerm::Power(PowerFamily {
                    family: "w".into(),
                    fixed: None,
                    coeff: f.one(),
                    exp: 3,
                    start: 1,
                }),
            ],
        );
        let cert = embed_into_v_r(&form, 1, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        assert!(cert.verified_windows.iter().all(|(n, _)| *n <= 20));
    }

    #[test]
    fn rank_space_embedding_applies_basis_change() {
        let f = field();
        // x₁·T − x₂·T with T = 3Σ yⱼ²: rank 1, but both directions carry
        // classes, so the embedder must first send x₁ ↦ x₁ + x₂.
        let tail = |c: i64| PowerFamily {
            family: "y".into(),
            fixed: None,
            coeff: f.scalar_i64(3 * c),
            exp: 2,
            start: 1,
        };
        let form = StructuredForm::from_terms(
            &f,
            3,
            vec![
                GeneratorTerm::Scaled(sp_var(&f, "x", 1), tail(1)),
                GeneratorTerm::Scaled(sp_var(&f, "x", 2), tail(-1)),
            ],
        );
        let report = residual_rank(&form).unwrap();
        assert_eq!(report.value, Rank::Finite(1));
        let cert = embed_into_v_r(&form, 1, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        // The composed row image carries the difference of directions.
        assert_eq!(
            cert.substitution.image_of(&VarId::single("x", 1)),
            sp_var(&f, "x", 1).sub(&sp_var(&f, "x", 2))
        );
    }

    #[test]
    fn rank_space_embedding_rejects_excessive_rank() {
        let f = field();
        let err = embed_into_v_r(&v_r(&f, 3), 2, &[5]).unwrap_err();
        assert!(matches!(
            err,
            EmbedError::RankExceeded {
                found: Rank::Finite(3),
                allowed: 2
            }
        ));
        let err = embed_into_v_r(&v_infinity(&f), 4, &[5]).unwrap_err();
        assert!(matches!(
            err,
            EmbedError::RankExceeded {
                found: Rank::Infinite,
                allowed: 4
            }
        ));
    }

    #[test]
    fn rank_space_embedding_reports_unsupported_residues() {
        let f = field();
        // Σᵢ 3xᵢ·yᵢ₁²: every derivative class vanishes, yet the cube images
        // would need two variables per row — an honest refusal.
        let form = StructuredForm::from_terms(
            &f,
            3,
            vec![
                GeneratorTerm::Mixed(MixedFamily {
                    coeff: f.scalar_u64(3),
                    outer: "x".into(),
                    outer_start: 1,
                    inner: "y".into(),
                    inner_exp: 2,
                    inner_start: 1,
                }),
                GeneratorTerm::Mixed(MixedFamily {
                    coeff: f.scalar_i64(-3),
                    outer: "x".into(),
                    outer_start: 1,
                    inner: "y".into(),
                    inner_exp: 2,
                    inner_start: 2,
                }),
            ],
        );
        assert_eq!(residual_rank(&form).unwrap().value, Rank::Finite(0));
        let err = embed_into_v_r(&form, 0, &[5]).unwrap_err();
        assert!(matches!(err, EmbedError::UnsupportedShape(_)));
    }

    #[test]
    fn certificates_catch_corruption() {
        let f = field();
        let cubes = StructuredForm::from_terms(
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
        let mut cert = embed_into_v_r(&cubes, 0, &[5]).unwrap();
        assert!(cert.all_verified());
        // Overwrite one row with a wrong image: verification must name a
        // concrete differing monomial.
        cert.substitution
            .map(VarId::single("z", 1), sp_var(&f, "w", 1).scale(&f.scalar_u64(2)))
            .unwrap();
        let (ok, witness) = verify_embedding(&cert, 5);
        assert!(!ok);
        let message = witness.expect("a differing monomial is reported");
        assert!(message.contains("w[1]"), "unexpected witness: {message}");
    }

    #[test]
    fn substitution_rows_must_stay_linear() {
        let f = field();
        let zero = StructuredForm::zero(&f, 3);
        let mut cert = embed_into_v_infinity(&zero, &[5]).unwrap();
        // A quadratic row is rejected at installation time, so no
        // certificate with a non-linear row can ever be assembled.
        let err = cert
            .substitution
            .map(VarId::single("x", 1), sp_var(&f, "w", 1).pow(2))
            .unwrap_err();
        assert!(matches!(err, SubstError::NonLinearImage(_)));
    }

    #[test]
    fn embedded_sources_re_expand_through_streams() {
        let f = field();
        let form = StructuredForm::from_terms(
            &f,
            3,
            vec![
                GeneratorTerm::Scaled(
                    sp_var(&f, "u", 1),
                    PowerFamily {
                        family: "t".into(),
                        fixed: None,
                        coeff: f.scalar_u64(5),
                        exp: 2,
                        start: 1,
                    },
                ),
                GeneratorTerm::Power(PowerFamily {
                    family: "s".into(),
                    fixed: Some(2),
                    coeff: f.scalar_u64(7),
                    exp: 3,
                    start: 4,
                }),
            ],
        );
        let cert = embed_into_v_infinity(&form, &[5, 10, 20]).unwrap();
        assert!(cert.all_verified());
        let stream = TruncationStream::from_form(&form);
        for n in [5u32, 10] {
            assert_eq!(
                cert.substitution.apply_window(&cert.target, n),
                stream.window(n)
            );
        }
    }
}
