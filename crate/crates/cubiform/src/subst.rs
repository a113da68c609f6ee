//! Row-finite substitutions: the coordinate maps that realize embeddings.
//!
//! A substitution sends each target variable to a linear form in source
//! variables. It is described finitely by (1) an explicit map on finitely
//! many variables, (2) a list of tail rules covering whole index ranges of a
//! family at once (each rule sends matched variables to scalar multiples of
//! source variables through affine index arithmetic), and (3) a policy for
//! everything unmatched: drop to zero, or keep the variable unchanged.
//!
//! Row-finiteness — every source variable appears in only finitely many
//! images — is enforced structurally: tail rules must either use affine index
//! expressions (injective on the matched range) or match a bounded range.
//! That is also what makes window verification exact: the set of target
//! variables whose images touch sources with index ≤ N is finite and
//! computable, so `(f ∘ σ)` truncated at N equals a finite computation.

use crate::forms::{GeneratorTerm, MixedFamily, PowerFamily, StructuredForm};
use crate::poly::{Monomial, SparsePoly};
use crate::scalar::{Field, Scalar};
use crate::vars::VarId;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubstError {
    #[error("image of {0} must be homogeneous linear (or zero)")]
    NonLinearImage(String),
    #[error("tail rule is not row-finite: {0}")]
    NotRowFinite(String),
    #[error("tail rule index arithmetic is inconsistent: {0}")]
    BadIndexArithmetic(String),
    #[error("symbolic substitution does not stay in the generator catalog: {0}")]
    NotCatalogClosed(String),
    #[error("composition requires a finite right-hand substitution (explicit map with keep policy)")]
    CompositionTooGeneral,
}

/// Matches one index coordinate: `t ≥ min`, `t ≤ max` when bounded, and
/// `t ≡ residue (mod modulus)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatcher {
    pub min: u32,
    pub max: Option<u32>,
    pub modulus: u32,
    pub residue: u32,
}

impl IndexMatcher {
    /// All indices ≥ min.
    pub fn from(min: u32) -> IndexMatcher {
        IndexMatcher {
            min,
            max: None,
            modulus: 1,
            residue: 0,
        }
    }

    /// Exactly one index.
    pub fn exact(i: u32) -> IndexMatcher {
        IndexMatcher {
            min: i,
            max: Some(i),
            modulus: 1,
            residue: 0,
        }
    }

    /// Indices ≥ min congruent to `min` modulo `stride`.
    pub fn stride(min: u32, stride: u32) -> IndexMatcher {
        IndexMatcher {
            min,
            max: None,
            modulus: stride.max(1),
            residue: min % stride.max(1),
        }
    }

    pub fn matches(&self, t: u32) -> bool {
        t >= self.min
            && self.max.map_or(true, |m| t <= m)
            && t % self.modulus == self.residue % self.modulus
    }

    fn bounded(&self) -> bool {
        self.max.is_some()
    }

    /// Enumerate matched indices up to an inclusive bound.
    fn enumerate_upto(&self, bound: u32) -> Vec<u32> {
        let hi = self.max.map_or(bound, |m| m.min(bound));
        (self.min..=hi.max(self.min).min(hi))
            .filter(|t| self.matches(*t))
            .collect()
    }
}

/// Computes one image index coordinate from the matched target indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IndexExpr {
    /// A fixed index.
    Const(u32),
    /// `offset + (t − base) / div`, where `t` is the selected target index.
    /// The owning rule's matcher must guarantee `t ≥ base` and
    /// `div | (t − base)`.
    Affine {
        from: IndexSel,
        base: u32,
        div: u32,
        offset: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexSel {
    First,
    Second,
}

impl IndexExpr {
    /// Shift by a constant: `t ↦ t + delta` (delta may be negative down to
    /// −base).
    pub fn shift(from: IndexSel, base: u32, new_start: u32) -> IndexExpr {
        IndexExpr::Affine {
            from,
            base,
            div: 1,
            offset: new_start,
        }
    }

    fn eval(&self, t1: u32, t2: Option<u32>) -> u32 {
        match self {
            IndexExpr::Const(c) => *c,
            IndexExpr::Affine {
                from,
                base,
                div,
                offset,
            } => {
                let t = match from {
                    IndexSel::First => t1,
                    IndexSel::Second => t2.expect("rule validated: second index exists"),
                };
                debug_assert!(t >= *base && (t - base) % div == 0);
                offset + (t - base) / div
            }
        }
    }

    /// Largest selected-index value whose image coordinate is ≤ bound
    /// (None when every value maps above the bound).
    fn invert_bound(&self, bound: u32) -> Option<u32> {
        match self {
            IndexExpr::Const(_) => None,
            IndexExpr::Affine {
                base, div, offset, ..
            } => {
                if bound < *offset {
                    None
                } else {
                    Some(base + div * (bound - offset))
                }
            }
        }
    }
}

/// One tail rule: matched target variables map to `coeff ·
/// image_family[expr1 (, expr2)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TailRule {
    target_family: String,
    match1: IndexMatcher,
    match2: Option<IndexMatcher>,
    coeff: Scalar,
    image_family: String,
    image1: IndexExpr,
    image2: Option<IndexExpr>,
}

impl TailRule {
    pub fn new(
        target_family: &str,
        match1: IndexMatcher,
        match2: Option<IndexMatcher>,
        coeff: Scalar,
        image_family: &str,
        image1: IndexExpr,
        image2: Option<IndexExpr>,
    ) -> Result<TailRule, SubstError> {
        let rule = TailRule {
            target_family: target_family.to_string(),
            match1,
            match2,
            coeff,
            image_family: image_family.to_string(),
            image1,
            image2,
        };
        rule.validate()?;
        Ok(rule)
    }

    fn exprs(&self) -> impl Iterator<Item = &IndexExpr> {
        std::iter::once(&self.image1).chain(self.image2.iter())
    }

    fn matcher_for(&self, sel: IndexSel) -> Option<&IndexMatcher> {
        match sel {
            IndexSel::First => Some(&self.match1),
            IndexSel::Second => self.match2.as_ref(),
        }
    }

    fn validate(&self) -> Result<(), SubstError> {
        // Affine exprs must select an existing coordinate and be exact on
        // the matched set.
        for e in self.exprs() {
            if let IndexExpr::Affine {
                from, base, div, ..
            } = e
            {
                let m = self.matcher_for(*from).ok_or_else(|| {
                    SubstError::BadIndexArithmetic(format!(
                        "rule on {} selects a second index the target does not have",
                        self.target_family
                    ))
                })?;
                if *div == 0 {
                    return Err(SubstError::BadIndexArithmetic("divisor zero".into()));
                }
                if m.min < *base {
                    return Err(SubstError::BadIndexArithmetic(format!(
                        "matcher minimum {} below expression base {}",
                        m.min, base
                    )));
                }
                if *div > 1 && (m.modulus % div != 0 || m.residue % div != base % div) {
                    return Err(SubstError::BadIndexArithmetic(format!(
                        "matcher (mod {}) does not guarantee divisibility by {div}",
                        m.modulus
                    )));
                }
            }
        }
        // Row-finiteness: every unbounded target coordinate must feed an
        // affine image expression; otherwise infinitely many targets would
        // share one image variable.
        let feeds = |sel: IndexSel| {
            self.exprs()
                .any(|e| matches!(e, IndexExpr::Affine { from, .. } if *from == sel))
        };
        if !self.match1.bounded() && !feeds(IndexSel::First) {
            return Err(SubstError::NotRowFinite(format!(
                "first index of {} is unbounded and unused",
                self.target_family
            )));
        }
        if let Some(m2) = &self.match2 {
            if !m2.bounded() && !feeds(IndexSel::Second) {
                return Err(SubstError::NotRowFinite(format!(
                    "second index of {} is unbounded and unused",
                    self.target_family
                )));
            }
        }
        Ok(())
    }

    pub fn matches(&self, v: &VarId) -> bool {
        if v.family() != self.target_family {
            return false;
        }
        match (&self.match2, v.idx2()) {
            (None, None) => self.match1.matches(v.idx1()),
            (Some(m2), Some(j)) => self.match1.matches(v.idx1()) && m2.matches(j),
            _ => false,
        }
    }

    pub fn image_var(&self, v: &VarId) -> VarId {
        debug_assert!(self.matches(v));
        let i1 = self.image1.eval(v.idx1(), v.idx2());
        match &self.image2 {
            None => VarId::single(&self.image_family, i1),
            Some(e2) => VarId::pair(&self.image_family, i1, e2.eval(v.idx1(), v.idx2())),
        }
    }

    pub fn coeff(&self) -> &Scalar {
        &self.coeff
    }

    /// Matched targets whose image variable has all indices ≤ bound.
    fn targets_into_window(&self, bound: u32) -> Vec<VarId> {
        // Bound each target coordinate: through inversion when an affine
        // expression uses it, else by its matcher's own bound. Validation
        // guarantees one of the two exists.
        let coord_bound = |sel: IndexSel, m: &IndexMatcher| -> Option<u32> {
            let mut best: Option<u32> = m.max;
            for e in self.exprs() {
                if let IndexExpr::Affine { from, .. } = e {
                    if *from == sel {
                        match e.invert_bound(bound) {
                            Some(b) => best = Some(best.map_or(b, |x| x.min(b))),
                            None => return None, // image always above bound
                        }
                    }
                }
            }
            best
        };
        // A Const image coordinate above the bound kills everything.
        for e in self.exprs() {
            if let IndexExpr::Const(c) = e {
                if *c > bound {
                    return Vec::new();
                }
            }
        }
        let Some(b1) = coord_bound(IndexSel::First, &self.match1) else {
            return Vec::new();
        };
        let firsts = self.match1.enumerate_upto(b1);
        match &self.match2 {
            None => firsts
                .into_iter()
                .map(|i| VarId::single(&self.target_family, i))
                .collect(),
            Some(m2) => {
                let Some(b2) = coord_bound(IndexSel::Second, m2) else {
                    return Vec::new();
                };
                let seconds = m2.enumerate_upto(b2);
                let mut out = Vec::new();
                for &i in &firsts {
                    for &j in &seconds {
                        out.push(VarId::pair(&self.target_family, i, j));
                    }
                }
                out
            }
        }
    }

    /// Human-readable rendering for certificates, e.g.
    /// `y[i,j] (i>=3) -> 5*w[i-2,j]`.
    fn render(&self) -> (String, String) {
        let names = ["i", "j"];
        let matcher_text = |m: &IndexMatcher, name: &str| -> String {
            let mut parts = vec![format!("{name}>={}", m.min)];
            if let Some(mx) = m.max {
                parts.push(format!("{name}<={mx}"));
            }
            if m.modulus > 1 {
                parts.push(format!("{name}%{}={}", m.modulus, m.residue % m.modulus));
            }
            parts.join(",")
        };
        let target = match &self.match2 {
            None => format!(
                "{}[{}] ({})",
                self.target_family,
                names[0],
                matcher_text(&self.match1, names[0])
            ),
            Some(m2) => format!(
                "{}[{},{}] ({}; {})",
                self.target_family,
                names[0],
                names[1],
                matcher_text(&self.match1, names[0]),
                matcher_text(m2, names[1])
            ),
        };
        let expr_text = |e: &IndexExpr| -> String {
            match e {
                IndexExpr::Const(c) => c.to_string(),
                IndexExpr::Affine {
                    from,
                    base,
                    div,
                    offset,
                } => {
                    let n = match from {
                        IndexSel::First => names[0],
                        IndexSel::Second => names[1],
                    };
                    let core = if *base == 0 {
                        n.to_string()
                    } else {
                        format!("({n}-{base})")
                    };
                    let divided = if *div == 1 {
                        core
                    } else {
                        format!("{core}/{div}")
                    };
                    if *offset == 0 {
                        divided
                    } else {
                        format!("{divided}+{offset}")
                    }
                }
            }
        };
        let image_core = match &self.image2 {
            None => format!("{}[{}]", self.image_family, expr_text(&self.image1)),
            Some(e2) => format!(
                "{}[{},{}]",
                self.image_family,
                expr_text(&self.image1),
                expr_text(e2)
            ),
        };
        let image = if self.coeff.is_one() {
            image_core
        } else {
            format!("{}*{}", self.coeff, image_core)
        };
        (target, image)
    }
}

/// Policy for target variables hit by neither the explicit map nor a rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnmatchedPolicy {
    /// Unmatched variables map to zero (embedding substitutions: every
    /// ambient coordinate not used by the embedding is retired).
    Zero,
    /// Unmatched variables map to themselves (finite basis changes).
    Keep,
}

#[derive(Clone, Debug)]
pub struct Substitution {
    field: Field,
    explicit: BTreeMap<VarId, SparsePoly>,
    tails: Vec<TailRule>,
    policy: UnmatchedPolicy,
}

impl Substitution {
    pub fn new(field: &Field, policy: UnmatchedPolicy) -> Substitution {
        Substitution {
            field: field.clone(),
            explicit: BTreeMap::new(),
            tails: Vec::new(),
            policy,
        }
    }

    /// The identity substitution.
    pub fn identity(field: &Field) -> Substitution {
        Substitution::new(field, UnmatchedPolicy::Keep)
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn policy(&self) -> UnmatchedPolicy {
        self.policy
    }

    pub fn explicit_map(&self) -> &BTreeMap<VarId, SparsePoly> {
        &self.explicit
    }

    pub fn tail_rules(&self) -> &[TailRule] {
        &self.tails
    }

    /// Set the image of one variable; must be homogeneous linear or zero.
    pub fn map(&mut self, target: VarId, image: SparsePoly) -> Result<(), SubstError> {
        if !(image.is_zero() || image.degree() == 1) {
            return Err(SubstError::NonLinearImage(target.to_string()));
        }
        self.explicit.insert(target, image);
        Ok(())
    }

    pub fn add_rule(&mut self, rule: TailRule) {
        self.tails.push(rule);
    }

    /// The image of a variable. Precedence: explicit map, then the first
    /// matching tail rule, then the policy.
    pub fn image_of(&self, v: &VarId) -> SparsePoly {
        if let Some(p) = self.explicit.get(v) {
            return p.clone();
        }
        for rule in &self.tails {
            if rule.matches(v) {
                return SparsePoly::monomial(
                    &self.field,
                    Monomial::var(rule.image_var(v)),
                    rule.coeff.clone(),
                );
            }
        }
        match self.policy {
            UnmatchedPolicy::Zero => SparsePoly::zero(&self.field, 1),
            UnmatchedPolicy::Keep => SparsePoly::var(&self.field, v.clone()),
        }
    }

    /// All target variables whose image involves a source variable with
    /// index ≤ N. Finite by row-finiteness.
    pub fn targets_into_window(&self, n: u32) -> BTreeSet<VarId> {
        let mut out: BTreeSet<VarId> = self
            .explicit
            .iter()
            .filter(|(_, img)| !img.is_zero())
            .map(|(v, _)| v.clone())
            .collect();
        for rule in &self.tails {
            for v in rule.targets_into_window(n) {
                if !self.explicit.contains_key(&v) {
                    out.insert(v);
                }
            }
        }
        out
    }

    /// Exact window of the composed form: `(f ∘ σ)` truncated to source
    /// indices ≤ N.
    pub fn apply_window(&self, f: &StructuredForm, n: u32) -> SparsePoly {
        let targets = self.targets_into_window(n);
        let m = targets
            .iter()
            .map(VarId::max_index)
            .max()
            .unwrap_or(0)
            .max(n);
        f.truncate(m).substitute(|v| self.image_of(v)).truncate(n)
    }

    /// Compose with a finite substitution: the result maps v through `self`,
    /// then through `rhs`. `rhs` must be explicit-only with Keep policy.
    pub fn compose_finite(&self, rhs: &Substitution) -> Result<Substitution, SubstError> {
        if !rhs.tails.is_empty() || rhs.policy != UnmatchedPolicy::Keep {
            return Err(SubstError::CompositionTooGeneral);
        }
        let mut out = Substitution::new(&self.field, self.policy);
        out.tails = self.tails.clone();
        // Explicit images pass through rhs.
        for (v, img) in &self.explicit {
            let composed = img.substitute(|u| rhs.image_of(u));
            out.explicit.insert(v.clone(), composed);
        }
        // Tail-matched targets whose image variable is remapped by rhs must
        // become explicit (the rule itself keeps firing for everything else).
        for rule in &self.tails {
            for w in rhs.explicit.keys() {
                if w.family() != rule.image_family {
                    continue;
                }
                for cand in invert_rule_at(rule, w) {
                    if out.explicit.contains_key(&cand) || self.explicit.contains_key(&cand) {
                        continue;
                    }
                    // Respect precedence: only the FIRST matching rule fires.
                    let firing = self.tails.iter().find(|r| r.matches(&cand));
                    if firing.map(|r| std::ptr::eq(r, rule)) != Some(true) {
                        continue;
                    }
                    let img = rhs.image_of(w).scale(&rule.coeff);
                    out.explicit.insert(cand, img);
                }
            }
        }
        // Keep policy: unmatched variables flow through rhs directly.
        if self.policy == UnmatchedPolicy::Keep {
            for (w, img) in &rhs.explicit {
                let covered = self.explicit.contains_key(w)
                    || self.tails.iter().any(|r| r.matches(w));
                if !covered {
                    out.explicit.insert(w.clone(), img.clone());
                }
            }
        }
        Ok(out)
    }

    /// Certificate rendering: explicit pairs plus symbolic rule pairs.
    pub fn pairs_for_report(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .explicit
            .iter()
            .map(|(v, img)| (v.to_string(), img.to_string()))
            .collect();
        for rule in &self.tails {
            out.push(rule.render());
        }
        out
    }
}

/// Target variables the rule maps exactly onto `w` (empty or singleton in
/// practice; affine index maps are injective on the matched set).
fn invert_rule_at(rule: &TailRule, w: &VarId) -> Vec<VarId> {
    let want = match (&rule.image2, w.idx2()) {
        (None, None) => vec![w.idx1()],
        (Some(_), Some(j)) => vec![w.idx1(), j],
        _ => return Vec::new(),
    };
    // Solve each expression for the coordinate it constrains.
    let mut t1: Option<u32> = None;
    let mut t2: Option<u32> = None;
    for (e, target_val) in rule.exprs().zip(want.iter()) {
        match e {
            IndexExpr::Const(c) => {
                if c != target_val {
                    return Vec::new();
                }
            }
            IndexExpr::Affine {
                from,
                base,
                div,
                offset,
            } => {
                if *target_val < *offset {
                    return Vec::new();
                }
                let t = base + div * (target_val - offset);
                let slot = match from {
                    IndexSel::First => &mut t1,
                    IndexSel::Second => &mut t2,
                };
                match slot {
                    Some(existing) if *existing != t => return Vec::new(),
                    _ => *slot = Some(t),
                }
            }
        }
    }
    // Unconstrained coordinates: enumerate over their (bounded) matchers.
    let firsts: Vec<u32> = match t1 {
        Some(t) => vec![t],
        None => match rule.match1.max {
            Some(mx) => rule.match1.enumerate_upto(mx),
            None => return Vec::new(),
        },
    };
    let seconds: Vec<Option<u32>> = match &rule.match2 {
        None => vec![None],
        Some(m2) => match t2 {
            Some(t) => vec![Some(t)],
            None => match m2.max {
                Some(mx) => m2.enumerate_upto(mx).into_iter().map(Some).collect(),
                None => return Vec::new(),
            },
        },
    };
    let mut out = Vec::new();
    for &i in &firsts {
        for &j in &seconds {
            let cand = match j {
                None => VarId::single(&rule.target_family, i),
                Some(j) => VarId::pair(&rule.target_family, i, j),
            };
            if rule.matches(&cand) {
                out.push(cand);
            }
        }
    }
    out
}

impl fmt::Display for Substitution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs = self.pairs_for_report();
        if pairs.is_empty() {
            return write!(
                f,
                "{}",
                match self.policy {
                    UnmatchedPolicy::Keep => "identity",
                    UnmatchedPolicy::Zero => "zero",
                }
            );
        }
        let body: Vec<String> = pairs
            .iter()
            .map(|(t, i)| format!("{t} -> {i}"))
            .collect();
        write!(f, "{}", body.join("; "))
    }
}

/// Symbolic substitution on structured forms: applies `s` to `f` without
/// leaving the generator catalog, or reports that the combination is not
/// catalog-closed (callers then fall back to windowed verification).
pub fn substitute_structured(
    f: &StructuredForm,
    s: &Substitution,
) -> Result<StructuredForm, SubstError> {
    let field = f.field();
    let mut out: Vec<GeneratorTerm> = Vec::new();
    for term in f.terms() {
        match term {
            GeneratorTerm::Finite(p) => {
                let q = p.substitute(|v| s.image_of(v));
                if !q.is_zero() && q.degree() != p.degree() {
                    return Err(SubstError::NotCatalogClosed(
                        "finite image changed degree".into(),
                    ));
                }
                out.push(GeneratorTerm::Finite(if q.is_zero() {
                    SparsePoly::zero(field, p.degree())
                } else {
                    q
                }));
            }
            GeneratorTerm::Power(pf) => {
                out.extend(substitute_power(field, pf, s)?);
            }
            GeneratorTerm::Scaled(p, pf) => {
                let p_img = p.substitute(|v| s.image_of(v));
                if p_img.is_zero() {
                    continue;
                }
                if p_img.degree() != p.degree() {
                    return Err(SubstError::NotCatalogClosed(
                        "scaled head changed degree".into(),
                    ));
                }
                for t in substitute_power(field, pf, s)? {
                    match t {
                        GeneratorTerm::Finite(q) => {
                            out.push(GeneratorTerm::Finite(p_img.mul(&q)))
                        }
                        GeneratorTerm::Power(pf2) => {
                            out.push(GeneratorTerm::Scaled(p_img.clone(), pf2))
                        }
                        _ => unreachable!("power substitution yields finite/power only"),
                    }
                }
            }
            GeneratorTerm::Mixed(mf) => {
                out.extend(substitute_mixed(field, mf, s)?);
            }
        }
    }
    Ok(StructuredForm::from_terms(field, f.degree(), out))
}

/// Index beyond which every variable of the family pattern is governed by one
/// stable regime of `s`: no explicit entries, and rule applicability depends
/// only on the residue class of the running index.
fn stable_regime_start(pf: &PowerFamily, s: &Substitution) -> u32 {
    let mut bound = pf.start;
    for (v, _) in s.explicit_map() {
        if v.family() == pf.family {
            match (pf.fixed, v.idx2()) {
                (None, None) => bound = bound.max(v.idx1() + 1),
                (Some(j), Some(k)) if v.idx1() == j => bound = bound.max(k + 1),
                _ => {}
            }
        }
    }
    // A rule's behavior is uniform from its min onward (the gate is open at
    // the min itself); a bounded rule stops mattering after its max.
    let fold = |bound: u32, m: &IndexMatcher| -> u32 {
        let mut b = bound.max(m.min);
        if let Some(mx) = m.max {
            b = b.max(mx + 1);
        }
        b
    };
    for rule in s.tail_rules() {
        if rule.target_family != pf.family {
            continue;
        }
        // Fold only the matcher that governs the pattern's running index;
        // rules whose shape or fixed-index gate can never fire are ignored.
        match (pf.fixed, &rule.match2) {
            (None, None) => bound = fold(bound, &rule.match1),
            (Some(j), Some(m2)) if rule.match1.matches(j) => bound = fold(bound, m2),
            _ => {}
        }
    }
    bound
}

fn substitute_power(
    field: &Field,
    pf: &PowerFamily,
    s: &Substitution,
) -> Result<Vec<GeneratorTerm>, SubstError> {
    let mut out = Vec::new();
    let stable = stable_regime_start(pf, s);
    // Head: finitely many members with individually computed images.
    let mut head = SparsePoly::zero(field, pf.exp);
    for k in pf.start..stable {
        let img = s.image_of(&pf.var_at(k));
        head = head.add(&img.pow(pf.exp).scale(&pf.coeff));
    }
    if !head.is_zero() {
        out.push(GeneratorTerm::Finite(head));
    }
    // Tail regimes: for k ≥ stable, partition by residue class modulo the
    // least common modulus of the applicable rules' running matchers and
    // check each class maps uniformly.
    let lcm = s
        .tail_rules()
        .iter()
        .filter_map(|r| {
            if r.target_family != pf.family {
                return None;
            }
            match (pf.fixed, &r.match2) {
                (None, None) => Some(r.match1.modulus.max(1)),
                (Some(j), Some(m2)) if r.match1.matches(j) => Some(m2.modulus.max(1)),
                _ => None,
            }
        })
        .fold(1u32, lcm_u32);
    for class in 0..lcm {
        // Representative members of this residue class at and beyond stable.
        let probe1 = stable + class;
        let probe2 = probe1 + lcm;
        let v1 = pf.var_at(probe1);
        let v2 = pf.var_at(probe2);
        let img1 = classify_tail_image(s, &v1);
        let img2 = classify_tail_image(s, &v2);
        match (img1, img2) {
            (TailImage::Zero, TailImage::Zero) => {}
            (TailImage::Keep, TailImage::Keep) => {
                // Class keeps itself: emit a power family restricted to the
                // class (modulus via separate families is not expressible, so
                // only the full class spectrum staying put is catalog-closed).
                if lcm == 1 {
                    out.push(GeneratorTerm::Power(PowerFamily {
                        start: stable,
                        ..pf.clone()
                    }));
                } else {
                    return Err(SubstError::NotCatalogClosed(
                        "identity on a strided subfamily".into(),
                    ));
                }
            }
            (TailImage::Rule(r1), TailImage::Rule(r2)) if std::ptr::eq(r1, r2) => {
                // Uniform affine reindexing: the image is a power family over
                // the image family, starting at the image of k0.
                let w1 = r1.image_var(&v1);
                let w2 = r1.image_var(&v2);
                let (nf, nfixed, nstart, step) = match (w1.idx2(), w2.idx2()) {
                    (None, None) => (
                        w1.family().to_string(),
                        None,
                        w1.idx1(),
                        w2.idx1() as i64 - w1.idx1() as i64,
                    ),
                    (Some(a), Some(b)) if w1.idx1() == w2.idx1() => (
                        w1.family().to_string(),
                        Some(w1.idx1()),
                        a,
                        b as i64 - a as i64,
                    ),
                    _ => {
                        return Err(SubstError::NotCatalogClosed(
                            "rule image walks across fixed indices".into(),
                        ))
                    }
                };
                if step != 1 {
                    return Err(SubstError::NotCatalogClosed(
                        "rule image skips indices; not a contiguous family".into(),
                    ));
                }
                let c = &pf.coeff * &r1.coeff.pow_u64(pf.exp as u64);
                out.push(GeneratorTerm::Power(PowerFamily {
                    family: nf,
                    fixed: nfixed,
                    coeff: c,
                    exp: pf.exp,
                    start: nstart,
                }));
            }
            _ => {
                return Err(SubstError::NotCatalogClosed(
                    "tail members of one class map non-uniformly".into(),
                ))
            }
        }
    }
    Ok(out)
}

enum TailImage<'a> {
    Zero,
    Keep,
    Rule(&'a TailRule),
}

fn classify_tail_image<'a>(s: &'a Substitution, v: &VarId) -> TailImage<'a> {
    debug_assert!(!s.explicit_map().contains_key(v), "beyond stable regime");
    for rule in s.tail_rules() {
        if rule.matches(v) {
            return if rule.coeff.is_zero() {
                TailImage::Zero
            } else {
                TailImage::Rule(rule)
            };
        }
    }
    match s.policy() {
        UnmatchedPolicy::Zero => TailImage::Zero,
        UnmatchedPolicy::Keep => TailImage::Keep,
    }
}

fn substitute_mixed(
    field: &Field,
    mf: &MixedFamily,
    s: &Substitution,
) -> Result<Vec<GeneratorTerm>, SubstError> {
    // Treat the outer index i: below the stable regime, each row
    // outer[i]·(inner tail at i) is handled individually (outer image is any
    // linear form; inner tail substitutes as a power family). At and beyond
    // the stable regime both outer and inner must reindex uniformly.
    let outer_probe = PowerFamily {
        family: mf.outer.clone(),
        fixed: None,
        coeff: field.one(),
        exp: 1,
        start: mf.outer_start,
    };
    let mut stable = stable_regime_start(&outer_probe, s);
    // Inner stability must hold row-wise: fold explicit inner entries and the
    // row-index gates of rules on the inner family.
    for (v, _) in s.explicit_map() {
        if v.family() == mf.inner && v.idx2().is_some() {
            stable = stable.max(v.idx1() + 1);
        }
    }
    for rule in s.tail_rules() {
        if rule.target_family == mf.inner && rule.match2.is_some() {
            stable = stable.max(rule.match1.min);
            if let Some(mx) = rule.match1.max {
                stable = stable.max(mx + 1);
            }
        }
    }
    let mut out = Vec::new();
    // Head rows.
    for i in mf.outer_start..stable {
        let outer_img = s.image_of(&VarId::single(&mf.outer, i));
        if outer_img.is_zero() {
            continue;
        }
        if outer_img.degree() != 1 {
            return Err(SubstError::NotCatalogClosed("outer image not linear".into()));
        }
        for t in substitute_power(field, &mf.inner_tail(i), s)? {
            match t {
                GeneratorTerm::Finite(q) => out.push(GeneratorTerm::Finite(outer_img.mul(&q))),
                GeneratorTerm::Power(pf2) => {
                    out.push(GeneratorTerm::Scaled(outer_img.clone(), pf2))
                }
                _ => unreachable!(),
            }
        }
    }
    // Tail rows: probe two consecutive rows exactly. Each must be a uniformly
    // mapped outer variable times an inner tail that substitutes to a single
    // power family; the pair must exhibit a contiguous walk (outer index and
    // the inner family's fixed index both stepping by one). Same-rule firing
    // with affine index maps then guarantees the walk continues for all rows.
    let probe_row = |i: u32| -> Result<Option<(VarId, Scalar, PowerFamily)>, SubstError> {
        let ov = VarId::single(&mf.outer, i);
        let (o_var, o_coeff) = match classify_tail_image(s, &ov) {
            TailImage::Zero => return Ok(None),
            TailImage::Keep => (ov.clone(), field.one()),
            TailImage::Rule(r) => (r.image_var(&ov), r.coeff.clone()),
        };
        if o_var.idx2().is_some() {
            return Err(SubstError::NotCatalogClosed(
                "outer image is a two-index variable".into(),
            ));
        }
        let parts = substitute_power(field, &mf.inner_tail(i), s)?;
        match parts.as_slice() {
            [GeneratorTerm::Power(pf)] => Ok(Some((o_var, o_coeff, pf.clone()))),
            [] => Ok(None),
            _ => Err(SubstError::NotCatalogClosed(
                "inner tail image is not a single family".into(),
            )),
        }
    };
    let p1 = probe_row(stable)?;
    let p2 = probe_row(stable + 1)?;
    match (p1, p2) {
        (None, None) => {}
        (Some((o1, co1, pf1)), Some((o2, co2, pf2))) => {
            let contiguous = o2.idx1() == o1.idx1() + 1
                && o1.family() == o2.family()
                && co1 == co2
                && pf1.family == pf2.family
                && pf1.fixed == Some(o1.idx1())
                && pf2.fixed == Some(o2.idx1())
                && pf1.start == pf2.start
                && pf1.coeff == pf2.coeff
                && pf1.exp == pf2.exp;
            if !contiguous {
                return Err(SubstError::NotCatalogClosed(
                    "mixed tail rows do not walk contiguously".into(),
                ));
            }
            out.push(GeneratorTerm::Mixed(MixedFamily {
                coeff: &co1 * &pf1.coeff,
                outer: o1.family().to_string(),
                outer_start: o1.idx1(),
                inner: pf1.family.clone(),
                inner_exp: pf1.exp,
                inner_start: pf1.start,
            }));
        }
        _ => {
            return Err(SubstError::NotCatalogClosed(
                "mixed tail rows map inconsistently".into(),
            ))
        }
    }
    Ok(out)
}

fn lcm_u32(a: u32, b: u32) -> u32 {
    fn gcd(mut a: u32, mut b: u32) -> u32 {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    if a == 0 || b == 0 {
        1
    } else {
        a / gcd(a, b) * b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon;

    fn x(i: u32) -> VarId {
        VarId::single("x", i)
    }

    #[test]
    fn identity_substitution_is_neutral() {
        let f = Field::default_field();
        let form = canon::v_infinity(&f);
        let id = Substitution::identity(&f);
        for n in [1u32, 3, 6] {
            assert_eq!(id.apply_window(&form, n), form.truncate(n));
        }
        let sym = substitute_structured(&form, &id).unwrap();
        for n in [1u32, 3, 6] {
            assert_eq!(sym.truncate(n), form.truncate(n));
        }
    }

    #[test]
    fn scaling_one_variable() {
        let f = Field::default_field();
        let form = StructuredForm::finite(SparsePoly::var(&f, x(1)).pow(3));
        let mut s = Substitution::identity(&f);
        let a = f.scalar_u64(7);
        s.map(
            x(1),
            SparsePoly::var(&f, VarId::single("u", 1)).scale(&a),
        )
        .unwrap();
        let out = s.apply_window(&form, 5);
        let expected = SparsePoly::var(&f, VarId::single("u", 1))
            .pow(3)
            .scale(&a.pow_u64(3));
        assert_eq!(out, expected);
    }

    #[test]
    fn nonlinear_image_rejected() {
        let f = Field::default_field();
        let mut s = Substitution::identity(&f);
        let quad = SparsePoly::var(&f, x(1)).pow(2);
        assert!(matches!(
            s.map(x(1), quad),
            Err(SubstError::NonLinearImage(_))
        ));
    }

    #[test]
    fn tail_rule_shifts_a_family() {
        let f = Field::default_field();
        // y[i,j] for i ≥ 3 ↦ 5·w[i−2, j].
        let rule = TailRule::new(
            "y",
            IndexMatcher::from(3),
            Some(IndexMatcher::from(1)),
            f.scalar_u64(5),
            "w",
            IndexExpr::shift(IndexSel::First, 3, 1),
            Some(IndexExpr::shift(IndexSel::Second, 1, 1)),
        )
        .unwrap();
        assert!(rule.matches(&VarId::pair("y", 3, 1)));
        assert!(!rule.matches(&VarId::pair("y", 2, 1)));
        assert_eq!(rule.image_var(&VarId::pair("y", 4, 7)), VarId::pair("w", 2, 7));
        let mut s = Substitution::new(&f, UnmatchedPolicy::Zero);
        s.add_rule(rule);
        // Into a window of size 2, only y[3..4, 1..2] can land.
        let targets = s.targets_into_window(2);
        assert_eq!(targets.len(), 4);
        assert!(targets.contains(&VarId::pair("y", 4, 2)));
        assert!(!targets.contains(&VarId::pair("y", 5, 1)));
    }

    #[test]
    fn row_finiteness_is_enforced() {
        let f = Field::default_field();
        // y[i,j] ↦ w[i] ignores an unbounded j: infinite fan-in, rejected.
        let bad = TailRule::new(
            "y",
            IndexMatcher::from(1),
            Some(IndexMatcher::from(1)),
            f.one(),
            "w",
            IndexExpr::shift(IndexSel::First, 1, 1),
            None,
        );
        assert!(matches!(bad, Err(SubstError::NotRowFinite(_))));
        // Bounding j makes it legal.
        let ok = TailRule::new(
            "y",
            IndexMatcher::from(1),
            Some(IndexMatcher {
                min: 1,
                max: Some(4),
                modulus: 1,
                residue: 0,
            }),
            f.one(),
            "w",
            IndexExpr::shift(IndexSel::First, 1, 1),
            None,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn windowed_and_symbolic_substitution_agree() {
        let f = Field::default_field();
        let form = canon::v_infinity(&f);
        // Reindex: x[i] ↦ 2·x[i+1], y[i,j] ↦ y[i+1,j], rest zero.
        let mut s = Substitution::new(&f, UnmatchedPolicy::Zero);
        s.add_rule(
            TailRule::new(
                "x",
                IndexMatcher::from(1),
                None,
                f.scalar_u64(2),
                "x",
                IndexExpr::shift(IndexSel::First, 1, 2),
                None,
            )
            .unwrap(),
        );
        s.add_rule(
            TailRule::new(
                "y",
                IndexMatcher::from(1),
                Some(IndexMatcher::from(1)),
                f.one(),
                "y",
                IndexExpr::shift(IndexSel::First, 1, 2),
                Some(IndexExpr::shift(IndexSel::Second, 1, 1)),
            )
            .unwrap(),
        );
        let sym = substitute_structured(&form, &s).unwrap();
        for n in [2u32, 5, 9] {
            assert_eq!(sym.truncate(n), s.apply_window(&form, n), "window {n}");
        }
        // The symbolic result is still a single mixed family with coeff 6.
        assert_eq!(sym.terms().len(), 1);
        match &sym.terms()[0] {
            GeneratorTerm::Mixed(mf) => {
                assert_eq!(mf.coeff, f.scalar_u64(6));
                assert_eq!(mf.outer_start, 2);
            }
            other => panic!("expected mixed family, got {other:?}"),
        }
    }

    #[test]
    fn functoriality_through_composition() {
        let f = Field::default_field();
        let form = canon::v_r(&f, 2);
        // s: embedding-style map with a tail rule; t: finite basis change.
        let mut s = Substitution::new(&f, UnmatchedPolicy::Zero);
        s.map(x(1), SparsePoly::var(&f, VarId::single("a", 1)))
            .unwrap();
        s.map(x(2), SparsePoly::var(&f, VarId::single("a", 2)))
            .unwrap();
        s.add_rule(
            TailRule::new(
                "y",
                IndexMatcher::from(1),
                Some(IndexMatcher::from(1)),
                f.one(),
                "b",
                IndexExpr::shift(IndexSel::First, 1, 1),
                Some(IndexExpr::shift(IndexSel::Second, 1, 1)),
            )
            .unwrap(),
        );
        s.add_rule(
            TailRule::new(
                "z",
                IndexMatcher::from(1),
                None,
                f.one(),
                "c",
                IndexExpr::shift(IndexSel::First, 1, 1),
                None,
            )
            .unwrap(),
        );
        let mut t = Substitution::identity(&f);
        t.map(
            VarId::single("a", 1),
            SparsePoly::var(&f, VarId::single("a", 1))
                .add(&SparsePoly::var(&f, VarId::single("a", 2)).scale(&f.scalar_u64(3))),
        )
        .unwrap();
        t.map(
            VarId::pair("b", 1, 1),
            SparsePoly::var(&f, VarId::single("c", 9)),
        )
        .unwrap();
        let st = s.compose_finite(&t).unwrap();
        for n in [3u32, 6, 10] {
            let two_step = s
                .apply_window(&form, n + 9) // wide enough before the second map
                ;
            let two_step = two_step.substitute(|v| t.image_of(v)).truncate(n);
            assert_eq!(st.apply_window(&form, n), two_step, "window {n}");
        }
    }
}
