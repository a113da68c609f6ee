//! The canonical spaces: the infinite-rank model, the finite-rank models, and
//! the quadratic-pencil family.
//!
//! Conventions: the infinite model is `3·Σ_{i≥1} x[i]·Σ_{j≥1} y[i,j]²`; the
//! finite model of rank r is `3·Σ_{i≤r} x[i]·Σ_{j≥1} y[i,j]² + Σ_{i≥1} z[i]³`;
//! the pencil space for finite forms p₁,…,p_r of degree n−2 is
//! `Σ_j p_j·Σ_k g[j,k]² + Σ_l h[l]^n`, where the `g` and `h` families are
//! reserved so they can never collide with variables of the given pⱼ's.

use crate::forms::{GeneratorTerm, MixedFamily, PowerFamily, StructuredForm};
use crate::poly::SparsePoly;
use crate::scalar::Field;
use crate::vars::VarId;
use thiserror::Error;

/// Families reserved for pencil-space tails.
pub const PENCIL_SQUARE_FAMILY: &str = "g";
pub const PENCIL_POWER_FAMILY: &str = "h";

#[derive(Debug, Error)]
pub enum CanonError {
    #[error("pencil polynomial has degree {got}, expected {want}")]
    DegreeMismatch { got: u32, want: u32 },
    #[error("pencil degree must be at least 4 (quadratic multipliers); got {0}")]
    DegreeTooSmall(u32),
    #[error("pencil polynomials may not use the reserved family {0:?}")]
    ReservedFamily(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CanonicalKind {
    /// The infinite-residual-rank model space.
    VInfinity,
    /// The finite model space of residual rank r.
    VR(u32),
    /// The pencil space built from the given degree-(n−2) multipliers.
    VP(Vec<SparsePoly>),
}

#[derive(Clone, Debug)]
pub struct CanonicalSpace {
    pub kind: CanonicalKind,
    pub form: StructuredForm,
    /// Suggested truncation window for desk-scale inspection.
    pub window_hint: u32,
}

/// `3·Σ_{i≥1} x[i]·(Σ_{j≥1} y[i,j]²)`.
pub fn v_infinity(field: &Field) -> StructuredForm {
    StructuredForm::from_terms(
        field,
        3,
        vec![GeneratorTerm::Mixed(MixedFamily {
            coeff: field.scalar_u64(3),
            outer: "x".into(),
            outer_start: 1,
            inner: "y".into(),
            inner_exp: 2,
            inner_start: 1,
        })],
    )
}

/// `3·Σ_{i=1..r} x[i]·(Σ_{j≥1} y[i,j]²) + Σ_{i≥1} z[i]³`.
pub fn v_r(field: &Field, r: u32) -> StructuredForm {
    let mut terms = Vec::new();
    for i in 1..=r {
        terms.push(GeneratorTerm::Scaled(
            SparsePoly::var(field, VarId::single("x", i)),
            PowerFamily {
                family: "y".into(),
                fixed: Some(i),
                coeff: field.scalar_u64(3),
                exp: 2,
                start: 1,
            },
        ));
    }
    terms.push(GeneratorTerm::Power(PowerFamily {
        family: "z".into(),
        fixed: None,
        coeff: field.one(),
        exp: 3,
        start: 1,
    }));
    StructuredForm::from_terms(field, 3, terms)
}

/// `Σ_j p_j·(Σ_k g[j,k]²) + Σ_l h[l]^degree` for finite multipliers p_j of
/// degree `degree − 2`.
pub fn v_p(field: &Field, degree: u32, polys: &[SparsePoly]) -> Result<StructuredForm, CanonError> {
    if degree < 4 {
        return Err(CanonError::DegreeTooSmall(degree));
    }
    let want = degree - 2;
    let mut terms = Vec::new();
    for (j, p) in polys.iter().enumerate() {
        if p.degree() != want {
            return Err(CanonError::DegreeMismatch {
                got: p.degree(),
                want,
            });
        }
        for v in p.support() {
            if v.family() == PENCIL_SQUARE_FAMILY || v.family() == PENCIL_POWER_FAMILY {
                return Err(CanonError::ReservedFamily(v.family().to_string()));
            }
        }
        terms.push(GeneratorTerm::Scaled(
            p.clone(),
            PowerFamily {
                family: PENCIL_SQUARE_FAMILY.into(),
                fixed: Some(j as u32 + 1),
                coeff: field.one(),
                exp: 2,
                start: 1,
            },
        ));
    }
    terms.push(GeneratorTerm::Power(PowerFamily {
        family: PENCIL_POWER_FAMILY.into(),
        fixed: None,
        coeff: field.one(),
        exp: degree,
        start: 1,
    }));
    Ok(StructuredForm::from_terms(field, degree, terms))
}

pub fn make_v_infinity(field: &Field) -> CanonicalSpace {
    CanonicalSpace {
        kind: CanonicalKind::VInfinity,
        form: v_infinity(field),
        window_hint: 10,
    }
}

pub fn make_v_r(field: &Field, r: u32) -> CanonicalSpace {
    CanonicalSpace {
        kind: CanonicalKind::VR(r),
        form: v_r(field, r),
        window_hint: 10.max(r + 2),
    }
}

pub fn make_v_p(
    field: &Field,
    degree: u32,
    polys: &[SparsePoly],
) -> Result<CanonicalSpace, CanonError> {
    let form = v_p(field, degree, polys)?;
    Ok(CanonicalSpace {
        kind: CanonicalKind::VP(polys.to_vec()),
        form,
        window_hint: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{Monomial, Vector};

    #[test]
    fn window_one_of_infinite_model() {
        let f = Field::default_field();
        let t = v_infinity(&f).truncate(1);
        let expected = SparsePoly::monomial(
            &f,
            Monomial::from_powers(&[(VarId::single("x", 1), 1), (VarId::pair("y", 1, 1), 2)]),
            f.scalar_u64(3),
        );
        assert_eq!(t, expected);
        // Evaluating at a pure y-vector gives zero.
        let w = Vector::unit(&f, VarId::pair("y", 1, 1));
        assert_eq!(v_infinity(&f).evaluate(&w), f.zero());
    }

    #[test]
    fn rank_zero_model_is_pure_cubes() {
        let f = Field::default_field();
        let t = v_r(&f, 0).truncate(3);
        let mut expected = SparsePoly::zero(&f, 3);
        for i in 1..=3 {
            expected = expected.add(&SparsePoly::var(&f, VarId::single("z", i)).pow(3));
        }
        assert_eq!(t, expected);
    }

    #[test]
    fn killing_x_specializes_finite_model_to_cubes() {
        let f = Field::default_field();
        let form = v_r(&f, 2);
        let window = form.truncate(4);
        let killed = window.substitute(|v| {
            if v.family() == "x" {
                SparsePoly::zero(&f, 1)
            } else {
                SparsePoly::var(&f, v.clone())
            }
        });
        assert_eq!(killed, v_r(&f, 0).truncate(4));
    }

    #[test]
    fn pencil_space_shape_and_validation() {
        let f = Field::default_field();
        let x1 = SparsePoly::var(&f, VarId::single("x", 1));
        let x2 = SparsePoly::var(&f, VarId::single("x", 2));
        let p = x1.mul(&x1).add(&x2.mul(&x2));
        let space = v_p(&f, 4, &[p.clone()]).unwrap();
        // Window 2: (x1²+x2²)(g[1,1]²+g[1,2]²) + h[1]⁴ + h[2]⁴.
        let mut expected = SparsePoly::zero(&f, 4);
        for k in 1..=2 {
            expected = expected.add(
                &p.mul(&SparsePoly::var(&f, VarId::pair(PENCIL_SQUARE_FAMILY, 1, k)).pow(2)),
            );
        }
        for l in 1..=2 {
            expected =
                expected.add(&SparsePoly::var(&f, VarId::single(PENCIL_POWER_FAMILY, l)).pow(4));
        }
        assert_eq!(space.truncate(2), expected);
        // Degree validation.
        assert!(matches!(
            v_p(&f, 5, &[p.clone()]),
            Err(CanonError::DegreeMismatch { got: 2, want: 3 })
        ));
        assert!(matches!(v_p(&f, 3, &[]), Err(CanonError::DegreeTooSmall(3))));
        // Reserved-family validation.
        let bad = SparsePoly::var(&f, VarId::pair(PENCIL_SQUARE_FAMILY, 1, 1))
            .mul(&SparsePoly::var(&f, VarId::single("x", 1)));
        assert!(matches!(
            v_p(&f, 4, &[bad]),
            Err(CanonError::ReservedFamily(_))
        ));
        // Empty pencil: the power tail alone.
        let h_only = v_p(&f, 4, &[]).unwrap();
        assert_eq!(
            h_only.truncate(1),
            SparsePoly::var(&f, VarId::single(PENCIL_POWER_FAMILY, 1)).pow(4)
        );
    }
}
