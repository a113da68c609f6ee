//! Variable identifiers for a countable coordinate supply.
//!
//! Variables live in named families (`x`, `y`, `z`, …) and carry one or two
//! 1-based indices: `x[3]`, `y[1,2]`. The total order — family name first,
//! then the index tuple — fixes deterministic iteration everywhere else in
//! the crate.

use std::fmt;
use std::sync::Arc;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VarId {
    family: Arc<str>,
    index: (u32, Option<u32>),
}

impl VarId {
    /// Single-index variable, e.g. `x[3]`.
    pub fn single(family: &str, i: u32) -> VarId {
        assert!(!family.is_empty() && i >= 1, "family nonempty, indices 1-based");
        VarId {
            family: Arc::from(family),
            index: (i, None),
        }
    }

    /// Double-index variable, e.g. `y[1,2]`.
    pub fn pair(family: &str, i: u32, j: u32) -> VarId {
        assert!(
            !family.is_empty() && i >= 1 && j >= 1,
            "family nonempty, indices 1-based"
        );
        VarId {
            family: Arc::from(family),
            index: (i, Some(j)),
        }
    }

    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn idx1(&self) -> u32 {
        self.index.0
    }

    pub fn idx2(&self) -> Option<u32> {
        self.index.1
    }

    /// Largest index appearing in this identifier (used by truncation windows).
    pub fn max_index(&self) -> u32 {
        self.index.0.max(self.index.1.unwrap_or(0))
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            (i, None) => write!(f, "{}[{}]", self.family, i),
            (i, Some(j)) => write!(f, "{}[{},{}]", self.family, i, j),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_family_then_index() {
        let a = VarId::single("x", 2);
        let b = VarId::single("x", 10);
        let c = VarId::single("y", 1);
        let d = VarId::pair("x", 2, 1);
        assert!(a < b, "numeric index order, not string order");
        assert!(b < c, "family order dominates");
        assert!(a < d, "x[2] sorts before x[2,1]");
    }

    #[test]
    fn display_matches_dsl_syntax() {
        assert_eq!(VarId::single("x", 3).to_string(), "x[3]");
        assert_eq!(VarId::pair("y", 1, 2).to_string(), "y[1,2]");
    }
}
