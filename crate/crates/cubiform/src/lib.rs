//! Exact residual-rank computations and constructive embeddings for cubic
//! forms in countably many variables.
//!
//! The crate works over a prime field (default `F_101`) extended on demand by
//! square and cube roots. Cubic forms are held in closed catalog shapes that
//! keep infinite tails finitely described, which is what makes the residual
//! rank — the dimension of the span of derivative classes modulo
//! finite-strength quadratics — computable exactly. On top of that sit the
//! canonical spaces, substitution certificates, good-table growing procedures,
//! and the embedding assembler.

pub mod canon;
pub mod dsl;
pub mod embed;
pub mod forms;
pub mod harness;
pub mod linalg;
pub mod poly;
pub mod quad;
pub mod report;
pub mod rrk;
pub mod scalar;
pub mod subst;
pub mod tables;
pub mod vars;

pub use dsl::{parse_form, parse_poly, DslError};
pub use embed::{EmbeddingCertificate, GroupedForm};
pub use forms::{GeneratorTerm, MixedFamily, PowerFamily, StructuredForm, TruncationStream};
pub use harness::{
    gen_cubic_certified, gen_structured_cubic, run_all_suites, run_suite, GenOutcome, GenParams,
    RrkTarget, SuiteReport,
};
pub use poly::{Monomial, SparsePoly, Vector};
pub use quad::{Exactness, QuadraticForm, Rank};
pub use rrk::{ResidualRankReport, ResidueClass};
pub use scalar::{Field, FieldError, Scalar};
pub use subst::{Substitution, UnmatchedPolicy};
pub use tables::{
    assemble_embedding, witness_search, ConstraintSystem, GoodTable, GoodnessReport, TableError,
    TableMode, DEFAULT_BUDGET,
};
pub use vars::VarId;
