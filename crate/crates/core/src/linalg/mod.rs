//! Linear algebra kernels shared by the solvers and the differentiation path.

pub mod dense;
pub mod ldl;
pub mod ordering;

pub use dense::{condition_estimate, spectral_condition, PseudoInverse};
pub use ldl::{LdlError, LdlFactor};
pub use ordering::{minimum_degree, NodeKind};
