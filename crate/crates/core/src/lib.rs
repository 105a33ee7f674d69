//! Stability certificates for nonlinear sampled-data systems.

pub mod conic;
pub mod expr;
pub mod poly;
pub mod simulate;
pub mod sosprog;
pub mod stability;

pub use expr::{parse_polynomial, parse_system, SystemDef};
pub use poly::{monomials_upto, Binding, Monomial, PolyError, Polynomial, VarSet};

pub use faer;
