//! Tensor programs: a straight-line language for wide random computations,
//! its infinite-width limit theory, and a finite-width simulator.

pub mod applications;
pub mod cdc;
pub mod detranspose;
pub mod dsl;
pub mod error;
pub mod expr;
pub mod gaussian;
pub mod limits;
pub mod linalg;
pub mod nonlin;
pub mod program;
pub mod seeds;
pub mod simulate;
pub mod spec;

pub use error::{Result, TpError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
