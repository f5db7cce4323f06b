//! Numerical laboratory for degenerate Kolmogorov operators of hypoelliptic type.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod degiorgi;
pub mod error;
pub mod expr;
pub mod fd_solver;
pub mod field;
pub mod group_conv;
pub mod kernel;
pub mod lie_group;
pub mod quadrature;
pub mod sde_oracle;

pub use error::{Error, ErrorKind, Result};
