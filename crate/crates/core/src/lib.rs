//! Signature-kernel collocation solvers for linear path-dependent PDEs.
//!
//! The crate is layered bottom-up: [`paths`] holds grids, paths and the
//! fractional-kernel simulators; [`static_kernels`] and [`goursat`] compute
//! signature kernels and their directional derivatives; [`operator`] applies
//! PDE operators to the product kernel; [`recovery`] solves the collocation
//! problem; [`experiments`] wires everything into the pricing studies.

pub mod error;
pub mod experiments;
pub mod goursat;
pub mod linalg;
pub mod operator;
pub mod paths;
pub mod recovery;
pub mod sig_oracle;
pub mod static_kernels;

pub use error::{Error, Result};
