//! Numerical machinery for β-ensembles (log-gases) with one-cut regular
//! polynomial potentials.

pub mod cli;
pub mod convexify;
pub mod diagnostics;
pub mod equilibrium;
pub mod poly;
pub mod potentials;
pub mod quadrature;
pub mod sampler;
