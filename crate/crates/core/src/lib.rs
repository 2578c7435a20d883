//! Solvers for backward and coupled forward-backward stochastic difference
//! equations on finite probability trees.

pub mod bsde;
pub mod cli;
pub mod dsl;
pub mod filtration;
pub mod instances;
pub mod linear;
pub mod nonlinear;
pub mod oracle;
pub mod scenario;
pub mod system;
