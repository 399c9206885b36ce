pub mod error;
pub mod analysis;
pub mod bsde;
pub mod cli;
pub mod forward;
pub mod gaussian_oracle;
pub mod io;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod timenets;

pub use error::{Error, Result};
