//! Metropolis-Hastings sampling with multivariate Gaussian tangent
//! proposals, block-Gibbs scheduling, a univariate slice baseline, and the
//! efficiency diagnostics used to compare them.

pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod mgt;
pub mod model;
pub mod mvn;
pub mod slice;
pub mod theorem;

pub use error::{Error, Result};
