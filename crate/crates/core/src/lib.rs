//! Spatial additive mixed models with Moran-eigenvector spatially varying
//! coefficients and non-spatially varying coefficients, fitted by a fast REML
//! scheme whose iterations never touch `N`-dimensional data, with BIC/AIC-driven
//! selection of each coefficient's type.

pub mod basis;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod reml;
pub mod selection;
pub mod sim;
pub mod terms;

pub use error::{Error, Result};
