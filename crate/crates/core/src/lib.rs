//! Regularized targeted estimation inside highly adaptive lasso working models.

pub mod ate;
pub mod atmle;
pub mod columns;
pub mod eic;
pub mod error;
pub mod glm_lasso;
pub mod hal_basis;
pub mod linalg;
pub mod rng;
pub mod simstudy;
pub mod stats;
pub mod survival;
pub mod targeting;
pub mod working_model;

pub use error::{HalError, Result};
