//! Hybrid black-box prompt tuning: a frozen teacher behind a metered
//! forward-only API, a distilled student surrogate for gradient descent, and
//! CMA-ES in a random low-dimensional prompt subspace.

pub mod checkpoint;
pub mod diffcore;
pub mod error;
pub mod models;
pub mod cmaes;
pub mod promptspace;
pub mod blackbox;
pub mod data;
pub mod distill;
pub mod trainer;
pub mod bench;

pub use error::{Error, Result};
