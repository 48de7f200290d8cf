//! Sparse polygenic risk scores with univariate-guided lasso.
//!
//! The crate covers the whole pipeline: packed genotype storage, synthetic
//! LD-structured data, per-variant univariate and leave-one-out fits, a
//! constrained penalized-GLM path solver, the lasso / uniLasso / uniLasso-ES
//! fitting procedures and their evaluation metrics.

pub mod error;
pub mod evaluate;
pub mod genotype;
mod linalg;
pub mod pipeline;
pub mod simulate;
pub mod solver;
pub mod univariate;

use std::fmt;
use std::str::FromStr;

pub use error::{PrsError, Result};

/// Response family of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Binomial,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = PrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "binomial" => Ok(Family::Binomial),
            other => Err(PrsError::InvalidInput(format!("unknown family {other:?}"))),
        }
    }
}
