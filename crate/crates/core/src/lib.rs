//! Factor extraction for dynamic factor models (principal components) and
//! multi-level dynamic factor models (sequential least squares), together
//! with finite-sample estimates of the asymptotic MSE of the factors and a
//! Monte Carlo harness for studying them.
//!
//! ```
//! use mldfm::panel::{DesignSpec, Design, GroupStructure};
//! use mldfm::sls::{sls_estimate, SlsOptions};
//!
//! let design = Design::generate(DesignSpec {
//!     structure: GroupStructure::new(vec![25, 25], 1, vec![1, 1])?,
//!     t: 50,
//!     phi: 0.5,
//!     c: 0.25,
//!     tau: 0.0,
//!     heteroscedastic: false,
//!     seed: 1,
//! })?;
//! let panel = design.simulate(2)?;
//! let est = sls_estimate(&panel, &SlsOptions::default())?;
//! assert!(est.converged);
//! # Ok::<(), mldfm::Error>(())
//! ```

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ident;
pub mod linalg;
pub mod montecarlo;
pub mod mse;
pub mod panel;
pub mod pc;
pub mod seed;
pub mod sls;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/mse.md")]
    mod mse {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    mod monte_carlo {}
}
