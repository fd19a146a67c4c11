//! Similarity-guided surrogate selection and transfer-attack risk estimation.
//!
//! A target model is compared against a pool of surrogates by CKA over
//! probe-set activations. Surrogates are split into high- and low-similarity
//! pools, attacked with FGSM or PGD, and the transfer success rates are
//! regressed on similarity to estimate worst-case risk.

pub mod activations;
pub mod attacks;
mod binio;
pub mod error;
pub mod matcore;
pub mod pipeline;
pub mod registry;
pub mod riskeval;
pub mod selection;
pub mod similarity;
pub mod zoo;

pub use error::{Error, Result};
pub use matcore::{Matrix, RngStream};
