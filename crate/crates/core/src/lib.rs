//! Impute-then-regress pipelines for regression with missing values.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense Gaussian algebra (Cholesky, conditioning, power iteration).
//! - [`synth`]: synthetic Gaussian problems, ridge responses and MCAR / self-masking masks.
//! - [`oracles`]: closed-form Bayes predictors, conditional imputation and Monte-Carlo checks.
//! - [`imputers`]: mean and chained-equation imputers, mask concatenation, masked moments.
//! - [`autodiff`], [`nn`]: a small reverse-mode graph, MLPs, Adam and the training loop.
//! - [`neumiss`]: the Neumann imputation block trained jointly with an MLP.
//! - [`gbrt`]: histogram gradient boosting with missing-incorporated-in-attributes splits.
//! - [`theory`]: numeric checks of the curvature bounds and the counterexamples.
//! - [`bench`]: the experiment grid, R² scoring and summaries.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gbrt;
pub mod imputers;
pub mod linalg;
pub mod neumiss;
pub mod nn;
pub mod oracles;
pub mod rng;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
