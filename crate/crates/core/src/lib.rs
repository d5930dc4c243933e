//! A numerical laboratory for comparing finite-width networks with their
//! empirical and infinite neural tangent kernels.
//!
//! The crate is organized bottom-up:
//!
//! * [`nn`]: NTK-parameterized networks and exact derivatives (gradients,
//!   JVPs, Hessian-vector products).
//! * [`kernel`]: empirical NTK gram matrices, closed-form infinite NTKs
//!   (MLP and conv/avg-pool recursions) and Monte-Carlo estimates.
//! * [`taylor`]: first- and second-order Taylor models around anchor weights.
//! * [`trainer`]: the shared SGD-with-momentum loop, geometric checkpoints,
//!   kernel-system training and direct ridge solves.
//! * [`scaling`]: learning curves and the saturating power-law fit
//!   `L(n) = A(1/n + α)^β`.
//! * [`data`]: the synthetic noisy-parity task and labeled image corpora.
//! * [`experiment`]: config-driven sweeps and report generation.

pub mod data;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod nn;
pub mod real;
pub mod scaling;
pub mod taylor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{Precision, Real};
