//! Probability flow inference: recover force fields of diffusion processes
//! from independent cross-sectional snapshots.
//!
//! The crate is organised bottom-up:
//!
//! * [`gaussian`] and [`ou_theory`] hold closed-form Gaussian and
//!   Ornstein–Uhlenbeck analytics used as oracles.
//! * [`srn`] simulates reaction networks (Gillespie, chemical Langevin).
//! * [`autodiff`] and [`nn`] provide a small reverse-mode tape and
//!   feedforward networks; [`score`] trains scores by sliced score matching.
//! * [`force`] fits force fields through the probability-flow ODE.
//! * [`evaluation`] contains diagnostics (energy distance, PR-AUC, fixed
//!   points, knockdowns).

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod force;
pub mod gaussian;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod ou_theory;
pub mod par;
pub mod quad;
pub mod rng;
pub mod score;
pub mod srn;

pub use error::{PfiError, Result};
