//! Entropy-regularized impulse control for one-dimensional diffusions.
//!
//! Three independent routes to the randomized value function:
//!
//! * [`fixed_point`]: finite-difference fixed-point iteration of the
//!   compound operator "randomized stopping after a Gibbs jump".
//! * [`policy_eval`]: Monte Carlo evaluation of a randomized policy executed
//!   as a controlled compound-Poisson jump diffusion.
//! * [`td`]: model-free temporal-difference training of a value network.

pub mod error;
pub mod fd;
pub mod fixed_point;
pub mod grid;
pub mod model;
pub mod nonlocal;
pub mod policy_eval;
pub mod sde;
pub mod td;

pub use error::{Error, Result};
