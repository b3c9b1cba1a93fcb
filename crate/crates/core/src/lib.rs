//! Robust imitation learning across perturbed environment dynamics.
//!
//! The crate trains a single policy that imitates expert demonstrations
//! gathered from several variants of an environment whose physical
//! parameters (wind, mass, gravity, ...) differ, and evaluates how well the
//! result holds up on dynamics it never saw. It contains:
//!
//! - small benchmark environments with scalable dynamics ([`env`]),
//! - exact occupancy-measure machinery for tabular MDPs, used both as a
//!   verification oracle and to check the theory the training rule rests on
//!   ([`tabular`]),
//! - a minimal reverse-mode MLP stack with the double-backward pass needed
//!   for gradient penalties ([`neural`]),
//! - PPO with GAE for policy optimization ([`ppo`]),
//! - expert construction and demonstration recording ([`experts`]),
//! - discriminator banks, surrogate rewards, and importance weighting for
//!   adversarial imitation ([`adversary`]),
//! - the end-to-end training loops ([`imitate`]),
//! - robustness sweeps over dynamics grids ([`robust`]).

pub mod adversary;
pub mod env;
pub mod error;
pub mod experts;
pub mod imitate;
pub mod neural;
pub mod par;
pub mod ppo;
pub mod rng;
pub mod robust;
pub mod tabular;

pub use error::{Error, Result};
pub use par::Parallelism;
