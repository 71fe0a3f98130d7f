//! Physics-informed hybrid models with a Bayesian output layer and
//! uncertainty propagation through the physics.

pub mod bayes;
pub mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod physics;
pub mod piml;
pub mod rng;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
pub use nn::{AdamState, DenseLayer, DenseNetwork, GradientTape, Parameterized};
pub use physics::{Physics, PhysicsModel};
pub use piml::{PimlModel, TransferMode, TransferNet};
