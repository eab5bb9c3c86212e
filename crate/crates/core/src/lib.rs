pub mod augmentation;
pub mod contrastive_losses;
pub mod discrete_prob;
pub mod downstream;
pub mod encoder_nn;
pub mod error;
pub mod fdivergence;
pub mod experiments;
pub mod linalg;
pub mod scalar;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use fdivergence::FGenerator;
pub use scalar::Real;

pub type Joint = discrete_prob::DiscreteJoint<f64>;
pub type Scores = discrete_prob::ScoreTable<f64>;
