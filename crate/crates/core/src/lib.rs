//! ℓ1-constrained sparse deep networks.
//!
//! Exact input gradients and Laplacians, projected-gradient training on the
//! ℓ1 ball, closed-form generalization and derivative bounds with randomized
//! audits, truncated-normal data generation and a seeded teacher-student
//! experiment harness.

pub mod activation;
pub mod bounds;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod matrix;
pub mod net;
pub mod sparsity;

pub use activation::ActivationKind;
pub use bounds::{BoundInputs, BoundReport};
pub use datagen::{DataSpec, Dataset, TeacherSpec};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use net::{ForwardTrace, Network};
pub use sparsity::{project_l1, Architecture, TrainConfig};
pub use experiment::{run_experiment, ExperimentConfig, TrialResult};
