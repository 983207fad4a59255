//! Hyperparameter optimization with a gradient-incoherence regularizer.
//!
//! The pieces, bottom up:
//!
//! * [`diffcore`]: a small reverse-mode AD engine with gradient-of-gradient.
//! * [`models`]: parametric models, losses, empirical risk, data generators.
//! * [`samplers`]: SGD / Langevin / differentially private SGLD inner loops.
//! * [`hyperopt`]: the outer loop, with truncated hypergradients.
//! * [`bounds`]: PAC-Bayes bound evaluators and divergence utilities.
//! * [`experiments`]: the feature-selection and weight-decay harnesses.

pub mod bounds;
pub mod diffcore;
pub mod experiments;
pub mod hyperopt;
pub mod models;
pub mod samplers;
pub mod util;
