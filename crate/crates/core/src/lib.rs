//! Iterative feature matching (IFM) for domain generalization on a linear
//! Gaussian model with invariant and spurious latent blocks.
//!
//! The crate is organised bottom-up:
//!
//! - [`env_model`]: problem instances, environments, samples and exact moments.
//! - [`gaussian_risk`]: closed-form and empirical accuracy of linear classifiers.
//! - [`subspace_matcher`]: orthonormal projections that equalise class-conditional moments.
//! - [`algorithms`]: IFM, ERM, IRMv1, CORAL, the two-environment closed form and the oracle.
//! - [`theory_checks`]: executable versions of the lower bounds and the shrink-rate lemma.
//! - [`experiments`]: sweeps, check batteries and SVG plots.

pub mod algorithms;
pub mod env_model;
pub mod error;
pub mod experiments;
pub mod gaussian_risk;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod subspace_matcher;
pub mod theory_checks;

pub use algorithms::{
    coral_fit, erm_fit, ifm_run, irm_fit, oracle_w_star, simple_algo, Algorithm, CoralConfig,
    CoralMode, Diagnostics, FeaturizerStack, IfmConfig, IfmInput, Partition, PartitionPolicy, RankMode,
    TrainedPredictor,
};
pub use env_model::{
    analytic_moments, flip_test_environment, sample_dataset, sample_environment,
    sample_environments, Dataset, EnvParams, EnvSampler, EnvironmentSet, Label, LabeledSample,
    ModelSpec, MomentSet, MomentSource, SpuriousMean,
};
pub use error::{Error, Result};
pub use gaussian_risk::{
    empirical_accuracy, estimate_moments, standard_normal_cdf, zero_one_accuracy, LinearClassifier,
};
pub use optim::{Descent, OptSettings};
pub use subspace_matcher::{
    max_dim_match, moment_differences, penalty_match, spectral_match, DimSearch, MatchMethod,
    MatcherConfig, MomentDifference, MomentForm, Pairing, ProjectionStep,
};

/// Matrix type used throughout.
pub type Mat = nalgebra::DMatrix<f64>;
/// Vector type used throughout.
pub type Vector = nalgebra::DVector<f64>;
