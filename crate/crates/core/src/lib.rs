//! Hierarchical multi-output Gaussian processes with latent output variables.
//!
//! Outputs are embedded in a latent space whose kernel `k_H` correlates them,
//! replicas of one output share a parent function through `k_g`, and each
//! replica adds its own deviation through `k_f`. The joint covariance is
//! `K^H ⊗ K^X` and inference uses inducing variables with a Kronecker
//! structured Gaussian posterior.

pub mod autodiff;
pub mod data;
pub mod elbo;
pub mod error;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod prediction;
pub mod training;

pub use data::{HierarchicalDataset, SplitPlan, SyntheticSettings};
pub use elbo::{ElboBreakdown, ModelState, NoiseModel, TrainingData};
pub use error::{Error, Result};
pub use kernels::{
    HierarchicalKernelSpec, KernelFamily, ReplicaInputs, StationaryKernelSpec, TaggedPoints,
};
pub use latent::{InducingState, LatentPosterior, PsiStats};
pub use linalg::{CholeskyFactor, Matrix};
pub use params::FlatParams;
pub use prediction::{PredictOptions, PredictiveMoments};
pub use training::{FitResult, ModelConfig, OptimizerConfig};
