//! Sparse variational GP with spherical-harmonic inducing features.
//!
//! Inducing variables are projections of the latent function onto harmonic
//! features, so `K_uu` is diagonal and `K_uf` is the feature matrix. The
//! posterior `q(u) = N(m, S)` is kept in unwhitened coordinates with
//! `S = L Lᵀ`.

pub mod elbo;
pub mod fit;
pub mod gradcheck;
pub mod likelihood;
pub mod metrics;
pub mod model;

pub use elbo::{elbo, elbo_gradients, ElboGradients, ElboValue, ParamGroup, ParamId, ParamLayout};
pub use fit::{fit, fit_resume, AdamState, FitConfig, FitOutcome, TraceRow, TrainingTrace};
pub use gradcheck::{gradient_check, random_state, GradCheckEntry, GradCheckTolerance};
pub use likelihood::{ExpectationEngine, ExpectedLogLik, Likelihood, Link};
pub use metrics::{auc, auc_null_std, evaluate, rmse, Metrics, PointPrediction};
pub use model::{kl_term, predict, Hyper, InducingModel, Prediction, VariationalState};
