//! Crate-level error umbrella over the per-module error types.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemError {
    #[error(transparent)]
    Data(#[from] crate::event_data::DataError),
    #[error(transparent)]
    Stat(#[from] crate::statistics::StatError),
    #[error(transparent)]
    Likelihood(#[from] crate::likelihood::LikelihoodError),
    #[error(transparent)]
    Fit(#[from] crate::estimator::FitError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error(transparent)]
    Experiment(#[from] crate::experiments::ExperimentError),
}
