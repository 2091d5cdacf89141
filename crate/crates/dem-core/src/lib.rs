//! Durational event models: continuous-time network interactions with
//! explicit begin and end times, modeled through separate formation
//! (incidence) and dissolution (duration) intensities.
//!
//! The crate provides the event-stream data layer, incrementally maintained
//! summary statistics, exact piecewise-constant likelihood evaluation, a
//! scalable three-step block-coordinate ascent fitter with a full
//! Newton-Raphson reference, standard errors through a Schur complement,
//! greedy model selection, an exact event-stream sampler, and the simulation
//! study / benchmark harness.

pub mod error;
pub mod estimator;
pub mod event_data;
pub mod experiments;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod oracle;
pub mod simulator;
pub mod statistics;

pub use error::DemError;
pub use event_data::{ActorId, DurationalEvent, EventStream, RiskSetPolicy, Time, TransitionKind, TransitionRecord};
pub use likelihood::{BaselineGrid, LikelihoodGrid, ParamVector};
pub use model::{ModelSpec, SubModelSpec};
pub use statistics::StatisticKind;
