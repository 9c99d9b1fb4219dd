//! Personalized federated training: proximal local updates, attention-based
//! aggregation, the FedAvg and local baselines, and the convergence bound.

mod aggregate;
mod bound;
mod config;
mod local;
mod train;

use thiserror::Error;

use crate::model::ModelError;
use crate::threats::ThreatError;

pub use aggregate::{
    aggregate_personalized, aggregation_weights, fedavg_aggregate, pairwise_sum, relative_distance, resolve_phi,
    similarity, similarity_with, AggregationRow, RowParams,
};
pub use bound::{
    simulate_quadratic, theoretical_bound, Bound, BoundInputs, ConvergenceTrace, QuadraticObjective, QuadraticRun,
};
pub use config::{FedConfig, LrSchedule, Mode, PerClient, PhiRule};
pub use local::{local_update, prox_step, Adam};
pub use train::{
    init_states, network_for, run_round, run_training, split_losses, ClientState, RoundLog, ServerState, TrainingData,
    TrainingOutcome,
};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("reference model has zero norm")]
    ZeroReferenceNorm,
    #[error("aggregation needs at least one peer")]
    NoPeers,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at local iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("round {round}: client {client} produced a non-finite loss")]
    Diverged { round: usize, client: usize },
    #[error("bound needs K >= 2, got {0}")]
    KTooSmall(usize),
    #[error("constant {0} must be positive")]
    NonPositiveConstant(&'static str),
    #[error("training and validation splits must be nonempty")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
}
