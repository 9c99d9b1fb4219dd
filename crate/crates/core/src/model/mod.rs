//! Forecasting network: per-station convolutional encoder and multi-quantile
//! decoder around a shared spatial-temporal graph block.

mod config;
mod layers;
mod network;
mod params;

use thiserror::Error;

use crate::gradtape::TapeError;

pub use config::{same_padding, ModelConfig, QuantileConfig};
pub use layers::{
    chebyshev_basis, decode, encode, graph_convolution, normalized_laplacian, quantile_loss, spatial_attention,
    st_block, temporal_attention, temporal_convolution, DecoderParams, EncoderParams, ScaledLaplacian, StBlockParams,
};
pub use network::{Batch, ForecastModel, ForecastNetwork, JointGrad};
pub use params::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, ParamLayout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
