use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::dataio::INPUT_FEATURES;

/// Quantile levels and forecast horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileConfig {
    pub levels: Vec<f64>,
    pub horizon: usize,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.1, 0.5, 0.9],
            horizon: 6,
        }
    }
}

impl QuantileConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = !self.levels.is_empty()
            && self.levels.iter().all(|q| *q > 0.0 && *q < 1.0)
            && self.levels.windows(2).all(|w| w[0] < w[1])
            && self.horizon >= 1;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "quantile levels {:?} must be strictly increasing in (0,1), horizon {} >= 1",
                self.levels, self.horizon
            )))
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Number of outputs per station and sample.
    pub fn outputs(&self) -> usize {
        self.levels.len() * self.horizon
    }

    /// Lowest and highest level, the prediction-interval bounds.
    pub fn interval(&self) -> (f64, f64) {
        (self.levels[0], *self.levels.last().expect("nonempty"))
    }
}

/// Architecture hyper-parameters of the encoder / graph block / decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub history: usize,
    pub features: usize,
    pub quantiles: QuantileConfig,
    pub encoder_channels: usize,
    pub encoder_kernel: usize,
    /// Output channels of each block's temporal convolution.
    pub hidden: usize,
    pub blocks: usize,
    /// Number of Chebyshev terms.
    pub cheb_order: usize,
    pub temporal_kernel: usize,
    pub decoder_channels: usize,
    pub decoder_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 32,
            features: INPUT_FEATURES,
            quantiles: QuantileConfig::default(),
            encoder_channels: 64,
            encoder_kernel: 3,
            hidden: 64,
            blocks: 2,
            cheb_order: 3,
            temporal_kernel: 3,
            decoder_channels: 64,
            decoder_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.quantiles.validate()?;
        let positive = [
            ("history", self.history),
            ("features", self.features),
            ("encoder_channels", self.encoder_channels),
            ("encoder_kernel", self.encoder_kernel),
            ("hidden", self.hidden),
            ("cheb_order", self.cheb_order),
            ("temporal_kernel", self.temporal_kernel),
            ("decoder_channels", self.decoder_channels),
            ("decoder_kernel", self.decoder_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Channels of the graph-block output handed to the decoder.
    pub fn graph_channels(&self) -> usize {
        if self.blocks == 0 {
            self.encoder_channels
        } else {
            self.hidden
        }
    }

    /// Input channels of block `l`.
    pub fn block_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.encoder_channels
        } else {
            self.hidden
        }
    }
}

/// Left/right zero padding that keeps the sequence length for kernel width `k`.
pub fn same_padding(k: usize) -> (usize, usize) {
    let left = (k - 1) / 2;
    (left, k - 1 - left)
}
