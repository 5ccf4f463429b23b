use crate::error::ConfigError;

/// Pool window and stride of every encoder pooling layer.
pub const POOL: usize = 3;
/// Spatial size the encoder trunk must reach before the prediction conv.
pub const TRUNK_OUT: usize = 2;
/// Upsampling factor between decoder deconvolutions.
pub const UPSAMPLE: usize = 3;

/// Shape and width hyperparameters of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Conv width of each of the three encoder blocks.
    pub block_channels: [usize; 3],
    pub embedding_dim: usize,
    pub predictor_hidden: usize,
    /// Drop probability of the Bernoulli noise on e1 before the decoder.
    pub noise_drop_prob: f64,
    /// Output channels of the four decoder deconvolutions; the last is the
    /// image channel count.
    pub decoder_channels: [usize; 4],
}

impl Default for ModelConfig {
    /// Desk-scale widths on 54x54 RGB input.
    fn default() -> Self {
        Self {
            channels: 3,
            height: 54,
            width: 54,
            block_channels: [32, 16, 8],
            embedding_dim: 64,
            predictor_hidden: 32,
            noise_drop_prob: 0.5,
            decoder_channels: [32, 16, 8, 3],
        }
    }
}

impl ModelConfig {
    /// Block widths 256/128/64 of the full-size network.
    pub fn full_scale() -> Self {
        Self { block_channels: [256, 128, 64], ..Self::default() }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Checks that the encoder pools land on a 2x2 map (so the 2x2
    /// prediction conv yields `embedding_dim x 1 x 1`) and that the decoder's
    /// 2 -> 6 -> 18 -> 54 upsampling chain reproduces the input size.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels != 3 || self.height != self.width {
            return Err(ConfigError::InputShape { channels: self.channels, height: self.height, width: self.width });
        }
        let mut size = self.height;
        let mut trace = vec![size.to_string()];
        for _ in 0..3 {
            if size < POOL || size % POOL != 0 {
                trace.push("x".into());
                return Err(ConfigError::PoolClosure { height: self.height, trace: trace.join("->") });
            }
            size /= POOL;
            trace.push(size.to_string());
        }
        if size != TRUNK_OUT {
            return Err(ConfigError::PoolClosure { height: self.height, trace: trace.join("->") });
        }
        if TRUNK_OUT * UPSAMPLE.pow(3) != self.height {
            return Err(ConfigError::DecoderClosure { height: self.height });
        }
        if self.embedding_dim == 0 {
            return Err(ConfigError::Embedding { embedding_dim: 0, channels: 0 });
        }
        if self.block_channels.contains(&0) {
            return Err(ConfigError::OutOfRange {
                field: "block_channels",
                requirement: "positive",
                value: format!("{:?}", self.block_channels),
            });
        }
        if self.predictor_hidden == 0 {
            return Err(ConfigError::OutOfRange { field: "predictor_hidden", requirement: "positive", value: "0".into() });
        }
        if self.decoder_channels[3] != self.channels || self.decoder_channels.contains(&0) {
            return Err(ConfigError::DecoderOutput(self.decoder_channels.to_vec()));
        }
        if !(0.0..1.0).contains(&self.noise_drop_prob) {
            return Err(ConfigError::OutOfRange {
                field: "noise_drop_prob",
                requirement: "in [0, 1)",
                value: self.noise_drop_prob.to_string(),
            });
        }
        Ok(())
    }
}
