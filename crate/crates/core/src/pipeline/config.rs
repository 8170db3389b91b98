use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::redundancy::GrlPlacement;
use crate::{Error, Result};

/// Training hyper-parameters and model widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_red: f64,
    pub warmup_epochs: usize,
    /// KL weight of the per-modality bottlenecks.
    pub beta: f64,
    /// KL weight of the receiver bottleneck.
    pub gamma: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub channel: ChannelConfig,
    /// Hidden width of each modality's feature encoder; 0 feeds raw
    /// features straight to the bottleneck head.
    pub feature_hidden: usize,
    pub latent_dims: [usize; 3],
    pub fusion_hidden: usize,
    pub transmit_dim: usize,
    pub receiver_hidden: usize,
    pub receiver_latent: usize,
    pub decoder_hidden: usize,
    pub disc_hidden: usize,
    pub grl_placement: GrlPlacement,
    /// AWGN SNRs (dB) at which the validation split is scored each epoch.
    pub val_snr_db: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lambda_red: 0.4,
            warmup_epochs: 3,
            beta: 1e-3,
            gamma: 1e-3,
            learning_rate: 1e-3,
            seed: 0,
            channel: ChannelConfig::default(),
            feature_hidden: 32,
            latent_dims: [8, 8, 8],
            fusion_hidden: 64,
            transmit_dim: 50,
            receiver_hidden: 64,
            receiver_latent: 16,
            decoder_hidden: 32,
            disc_hidden: 64,
            grl_placement: GrlPlacement::Both,
            val_snr_db: vec![-6.0, 18.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (negatives need a derangement)");
        }
        if !(self.lambda_red >= 0.0) || !self.lambda_red.is_finite() {
            return bad("lambda_red must be finite and >= 0");
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        let widths = [
            self.transmit_dim,
            self.receiver_hidden,
            self.receiver_latent,
            self.decoder_hidden,
            self.disc_hidden,
            self.fusion_hidden,
        ];
        if widths.contains(&0) || self.latent_dims.contains(&0) {
            return bad("model widths and latent dims must be >= 1");
        }
        if self.val_snr_db.iter().any(|s| s.is_nan()) {
            return bad("validation SNRs must be numbers");
        }
        self.channel.validate()
    }
}
