use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::numerics::{Activation, Dense, Mlp, ParamStore, Rng};
use crate::redundancy::{Discriminator, Pair};
use crate::vib::{GaussianHead, NUM_CLASSES};

/// Layer widths of every sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dims: [usize; 3],
    pub feature_hidden: usize,
    pub latent_dims: [usize; 3],
    pub fusion_hidden: usize,
    pub transmit_dim: usize,
    pub receiver_hidden: usize,
    pub receiver_latent: usize,
    pub decoder_hidden: usize,
    pub disc_hidden: usize,
}

impl Architecture {
    pub fn from_config(config: &TrainConfig, input_dims: [usize; 3]) -> Self {
        Self {
            input_dims,
            feature_hidden: config.feature_hidden,
            latent_dims: config.latent_dims,
            fusion_hidden: config.fusion_hidden,
            transmit_dim: config.transmit_dim,
            receiver_hidden: config.receiver_hidden,
            receiver_latent: config.receiver_latent,
            decoder_hidden: config.decoder_hidden,
            disc_hidden: config.disc_hidden,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.latent_dims.iter().sum()
    }
}

/// All trainable sub-networks over one shared parameter store.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: Architecture,
    pub store: ParamStore,
    /// Per-modality feature extractors (identity when `feature_hidden = 0`).
    pub feature_encoders: [Mlp; 3],
    pub uvib_heads: [GaussianHead; 3],
    /// Auxiliary per-modality classifiers; used only by the training loss.
    pub uvib_decoders: [Mlp; 3],
    /// Pair scorers in `(i,t)`, `(i,a)`, `(t,a)` order.
    pub discriminators: [Discriminator; 3],
    /// Fused latent → channel input.
    pub channel_encoder: Mlp,
    pub receiver_trunk: Mlp,
    pub receiver_head: GaussianHead,
    pub receiver_decoder: Mlp,
}

const NAMES: [&str; 3] = ["image", "text", "audio"];

/// `in → hidden (tanh) → 7` classifier with a zero output layer, so an
/// untrained model predicts the uniform class distribution.
fn classifier(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Mlp {
    let h = Dense::new(store, &format!("{name}.0"), input, hidden, Activation::Tanh, rng);
    let out = Dense::zeroed(store, &format!("{name}.1"), hidden, NUM_CLASSES, Activation::Identity);
    Mlp { layers: vec![h, out] }
}

impl ModelState {
    /// Freshly initialised model; parameters are a pure function of `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = Rng::new(seed).stream(0x1417);
        let mut store = ParamStore::new();
        let tanh = Activation::Tanh;
        let id = Activation::Identity;

        let feature_encoders = [0, 1, 2].map(|m| {
            if arch.feature_hidden == 0 {
                Mlp::identity()
            } else {
                let name = format!("{}.features", NAMES[m]);
                Mlp::new(&mut store, &name, &[arch.input_dims[m], arch.feature_hidden], tanh, tanh, &mut rng)
            }
        });
        let head_in = |m: usize| {
            if arch.feature_hidden == 0 {
                arch.input_dims[m]
            } else {
                arch.feature_hidden
            }
        };
        let uvib_heads = [0, 1, 2].map(|m| {
            GaussianHead::new(&mut store, &format!("{}.head", NAMES[m]), head_in(m), arch.latent_dims[m], &mut rng)
        });
        let uvib_decoders = [0, 1, 2].map(|m| {
            classifier(
                &mut store,
                &format!("{}.decoder", NAMES[m]),
                arch.latent_dims[m],
                arch.decoder_hidden,
                &mut rng,
            )
        });
        let discriminators = Pair::ALL.map(|p| {
            let (a, b) = p.members();
            Discriminator::new(
                &mut store,
                &format!("disc.{}", p.tag()),
                arch.latent_dims[a] + arch.latent_dims[b],
                arch.disc_hidden,
                &mut rng,
            )
        });
        let channel_encoder = Mlp::new(
            &mut store,
            "channel_encoder",
            &[arch.fused_dim(), arch.fusion_hidden, arch.transmit_dim],
            tanh,
            id,
            &mut rng,
        );
        let receiver_trunk = Mlp::new(
            &mut store,
            "receiver.trunk",
            &[arch.transmit_dim, arch.receiver_hidden],
            tanh,
            tanh,
            &mut rng,
        );
        let receiver_head = GaussianHead::new(
            &mut store,
            "receiver.head",
            arch.receiver_hidden,
            arch.receiver_latent,
            &mut rng,
        );
        let receiver_decoder = classifier(
            &mut store,
            "receiver.decoder",
            arch.receiver_latent,
            arch.decoder_hidden,
            &mut rng,
        );
        Self {
            arch,
            store,
            feature_encoders,
            uvib_heads,
            uvib_decoders,
            discriminators,
            channel_encoder,
            receiver_trunk,
            receiver_head,
            receiver_decoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_seeded() {
        let arch = Architecture::from_config(&TrainConfig::default(), [16, 16, 16]);
        let a = ModelState::new(arch, 5);
        let b = ModelState::new(arch, 5);
        let c = ModelState::new(arch, 6);
        assert_eq!(a.store.flatten(), b.store.flatten());
        assert_ne!(a.store.flatten(), c.store.flatten());
        assert_eq!(arch.fused_dim(), 24);
        let w = a.channel_encoder.layers.last().unwrap().out_dim(&a.store);
        assert_eq!(w, 50);
    }
}
