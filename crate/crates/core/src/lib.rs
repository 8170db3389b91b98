//! Multi-modal task-oriented communication simulator.
//!
//! Three modality branches (image, text, audio) are each compressed by a
//! uni-modal variational information bottleneck, decorrelated by adversarial
//! pairwise Jensen-Shannon discriminators behind gradient-reversal layers,
//! fused, encoded for a noisy wireless channel and decoded at the receiver by
//! a second, multi-modal bottleneck.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`numerics`] | tensors, reverse-mode tape, parameters, Adam, seeded RNG |
//! | [`vib`] | Gaussian heads, reparameterization, closed-form KL, VIB losses |
//! | [`redundancy`] | discriminators, JS objective, GRL wiring, Bayes-optimal oracle |
//! | [`channel`] | power normalization, AWGN and Rayleigh block fading |
//! | [`data`] | synthetic generator, feature-file IO, kNN mutual information |
//! | [`pipeline`] | model state, forward pass, training loop, checkpoints |
//! | [`eval`] | metrics, SNR sweeps, redundancy diagnostics, results CSV |
//! | [`selftest`] | property checks runnable from the command line |

pub mod channel;
pub mod cli;
pub mod data;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod redundancy;
pub mod selftest;
pub mod vib;

mod error;

pub use error::{Error, Result};
