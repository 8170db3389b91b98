//! Gaussian latent heads, reparameterized sampling, closed-form KL to the
//! standard-normal prior, and the uni-/multi-modal bottleneck losses.
//!
//! Both bottleneck stages minimise `cross_entropy + coef * KL`, averaged over
//! the mini-batch, with one reparameterized sample per datum.

use crate::numerics::{Activation, Dense, Graph, GraphError, NodeId, ParamStore, Rng, Tensor};
use crate::{Error, Result};

/// Floor added to every softplus standard deviation.
pub const STD_FLOOR: f64 = 1e-6;
/// Lower clamp on class probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Number of sentiment classes; class `k` carries score `k - 3`.
pub const NUM_CLASSES: usize = 7;

/// Diagonal Gaussian with per-dimension standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidArgument(format!(
                "latent mean has {} units but std has {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| !(*s >= STD_FLOOR) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("latent std must be finite and >= 1e-6".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * (ln_2pi + u * u) - s.ln()
            })
            .sum()
    }
}

/// `z = mean + std ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(latent: &GaussianLatent, rng: &mut Rng) -> Vec<f64> {
    let eps = rng.normals(latent.dim());
    reparameterize_with(latent, &eps)
}

/// Reparameterization with caller-supplied noise.
pub fn reparameterize_with(latent: &GaussianLatent, eps: &[f64]) -> Vec<f64> {
    latent
        .mean
        .iter()
        .zip(&latent.std)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// `½ Σ (mean² + std² − 1 − ln std²)` in nats.
pub fn kl_to_standard_normal(latent: &GaussianLatent) -> f64 {
    0.5 * latent
        .mean
        .iter()
        .zip(&latent.std)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// Seven-class sentiment prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub class_logits: Vec<f64>,
}

impl TaskPrediction {
    pub fn new(class_logits: Vec<f64>) -> Result<Self> {
        if class_logits.len() != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_CLASSES} class logits, got {}",
                class_logits.len()
            )));
        }
        Ok(Self { class_logits })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.class_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.class_logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Expected class score under the softmax, in `[-3, 3]`.
    pub fn score(&self) -> f64 {
        let s: f64 = self
            .probabilities()
            .iter()
            .enumerate()
            .map(|(k, p)| p * class_score(k))
            .sum();
        s.clamp(-3.0, 3.0)
    }

    pub fn argmax_class(&self) -> usize {
        self.class_logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &l)| if l > best.1 { (k, l) } else { best })
            .0
    }

    /// Binary sentiment; a zero score counts as positive.
    pub fn is_positive(&self) -> bool {
        self.score() >= 0.0
    }
}

pub fn class_score(class: usize) -> f64 {
    class as f64 - 3.0
}

/// `ln p(label)` under the normalized class distribution, probability
/// clamped below at 1e-12.
pub fn task_log_likelihood(prediction: &TaskPrediction, label: usize) -> Result<f64> {
    if label >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("label {label} outside 0..=6")));
    }
    Ok(prediction.probabilities()[label].max(PROB_FLOOR).ln())
}

fn vib_loss_values(
    latents: &[GaussianLatent],
    predictions: &[TaskPrediction],
    labels: &[usize],
    coef: f64,
) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if latents.len() != predictions.len() || latents.len() != labels.len() {
        return Err(Error::InvalidArgument("batch parts have different lengths".into()));
    }
    if !(coef >= 0.0) {
        return Err(Error::InvalidArgument(format!("bottleneck coefficient must be >= 0, got {coef}")));
    }
    let mut total = 0.0;
    for ((lat, pred), &y) in latents.iter().zip(predictions).zip(labels) {
        total += -task_log_likelihood(pred, y)? + coef * kl_to_standard_normal(lat);
    }
    Ok(total / latents.len() as f64)
}

/// Uni-modal bottleneck loss: batch mean of `−ln q(y|z) + β·KL`.
pub fn uvib_loss(latents: &[GaussianLatent], predictions: &[TaskPrediction], labels: &[usize], beta: f64) -> Result<f64> {
    vib_loss_values(latents, predictions, labels, beta)
}

/// Multi-modal bottleneck loss on the receiver-side latent: batch mean of
/// `−ln q(y|ẑ) + γ·KL`.
pub fn mvib_loss(latents: &[GaussianLatent], predictions: &[TaskPrediction], labels: &[usize], gamma: f64) -> Result<f64> {
    vib_loss_values(latents, predictions, labels, gamma)
}

/// Batched latent living on a graph: `mean` and `std` are `[n, d]` nodes.
#[derive(Debug, Clone, Copy)]
pub struct LatentNodes {
    pub mean: NodeId,
    pub std: NodeId,
}

impl LatentNodes {
    /// Reads row `r` back as a value-level latent.
    pub fn row(&self, g: &Graph, r: usize) -> GaussianLatent {
        GaussianLatent {
            mean: g.value(self.mean).row(r).to_vec(),
            std: g.value(self.std).row(r).to_vec(),
        }
    }
}

/// Linear Gaussian head: `mean = x·Wμ + bμ`, `std = softplus(x·Wσ + bσ) + 1e-6`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mean: Dense,
    pub raw_std: Dense,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        Self {
            mean: Dense::new(store, &format!("{name}.mean"), in_dim, latent_dim, Activation::Identity, rng),
            raw_std: Dense::new(store, &format!("{name}.std"), in_dim, latent_dim, Activation::Identity, rng),
        }
    }

    pub fn latent_dim(&self, store: &ParamStore) -> usize {
        self.mean.out_dim(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<LatentNodes, GraphError> {
        let mean = self.mean.forward(g, store, features)?;
        let raw = self.raw_std.forward(g, store, features)?;
        let std = gaussian_std(g, raw)?;
        Ok(LatentNodes { mean, std })
    }
}

/// `softplus(raw) + 1e-6`.
pub fn gaussian_std(g: &mut Graph, raw: NodeId) -> Result<NodeId, GraphError> {
    let sp = g.softplus(raw)?;
    g.affine(sp, 1.0, STD_FLOOR)
}

/// Reparameterized sample on the graph; `eps` is a constant leaf so
/// gradients reach `mean` and `std` only.
pub fn reparameterize_nodes(g: &mut Graph, latent: LatentNodes, eps: Tensor) -> Result<NodeId, GraphError> {
    let e = g.input(eps)?;
    let scaled = g.multiply(latent.std, e)?;
    g.add(latent.mean, scaled)
}

/// Batch mean of the closed-form KL of each row to `N(0, I)`.
pub fn kl_nodes(g: &mut Graph, latent: LatentNodes) -> Result<NodeId, GraphError> {
    let shape = g.shape(latent.mean).to_vec();
    let (n, d) = (shape[0] as f64, shape[1] as f64);
    let m2 = g.multiply(latent.mean, latent.mean)?;
    let s2 = g.multiply(latent.std, latent.std)?;
    let ls2 = g.log(s2)?;
    let a = g.add(m2, s2)?;
    let t = g.sub(a, ls2)?;
    let total = g.sum(t)?;
    g.affine(total, 0.5 / n, -0.5 * d)
}

/// Batch mean cross-entropy of `[n, 7]` logits against integer labels.
pub fn cross_entropy_nodes(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, GraphError> {
    let logp = g.log_softmax(logits)?;
    let clamped = g.clamp_min(logp, PROB_FLOOR.ln())?;
    let picked = g.pick(clamped, labels)?;
    let mean = g.mean(picked)?;
    g.negate(mean)
}

/// Nodes of one bottleneck loss.
#[derive(Debug, Clone, Copy)]
pub struct VibTerms {
    pub cross_entropy: NodeId,
    pub kl: NodeId,
    pub loss: NodeId,
}

/// `cross_entropy + coef · KL` on the graph.
pub fn vib_loss_nodes(
    g: &mut Graph,
    latent: LatentNodes,
    logits: NodeId,
    labels: &[usize],
    coef: f64,
) -> Result<VibTerms, GraphError> {
    let cross_entropy = cross_entropy_nodes(g, logits, labels)?;
    let kl = kl_nodes(g, latent)?;
    let weighted = g.scale(kl, coef)?;
    let loss = g.add(cross_entropy, weighted)?;
    Ok(VibTerms {
        cross_entropy,
        kl,
        loss,
    })
}

/// Per-row predictions from a `[n, 7]` logits tensor.
pub fn predictions_from_logits(logits: &Tensor) -> Vec<TaskPrediction> {
    (0..logits.rows())
        .map(|r| TaskPrediction {
            class_logits: logits.row(r).to_vec(),
        })
        .collect()
}
