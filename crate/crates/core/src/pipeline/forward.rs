use crate::channel::{power_normalize_nodes, ChannelConfig, ChannelRealization};
use crate::data::Batch;
use crate::numerics::{gaussian_draw, Graph, GraphError, NodeId, Rng, Tensor};
use crate::redundancy::{diagnostics_from_scores, redundancy_loss, Coupling, GrlPlacement, PairDiagnostics};
use crate::vib::{reparameterize_nodes, vib_loss_nodes, LatentNodes};
use crate::{Error, Result};

use super::ModelState;

/// Per-step weights: GRL scale, effective redundancy weight and the two KL
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub lambda_red: f64,
    pub beta: f64,
    pub gamma: f64,
    pub placement: GrlPlacement,
}

/// Independent random streams for one training step. Each consumer owns its
/// stream, so switching the redundancy branch on or off leaves the
/// reparameterisation and channel draws untouched.
#[derive(Debug, Clone)]
pub struct StepRng {
    pub reparam: Rng,
    pub negatives: Rng,
    pub channel: Rng,
}

impl StepRng {
    /// Takes exactly one draw from `rng`.
    pub fn split(rng: &mut Rng) -> Self {
        let base = Rng::new(rng.next_u64());
        Self {
            reparam: base.stream(1),
            negatives: base.stream(2),
            channel: base.stream(3),
        }
    }
}

/// Scalar loss parts of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub uvib: [f64; 3],
    /// Summed pair objectives; zero when the redundancy branch is off.
    pub redundancy: f64,
    pub pair_j: [f64; 3],
    pub mvib: f64,
    /// Cross-entropy component of the receiver bottleneck.
    pub mvib_cross_entropy: f64,
    pub total: f64,
    pub snr_db: f64,
}

/// Forward graph of one training step.
#[derive(Debug)]
pub struct Forward {
    pub graph: Graph,
    pub total: NodeId,
    pub uvib_nodes: [NodeId; 3],
    /// `λ · L_red` when the branch is built.
    pub redundancy_node: Option<NodeId>,
    pub mvib_node: NodeId,
    pub latent_samples: [NodeId; 3],
    pub logits: NodeId,
    pub parts: LossParts,
    /// Discriminator statistics on this batch, when the branch is built.
    pub pair_diagnostics: Option<[PairDiagnostics; 3]>,
}

fn named<T>(part: &str, r: Result<T, GraphError>) -> Result<T> {
    r.map_err(|e| match e {
        GraphError::NonFinite { .. } => Error::NonFiniteLoss { part: part.to_string() },
        other => Error::Graph(other),
    })
}

const MODALITY_PARTS: [&str; 3] = ["uvib.image", "uvib.text", "uvib.audio"];

fn modality_latent(g: &mut Graph, model: &ModelState, m: usize, x: &Tensor) -> Result<LatentNodes, GraphError> {
    let x = g.input(x.clone())?;
    let h = model.feature_encoders[m].forward(g, &model.store, x)?;
    model.uvib_heads[m].forward(g, &model.store, h)
}

/// Fused latents → channel input, power normalised per row.
fn channel_input(g: &mut Graph, model: &ModelState, z: [NodeId; 3]) -> Result<NodeId, GraphError> {
    let fused = g.concat(&z, 1)?;
    let x = model.channel_encoder.forward(g, &model.store, fused)?;
    power_normalize_nodes(g, x)
}

fn receiver_latent(g: &mut Graph, model: &ModelState, received: NodeId) -> Result<LatentNodes, GraphError> {
    let h = model.receiver_trunk.forward(g, &model.store, received)?;
    model.receiver_head.forward(g, &model.store, h)
}

/// One training forward pass over `batch`.
///
/// The SNR is drawn from `channel`'s policy. The returned graph holds the
/// summed loss `Σ U-VIB + M-VIB + λ·L_red`; the redundancy branch is only
/// built when `λ > 0`.
pub fn forward_pass(
    batch: &Batch,
    model: &ModelState,
    channel: &ChannelConfig,
    schedule: &Schedule,
    rng: &mut Rng,
) -> Result<Forward> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("batch of {n} rows; need at least 2")));
    }
    let mut streams = StepRng::split(rng);
    let mut g = Graph::new();
    let labels = &batch.classes;

    let mut uvib_nodes = Vec::with_capacity(3);
    let mut samples = Vec::with_capacity(3);
    for m in 0..3 {
        let part = MODALITY_PARTS[m];
        let lat = named(part, modality_latent(&mut g, model, m, &batch.features[m]))?;
        let eps = gaussian_draw(&mut streams.reparam, g.shape(lat.mean));
        let z = named(part, reparameterize_nodes(&mut g, lat, eps))?;
        let logits = named(part, model.uvib_decoders[m].forward(&mut g, &model.store, z))?;
        let terms = named(part, vib_loss_nodes(&mut g, lat, logits, labels, schedule.beta))?;
        uvib_nodes.push(terms.loss);
        samples.push(z);
    }
    let z = [samples[0], samples[1], samples[2]];

    let mut pair_j = [0.0; 3];
    let mut pair_diagnostics = None;
    let redundancy_node = if schedule.lambda_red > 0.0 {
        let coupling = Coupling::Reversal {
            alpha: schedule.alpha,
            placement: schedule.placement,
        };
        let terms = redundancy_loss(
            &mut g,
            &model.store,
            &model.discriminators,
            z,
            coupling,
            &mut streams.negatives,
        )
        .map_err(|e| match e {
            Error::Graph(GraphError::NonFinite { .. }) => Error::NonFiniteLoss {
                part: "redundancy".into(),
            },
            other => other,
        })?;
        for p in 0..3 {
            pair_j[p] = g.scalar(terms.pair_j[p]);
        }
        pair_diagnostics = Some(terms.scores.map(|s| {
            diagnostics_from_scores(g.value(s.pos).values(), g.value(s.neg).values())
        }));
        Some(named("redundancy", g.scale(terms.loss, schedule.lambda_red))?)
    } else {
        None
    };

    let snr_db = channel.snr.sample(&mut streams.channel);
    let tx = named("mvib", channel_input(&mut g, model, z))?;
    let realization = ChannelRealization::draw(channel, snr_db, n, model.arch.transmit_dim, &mut streams.channel);
    let rx = named("mvib", realization.apply(&mut g, tx))?;
    let lat = named("mvib", receiver_latent(&mut g, model, rx))?;
    let eps = gaussian_draw(&mut streams.reparam, g.shape(lat.mean));
    let zr = named("mvib", reparameterize_nodes(&mut g, lat, eps))?;
    let logits = named("mvib", model.receiver_decoder.forward(&mut g, &model.store, zr))?;
    let mvib = named("mvib", vib_loss_nodes(&mut g, lat, logits, labels, schedule.gamma))?;

    let mut total = named("total", g.add(uvib_nodes[0], uvib_nodes[1]))?;
    total = named("total", g.add(total, uvib_nodes[2]))?;
    total = named("total", g.add(total, mvib.loss))?;
    if let Some(r) = redundancy_node {
        total = named("total", g.add(total, r))?;
    }

    let parts = LossParts {
        uvib: [0, 1, 2].map(|m| g.scalar(uvib_nodes[m])),
        redundancy: pair_j.iter().sum(),
        pair_j,
        mvib: g.scalar(mvib.loss),
        mvib_cross_entropy: g.scalar(mvib.cross_entropy),
        total: g.scalar(total),
        snr_db,
    };
    Ok(Forward {
        total,
        uvib_nodes: [uvib_nodes[0], uvib_nodes[1], uvib_nodes[2]],
        redundancy_node,
        mvib_node: mvib.loss,
        latent_samples: z,
        logits,
        parts,
        pair_diagnostics,
        graph: g,
    })
}

/// Per-modality latents for `features`: the posterior means, or one
/// reparameterised sample each when `sample` is given.
pub fn encode_latents(model: &ModelState, features: &[Tensor; 3], mut sample: Option<&mut Rng>) -> Result<[Tensor; 3]> {
    let mut g = Graph::new();
    let mut out = Vec::with_capacity(3);
    for m in 0..3 {
        let lat = modality_latent(&mut g, model, m, &features[m])?;
        let z = match sample.as_deref_mut() {
            Some(rng) => {
                let eps = gaussian_draw(rng, g.shape(lat.mean));
                reparameterize_nodes(&mut g, lat, eps)?
            }
            None => lat.mean,
        };
        out.push(g.value(z).clone());
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone()])
}

/// Inference logits `[n, 7]`: posterior means at both bottlenecks, one
/// channel realization at `snr_db` drawn from `rng`. The auxiliary
/// per-modality decoders are not used.
pub fn infer(model: &ModelState, features: &[Tensor; 3], channel: &ChannelConfig, snr_db: f64, rng: &mut Rng) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut means = Vec::with_capacity(3);
    for (m, x) in features.iter().enumerate() {
        means.push(modality_latent(&mut g, model, m, x)?.mean);
    }
    let z = [means[0], means[1], means[2]];
    let tx = channel_input(&mut g, model, z)?;
    let n = features[0].rows();
    let realization = ChannelRealization::draw(channel, snr_db, n, model.arch.transmit_dim, rng);
    let rx = realization.apply(&mut g, tx)?;
    let lat = receiver_latent(&mut g, model, rx)?;
    let logits = model.receiver_decoder.forward(&mut g, &model.store, lat.mean)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::pipeline::{Architecture, TrainConfig};

    fn setup() -> (ModelState, Batch) {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 70,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let arch = Architecture::from_config(&TrainConfig::default(), ds.dims());
        let idx: Vec<usize> = (0..28).collect();
        (ModelState::new(arch, 3), ds.batch(&idx))
    }

    fn sched(alpha: f64, lambda_red: f64) -> Schedule {
        Schedule {
            alpha,
            lambda_red,
            beta: 1e-3,
            gamma: 1e-3,
            placement: GrlPlacement::Both,
        }
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let (model, batch) = setup();
        let mut rng = Rng::new(1);
        let f = forward_pass(&batch, &model, &ChannelConfig::noiseless(), &sched(0.0, 0.0), &mut rng).unwrap();
        let ce = f.parts.mvib_cross_entropy;
        assert!((ce - 7f64.ln()).abs() < 0.3, "{ce}");
    }

    #[test]
    fn deterministic_parts() {
        let (model, batch) = setup();
        let run = || {
            let mut rng = Rng::new(9);
            forward_pass(&batch, &model, &ChannelConfig::default(), &sched(1.0, 0.4), &mut rng)
                .unwrap()
                .parts
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_redundancy_matches_plain_build() {
        let (model, batch) = setup();
        let cfg = ChannelConfig::default();
        let mut r1 = Rng::new(4);
        let with = forward_pass(&batch, &model, &cfg, &sched(0.0, 0.0), &mut r1).unwrap();
        // the same step with the branch built at α = 0 and a vanishing weight
        let mut r2 = Rng::new(4);
        let tiny = forward_pass(&batch, &model, &cfg, &sched(0.0, 1e-300), &mut r2).unwrap();
        let ga = with.graph.backward(with.total).unwrap();
        let gb = tiny.graph.backward(tiny.total).unwrap();
        let (mut sa, mut sb) = (model.store.clone(), model.store.clone());
        ga.write_param_grads(&mut sa);
        gb.write_param_grads(&mut sb);
        for (a, b) in sa.flat_grads().iter().zip(sb.flat_grads()) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_eq!(with.parts.snr_db, tiny.parts.snr_db);
    }

    #[test]
    fn one_backward_equals_sum_of_parts() {
        let (model, batch) = setup();
        let mut rng = Rng::new(5);
        let f = forward_pass(&batch, &model, &ChannelConfig::default(), &sched(0.7, 0.4), &mut rng).unwrap();
        let mut whole = model.store.clone();
        f.graph.backward(f.total).unwrap().write_param_grads(&mut whole);
        let mut parts = model.store.clone();
        parts.zero_grads();
        let mut nodes = f.uvib_nodes.to_vec();
        nodes.push(f.mvib_node);
        nodes.push(f.redundancy_node.unwrap());
        for n in nodes {
            f.graph.backward(n).unwrap().accumulate_param_grads(&mut parts);
        }
        for (a, b) in whole.flat_grads().iter().zip(parts.flat_grads()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
        let p = &f.parts;
        let recomposed = crate::pipeline::total_loss(&p.uvib, p.mvib, p.redundancy, 0.4);
        assert!((recomposed - p.total).abs() < 1e-12);
    }

    #[test]
    fn inference_ignores_auxiliary_decoders() {
        let (mut model, batch) = setup();
        let cfg = ChannelConfig::awgn(10.0);
        let a = infer(&model, &batch.features, &cfg, 10.0, &mut Rng::new(2)).unwrap();
        for d in &model.uvib_decoders.clone() {
            for id in d.params() {
                model.store.value_mut(id).values_mut().fill(f64::NAN);
            }
        }
        let b = infer(&model, &batch.features, &cfg, 10.0, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_rejected() {
        let (model, _) = setup();
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let b = ds.batch(&[0]);
        let r = forward_pass(&b, &model, &ChannelConfig::noiseless(), &sched(0.0, 0.0), &mut Rng::new(1));
        assert!(r.is_err());
    }
}
