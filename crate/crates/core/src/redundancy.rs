//! Cross-modal redundancy reduction.
//!
//! Each modality pair gets a discriminator scoring concatenated latent pairs;
//! matched rows of a batch are positives, rows re-paired through a random
//! derangement are negatives. The per-pair objective
//!
//! ```text
//! J = mean_pos ln σ(T) + mean_neg ln(1 − σ(T)) + 2 ln 2
//! ```
//!
//! lower-bounds the pair's mutual information and lies in `[0, 2 ln 2]` for
//! the optimal scorer. Its complement `BCE = 2 ln 2 − J` is the
//! discriminator's binary cross-entropy.
//!
//! The min-max game runs in one backward pass. Latents enter the
//! discriminators through gradient-reversal layers scaled by `α`, and the
//! discriminator scores pass through a unit reversal, so descending the
//! summed loss ascends `J` for the discriminators and descends `α·J` for the
//! encoders.

use serde::{Deserialize, Serialize};

use crate::numerics::{Activation, Dense, Graph, GraphError, Mlp, NodeId, ParamStore, Rng, Tensor};
use crate::{Error, Result};

/// Floor on each `ln σ(·)` term.
pub const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)
pub const TWO_LN2: f64 = 2.0 * std::f64::consts::LN_2;
pub const DISC_HIDDEN: usize = 64;

/// The three modality pairs, in the order `(i,t)`, `(i,a)`, `(t,a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pair {
    ImageText,
    ImageAudio,
    TextAudio,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::ImageText, Pair::ImageAudio, Pair::TextAudio];

    /// Modality indices `(first, second)`; the first member is the one the
    /// printed wiring sends through the reversal layer.
    pub fn members(self) -> (usize, usize) {
        match self {
            Pair::ImageText => (0, 1),
            Pair::ImageAudio => (0, 2),
            Pair::TextAudio => (1, 2),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Pair::ImageText => "it",
            Pair::ImageAudio => "ia",
            Pair::TextAudio => "ta",
        }
    }
}

/// Which discriminator inputs pass through the reversal layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GrlPlacement {
    /// Only the first member of each pair.
    First,
    /// Both members.
    #[default]
    Both,
}

impl std::str::FromStr for GrlPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" => Ok(Self::First),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown grl placement `{other}` (first|both)")),
        }
    }
}

/// How encoder latents couple into the discriminators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coupling {
    /// Gradient reversal with scale `alpha`.
    Reversal { alpha: f64, placement: GrlPlacement },
    /// Plain identity in place of every reversal layer on the latents.
    Identity,
}

/// Dense scorer over a concatenated latent pair: two tanh hidden layers and a
/// zero-initialised scalar output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Mlp,
    input_width: usize,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, input_width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let h1 = Dense::new(store, &format!("{name}.0"), input_width, hidden, Activation::Tanh, rng);
        let h2 = Dense::new(store, &format!("{name}.1"), hidden, hidden, Activation::Tanh, rng);
        let out = Dense::zeroed(store, &format!("{name}.2"), hidden, 1, Activation::Identity);
        Self {
            net: Mlp {
                layers: vec![h1, h2, out],
            },
            input_width,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn params(&self) -> Vec<crate::numerics::ParamId> {
        self.net.params()
    }

    /// Raw scores `[m, 1]` for `[m, input_width]` inputs.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, input: NodeId) -> Result<NodeId, GraphError> {
        let w = g.shape(input).get(1).copied().unwrap_or(0);
        if w != self.input_width {
            return Err(GraphError::ShapeMismatch {
                op: "discriminator",
                left: vec![self.input_width],
                right: g.shape(input).to_vec(),
            });
        }
        self.net.forward(g, store, input)
    }

    /// Scores for plain value rows, outside any training graph.
    pub fn score_values(&self, store: &ParamStore, input: &Tensor) -> Result<Vec<f64>, GraphError> {
        let mut g = Graph::new();
        let x = g.input(input.clone())?;
        let t = self.score(&mut g, store, x)?;
        Ok(g.value(t).values().to_vec())
    }
}

/// Uniformly random permutation of `0..n` with no fixed point.
pub fn derangement(n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "negative sampling needs a batch of at least 2, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        rng.shuffle(&mut perm);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Matched (joint) and re-paired (product-of-marginals) latent pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub a: Tensor,
    pub b: Tensor,
    /// Negatives pair `a[i]` with `b[perm[i]]`.
    pub perm: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn join(a: &Tensor, b: &Tensor, b_rows: impl Iterator<Item = usize>) -> Tensor {
        let rows: Vec<Vec<f64>> = b_rows
            .enumerate()
            .map(|(i, j)| a.row(i).iter().chain(b.row(j)).copied().collect())
            .collect();
        Tensor::from_rows(&rows).expect("aligned rows")
    }

    pub fn positives(&self) -> Tensor {
        Self::join(&self.a, &self.b, 0..self.len())
    }

    pub fn negatives(&self) -> Tensor {
        Self::join(&self.a, &self.b, self.perm.iter().copied())
    }
}

/// Positives are index-aligned rows; negatives re-pair `b` by a derangement.
pub fn shuffle_negatives(a: &Tensor, b: &Tensor, rng: &mut Rng) -> Result<PairBatch> {
    if a.rows() != b.rows() {
        return Err(Error::InvalidArgument(format!(
            "latent batches have {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let perm = derangement(a.rows(), rng)?;
    Ok(PairBatch {
        a: a.clone(),
        b: b.clone(),
        perm,
    })
}

/// Per-pair discriminator statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDiagnostics {
    /// JS lower-bound objective (nats).
    pub j: f64,
    /// Binary cross-entropy (nats); `j + bce = 2 ln 2`.
    pub bce: f64,
    /// Mean `σ(T)` over positives.
    pub p_pos: f64,
    /// Mean `σ(T)` over negatives.
    pub p_neg: f64,
}

fn log_sigmoid(x: f64) -> f64 {
    (-crate::numerics::stable_softplus(-x)).max(LOG_FLOOR)
}

/// J, BCE and mean probabilities from raw positive/negative scores.
pub fn diagnostics_from_scores(pos: &[f64], neg: &[f64]) -> PairDiagnostics {
    let lp = pos.iter().map(|&t| log_sigmoid(t)).sum::<f64>() / pos.len() as f64;
    let ln = neg.iter().map(|&t| log_sigmoid(-t)).sum::<f64>() / neg.len() as f64;
    let log_terms = lp + ln;
    let sig = crate::numerics::stable_sigmoid;
    PairDiagnostics {
        j: log_terms + TWO_LN2,
        bce: -log_terms,
        p_pos: pos.iter().map(|&t| sig(t)).sum::<f64>() / pos.len() as f64,
        p_neg: neg.iter().map(|&t| sig(t)).sum::<f64>() / neg.len() as f64,
    }
}

/// JS objective of `disc` on a pair batch (nats).
pub fn js_objective(disc: &Discriminator, store: &ParamStore, batch: &PairBatch) -> Result<f64> {
    Ok(pair_diagnostics(disc, store, batch)?.j)
}

/// Discriminator binary cross-entropy on a pair batch (nats).
pub fn bce_diagnostic(disc: &Discriminator, store: &ParamStore, batch: &PairBatch) -> Result<f64> {
    Ok(pair_diagnostics(disc, store, batch)?.bce)
}

pub fn pair_diagnostics(disc: &Discriminator, store: &ParamStore, batch: &PairBatch) -> Result<PairDiagnostics> {
    let pos = disc.score_values(store, &batch.positives())?;
    let neg = disc.score_values(store, &batch.negatives())?;
    Ok(diagnostics_from_scores(&pos, &neg))
}

/// Score nodes for one pair on a graph.
#[derive(Debug, Clone, Copy)]
pub struct PairScores {
    pub pos: NodeId,
    pub neg: NodeId,
}

/// Scores matched and deranged pairs in one stacked discriminator call.
pub fn pair_scores(
    g: &mut Graph,
    store: &ParamStore,
    disc: &Discriminator,
    a: NodeId,
    b: NodeId,
    perm: &[usize],
) -> Result<PairScores, GraphError> {
    let n = g.shape(a)[0];
    let pos_in = g.concat(&[a, b], 1)?;
    let b_neg = g.gather_rows(b, perm)?;
    let neg_in = g.concat(&[a, b_neg], 1)?;
    let stacked = g.concat(&[pos_in, neg_in], 0)?;
    let t = disc.score(g, store, stacked)?;
    let pos = g.slice(t, 0, 0, n)?;
    let neg = g.slice(t, 0, n, 2 * n)?;
    Ok(PairScores { pos, neg })
}

/// `mean ln σ(pos) + mean ln(1 − σ(neg)) + 2 ln 2` on the graph.
pub fn js_objective_nodes(g: &mut Graph, scores: PairScores) -> Result<NodeId, GraphError> {
    let lp = g.log_sigmoid(scores.pos, LOG_FLOOR)?;
    let mp = g.mean(lp)?;
    let nneg = g.negate(scores.neg)?;
    let ln = g.log_sigmoid(nneg, LOG_FLOOR)?;
    let mn = g.mean(ln)?;
    let s = g.add(mp, mn)?;
    g.affine(s, 1.0, TWO_LN2)
}

/// Graph nodes produced by [`redundancy_loss`].
#[derive(Debug, Clone, Copy)]
pub struct RedundancyTerms {
    /// Sum of the three pair objectives.
    pub loss: NodeId,
    pub pair_j: [NodeId; 3],
    pub scores: [PairScores; 3],
}

/// Summed pairwise JS objective over `(i,t)`, `(i,a)`, `(t,a)`.
///
/// `latents` are the `[n, d_m]` latent batches of the three modalities.
/// Negatives for each pair come from a fresh derangement drawn from `rng`.
pub fn redundancy_loss(
    g: &mut Graph,
    store: &ParamStore,
    discriminators: &[Discriminator; 3],
    latents: [NodeId; 3],
    coupling: Coupling,
    rng: &mut Rng,
) -> Result<RedundancyTerms> {
    let n = g.shape(latents[0])[0];
    let mut pair_j = Vec::with_capacity(3);
    let mut scores = Vec::with_capacity(3);
    for (pair, disc) in Pair::ALL.iter().zip(discriminators) {
        let (ia, ib) = pair.members();
        let perm = derangement(n, rng)?;
        let (a, b) = match coupling {
            Coupling::Reversal { alpha, placement } => {
                let a = g.grl(latents[ia], alpha)?;
                let b = match placement {
                    GrlPlacement::Both => g.grl(latents[ib], alpha)?,
                    GrlPlacement::First => latents[ib],
                };
                (a, b)
            }
            Coupling::Identity => (latents[ia], latents[ib]),
        };
        let raw = pair_scores(g, store, disc, a, b, &perm)?;
        // unit reversal on the scores: discriminators ascend J
        let pos = g.grl(raw.pos, 1.0)?;
        let neg = g.grl(raw.neg, 1.0)?;
        let s = PairScores { pos, neg };
        pair_j.push(js_objective_nodes(g, s)?);
        scores.push(raw);
    }
    let s01 = g.add(pair_j[0], pair_j[1])?;
    let loss = g.add(s01, pair_j[2])?;
    Ok(RedundancyTerms {
        loss,
        pair_j: [pair_j[0], pair_j[1], pair_j[2]],
        scores: [scores[0], scores[1], scores[2]],
    })
}

/// Analytic Bayes-optimal scorers and quadrature references for checking the
/// JS objective against its closed-form limits.
pub mod oracle {
    use super::*;
    use crate::numerics::{Adam, AdamConfig};

    /// Diagonal Gaussian given by mean and per-dimension standard deviation.
    #[derive(Debug, Clone, PartialEq)]
    pub struct GaussianSpec {
        pub mean: Vec<f64>,
        pub std: Vec<f64>,
    }

    impl GaussianSpec {
        pub fn new_1d(mean: f64, std: f64) -> Self {
            Self {
                mean: vec![mean],
                std: vec![std],
            }
        }

        pub fn log_density(&self, x: &[f64]) -> f64 {
            let ln_2pi = (2.0 * std::f64::consts::PI).ln();
            self.mean
                .iter()
                .zip(&self.std)
                .zip(x)
                .map(|((m, s), v)| {
                    let u = (v - m) / s;
                    -0.5 * (ln_2pi + u * u) - s.ln()
                })
                .sum()
        }

        pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
            self.mean.iter().zip(&self.std).map(|(m, s)| m + s * rng.normal()).collect()
        }
    }

    /// `T*(x) = ln p(x) − ln q(x)`, the maximiser of the JS objective.
    pub fn optimal_bayes_discriminator(p: &GaussianSpec, q: &GaussianSpec) -> impl Fn(&[f64]) -> f64 {
        let (p, q) = (p.clone(), q.clone());
        move |x| p.log_density(x) - q.log_density(x)
    }

    fn integration_grid(p: &GaussianSpec, q: &GaussianSpec) -> (f64, f64) {
        let s = p.std[0].max(q.std[0]);
        let lo = p.mean[0].min(q.mean[0]) - 14.0 * s;
        let hi = p.mean[0].max(q.mean[0]) + 14.0 * s;
        (lo, hi)
    }

    /// Composite Simpson rule with `intervals` (even) sub-intervals.
    pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        let n = intervals + intervals % 2;
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    /// Population JS objective of a 1-D scorer by quadrature.
    pub fn population_objective_1d(t: impl Fn(f64) -> f64, p: &GaussianSpec, q: &GaussianSpec) -> f64 {
        let (lo, hi) = integration_grid(p, q);
        let integrand = |x: f64| {
            let tx = t(x);
            p.log_density(&[x]).exp() * log_sigmoid(tx) + q.log_density(&[x]).exp() * log_sigmoid(-tx)
        };
        simpson(integrand, lo, hi, 40_000) + TWO_LN2
    }

    /// Population JS objective for a tabulated scorer (values on the grid
    /// returned by [`quadrature_nodes`]).
    pub fn population_objective_tabulated(scores: &[f64], p: &GaussianSpec, q: &GaussianSpec) -> f64 {
        let (lo, hi, xs) = quadrature_nodes(p, q, scores.len() - 1);
        let n = xs.len() - 1;
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for (i, (&x, &tx)) in xs.iter().zip(scores).enumerate() {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * (p.log_density(&[x]).exp() * log_sigmoid(tx) + q.log_density(&[x]).exp() * log_sigmoid(-tx));
        }
        acc * h / 3.0 + TWO_LN2
    }

    /// Simpson nodes spanning both densities.
    pub fn quadrature_nodes(p: &GaussianSpec, q: &GaussianSpec, intervals: usize) -> (f64, f64, Vec<f64>) {
        let (lo, hi) = integration_grid(p, q);
        let n = intervals + intervals % 2;
        let h = (hi - lo) / n as f64;
        (lo, hi, (0..=n).map(|i| lo + i as f64 * h).collect())
    }

    /// `D_JS(p‖q)` of 1-D Gaussians by quadrature of its defining integrand.
    pub fn js_divergence_1d(p: &GaussianSpec, q: &GaussianSpec) -> f64 {
        let (lo, hi) = integration_grid(p, q);
        let ln2 = std::f64::consts::LN_2;
        let integrand = |x: f64| {
            let lp = p.log_density(&[x]);
            let lq = q.log_density(&[x]);
            let hi_l = lp.max(lq);
            let lm = hi_l + ((lp - hi_l).exp() + (lq - hi_l).exp()).ln() - ln2;
            0.5 * (lp.exp() * (lp - lm) + lq.exp() * (lq - lm))
        };
        simpson(integrand, lo, hi, 40_000)
    }

    /// Trains a fresh 1-D discriminator to separate samples of `p`
    /// (positives) from samples of `q` (negatives).
    pub fn fit_discriminator_1d(
        p: &GaussianSpec,
        q: &GaussianSpec,
        steps: usize,
        batch: usize,
        seed: u64,
    ) -> Result<(ParamStore, Discriminator)> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, "probe", 1, 16, &mut rng);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..steps {
            let pos: Vec<f64> = (0..batch).map(|_| p.sample(&mut rng)[0]).collect();
            let neg: Vec<f64> = (0..batch).map(|_| q.sample(&mut rng)[0]).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::matrix(2 * batch, 1, [pos, neg].concat())?)?;
            let t = disc.score(&mut g, &store, x)?;
            let sp = g.slice(t, 0, 0, batch)?;
            let sn = g.slice(t, 0, batch, 2 * batch)?;
            let j = js_objective_nodes(&mut g, PairScores { pos: sp, neg: sn })?;
            let loss = g.negate(j)?;
            g.backward(loss)?.write_param_grads(&mut store);
            opt.step(&mut store);
        }
        Ok((store, disc))
    }

    /// Population objective of a fitted discriminator.
    pub fn fitted_population_objective(
        store: &ParamStore,
        disc: &Discriminator,
        p: &GaussianSpec,
        q: &GaussianSpec,
    ) -> Result<f64> {
        let (_, _, xs) = quadrature_nodes(p, q, 40_000);
        let input = Tensor::matrix(xs.len(), 1, xs)?;
        let scores = disc.score_values(store, &input)?;
        Ok(population_objective_tabulated(&scores, p, q))
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, seeded_rng, Adam, AdamConfig};

    #[test]
    fn derangement_of_two_is_swap() {
        let mut rng = seeded_rng(1);
        for _ in 0..20 {
            assert_eq!(derangement(2, &mut rng).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn derangement_of_32_has_no_fixed_point() {
        let mut rng = seeded_rng(2);
        for _ in 0..100 {
            let p = derangement(32, &mut rng).unwrap();
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let mut rng = seeded_rng(3);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(shuffle_negatives(&a, &a, &mut rng).is_err());
    }

    #[test]
    fn derangements_of_four_are_uniform() {
        let mut rng = seeded_rng(4);
        let mut counts = std::collections::HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            *counts.entry(derangement(4, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 9);
        for (perm, c) in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 1.0 / 9.0).abs() < 0.02, "{perm:?}: {f}");
        }
    }

    #[test]
    fn pair_batch_layout() {
        let a = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        let pb = PairBatch {
            a,
            b,
            perm: vec![2, 0, 1],
        };
        assert_eq!(pb.positives().values(), &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        assert_eq!(pb.negatives().values(), &[1.0, 30.0, 2.0, 10.0, 3.0, 20.0]);
    }

    #[test]
    fn constant_zero_scores() {
        let d = diagnostics_from_scores(&[0.0; 5], &[0.0; 5]);
        assert!(d.j.abs() < 1e-15);
        assert!((d.bce - TWO_LN2).abs() < 1e-15);
        assert_eq!((d.p_pos, d.p_neg), (0.5, 0.5));
    }

    #[test]
    fn confident_scores_reach_upper_bound() {
        let d = diagnostics_from_scores(&[40.0; 4], &[-40.0; 4]);
        assert!((d.j - TWO_LN2).abs() < 1e-12);
        assert!(d.bce < 1e-12);
        assert!((TWO_LN2 - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn bce_and_j_sum_to_two_ln2() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let pos = rng.normals(16).iter().map(|v| 5.0 * v).collect::<Vec<_>>();
            let neg = rng.normals(16).iter().map(|v| 5.0 * v).collect::<Vec<_>>();
            let d = diagnostics_from_scores(&pos, &neg);
            assert!((d.j + d.bce - TWO_LN2).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_discriminator_is_random_guess() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(&mut store, "d", 4, DISC_HIDDEN, &mut rng);
        let a = Tensor::matrix(8, 2, rng.normals(16)).unwrap();
        let b = Tensor::matrix(8, 2, rng.normals(16)).unwrap();
        let pb = shuffle_negatives(&a, &b, &mut rng).unwrap();
        let d = pair_diagnostics(&disc, &store, &pb).unwrap();
        assert_eq!(d.p_pos, 0.5);
        assert!((bce_diagnostic(&disc, &store, &pb).unwrap() - TWO_LN2).abs() < 1e-15);
        assert!(js_objective(&disc, &store, &pb).unwrap().abs() < 1e-15);
    }

    fn setup(seed: u64, n: usize) -> (ParamStore, [Discriminator; 3], [Tensor; 3]) {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let d = [3, 2, 4];
        let discs = Pair::ALL.map(|p| {
            let (a, b) = p.members();
            Discriminator::new(&mut store, p.tag(), d[a] + d[b], 8, &mut rng)
        });
        // give the zero-initialised output layers some weight
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).values_mut() {
                if *v == 0.0 {
                    *v = 0.3 * rng.normal();
                }
            }
        }
        let lat = [0, 1, 2].map(|m| Tensor::matrix(n, d[m], rng.normals(n * d[m])).unwrap());
        (store, discs, lat)
    }

    fn run(
        store: &ParamStore,
        discs: &[Discriminator; 3],
        lat: &[Tensor; 3],
        coupling: Coupling,
    ) -> (Graph, RedundancyTerms, [NodeId; 3]) {
        let mut g = Graph::new();
        let nodes = [0, 1, 2].map(|m| g.input(lat[m].clone()).unwrap());
        let mut rng = seeded_rng(77);
        let terms = redundancy_loss(&mut g, store, discs, nodes, coupling, &mut rng).unwrap();
        (g, terms, nodes)
    }

    #[test]
    fn zero_discriminators_give_zero_loss() {
        let mut rng = seeded_rng(9);
        let mut store = ParamStore::new();
        let discs = Pair::ALL.map(|p| Discriminator::new(&mut store, p.tag(), 4, 8, &mut rng));
        let lat = [0, 1, 2].map(|_| Tensor::matrix(5, 2, rng.normals(10)).unwrap());
        let (g, terms, _) = run(
            &store,
            &discs,
            &lat,
            Coupling::Reversal {
                alpha: 1.0,
                placement: GrlPlacement::Both,
            },
        );
        assert!(g.scalar(terms.loss).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_blocks_encoder_gradient_only() {
        let (mut store, discs, lat) = setup(10, 6);
        let rev = Coupling::Reversal {
            alpha: 0.0,
            placement: GrlPlacement::Both,
        };
        let (g, terms, nodes) = run(&store, &discs, &lat, rev);
        let grads = g.backward(terms.loss).unwrap();
        for n in nodes {
            assert!(grads.wrt(&g, n).iter().all(|v| *v == 0.0));
        }
        grads.write_param_grads(&mut store);
        let disc_grad_a0 = store.flat_grads();

        let (g, terms, _) = run(
            &store,
            &discs,
            &lat,
            Coupling::Reversal {
                alpha: 1.0,
                placement: GrlPlacement::Both,
            },
        );
        g.backward(terms.loss).unwrap().write_param_grads(&mut store);
        assert_eq!(disc_grad_a0, store.flat_grads());
        assert!(disc_grad_a0.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn grl_scales_encoder_gradient_exactly() {
        let (store, discs, lat) = setup(11, 6);
        let (g, terms, nodes) = run(&store, &discs, &lat, Coupling::Identity);
        let reference = g.backward(terms.loss).unwrap();
        for alpha in [0.0, 0.5, 1.0] {
            let (g2, t2, n2) = run(
                &store,
                &discs,
                &lat,
                Coupling::Reversal {
                    alpha,
                    placement: GrlPlacement::Both,
                },
            );
            let grads = g2.backward(t2.loss).unwrap();
            for m in 0..3 {
                let want: Vec<f64> = reference.wrt(&g, nodes[m]).iter().map(|v| -alpha * v).collect();
                let got = grads.wrt(&g2, n2[m]);
                for (w, o) in want.iter().zip(&got) {
                    assert!((w - o).abs() <= 1e-10 * (1.0 + w.abs()), "alpha {alpha}: {w} vs {o}");
                }
            }
        }
    }

    #[test]
    fn one_pass_min_max_matches_separate_passes() {
        let (mut store, discs, lat) = setup(12, 6);
        let alpha = 0.7;
        let (g, terms, nodes) = run(
            &store,
            &discs,
            &lat,
            Coupling::Reversal {
                alpha,
                placement: GrlPlacement::Both,
            },
        );
        let grads = g.backward(terms.loss).unwrap();
        grads.write_param_grads(&mut store);
        let one_pass_disc = store.flat_grads();
        let one_pass_enc: Vec<Vec<f64>> = nodes.iter().map(|&n| grads.wrt(&g, n)).collect();

        // separate pass: plain J with no reversal anywhere
        let mut g2 = Graph::new();
        let n2 = [0, 1, 2].map(|m| g2.input(lat[m].clone()).unwrap());
        let mut rng = seeded_rng(77);
        let mut js = Vec::new();
        for (pair, disc) in Pair::ALL.iter().zip(&discs) {
            let (a, b) = pair.members();
            let perm = derangement(6, &mut rng).unwrap();
            let s = pair_scores(&mut g2, &store, disc, n2[a], n2[b], &perm).unwrap();
            js.push(js_objective_nodes(&mut g2, s).unwrap());
        }
        let s = g2.add(js[0], js[1]).unwrap();
        let j = g2.add(s, js[2]).unwrap();
        assert!((g2.scalar(j) - g.scalar(terms.loss)).abs() < 1e-15);
        let plain = g2.backward(j).unwrap();
        plain.write_param_grads(&mut store);
        // discriminators: descent direction of the one-pass gradient ascends J
        for (a, b) in one_pass_disc.iter().zip(store.flat_grads()) {
            assert!((a + b).abs() < 1e-12);
        }
        // encoders: one-pass gradient equals the gradient of alpha * J
        for m in 0..3 {
            for (a, b) in one_pass_enc[m].iter().zip(plain.wrt(&g2, n2[m])) {
                assert!((a - alpha * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_only_placement_leaves_second_member_unreversed() {
        let (store, discs, lat) = setup(13, 5);
        let (g, terms, nodes) = run(
            &store,
            &discs,
            &lat,
            Coupling::Reversal {
                alpha: 0.0,
                placement: GrlPlacement::First,
            },
        );
        let grads = g.backward(terms.loss).unwrap();
        // image is only ever a first member
        assert!(grads.wrt(&g, nodes[0]).iter().all(|v| *v == 0.0));
        // audio is only ever a second member and still receives gradient
        assert!(grads.wrt(&g, nodes[2]).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn redundancy_gradient_matches_finite_differences() {
        let (mut store, discs, lat) = setup(14, 4);
        let eval = |store: &ParamStore| {
            let (g, t, _) = run(store, &discs, &lat, Coupling::Identity);
            g.scalar(t.loss)
        };
        let (g, t, _) = run(&store, &discs, &lat, Coupling::Identity);
        g.backward(t.loss).unwrap().write_param_grads(&mut store);
        let analytic = store.flat_grads();
        let base = store.clone();
        let numeric = finite_diff_grad(
            |w| {
                let mut s = base.clone();
                s.assign_flat(w);
                -eval(&s)
            },
            &store.flatten(),
            1e-5,
        );
        assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-4);
    }

    #[test]
    fn independent_latents_drive_objective_to_zero() {
        let mut rng = seeded_rng(15);
        let mut store = ParamStore::new();
        let discs = Pair::ALL.map(|p| Discriminator::new(&mut store, p.tag(), 4, DISC_HIDDEN, &mut rng));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let n = 64;
        for _ in 0..400 {
            let mut g = Graph::new();
            let nodes = [0, 1, 2].map(|_| g.input(Tensor::matrix(n, 2, rng.normals(n * 2)).unwrap()).unwrap());
            let terms = redundancy_loss(&mut g, &store, &discs, nodes, Coupling::Identity, &mut rng).unwrap();
            g.backward(terms.loss).unwrap().write_param_grads(&mut store);
            opt.step(&mut store);
        }
        let held = 4000;
        let lat = [0, 1, 2].map(|_| Tensor::matrix(held, 2, rng.normals(held * 2)).unwrap());
        let mut total = 0.0;
        for (pair, disc) in Pair::ALL.iter().zip(&discs) {
            let (a, b) = pair.members();
            let pb = shuffle_negatives(&lat[a], &lat[b], &mut rng).unwrap();
            let d = pair_diagnostics(disc, &store, &pb).unwrap();
            assert!((d.bce - 1.386).abs() < 0.1, "{pair:?} bce {}", d.bce);
            total += d.j;
        }
        assert!(total.abs() < 0.1, "loss {total}");
    }

    #[test]
    fn oracle_identical_distributions() {
        let p = GaussianSpec::new_1d(0.3, 1.2);
        let t = optimal_bayes_discriminator(&p, &p);
        assert_eq!(t(&[0.7]), 0.0);
        let j = population_objective_1d(|x| t(&[x]), &p, &p);
        assert!(j.abs() < 1e-9);
    }

    #[test]
    fn oracle_separated_distributions() {
        let p = GaussianSpec::new_1d(0.0, 1.0);
        let q = GaussianSpec::new_1d(12.0, 1.0);
        let t = optimal_bayes_discriminator(&p, &q);
        let j = population_objective_1d(|x| t(&[x]), &p, &q);
        assert!(j > TWO_LN2 - 1e-3 && j <= TWO_LN2 + 1e-6, "{j}");
    }

    #[test]
    fn oracle_matches_twice_js_divergence() {
        let p = GaussianSpec::new_1d(0.0, 1.0);
        let q = GaussianSpec::new_1d(1.0, 1.0);
        let t = optimal_bayes_discriminator(&p, &q);
        let j = population_objective_1d(|x| t(&[x]), &p, &q);
        let djs = js_divergence_1d(&p, &q);
        assert!((j - 2.0 * djs).abs() < 1e-9, "{j} vs {}", 2.0 * djs);
        assert!(j > 0.0 && j < TWO_LN2);
    }
}
