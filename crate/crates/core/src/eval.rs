//! Task metrics, SNR sweeps and redundancy diagnostics.
//!
//! Top-2 is sign agreement between predicted and labelled sentiment scores
//! (zero counts as positive), Top-7 is exact class accuracy, F1 is the binary
//! F1 of the positive class and MAE is the mean absolute score error.

use std::fmt::Write as _;

use crate::channel::{ChannelConfig, ChannelFamily, SnrPolicy};
use crate::data::{class_of_score, oracle_mi, Dataset, Modality, MIN_MI_SAMPLES};
use crate::numerics::{Rng, Tensor};
use crate::pipeline::{encode_latents, infer, ModelState};
use crate::redundancy::{pair_diagnostics, shuffle_negatives, Pair, PairDiagnostics};
use crate::vib::{predictions_from_logits, TaskPrediction};
use crate::{Error, Result};

/// Default sweep grid, −12 dB to 18 dB in 3 dB steps.
pub fn default_snr_grid() -> Vec<f64> {
    (0..11).map(|i| -12.0 + 3.0 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub top2: f64,
    pub top7: f64,
    pub f1: f64,
    pub mae: f64,
}

pub fn metrics(predictions: &[TaskPrediction], label_scores: &[f64]) -> Result<TaskMetrics> {
    if predictions.is_empty() || predictions.len() != label_scores.len() {
        return Err(Error::InvalidArgument(format!(
            "metrics need aligned non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            label_scores.len()
        )));
    }
    let n = predictions.len() as f64;
    let (mut sign_ok, mut class_ok, mut abs_err) = (0usize, 0usize, 0.0);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, &y) in predictions.iter().zip(label_scores) {
        let pred_pos = p.is_positive();
        let true_pos = y >= 0.0;
        sign_ok += usize::from(pred_pos == true_pos);
        class_ok += usize::from(p.argmax_class() == class_of_score(y));
        abs_err += (p.score() - y).abs();
        match (pred_pos, true_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let f1 = if tp + fp == 0 || tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fneg) as f64;
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TaskMetrics {
        top2: sign_ok as f64 / n,
        top7: class_ok as f64 / n,
        f1,
        mae: abs_err / n,
    })
}

fn features(ds: &Dataset) -> [Tensor; 3] {
    Modality::ALL.map(|m| ds.modality_matrix(m))
}

/// Scores a whole split through one channel realization at `snr_db`.
pub fn evaluate(model: &ModelState, ds: &Dataset, channel: &ChannelConfig, snr_db: f64, seed: u64) -> Result<TaskMetrics> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut rng = Rng::new(seed).stream(0xe7a1);
    let logits = infer(model, &features(ds), channel, snr_db, &mut rng)?;
    metrics(&predictions_from_logits(&logits), ds.scores())
}

/// Held-out discriminator statistics and latent mutual information for one
/// modality pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairReport {
    pub pair: Pair,
    pub diagnostics: PairDiagnostics,
    /// kNN estimate between the two latents; `None` below the estimator's
    /// sample floor or when skipped.
    pub mi: Option<f64>,
}

/// Discriminator diagnostics on sampled latents of `ds` (and optionally kNN
/// mutual information between the latent pairs).
pub fn redundancy_report(model: &ModelState, ds: &Dataset, seed: u64, with_mi: bool) -> Result<[PairReport; 3]> {
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("redundancy report needs at least 2 rows".into()));
    }
    let root = Rng::new(seed);
    let mut sample_rng = root.stream(0x5a);
    let mut neg_rng = root.stream(0x5b);
    let z = encode_latents(model, &features(ds), Some(&mut sample_rng))?;
    let mut out = Vec::with_capacity(3);
    for (p, pair) in Pair::ALL.into_iter().enumerate() {
        let (a, b) = pair.members();
        let batch = shuffle_negatives(&z[a], &z[b], &mut neg_rng)?;
        let diagnostics = pair_diagnostics(&model.discriminators[p], &model.store, &batch)?;
        let mi = if with_mi && ds.len() >= MIN_MI_SAMPLES {
            Some(oracle_mi(&z[a], &z[b])?)
        } else {
            None
        };
        out.push(PairReport { pair, diagnostics, mi });
    }
    Ok([out[0], out[1], out[2]])
}

/// One evaluated (SNR, seed) point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub snr_db: f64,
    pub seed: u64,
    pub metrics: TaskMetrics,
    pub bce: [f64; 3],
    pub mi: [Option<f64>; 3],
    pub n_samples: usize,
}

/// Mean and standard deviation over seeds at one SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRow {
    pub snr_db: f64,
    pub mean: TaskMetrics,
    pub std: TaskMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub channel: ChannelConfig,
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(snr_db: f64, rows: &[TaskMetrics]) -> AggregateRow {
    let col = |f: fn(&TaskMetrics) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let (t2, s2) = col(|m| m.top2);
    let (t7, s7) = col(|m| m.top7);
    let (f1, sf) = col(|m| m.f1);
    let (mae, sm) = col(|m| m.mae);
    AggregateRow {
        snr_db,
        mean: TaskMetrics {
            top2: t2,
            top7: t7,
            f1,
            mae,
        },
        std: TaskMetrics {
            top2: s2,
            top7: s7,
            f1: sf,
            mae: sm,
        },
    }
}

/// Evaluates `ds` at every SNR of `grid` for every channel seed.
///
/// The SNR policy of `channel` is ignored; its family and equalisation mode
/// are used. Discriminator BCE and latent MI do not depend on the channel
/// and are computed once.
pub fn snr_sweep(
    model: &ModelState,
    ds: &Dataset,
    grid: &[f64],
    channel: &ChannelConfig,
    seeds: &[u64],
    with_mi: bool,
) -> Result<SweepTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one SNR and one seed".into()));
    }
    let report = redundancy_report(model, ds, seeds[0], with_mi)?;
    let bce = report.map(|r| r.diagnostics.bce);
    let mi = report.map(|r| r.mi);
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for &snr_db in grid {
        let cfg = ChannelConfig {
            snr: SnrPolicy::Fixed { db: snr_db },
            ..*channel
        };
        let mut at_snr = Vec::new();
        for &seed in seeds {
            let m = evaluate(model, ds, &cfg, snr_db, seed)?;
            at_snr.push(m);
            rows.push(MetricsRow {
                snr_db,
                seed,
                metrics: m,
                bce,
                mi,
                n_samples: ds.len(),
            });
        }
        aggregates.push(aggregate(snr_db, &at_snr));
    }
    Ok(SweepTable {
        channel: *channel,
        rows,
        aggregates,
    })
}

pub const CSV_HEADER: &str = "channel,snr_db,seed,top2,top7,f1,mae,bce_it,bce_ia,bce_ta,mi_it,mi_ia,mi_ta";

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{v:.6}"))
}

/// Results CSV for one or more sweep tables. Aggregate rows carry
/// `seed=agg` and hold means over seeds.
pub fn results_csv(tables: &[SweepTable]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for t in tables {
        let label = t.channel.label();
        for r in &t.rows {
            let m = r.metrics;
            let _ = writeln!(
                out,
                "{label},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                fmt_db(r.snr_db),
                r.seed,
                m.top2,
                m.top7,
                m.f1,
                m.mae,
                r.bce[0],
                r.bce[1],
                r.bce[2],
                fmt_opt(r.mi[0]),
                fmt_opt(r.mi[1]),
                fmt_opt(r.mi[2]),
            );
        }
        let first = t.rows.first();
        for a in &t.aggregates {
            let m = a.mean;
            let bce = first.map_or([f64::NAN; 3], |r| r.bce);
            let mi = first.map_or([None; 3], |r| r.mi);
            let _ = writeln!(
                out,
                "{label},{},agg,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                fmt_db(a.snr_db),
                m.top2,
                m.top7,
                m.f1,
                m.mae,
                bce[0],
                bce[1],
                bce[2],
                fmt_opt(mi[0]),
                fmt_opt(mi[1]),
                fmt_opt(mi[2]),
            );
        }
    }
    out
}

/// Channel configurations for a sweep over the given families.
pub fn sweep_channels(families: &[ChannelFamily], equalize: bool) -> Vec<ChannelConfig> {
    families
        .iter()
        .map(|&family| ChannelConfig {
            family,
            snr: SnrPolicy::Fixed { db: 0.0 },
            equalize,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vib::NUM_CLASSES;

    /// Prediction putting almost all mass on `class`.
    fn sharp(class: usize) -> TaskPrediction {
        let mut logits = vec![-50.0; NUM_CLASSES];
        logits[class] = 50.0;
        TaskPrediction::new(logits).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let labels = [-3.0, -1.0, 0.0, 2.0];
        let preds: Vec<_> = labels.iter().map(|&y| sharp(class_of_score(y))).collect();
        let m = metrics(&preds, &labels).unwrap();
        assert_eq!((m.top2, m.top7, m.f1), (1.0, 1.0, 1.0));
        assert!(m.mae < 1e-12);
    }

    #[test]
    fn all_positive_predictor() {
        let labels = [-2.0, -1.0, 1.0, 2.0];
        let preds: Vec<_> = (0..4).map(|_| sharp(6)).collect();
        let m = metrics(&preds, &labels).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.top2, 0.5);
    }

    #[test]
    fn mae_example() {
        let labels = [-3.0, 0.0, 3.0];
        let preds = [sharp(0), sharp(3), sharp(3)];
        let m = metrics(&preds, &labels).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_predicted_positives_gives_zero_f1() {
        let preds = [sharp(0), sharp(1)];
        let m = metrics(&preds, &[1.0, -1.0]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_score_counts_positive() {
        let m = metrics(&[sharp(3)], &[0.0]).unwrap();
        assert_eq!((m.top2, m.f1), (1.0, 1.0));
    }

    #[test]
    fn default_grid() {
        let g = default_snr_grid();
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[10]), (-12.0, 18.0));
    }
}
