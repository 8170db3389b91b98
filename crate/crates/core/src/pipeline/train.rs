use crate::channel::{ChannelConfig, SnrPolicy};
use crate::data::{Dataset, Split};
use crate::eval::{evaluate, redundancy_report, TaskMetrics};
use crate::numerics::{Adam, AdamConfig, Rng};
use crate::redundancy::TWO_LN2;
use crate::{Error, Result};

use super::{forward_pass, warmup_schedule, Architecture, ModelState, Schedule, TrainConfig};

/// Training aborts once the summed loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub snr_db: f64,
    pub metrics: TaskMetrics,
}

/// Per-epoch means of the loss parts plus validation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub lambda_red: f64,
    pub steps: usize,
    pub uvib: [f64; 3],
    pub redundancy: f64,
    pub mvib: f64,
    pub total: f64,
    /// Discriminator BCE on the training batches (`2 ln 2` while the
    /// redundancy branch is off).
    pub train_bce: [f64; 3],
    /// Discriminator BCE on validation latents.
    pub val_bce: [f64; 3],
    pub val: Vec<ValidationPoint>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,alpha,lambda_red,steps,uvib_i,uvib_t,uvib_a,redundancy,mvib,total,train_bce_it,train_bce_ia,train_bce_ta,val_bce_it,val_bce_ia,val_bce_ta";

    /// Header including one `top2/top7/f1/mae` group per validation SNR.
    pub fn csv_header(val_snr_db: &[f64]) -> String {
        let mut h = Self::CSV_HEADER.to_string();
        for s in val_snr_db {
            for k in ["top2", "top7", "f1", "mae"] {
                h.push_str(&format!(",val_{k}@{s}"));
            }
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            format!("{}", self.alpha),
            format!("{}", self.lambda_red),
            self.steps.to_string(),
        ];
        let scalars = [self.redundancy, self.mvib, self.total];
        let nums = self
            .uvib
            .iter()
            .chain(&scalars)
            .chain(&self.train_bce)
            .chain(&self.val_bce);
        fields.extend(nums.map(|v| format!("{v:.9}")));
        for p in &self.val {
            let m = p.metrics;
            fields.extend([m.top2, m.top7, m.f1, m.mae].map(|v| format!("{v:.6}")));
        }
        fields.join(",")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<EpochLog>,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, |_| {})
}

/// Trains on the train split; `on_epoch` sees each epoch's log as soon as it
/// is complete, so a divergence abort leaves earlier epochs reported.
pub fn train_with(config: &TrainConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "train split has {} rows, fewer than one batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    let arch = Architecture::from_config(config, dataset.dims());
    let mut model = ModelState::new(arch, config.seed);
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let root = Rng::new(config.seed);
    let mut shuffle_rng = root.stream(10);
    let mut step_rng = root.stream(11);

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (alpha, lambda_red) = warmup_schedule(epoch, config.warmup_epochs, config.epochs, config.lambda_red);
        let schedule = Schedule {
            alpha,
            lambda_red,
            beta: config.beta,
            gamma: config.gamma,
            placement: config.grl_placement,
        };
        let batches = train.shuffled_batches(config.batch_size, &mut shuffle_rng);
        let mut sums = [0.0; 6];
        let mut bce = [0.0; 3];
        for (step, idx) in batches.iter().enumerate() {
            let batch = train.batch(idx);
            let f = forward_pass(&batch, &model, &config.channel, &schedule, &mut step_rng)?;
            let p = &f.parts;
            if !p.total.is_finite() || p.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: p.total,
                });
            }
            f.graph.backward(f.total)?.write_param_grads(&mut model.store);
            opt.step(&mut model.store);
            for (s, v) in sums.iter_mut().zip([p.uvib[0], p.uvib[1], p.uvib[2], p.redundancy, p.mvib, p.total]) {
                *s += v;
            }
            for (b, d) in bce.iter_mut().zip(
                f.pair_diagnostics
                    .map_or([TWO_LN2; 3], |d| d.map(|d| d.bce)),
            ) {
                *b += d;
            }
        }
        let steps = batches.len() as f64;
        let mean = sums.map(|s| s / steps);

        let (val_points, val_bce) = if val.len() >= 2 {
            let mut points = Vec::with_capacity(config.val_snr_db.len());
            for &snr_db in &config.val_snr_db {
                let cfg = ChannelConfig {
                    snr: SnrPolicy::Fixed { db: snr_db },
                    ..config.channel
                };
                let metrics = evaluate(&model, &val, &cfg, snr_db, config.seed)?;
                points.push(ValidationPoint { snr_db, metrics });
            }
            let report = redundancy_report(&model, &val, config.seed, false)?;
            (points, report.map(|r| r.diagnostics.bce))
        } else {
            (Vec::new(), [f64::NAN; 3])
        };

        let entry = EpochLog {
            epoch,
            alpha,
            lambda_red,
            steps: batches.len(),
            uvib: [mean[0], mean[1], mean[2]],
            redundancy: mean[3],
            mvib: mean[4],
            total: mean[5],
            train_bce: bce.map(|b| b / steps),
            val_bce,
            val: val_points,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small() -> (TrainConfig, Dataset) {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 400,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn same_seed_same_log() {
        let (cfg, ds) = small();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.log, b.log);
        assert!((a.log[0].total - b.log[0].total).abs() < 1e-10);
        assert_eq!(a.model.store.flatten(), b.model.store.flatten());
    }

    #[test]
    fn warmup_epoch_keeps_discriminators_at_chance() {
        let (cfg, ds) = small();
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.log[0].lambda_red, 0.0);
        assert_eq!(out.log[0].train_bce, [TWO_LN2; 3]);
        assert!(out.log[1].lambda_red > 0.0);
        let row = out.log[1].csv_row();
        assert_eq!(row.split(',').count(), EpochLog::csv_header(&cfg.val_snr_db).split(',').count());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut cfg, ds) = small();
        cfg.learning_rate = 1e12;
        cfg.epochs = 3;
        match train(&cfg, &ds) {
            Err(Error::Diverged { .. }) | Err(Error::NonFiniteLoss { .. }) | Err(Error::Graph(_)) => {}
            other => panic!("expected an abort, got {:?}", other.map(|o| o.log.len())),
        }
    }

    #[test]
    fn too_small_train_split() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 20,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert!(train(&TrainConfig::default(), &ds).is_err());
    }
}
