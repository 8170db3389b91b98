use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split, NUM_MODALITIES};
use crate::numerics::Rng;

const STREAM_MIXING: u64 = 1;
const STREAM_LABELS: u64 = 2;
const STREAM_FACTORS: u64 = 3;

/// Shared-factor generator. Every modality sees the label-bearing shared
/// factor `c = s/3 + N(0, 0.1²)` weighted by `rho` alongside its own private
/// Gaussian factor weighted by `1 − rho`, through a fixed random mixing
/// matrix, plus observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub dims: [usize; NUM_MODALITIES],
    pub rho: f64,
    /// Copies of the shared factor in each modality's source vector.
    pub shared_dim: usize,
    pub private_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 8000,
            dims: [16, 16, 16],
            rho: 0.8,
            shared_dim: 4,
            private_dim: 4,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DataError::Spec(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(DataError::Spec(format!("modality dims {:?} must be >= 1", self.dims)));
        }
        if self.shared_dim == 0 {
            return Err(DataError::Spec("shared_dim must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(DataError::Spec("n_samples must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(DataError::Spec(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 70/15/15 assignment from a hash of the row index alone.
pub fn split_of_index(i: usize) -> Split {
    match splitmix64(i as u64) % 100 {
        0..=69 => Split::Train,
        70..=84 => Split::Val,
        _ => Split::Test,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let k = spec.shared_dim + spec.private_dim;

    let mut mix_rng = root.stream(STREAM_MIXING);
    let scale = 1.0 / (k as f64).sqrt();
    let mixing: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| (0..d * k).map(|_| scale * mix_rng.normal()).collect())
        .collect();

    // exactly balanced labels in shuffled order
    let mut label_rng = root.stream(STREAM_LABELS);
    let mut classes: Vec<usize> = (0..spec.n_samples).map(|i| i % 7).collect();
    label_rng.shuffle(&mut classes);
    let scores: Vec<f64> = classes.iter().map(|&c| c as f64 - 3.0).collect();

    let mut rng = root.stream(STREAM_FACTORS);
    let mut features: [Vec<f64>; NUM_MODALITIES] = Default::default();
    for (m, f) in features.iter_mut().enumerate() {
        f.reserve(spec.n_samples * spec.dims[m]);
    }
    let mut source = vec![0.0; k];
    for &s in &scores {
        let c = s / 3.0 + 0.1 * rng.normal();
        for m in 0..NUM_MODALITIES {
            for v in &mut source[..spec.shared_dim] {
                *v = spec.rho * c;
            }
            for v in &mut source[spec.shared_dim..] {
                *v = (1.0 - spec.rho) * rng.normal();
            }
            let a = &mixing[m];
            for r in 0..spec.dims[m] {
                let row = &a[r * k..(r + 1) * k];
                let clean: f64 = row.iter().zip(&source).map(|(w, x)| w * x).sum();
                let noise = if spec.noise_std > 0.0 {
                    spec.noise_std * rng.normal()
                } else {
                    0.0
                };
                features[m].push(clean + noise);
            }
        }
    }
    let splits = (0..spec.n_samples).map(split_of_index).collect();
    Dataset::new(spec.dims, features, scores, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;

    #[test]
    fn deterministic_in_spec() {
        let spec = SyntheticSpec {
            n_samples: 300,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(generate_synthetic(&spec).unwrap(), other);
    }

    #[test]
    fn default_dataset_is_class_balanced() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(ds.len(), 8000);
        for c in ds.class_counts() {
            let f = c as f64 / 8000.0;
            assert!((f - 1.0 / 7.0).abs() < 0.05 / 7.0, "{f}");
        }
        let tr = ds.split(Split::Train).len() as f64 / 8000.0;
        let te = ds.split(Split::Test).len() as f64 / 8000.0;
        assert!((tr - 0.70).abs() < 0.02 && (te - 0.15).abs() < 0.02);
    }

    #[test]
    fn full_redundancy_without_noise_is_deterministic_in_shared_factor() {
        let spec = SyntheticSpec {
            n_samples: 50,
            rho: 1.0,
            private_dim: 0,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // every feature row is a fixed multiple of c, so rows are collinear
        let r0 = ds.row(Modality::Text, 0).to_vec();
        let r1 = ds.row(Modality::Text, 1).to_vec();
        let ratio = r1[0] / r0[0];
        for (a, b) in r0.iter().zip(&r1) {
            assert!((b - a * ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let bad = SyntheticSpec {
            rho: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
