//! Wireless channel simulation.
//!
//! Transmitted latents are real vectors normalised to unit average power per
//! dimension, so an SNR of `s` dB means per-dimension noise variance
//! `10^(−s/10)`. Rayleigh fading uses one gain per transmitted vector (block
//! fading); with equalisation the receiver divides by the known gain.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, GraphError, NodeId, Rng, Tensor};
use crate::{Error, Result};

/// Gains below this are redrawn before equalisation.
pub const MIN_GAIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFamily {
    Awgn,
    Rayleigh,
}

impl FromStr for ChannelFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            other => Err(format!("unknown channel family `{other}` (awgn|rayleigh)")),
        }
    }
}

/// SNR used for each transmission, in dB. `Fixed(f64::INFINITY)` is the
/// noiseless channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SnrPolicy {
    Fixed {
        #[serde(with = "db_value")]
        db: f64,
    },
    Uniform { lo: f64, hi: f64 },
}

/// dB values that may be `+∞`, written as the string `"inf"` so they
/// survive JSON as well as TOML.
pub(crate) mod db_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Number(*v).serialize(s)
        } else {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => super::parse_db(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Lists of dB values, each element as in [`db_value`].
pub(crate) mod db_values {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Db(#[serde(with = "super::db_value")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| Db(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Db>::deserialize(d)?.into_iter().map(|Db(x)| x).collect())
    }
}

/// Parses a dB value; `inf` (or `+inf`) is the noiseless sentinel.
pub fn parse_db(text: &str) -> Result<f64, String> {
    match text.trim() {
        "inf" | "+inf" | "Inf" | "noiseless" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("bad SNR `{t}`: {e}")),
    }
}

impl SnrPolicy {
    pub fn noiseless() -> Self {
        SnrPolicy::Fixed { db: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SnrPolicy::Fixed { db } if db.is_nan() || db == f64::NEG_INFINITY => {
                Err(Error::InvalidArgument(format!("fixed SNR must be a number or +inf, got {db}")))
            }
            SnrPolicy::Uniform { lo, hi } if !lo.is_finite() || !hi.is_finite() || lo > hi => Err(
                Error::InvalidArgument(format!("SNR range [{lo}, {hi}] must be finite with lo <= hi")),
            ),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            SnrPolicy::Fixed { db } => db,
            SnrPolicy::Uniform { lo, hi } => rng.uniform_range(lo, hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub family: ChannelFamily,
    pub snr: SnrPolicy,
    /// Perfect-CSI equalisation; ignored for AWGN.
    pub equalize: bool,
}

impl Default for ChannelConfig {
    /// AWGN with SNR uniform over 0–21 dB, the training condition.
    fn default() -> Self {
        Self {
            family: ChannelFamily::Awgn,
            snr: SnrPolicy::Uniform { lo: 0.0, hi: 21.0 },
            equalize: true,
        }
    }
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            family: ChannelFamily::Awgn,
            snr: SnrPolicy::Fixed { db: snr_db },
            equalize: true,
        }
    }

    pub fn rayleigh(snr_db: f64, equalize: bool) -> Self {
        Self {
            family: ChannelFamily::Rayleigh,
            snr: SnrPolicy::Fixed { db: snr_db },
            equalize,
        }
    }

    pub fn noiseless() -> Self {
        Self::awgn(f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        self.snr.validate()
    }

    /// Short label recorded in result files: `awgn`, `rayleigh-eq` or
    /// `rayleigh-noeq`.
    pub fn label(&self) -> &'static str {
        match (self.family, self.equalize) {
            (ChannelFamily::Awgn, _) => "awgn",
            (ChannelFamily::Rayleigh, true) => "rayleigh-eq",
            (ChannelFamily::Rayleigh, false) => "rayleigh-noeq",
        }
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.snr {
            SnrPolicy::Fixed { db } => write!(f, "{} @ {db} dB", self.label()),
            SnrPolicy::Uniform { lo, hi } => write!(f, "{} @ U[{lo}, {hi}] dB", self.label()),
        }
    }
}

/// Scales `z` to `Σ z'² = d`.
pub fn power_normalize(z: &[f64]) -> Result<Vec<f64>> {
    let energy: f64 = z.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot power-normalise an all-zero or non-finite vector".into(),
        ));
    }
    let k = (z.len() as f64 / energy).sqrt();
    Ok(z.iter().map(|v| v * k).collect())
}

/// Row-wise power normalisation of an `[n, d]` node.
///
/// Computed as `z · exp(½(ln d − ln Σz²))`, so an all-zero row surfaces as a
/// non-finite node error.
pub fn power_normalize_nodes(g: &mut Graph, z: NodeId) -> Result<NodeId, GraphError> {
    let shape = g.shape(z).to_vec();
    let d = shape[1] as f64;
    let sq = g.multiply(z, z)?;
    let energy = g.reduce_sum(sq, Some(1))?;
    let log_e = g.log(energy)?;
    let log_k = g.affine(log_e, -0.5, 0.5 * d.ln())?;
    let k = g.exp(log_k)?;
    let kb = g.broadcast(k, &shape)?;
    g.multiply(z, kb)
}

/// `σ² = 10^(−snr/10)`; zero for `+∞`.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

pub fn awgn(z: &[f64], snr_db: f64, rng: &mut Rng) -> Vec<f64> {
    let sigma = noise_variance(snr_db).sqrt();
    if sigma == 0.0 {
        return z.to_vec();
    }
    z.iter().map(|v| v + sigma * rng.normal()).collect()
}

/// Draws `h = |g|` with `g` complex Gaussian, `E[h²] = 1`. Returns the gain
/// and how many draws fell below [`MIN_GAIN`] and were redrawn.
pub fn rayleigh_gain(rng: &mut Rng) -> (f64, usize) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut redraws = 0;
    loop {
        let re = s * rng.normal();
        let im = s * rng.normal();
        let h = re.hypot(im);
        if h >= MIN_GAIN {
            return (h, redraws);
        }
        redraws += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayleighOutput {
    pub signal: Vec<f64>,
    pub gain: f64,
    pub redraws: usize,
}

pub fn rayleigh(z: &[f64], snr_db: f64, rng: &mut Rng, equalize: bool) -> RayleighOutput {
    let (gain, redraws) = rayleigh_gain(rng);
    RayleighOutput {
        signal: faded(z, gain, snr_db, rng, equalize),
        gain,
        redraws,
    }
}

/// `h·z + n`, divided by `h` when equalising.
pub fn faded(z: &[f64], gain: f64, snr_db: f64, rng: &mut Rng, equalize: bool) -> Vec<f64> {
    let sigma = noise_variance(snr_db).sqrt();
    z.iter()
        .map(|v| {
            let n = if sigma > 0.0 { sigma * rng.normal() } else { 0.0 };
            let y = gain * v + n;
            if equalize {
                y / gain
            } else {
                y
            }
        })
        .collect()
}

/// One batch worth of channel randomness, frozen so it can be applied on a
/// graph: `ẑ = scale ⊙ z + additive`, with one scale per row.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub snr_db: f64,
    pub scale: Vec<f64>,
    pub additive: Tensor,
    /// Per-row Rayleigh gains (empty for AWGN).
    pub gains: Vec<f64>,
    pub redraws: usize,
}

impl ChannelRealization {
    pub fn draw(config: &ChannelConfig, snr_db: f64, rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let sigma = noise_variance(snr_db).sqrt();
        let mut noise = if sigma > 0.0 {
            rng.normals(rows * cols).into_iter().map(|e| sigma * e).collect()
        } else {
            vec![0.0; rows * cols]
        };
        let (scale, gains, redraws) = match config.family {
            ChannelFamily::Awgn => (vec![1.0; rows], Vec::new(), 0),
            ChannelFamily::Rayleigh => {
                let mut gains = Vec::with_capacity(rows);
                let mut redraws = 0;
                for _ in 0..rows {
                    let (h, r) = rayleigh_gain(rng);
                    gains.push(h);
                    redraws += r;
                }
                if config.equalize {
                    for (r, h) in gains.iter().enumerate() {
                        for n in &mut noise[r * cols..(r + 1) * cols] {
                            *n /= h;
                        }
                    }
                    (vec![1.0; rows], gains, redraws)
                } else {
                    (gains.clone(), gains, redraws)
                }
            }
        };
        Self {
            snr_db,
            scale,
            additive: Tensor::matrix(rows, cols, noise).expect("non-empty batch"),
            gains,
            redraws,
        }
    }

    pub fn apply_values(&self, z: &Tensor) -> Tensor {
        let c = z.cols();
        let values = z
            .values()
            .iter()
            .zip(self.additive.values())
            .enumerate()
            .map(|(i, (v, n))| self.scale[i / c] * v + n)
            .collect();
        Tensor::new(z.shape().to_vec(), values).expect("same shape")
    }

    pub fn apply(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, GraphError> {
        let shape = g.shape(z).to_vec();
        let scaled = if self.scale.iter().all(|&s| s == 1.0) {
            z
        } else {
            let cols = shape[1];
            let s: Vec<f64> = self.scale.iter().flat_map(|&s| std::iter::repeat(s).take(cols)).collect();
            let s = g.input(Tensor::new(shape.clone(), s)?)?;
            g.multiply(z, s)?
        };
        if noise_variance(self.snr_db) == 0.0 {
            return Ok(scaled);
        }
        let n = g.input(self.additive.clone())?;
        g.add(scaled, n)
    }
}
