//! Datasets: a synthetic generator with a tunable cross-modal redundancy
//! knob, a plain-text feature-file format, and a k-nearest-neighbour mutual
//! information estimator used as an independent judge of redundancy.

mod io;
mod mi;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Rng, Tensor};

pub use io::{load_dir, load_features, write_dir, write_features, SPLIT_FILES};
pub use mi::{ksg_mi, oracle_mi, KSG_NEIGHBOURS, MIN_MI_SAMPLES};
pub use synthetic::{generate_synthetic, split_of_index, SyntheticSpec};

pub const NUM_MODALITIES: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: malformed header: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("{path}: {modality} features have {rows} complete rows but {other} has {expected}")]
    Alignment {
        path: PathBuf,
        modality: Modality,
        rows: usize,
        other: Modality,
        expected: usize,
    },
    #[error("{path}: header declares {declared} rows, file has {found}")]
    RowCount { path: PathBuf, declared: usize, found: usize },
    #[error("{path}, line {line}: label score {score} outside [-3, 3]")]
    LabelRange { path: PathBuf, line: usize, score: f64 },
    #[error("{path}, line {line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("mutual information needs at least {need} paired samples, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("paired samples differ in count: {0} vs {1}")]
    Unpaired(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (train|val|test)")),
        }
    }
}

/// Class index `round(score) + 3`.
pub fn class_of_score(score: f64) -> usize {
    (score.round().clamp(-3.0, 3.0) + 3.0) as usize
}

/// Aligned per-modality feature rows with sentiment labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: [usize; NUM_MODALITIES],
    /// Row-major feature blocks, one per modality.
    features: [Vec<f64>; NUM_MODALITIES],
    scores: Vec<f64>,
    classes: Vec<usize>,
    splits: Vec<Split>,
}

/// Mini-batch view ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: [Tensor; NUM_MODALITIES],
    pub classes: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl Dataset {
    /// Builds a dataset, deriving classes from scores.
    pub fn new(
        dims: [usize; NUM_MODALITIES],
        features: [Vec<f64>; NUM_MODALITIES],
        scores: Vec<f64>,
        splits: Vec<Split>,
    ) -> Result<Self, DataError> {
        let n = scores.len();
        let path = PathBuf::from("<memory>");
        for m in Modality::ALL {
            let d = dims[m.index()];
            if d == 0 || features[m.index()].len() != n * d {
                return Err(DataError::Alignment {
                    path,
                    modality: m,
                    rows: if d == 0 { 0 } else { features[m.index()].len() / d },
                    other: Modality::Image,
                    expected: n,
                });
            }
        }
        if splits.len() != n {
            return Err(DataError::Parse {
                path,
                line: 0,
                detail: format!("{} split tags for {n} rows", splits.len()),
            });
        }
        for (i, &s) in scores.iter().enumerate() {
            if !(-3.0..=3.0).contains(&s) {
                return Err(DataError::LabelRange {
                    path,
                    line: i + 1,
                    score: s,
                });
            }
        }
        let classes = scores.iter().map(|&s| class_of_score(s)).collect();
        Ok(Self {
            dims,
            features,
            scores,
            classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn dims(&self) -> [usize; NUM_MODALITIES] {
        self.dims
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.dims[m.index()]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn features(&self, m: Modality) -> &[f64] {
        &self.features[m.index()]
    }

    pub fn row(&self, m: Modality, i: usize) -> &[f64] {
        let d = self.dims[m.index()];
        &self.features[m.index()][i * d..(i + 1) * d]
    }

    /// All rows of one modality as an `[n, d]` matrix.
    pub fn modality_matrix(&self, m: Modality) -> Tensor {
        Tensor::matrix(self.len(), self.dim(m), self.features(m).to_vec()).expect("non-empty dataset")
    }

    /// Rows with the given indices, split tags preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = Modality::ALL.map(|m| indices.iter().flat_map(|&i| self.row(m, i).iter().copied()).collect());
        Dataset {
            dims: self.dims,
            features,
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.subset(&idx)
    }

    /// Concatenates datasets with equal dims.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset, DataError> {
        let first = parts.first().ok_or_else(|| DataError::Spec("nothing to concatenate".into()))?;
        let mut out = Dataset {
            dims: first.dims,
            features: Default::default(),
            scores: Vec::new(),
            classes: Vec::new(),
            splits: Vec::new(),
        };
        for p in parts {
            if p.dims != first.dims {
                return Err(DataError::Spec(format!("dims {:?} vs {:?}", p.dims, first.dims)));
            }
            for m in 0..NUM_MODALITIES {
                out.features[m].extend_from_slice(&p.features[m]);
            }
            out.scores.extend_from_slice(&p.scores);
            out.classes.extend_from_slice(&p.classes);
            out.splits.extend_from_slice(&p.splits);
        }
        Ok(out)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let features = Modality::ALL.map(|m| {
            let v = indices.iter().flat_map(|&i| self.row(m, i).iter().copied()).collect();
            Tensor::matrix(indices.len(), self.dim(m), v).expect("non-empty batch")
        });
        Batch {
            features,
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
        }
    }

    /// Shuffled full batches of `size`; the ragged tail is dropped.
    pub fn shuffled_batches(&self, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.chunks_exact(size).map(<[usize]>::to_vec).collect()
    }

    /// Per-class row counts.
    pub fn class_counts(&self) -> [usize; 7] {
        let mut c = [0; 7];
        for &k in &self.classes {
            c[k] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_mapping() {
        assert_eq!(class_of_score(-3.0), 0);
        assert_eq!(class_of_score(0.0), 3);
        assert_eq!(class_of_score(2.6), 6);
        assert_eq!(class_of_score(-0.4), 3);
    }

    #[test]
    fn subset_and_split() {
        let ds = Dataset::new(
            [1, 1, 2],
            [vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]],
            vec![-3.0, 0.0, 3.0],
            vec![Split::Train, Split::Test, Split::Train],
        )
        .unwrap();
        let tr = ds.split(Split::Train);
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.row(Modality::Audio, 1), &[4.0, 5.0]);
        assert_eq!(tr.classes(), &[0, 6]);
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.features[0].values(), &[3.0, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let r = Dataset::new([1, 1, 1], [vec![0.0], vec![0.0], vec![0.0]], vec![3.5], vec![Split::Train]);
        assert!(matches!(r, Err(DataError::LabelRange { .. })));
    }
}
