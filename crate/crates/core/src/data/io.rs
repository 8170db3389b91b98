//! Feature files: a header line `n_rows d_i d_t d_a`, then one line per row
//! holding the label score followed by the image, text and audio features,
//! all whitespace separated. Values are written with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, Modality, Split, NUM_MODALITIES};

/// File names used by [`write_dir`] and [`load_dir`].
pub const SPLIT_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.txt"),
    (Split::Val, "val.txt"),
    (Split::Test, "test.txt"),
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every row of `ds` to one file.
pub fn write_features(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let [di, dt, da] = ds.dims();
    let mut out = String::new();
    let _ = writeln!(out, "{} {di} {dt} {da}", ds.len());
    for i in 0..ds.len() {
        let _ = write!(out, "{:.16e}", ds.scores()[i]);
        for m in Modality::ALL {
            for v in ds.row(m, i) {
                let _ = write!(out, " {v:.16e}");
            }
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Writes `train.txt`, `val.txt` and `test.txt` under `dir`.
pub fn write_dir(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>, DataError> {
    SPLIT_FILES
        .iter()
        .map(|(split, name)| {
            let p = dir.join(name);
            write_features(&p, &ds.split(*split))?;
            Ok(p)
        })
        .collect()
}

fn split_from_path(path: &Path) -> Split {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(Split::Train)
}

/// Reads one feature file. Rows are tagged with the split named by the file
/// stem (`train`, `val`, `test`), defaulting to train.
pub fn load_features(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let p = || path.to_path_buf();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| DataError::Header {
        path: p(),
        detail: "empty file".into(),
    })?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| DataError::Header {
            path: p(),
            detail: format!("`{header}`: {e}"),
        })?;
    let [n_rows, di, dt, da] = fields[..] else {
        return Err(DataError::Header {
            path: p(),
            detail: format!("expected `n_rows d_i d_t d_a`, got {} fields", fields.len()),
        });
    };
    let dims = [di, dt, da];
    if dims.contains(&0) {
        return Err(DataError::Header {
            path: p(),
            detail: "modality dims must be >= 1".into(),
        });
    }
    let width: usize = dims.iter().sum();

    let mut scores = Vec::with_capacity(n_rows);
    let mut features: [Vec<f64>; NUM_MODALITIES] = Default::default();
    // complete rows seen per modality
    let mut complete = [0usize; NUM_MODALITIES];
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| DataError::Parse {
                    path: p(),
                    line: line_no,
                    detail: format!("`{t}`: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let score = values[0];
        if !score.is_finite() || !(-3.0..=3.0).contains(&score) {
            return Err(DataError::LabelRange {
                path: p(),
                line: line_no,
                score,
            });
        }
        if values.len() > 1 + width {
            return Err(DataError::Parse {
                path: p(),
                line: line_no,
                detail: format!("{} feature values, expected {width}", values.len() - 1),
            });
        }
        scores.push(score);
        let mut offset = 1;
        for m in 0..NUM_MODALITIES {
            let end = offset + dims[m];
            if end <= values.len() {
                features[m].extend_from_slice(&values[offset..end]);
                complete[m] += 1;
            }
            offset = end;
        }
    }
    if let Some(m) = (0..NUM_MODALITIES).find(|&m| complete[m] != scores.len()) {
        let other = (0..NUM_MODALITIES).find(|&o| complete[o] == scores.len()).unwrap_or(0);
        return Err(DataError::Alignment {
            path: p(),
            modality: Modality::ALL[m],
            rows: complete[m],
            other: Modality::ALL[other],
            expected: complete[other],
        });
    }
    if scores.len() != n_rows {
        return Err(DataError::RowCount {
            path: p(),
            declared: n_rows,
            found: scores.len(),
        });
    }
    let splits = vec![split_from_path(path); n_rows];
    Dataset::new(dims, features, scores, splits)
}

/// Loads the three split files written by [`write_dir`].
pub fn load_dir(dir: &Path) -> Result<Dataset, DataError> {
    let parts = SPLIT_FILES
        .iter()
        .map(|(_, name)| load_features(&dir.join(name)))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    const FIXTURE: &str = "3 2 1 1\n\
        -3 0.5 1.5 2 -1\n\
        0.4 0 0 0 0\n\
        3 1e-3 -2.25 7 8\n";

    #[test]
    fn hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.txt");
        fs::write(&path, FIXTURE).unwrap();
        let ds = load_features(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features(Modality::Image), &[0.5, 1.5, 0.0, 0.0, 1e-3, -2.25]);
        assert_eq!(ds.features(Modality::Text), &[2.0, 0.0, 7.0]);
        assert_eq!(ds.features(Modality::Audio), &[-1.0, 0.0, 8.0]);
        assert_eq!(ds.classes(), &[0, 3, 6]);
        assert!(ds.splits().iter().all(|&s| s == Split::Val));
    }

    #[test]
    fn short_audio_row_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        fs::write(&path, "3 2 1 1\n-3 0.5 1.5 2 -1\n0 0 0 0\n3 1 2 3 4\n").unwrap();
        let err = load_features(&path).unwrap_err();
        assert!(matches!(
            err,
            DataError::Alignment {
                modality: Modality::Audio,
                rows: 2,
                expected: 3,
                ..
            }
        ));
        assert!(err.to_string().contains("audio"));
    }

    #[test]
    fn label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        fs::write(&path, "1 1 1 1\n3.2 0 0 0\n").unwrap();
        assert!(matches!(load_features(&path), Err(DataError::LabelRange { line: 2, .. })));
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        for bad in ["3 2 1\n", "a b c d\n", ""] {
            fs::write(&path, bad).unwrap();
            assert!(matches!(load_features(&path), Err(DataError::Header { .. })), "{bad:?}");
        }
    }

    #[test]
    fn row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        fs::write(&path, "2 1 1 1\n0 0 0 0\n").unwrap();
        assert!(matches!(load_features(&path), Err(DataError::RowCount { .. })));
    }

    #[test]
    fn write_then_load_is_bit_identical() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_samples: 200,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dir(dir.path(), &ds).unwrap();
        let back = load_dir(dir.path()).unwrap();
        let ordered = Dataset::concat(&Split::ALL.map(|s| ds.split(s))).unwrap();
        assert_eq!(back, ordered);
    }
}
