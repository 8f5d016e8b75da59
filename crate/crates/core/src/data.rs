//! Synthetic vertically partitioned datasets.
//!
//! Rows are aligned across clients; client `i` holds a contiguous block of
//! feature columns and the last client also holds the labels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    LinearTeacher,
    GaussianBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// train plus test rows
    pub samples_total: usize,
    pub train_fraction: f64,
    pub features: usize,
    pub clients: usize,
    pub classes: usize,
    pub generator: Generator,
    pub seed: u64,
    /// linear teacher: minimum normalized gap between the two top scores
    pub margin: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples_total: 3200,
            train_fraction: 0.8,
            features: 8,
            clients: 2,
            classes: 2,
            generator: Generator::LinearTeacher,
            seed: 0,
            margin: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn train_size(&self) -> usize {
        (self.samples_total as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.clients == 0 {
            errs.push("data.clients must be >= 1".to_string());
        } else if self.features < self.clients {
            errs.push(format!(
                "data.features ({}) must be at least data.clients ({})",
                self.features, self.clients
            ));
        }
        if self.classes < 2 {
            errs.push(format!("data.classes must be >= 2 (got {})", self.classes));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            errs.push(format!("data.train_fraction must lie in (0, 1) (got {})", self.train_fraction));
        }
        let train = self.train_size();
        if train == 0 || train >= self.samples_total {
            errs.push(format!("data.samples ({}) leaves an empty split", self.samples_total));
        }
        if !(self.margin >= 0.0) {
            errs.push(format!("data.margin must be >= 0 (got {})", self.margin));
        }
        errs
    }

    /// Column range of client `i`; any remainder goes to the first clients.
    pub fn columns(&self, i: usize) -> std::ops::Range<usize> {
        let base = self.features / self.clients;
        let extra = self.features % self.clients;
        let start = i * base + i.min(extra);
        start..start + base + usize::from(i < extra)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// one `rows × d_i` block per client
    pub parts: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> Split {
        Split {
            parts: self.parts.iter().map(|p| p.rows(range.start, range.len()).into_owned()).collect(),
            labels: self.labels[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VflData {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

fn normal(r: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Full feature matrix and labels, before splitting.
pub fn sample(spec: &DatasetSpec) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(DataError::Spec(errs.join("; ")));
    }
    let mut r = ChaCha20Rng::seed_from_u64(spec.seed);
    let (d, s, n) = (spec.features, spec.classes, spec.samples_total);
    let mut x = DMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    match spec.generator {
        Generator::LinearTeacher => {
            let w = DMatrix::from_fn(s, d, |_, _| normal(&mut r));
            let scale = w.row_iter().map(|row| row.norm()).fold(0.0, f64::max);
            let mut i = 0;
            let mut tries = 0usize;
            while i < n {
                tries += 1;
                if tries > 1000 * n {
                    return Err(DataError::Spec(format!("margin {} rejects too many samples", spec.margin)));
                }
                let v = DVector::from_fn(d, |_, _| normal(&mut r));
                let scores = &w * &v;
                let top = scores.argmax().0;
                let second = (0..s).filter(|&c| c != top).map(|c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
                if (scores[top] - second) / scale < spec.margin {
                    continue;
                }
                x.row_mut(i).copy_from(&v.transpose());
                y.push(top);
                i += 1;
            }
        }
        Generator::GaussianBlobs => {
            let means = DMatrix::from_fn(s, d, |_, _| 2.0 * normal(&mut r));
            for i in 0..n {
                let c = r.random_range(0..s);
                for j in 0..d {
                    x[(i, j)] = means[(c, j)] + normal(&mut r);
                }
                y.push(c);
            }
        }
    }
    Ok((x, y))
}

pub fn generate(spec: &DatasetSpec) -> Result<VflData> {
    let (x, y) = sample(spec)?;
    let m = spec.train_size();
    let split = |lo: usize, hi: usize| Split {
        parts: (0..spec.clients)
            .map(|i| {
                let cols = spec.columns(i);
                x.view((lo, cols.start), (hi - lo, cols.len())).into_owned()
            })
            .collect(),
        labels: y[lo..hi].to_vec(),
    };
    Ok(VflData {
        spec: spec.clone(),
        train: split(0, m),
        test: split(m, spec.samples_total),
    })
}

fn client_file(dir: &Path, i: usize, split: &str) -> PathBuf {
    dir.join(format!("client{i}_{split}.csv"))
}

fn labels_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("labels_{split}.csv"))
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut s = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_matrix(path: &Path, cols: usize) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let err = |msg: String| DataError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut vals = Vec::new();
    let mut rows = 0;
    for (ln, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols {
            return Err(err(format!("line {}: {} columns, expected {cols}", ln + 1, cells.len())));
        }
        for c in cells {
            vals.push(c.trim().parse::<f64>().map_err(|e| err(format!("line {}: {e}", ln + 1)))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

/// Per-client feature files, label files for the last client, and `meta.json`.
/// Returns the written paths in order.
pub fn write_dataset(data: &VflData, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        for (i, part) in split.parts.iter().enumerate() {
            let p = client_file(dir, i, name);
            write_matrix(&p, part)?;
            paths.push(p);
        }
        let p = labels_file(dir, name);
        let text: String = split.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&p, text)?;
        paths.push(p);
    }
    let meta = dir.join("meta.json");
    fs::write(&meta, serde_json::to_string_pretty(&data.spec).expect("spec serializes") + "\n")?;
    paths.push(meta);
    Ok(paths)
}

pub fn read_dataset(dir: &Path) -> Result<VflData> {
    let meta_path = dir.join("meta.json");
    let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| DataError::Parse {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let load = |name: &str| -> Result<Split> {
        let parts = (0..spec.clients)
            .map(|i| read_matrix(&client_file(dir, i, name), spec.columns(i).len()))
            .collect::<Result<Vec<_>>>()?;
        let lp = labels_file(dir, name);
        let labels = fs::read_to_string(&lp)?
            .lines()
            .map(|l| {
                l.trim().parse::<usize>().map_err(|e| DataError::Parse {
                    path: lp.display().to_string(),
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Split { parts, labels })
    };
    Ok(VflData {
        train: load("train")?,
        test: load("test")?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn hash_dir(paths: &[PathBuf]) -> Vec<String> {
        paths
            .iter()
            .map(|p| Sha256::digest(fs::read(p).unwrap()).iter().map(|b| format!("{b:02x}")).collect())
            .collect()
    }

    #[test]
    fn client_blocks_partition_features() {
        let spec = DatasetSpec::default();
        let d = generate(&spec).unwrap();
        assert_eq!(d.train.parts.len(), 2);
        assert!(d.train.parts.iter().all(|p| p.ncols() == 4));
        assert_eq!(d.train.len(), 2560);
        assert_eq!(d.test.len(), 640);
        let odd = DatasetSpec {
            features: 7,
            clients: 3,
            ..spec
        };
        let cols: Vec<_> = (0..3).map(|i| odd.columns(i)).collect();
        assert_eq!(cols, vec![0..3, 3..5, 5..7]);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = DatasetSpec {
            samples_total: 200,
            ..DatasetSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_dataset(&generate(&spec).unwrap(), a.path()).unwrap();
        let pb = write_dataset(&generate(&spec).unwrap(), b.path()).unwrap();
        assert_eq!(hash_dir(&pa), hash_dir(&pb));
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, generate(&spec).unwrap());
    }

    #[test]
    fn teacher_margin_and_blobs() {
        let spec = DatasetSpec {
            samples_total: 500,
            margin: 0.3,
            ..DatasetSpec::default()
        };
        let d = generate(&spec).unwrap();
        assert!(d.train.labels.iter().all(|&l| l < 2));
        let ones = d.train.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones > 50 && ones < 350);
        let blobs = DatasetSpec {
            generator: Generator::GaussianBlobs,
            classes: 3,
            samples_total: 300,
            ..DatasetSpec::default()
        };
        let d = generate(&blobs).unwrap();
        assert!(d.train.labels.iter().all(|&l| l < 3));
        assert!(generate(&DatasetSpec {
            classes: 1,
            ..DatasetSpec::default()
        })
        .is_err());
    }
}
