//! Dataset model and the on-disk interchange format.
//!
//! A dataset directory holds `manifest.json` plus raw little-endian,
//! row-major tensors without headers: features `n*d` f32, logits `n*k` f32,
//! weights `k*d` f32 (one row per class), bias `k` f32 and labels `n` u32.
//! Tensors are promoted to `f64` on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Stored-vs-recomputed logit gap above which a warning is due.
pub const LOGIT_DISCREPANCY_WARN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Source {
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub dtype: String,
    pub tensors: TensorFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

/// Final linear layer: `z = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `k x d`, one row per class.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Raw parts for [`Dataset::new`].
#[derive(Debug, Clone, Default)]
pub struct DatasetParts {
    pub k: usize,
    pub features: Option<Matrix>,
    pub labels: Vec<u32>,
    pub head: Option<Head>,
    pub logits: Option<Matrix>,
    pub source: Option<Source>,
}

/// Immutable validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    d: usize,
    k: usize,
    features: Option<Matrix>,
    labels: Vec<u32>,
    head: Option<Head>,
    logits: Option<Matrix>,
    source: Option<Source>,
    logit_discrepancy: Option<f64>,
}

impl Dataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            k,
            features,
            labels,
            head,
            logits,
            source,
        } = parts;
        let n = labels.len();
        if k == 0 {
            return Err(Error::Shape("k must be at least 1".into()));
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= k)
        {
            return Err(Error::LabelOutOfRange { index, label, k });
        }
        let d = match (&features, &head) {
            (Some(f), _) => f.cols(),
            (None, Some(h)) => h.weights.cols(),
            (None, None) => 0,
        };
        if let Some(f) = &features {
            if f.rows() != n {
                return Err(Error::Shape(format!(
                    "features have {} rows but there are {n} labels",
                    f.rows()
                )));
            }
        }
        if let Some(h) = &head {
            if h.weights.rows() != k || h.weights.cols() != d || h.bias.len() != k {
                return Err(Error::Shape(format!(
                    "head is {}x{} with {} biases, expected {k}x{d} with {k}",
                    h.weights.rows(),
                    h.weights.cols(),
                    h.bias.len()
                )));
            }
        }
        if let Some(z) = &logits {
            if z.rows() != n || z.cols() != k {
                return Err(Error::Shape(format!(
                    "logits are {}x{}, expected {n}x{k}",
                    z.rows(),
                    z.cols()
                )));
            }
        }
        let has_head_path = head.is_some() && features.is_some();
        if !has_head_path && logits.is_none() {
            return Err(Error::NoLogitSource);
        }
        let logit_discrepancy = match (&features, &head, &logits) {
            (Some(x), Some(h), Some(z)) => compute_logits(h, x)?.max_abs_diff(z),
            _ => None,
        };
        Ok(Self {
            n,
            d,
            k,
            features,
            labels,
            head,
            logits,
            source,
            logit_discrepancy,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn stored_logits(&self) -> Option<&Matrix> {
        self.logits.as_ref()
    }

    pub fn head_opt(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn source(&self) -> Option<&Source> {
        self.source.as_ref()
    }

    /// Max-abs gap between stored logits and `W x + b`, when both exist.
    pub fn logit_discrepancy(&self) -> Option<f64> {
        self.logit_discrepancy
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some() && self.features.is_some()
    }

    /// Head and features, or a `MissingHead` error explaining `why`.
    pub fn head_and_features(&self, why: &'static str) -> Result<(&Head, &Matrix)> {
        match (&self.head, &self.features) {
            (Some(h), Some(x)) => Ok((h, x)),
            _ => Err(Error::MissingHead(why)),
        }
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Unclipped logits for rows `idx`. Recomputed from the head when one
    /// is present so feature-space and logit-space pipelines agree exactly.
    pub fn logits_at(&self, idx: &[usize]) -> Result<Matrix> {
        match (&self.head, &self.features, &self.logits) {
            (Some(h), Some(x), _) => compute_logits(h, &x.select_rows(idx)),
            (_, _, Some(z)) => Ok(z.select_rows(idx)),
            _ => Err(Error::NoLogitSource),
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

/// `features * W^T + b`, accumulated sequentially in `f64`.
pub fn compute_logits(head: &Head, features: &Matrix) -> Result<Matrix> {
    let d = head.weights.cols();
    let k = head.weights.rows();
    if features.cols() != d {
        return Err(Error::Shape(format!(
            "features have {} columns, head expects {d}",
            features.cols()
        )));
    }
    let mut out = Matrix::zeros(features.rows(), k);
    for i in 0..features.rows() {
        let x = features.row(i);
        for c in 0..k {
            let w = head.weights.row(c);
            let mut acc = 0.0_f64;
            for j in 0..d {
                acc += x[j] * w[j];
            }
            out.set(i, c, acc + head.bias[c]);
        }
    }
    Ok(out)
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingFile { path });
    }
    fs::read(&path).map_err(|e| Error::io(path, e))
}

fn check_size(file: &str, field: &str, bytes: &[u8], count: usize) -> Result<()> {
    let expected = count as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            file: file.to_string(),
            field: field.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect()
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Loader<'a> {
    dir: &'a Path,
    checksums: Option<&'a BTreeMap<String, String>>,
    verified: usize,
}

impl Loader<'_> {
    fn load(&mut self, file: &str, field: &str, count: usize) -> Result<Vec<u8>> {
        let bytes = read_file(self.dir, file)?;
        check_size(file, field, &bytes, count)?;
        if let Some(expected) = self.checksums.and_then(|m| m.get(file)) {
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::ChecksumMismatch {
                    file: file.to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
            self.verified += 1;
        }
        Ok(bytes)
    }

    fn matrix(&mut self, file: &str, field: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let bytes = self.load(file, field, rows * cols)?;
        Matrix::new(rows, cols, decode_f32(&bytes))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(dir, MANIFEST_FILE)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Manifest(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(Error::Manifest(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Result of [`load_dataset_verbose`]: the dataset plus load-time facts.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub manifest: Manifest,
    pub checksums_verified: usize,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset_verbose(dir).map(|r| r.dataset)
}

pub fn load_dataset_verbose(dir: &Path) -> Result<LoadReport> {
    let manifest = read_manifest(dir)?;
    let (n, d, k) = (manifest.n, manifest.d, manifest.k);
    let t = &manifest.tensors;
    let mut loader = Loader {
        dir,
        checksums: manifest.sha256.as_ref(),
        verified: 0,
    };

    let label_bytes = loader.load(&t.labels, "labels", n)?;
    let labels = decode_u32(&label_bytes);
    let features = match &t.features {
        Some(f) => Some(loader.matrix(f, "features", n, d)?),
        None => None,
    };
    let head = match (&t.weights, &t.bias) {
        (Some(w), Some(b)) => {
            let weights = loader.matrix(w, "weights", k, d)?;
            let bias = decode_f32(&loader.load(b, "bias", k)?);
            Some(Head { weights, bias })
        }
        (None, None) => None,
        _ => {
            return Err(Error::Manifest(
                "weights and bias must be given together".into(),
            ))
        }
    };
    let logits = match &t.logits {
        Some(f) => Some(loader.matrix(f, "logits", n, k)?),
        None => None,
    };

    let dataset = Dataset::new(DatasetParts {
        k,
        features,
        labels,
        head,
        logits,
        source: manifest.source.clone(),
    })?;
    let checksums_verified = loader.verified;
    Ok(LoadReport {
        dataset,
        manifest,
        checksums_verified,
    })
}

/// Writes `ds` in the interchange format. Values are narrowed to f32.
pub fn save_dataset(ds: &Dataset, dir: &Path, with_checksums: bool) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let labels: Vec<u8> = ds.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    files.push(("labels.bin", labels));
    if let Some(x) = &ds.features {
        files.push(("features.bin", encode_f32(x.as_slice())));
    }
    if let Some(h) = &ds.head {
        files.push(("weights.bin", encode_f32(h.weights.as_slice())));
        files.push(("bias.bin", encode_f32(&h.bias)));
    }
    if let Some(z) = &ds.logits {
        files.push(("logits.bin", encode_f32(z.as_slice())));
    }

    let mut sums = BTreeMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        if with_checksums {
            sums.insert(name.to_string(), sha256_hex(bytes));
        }
    }

    let has = |name: &str| files.iter().any(|(f, _)| *f == name).then(|| name.to_string());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n: ds.n,
        d: ds.d,
        k: ds.k,
        dtype: "f32".into(),
        tensors: TensorFiles {
            features: has("features.bin"),
            labels: "labels.bin".into(),
            weights: has("weights.bin"),
            bias: has("bias.bin"),
            logits: has("logits.bin"),
        },
        sha256: with_checksums.then_some(sums),
        source: ds.source.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// How to partition samples into a validation (fitting) and test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Fraction { val_fraction: f64, seed: u64 },
    Explicit { val_idx: Vec<usize>, test_idx: Vec<usize> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fraction {
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Validation/test partition of `0..n`.
///
/// Fraction mode takes `round(n * val_fraction)` validation samples from a
/// SplitMix64 permutation seeded with `seed` (see [`crate::rng`]); both
/// index lists are returned sorted.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    match spec {
        SplitSpec::Fraction { val_fraction, seed } => {
            let f = *val_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidSplit(format!(
                    "val_fraction {f} is not in (0, 1)"
                )));
            }
            let n_val = (n as f64 * f).round() as usize;
            if n_val == 0 || n_val >= n {
                return Err(Error::InvalidSplit(format!(
                    "val_fraction {f} of {n} samples leaves an empty split"
                )));
            }
            let perm = SplitMix64::new(*seed).permutation(n);
            let mut val = perm[..n_val].to_vec();
            let mut test = perm[n_val..].to_vec();
            val.sort_unstable();
            test.sort_unstable();
            Ok(Split { val, test })
        }
        SplitSpec::Explicit { val_idx, test_idx } => {
            let mut seen = vec![0u8; n];
            for (name, list, tag) in [("val", val_idx, 1u8), ("test", test_idx, 2u8)] {
                for &i in list {
                    if i >= n {
                        return Err(Error::InvalidSplit(format!(
                            "{name} index {i} is out of range for n = {n}"
                        )));
                    }
                    if seen[i] != 0 {
                        return Err(Error::InvalidSplit(format!(
                            "index {i} appears twice (overlap or duplicate in {name})"
                        )));
                    }
                    seen[i] = tag;
                }
            }
            if val_idx.is_empty() || test_idx.is_empty() {
                return Err(Error::InvalidSplit("explicit split has an empty side".into()));
            }
            Ok(Split {
                val: val_idx.clone(),
                test: test_idx.clone(),
            })
        }
    }
}
