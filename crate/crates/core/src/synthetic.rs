//! Seeded synthetic fixtures for tests, demos and `ingest --synthetic`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::datastore::{Dataset, DatasetParts, Head, Source};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::metrics::{softmax_in_place, ProbMatrix};

/// Layout of the clipping fixture.
///
/// Features are post-ReLU. Class `k` owns a block of `units_per_class`
/// signal units (head weight `signal_weight`) and one noise unit (head
/// weight `noise_weight`). Every unit carries background `relu(N(0, 0.5))`.
/// Clean samples light their own block with `relu(N(1, 0.4))`. Corrupted
/// samples (probability `corrupt_rate`) keep only background in their block
/// and fire the noise unit of a random wrong class at
/// `spike * (1 + Exp(mean 0.5))`. Those spikes produce confident mistakes
/// that a clip threshold near the signal range removes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipFixture {
    pub n: usize,
    pub k: usize,
    pub units_per_class: usize,
    pub signal_weight: f64,
    pub noise_weight: f64,
    pub spike: f64,
    pub corrupt_rate: f64,
    pub seed: u64,
}

impl Default for ClipFixture {
    fn default() -> Self {
        Self {
            n: 6000,
            k: 10,
            units_per_class: 6,
            signal_weight: 1.0,
            noise_weight: 3.0,
            spike: 8.0,
            corrupt_rate: 0.2,
            seed: 7,
        }
    }
}

impl ClipFixture {
    pub fn d(&self) -> usize {
        self.k * self.units_per_class + self.k
    }

    pub fn head(&self) -> Head {
        let (k, u) = (self.k, self.units_per_class);
        let weights = Matrix::from_fn(k, self.d(), |class, j| {
            if j >= class * u && j < (class + 1) * u {
                self.signal_weight
            } else if j == k * u + class {
                self.noise_weight
            } else {
                0.0
            }
        });
        Head { weights, bias: vec![0.0; k] }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let (k, u, d) = (self.k, self.units_per_class, self.d());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let background = Normal::new(0.0, 0.5).expect("valid normal");
        let signal = Normal::new(1.0, 0.4).expect("valid normal");
        let tail = Exp::new(2.0).expect("valid rate");

        let mut x = Matrix::zeros(self.n, d);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let row = x.row_mut(i);
            for v in row.iter_mut() {
                *v = f64::max(background.sample(&mut rng), 0.0);
            }
            let y = rng.random_range(0..k);
            if rng.random::<f64>() < self.corrupt_rate {
                let wrong = (y + 1 + rng.random_range(0..k - 1)) % k;
                row[k * u + wrong] = self.spike * (1.0 + tail.sample(&mut rng));
            } else {
                for v in &mut row[y * u..(y + 1) * u] {
                    *v = f64::max(signal.sample(&mut rng), 0.0);
                }
            }
            labels.push(y as u32);
        }
        Dataset::new(DatasetParts {
            k,
            features: Some(x),
            labels,
            head: Some(self.head()),
            logits: None,
            source: Some(Source {
                model: "synthetic-noise-units".into(),
                dataset: format!("synthetic(n={}, k={}, seed={})", self.n, k, self.seed),
                layer: "penultimate".into(),
            }),
        })
    }
}

/// Probabilities whose confidence is uniform on `(1/K, 1)` and whose
/// correctness is Bernoulli(confidence), so the expected ECE is zero. The
/// leftover mass is spread evenly over the other classes.
pub fn calibrated_probs(n: usize, k: usize, seed: u64) -> (ProbMatrix, Vec<u32>) {
    assert!(k >= 2, "need at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 1.0 / k as f64;
    let mut m = Matrix::zeros(n, k);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let conf = floor + (1.0 - floor) * rng.random::<f64>();
        let pred = rng.random_range(0..k);
        let rest = (1.0 - conf) / (k - 1) as f64;
        for (j, v) in m.row_mut(i).iter_mut().enumerate() {
            *v = if j == pred { conf } else { rest };
        }
        let label = if rng.random::<f64>() < conf {
            pred
        } else {
            (pred + 1 + rng.random_range(0..k - 1)) % k
        };
        labels.push(label as u32);
    }
    (ProbMatrix::new_unchecked(m), labels)
}

/// Logits `z * scale` with labels drawn from `softmax(z)`, `z ~ N(0, spread^2)`.
/// `scale > 1` gives an overconfident model whose ideal temperature is
/// roughly `scale`.
pub fn tempered_logits(n: usize, k: usize, spread: f64, scale: f64, seed: u64) -> (Matrix, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread).expect("valid spread");
    let mut z = Matrix::zeros(n, k);
    let mut labels = Vec::with_capacity(n);
    let mut p = vec![0.0; k];
    for i in 0..n {
        let row = z.row_mut(i);
        for (v, q) in row.iter_mut().zip(p.iter_mut()) {
            *v = normal.sample(&mut rng);
            *q = *v;
        }
        softmax_in_place(&mut p);
        let mut u: f64 = rng.random();
        let mut label = k - 1;
        for (j, q) in p.iter().enumerate() {
            if u < *q {
                label = j;
                break;
            }
            u -= q;
        }
        labels.push(label as u32);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (z, labels)
}
