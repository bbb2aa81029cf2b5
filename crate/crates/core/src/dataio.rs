//! In-memory datasets, the pooling encoder and the synthetic generator.
//!
//! Features are held as `f32`, matching the on-disk format, and widened to
//! `f64` when a batch is assembled. A modality with sequence length `T`
//! stores `T` consecutive rows per sample.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::Linear;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

impl Task {
    /// Inclusive label range for regression, `{0, 1}` for binary.
    pub fn label_range(self) -> (f64, f64) {
        match self {
            Task::Regression => (-3.0, 3.0),
            Task::Binary => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub name: String,
    pub dim: usize,
    /// Rows per sample; 1 for vector-valued modalities.
    pub seq_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

impl Splits {
    /// Seeded shuffle of `0..n` cut by `ratios` (train, val; test takes the rest).
    pub fn derive(n: usize, ratios: [f64; 3], seed: u64) -> Self {
        let p = rng::permutation(&mut rng::rng(seed), n);
        let n_train = libm::floor(ratios[0] * n as f64) as usize;
        let n_val = (libm::floor(ratios[1] * n as f64) as usize).min(n - n_train);
        Splits {
            train: p[..n_train].to_vec(),
            val: p[n_train..n_train + n_val].to_vec(),
            test: p[n_train + n_val..].to_vec(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return Err(contract(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<ModalityInfo>,
    pub task: Task,
    /// Per modality, `n · seq_len · dim` values in sample-major order.
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<f32>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        modalities: Vec<ModalityInfo>,
        task: Task,
        features: Vec<Vec<f32>>,
        labels: Vec<f32>,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Dataset {
            modalities,
            task,
            features,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(contract("a dataset needs at least two modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(contract(format!("duplicate modality name `{}`", m.name)));
            }
            if m.dim == 0 || m.seq_len == 0 {
                return Err(contract(format!("modality `{}` has a zero dimension", m.name)));
            }
        }
        if self.features.len() != self.modalities.len() {
            return Err(contract("one feature matrix per modality required"));
        }
        let n = self.len();
        for (m, f) in self.modalities.iter().zip(&self.features) {
            let per = m.dim * m.seq_len;
            if f.len() != n * per {
                return Err(contract(format!(
                    "modality `{}` holds {} values, expected {}",
                    m.name,
                    f.len(),
                    n * per
                )));
            }
            if let Some(pos) = f.iter().position(|v| !v.is_finite()) {
                return Err(contract(format!(
                    "non-finite feature in modality `{}` at row {}",
                    m.name,
                    pos / per
                )));
            }
        }
        let (lo, hi) = self.task.label_range();
        for (i, &y) in self.labels.iter().enumerate() {
            let y = y as f64;
            let ok = match self.task {
                Task::Regression => y.is_finite() && (lo..=hi).contains(&y),
                Task::Binary => y == 0.0 || y == 1.0,
            };
            if !ok {
                return Err(contract(format!("label {y} at row {i} outside the task range")));
            }
        }
        self.splits.validate(n)
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Batch of the given sample ids with an all-true availability mask.
    pub fn batch(&self, ids: &[usize]) -> FeatureBatch {
        let features = self
            .modalities
            .iter()
            .zip(&self.features)
            .map(|(m, f)| {
                let per = m.dim * m.seq_len;
                let mut data = Vec::with_capacity(ids.len() * per);
                for &i in ids {
                    data.extend(f[i * per..(i + 1) * per].iter().map(|&v| v as f64));
                }
                Tensor::new(ids.len() * m.seq_len, m.dim, data).expect("consistent sizes")
            })
            .collect();
        FeatureBatch {
            features,
            seq_lens: self.modalities.iter().map(|m| m.seq_len).collect(),
            labels: ids.iter().map(|&i| self.labels[i] as f64).collect(),
            mask: vec![vec![true; self.modalities.len()]; ids.len()],
            ids: ids.to_vec(),
        }
    }
}

/// The unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    /// Per modality `[(n·T_m) × d_m]`.
    pub features: Vec<Tensor>,
    pub seq_lens: Vec<usize>,
    pub labels: Vec<f64>,
    /// `mask[i][m]` is true when modality `m` of sample `i` is available.
    pub mask: Vec<Vec<bool>>,
    pub ids: Vec<usize>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }
}

/// Projection, layer normalization and temporal mean pooling for one
/// modality: `x = mean_T(LN(U·W + b))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub proj: Linear,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, raw_dim: usize, d: usize, rng: &mut Rng) -> Self {
        Encoder {
            proj: Linear::new(store, &format!("{name}.proj"), raw_dim, d, rng),
            ln_scale: store.add(format!("{name}.ln.scale"), Tensor::full(1, d, 1.0)),
            ln_shift: store.add(format!("{name}.ln.shift"), Tensor::zeros(1, d)),
        }
    }

    /// `raw` is `[(n·seq_len) × d_m]`; the result is `[n × d]`.
    pub fn encode(&self, g: &mut Graph<'_>, raw: Var, seq_len: usize) -> Result<Var> {
        let s = g.shape(raw);
        if s.cols != self.proj.input {
            return Err(Error::Shape {
                op: "encode",
                lhs: s,
                rhs: crate::tensor::Shape::new(s.rows, self.proj.input),
            });
        }
        let p = self.proj.forward(g, raw)?;
        let scale = g.param(self.ln_scale);
        let shift = g.param(self.ln_shift);
        let ln = g.layer_norm(p, scale, shift)?;
        if seq_len == 1 {
            Ok(ln)
        } else {
            g.group_mean_rows(ln, seq_len)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub dims: Vec<usize>,
    pub latent_dim: usize,
    pub noise_floor: f64,
    pub task: Task,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 256,
            dims: vec![20, 12, 16],
            latent_dim: 6,
            noise_floor: 0.1,
            task: Task::Regression,
        }
    }
}

/// Parameters drawn for one synthetic dataset: per modality a latent map
/// `[latent × d_m]` and a constant offset `[d_m]`, plus the label weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGenerator {
    pub spec: SyntheticSpec,
    pub maps: Vec<Tensor>,
    pub offsets: Vec<Vec<f64>>,
    pub label_weights: Vec<f64>,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.latent_dim == 0 {
            return Err(contract("latent dimension must be at least 1"));
        }
        if spec.dims.len() < 2 {
            return Err(contract("at least two modalities are required"));
        }
        if spec.dims.contains(&0) {
            return Err(contract("modality dimensions must be positive"));
        }
        if spec.noise_floor.is_nan() || spec.noise_floor < 0.0 {
            return Err(contract("noise floor must be non-negative"));
        }
        let mut r = rng::rng(rng::derive(seed, 1));
        let l = spec.latent_dim;
        let inv = 1.0 / libm::sqrt(l as f64);
        let maps = spec
            .dims
            .iter()
            .map(|&d| rng::gaussian_tensor(&mut r, l, d).map(|v| v * inv))
            .collect();
        let offsets = spec
            .dims
            .iter()
            .map(|&d| (0..d).map(|_| rng::gaussian(&mut r)).collect())
            .collect();
        let label_weights = (0..l).map(|_| 1.5 * inv * rng::gaussian(&mut r)).collect();
        Ok(SyntheticGenerator {
            spec,
            maps,
            offsets,
            label_weights,
        })
    }

    /// Noise-free features of latent `z` for every modality.
    pub fn features_for(&self, z: &[f64]) -> Vec<Vec<f64>> {
        self.maps
            .iter()
            .zip(&self.offsets)
            .map(|(a, c)| {
                let mut out = c.clone();
                for (k, &zk) in z.iter().enumerate() {
                    for (o, &w) in out.iter_mut().zip(a.row(k)) {
                        *o += zk * w;
                    }
                }
                out
            })
            .collect()
    }

    pub fn label_for(&self, z: &[f64]) -> f64 {
        let s: f64 = z.iter().zip(&self.label_weights).map(|(a, b)| a * b).sum();
        match self.spec.task {
            Task::Regression => s.clamp(-3.0, 3.0),
            Task::Binary => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Draws the dataset; returns the latent codes alongside it.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Tensor)> {
        let spec = &self.spec;
        let mut r = rng::rng(rng::derive(seed, 2));
        let n = spec.n_samples;
        let l = spec.latent_dim;
        let mut features: Vec<Vec<f32>> = spec.dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
        let mut labels = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n * l);
        for _ in 0..n {
            let z: Vec<f64> = (0..l).map(|_| rng::gaussian(&mut r)).collect();
            for (f, clean) in features.iter_mut().zip(self.features_for(&z)) {
                for v in clean {
                    let noise = if spec.noise_floor > 0.0 {
                        spec.noise_floor * rng::gaussian(&mut r)
                    } else {
                        0.0
                    };
                    f.push((v + noise) as f32);
                }
            }
            labels.push(self.label_for(&z) as f32);
            latents.extend_from_slice(&z);
        }
        let modalities = spec
            .dims
            .iter()
            .enumerate()
            .map(|(i, &d)| ModalityInfo {
                name: modality_name(i),
                dim: d,
                seq_len: 1,
            })
            .collect();
        let splits = Splits::derive(n, DEFAULT_SPLIT_RATIOS, rng::derive(seed, 3));
        let ds = Dataset::new(modalities, spec.task, features, labels, splits)?;
        Ok((ds, Tensor::new(n, l, latents)?))
    }
}

/// Default modality names `m0`, `m1`, ….
pub fn modality_name(i: usize) -> String {
    let mut s = "m".to_string();
    s.push_str(&format!("{i}"));
    s
}

/// Seeded synthetic dataset: `x_m = z·A_m + c_m + noise_floor·ε` and
/// `y = clip(w·z, −3, 3)` (regression) or `[w·z > 0]` (binary).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    Ok(SyntheticGenerator::new(spec.clone(), seed)?.generate(seed)?.0)
}
