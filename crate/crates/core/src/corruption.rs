//! Degradation protocols: noise mixing, the training-time AddNoise
//! augmentation, missing-modality masking and the out-of-distribution mix.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureBatch;
use crate::error::{contract, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Mean 0, variance 1.
    Gaussian,
    /// Location 0, scale 1.
    Laplace,
    /// Zeroes a fraction `NR` of each row.
    RandomErase,
}

/// Named noise mixtures used by the evaluation protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePreset {
    #[default]
    Gaussian,
    /// Per sample, Laplace mixing or random erasing with equal probability.
    OodMix,
}

impl NoisePreset {
    pub fn name(self) -> &'static str {
        match self {
            NoisePreset::Gaussian => "gaussian",
            NoisePreset::OodMix => "ood-mix",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(NoisePreset::Gaussian),
            "ood-mix" => Some(NoisePreset::OodMix),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionPlan {
    pub missing_rate: f64,
    pub noise_rate: f64,
    pub preset: NoisePreset,
    pub seed: u64,
}

impl Default for CorruptionPlan {
    fn default() -> Self {
        CorruptionPlan {
            missing_rate: 0.0,
            noise_rate: 0.0,
            preset: NoisePreset::Gaussian,
            seed: 0,
        }
    }
}

impl CorruptionPlan {
    pub fn is_identity(&self) -> bool {
        self.missing_rate == 0.0 && self.noise_rate == 0.0
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        check_missing_rate(self.missing_rate, modalities)?;
        check_noise_rate(self.noise_rate)
    }
}

/// Knobs of the AddNoise augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that a row is replaced by pure Gaussian noise.
    pub replace_prob: f64,
    pub nr_low: f64,
    pub nr_high: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            replace_prob: 0.1,
            nr_low: 0.1,
            nr_high: 0.7,
        }
    }
}

fn check_noise_rate(nr: f64) -> Result<()> {
    if (0.0..=1.0).contains(&nr) {
        Ok(())
    } else {
        Err(contract(format!("noise rate {nr} outside [0, 1]")))
    }
}

/// Largest admissible missing rate, `(|M| − 1) / |M|`.
pub fn max_missing_rate(modalities: usize) -> f64 {
    (modalities as f64 - 1.0) / modalities as f64
}

fn check_missing_rate(mr: f64, modalities: usize) -> Result<()> {
    let cap = max_missing_rate(modalities);
    // Tolerate the rounding of a decimal grid value such as 0.6666666667.
    if (0.0..=cap + 1e-9).contains(&mr) {
        Ok(())
    } else {
        Err(contract(format!(
            "missing rate {mr} outside [0, {cap}] for {modalities} modalities"
        )))
    }
}

fn draw(kind: NoiseKind, rng: &mut Rng) -> f64 {
    match kind {
        NoiseKind::Laplace => rng::laplace(rng),
        _ => rng::gaussian(rng),
    }
}

/// Row-wise exact-count erasure: each row keeps all but `round(nr · cols)`
/// entries, chosen by a seeded partial shuffle.
fn erase_rows(x: &Tensor, nr: f64, rng: &mut Rng, rows: Option<&[bool]>) -> Tensor {
    let c = x.cols();
    let k = libm::round(nr * c as f64) as usize;
    let mut out = x.clone();
    let data = out.data_mut();
    let mut idx: Vec<usize> = (0..c).collect();
    for r in 0..x.rows() {
        if rows.is_some_and(|sel| !sel[r]) {
            continue;
        }
        for j in 0..c {
            idx[j] = j;
        }
        for j in 0..k {
            let t = j + rng::index(rng, c - j);
            idx.swap(j, t);
            data[r * c + idx[j]] = 0.0;
        }
    }
    out
}

/// Noise matrix drawn by [`mix_noise`] for a given shape and seed.
pub fn noise_draw(kind: NoiseKind, rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let data = (0..rows * cols).map(|_| draw(kind, &mut r)).collect();
    Tensor::new(rows, cols, data).expect("consistent sizes")
}

/// `(1 − NR)·x + NR·noise` for Gaussian and Laplace kinds; for
/// `RandomErase` a fraction `NR` of every row is set to zero.
pub fn mix_noise(x: &Tensor, nr: f64, kind: NoiseKind, seed: u64) -> Result<Tensor> {
    check_noise_rate(nr)?;
    if nr == 0.0 {
        return Ok(x.clone());
    }
    Ok(match kind {
        NoiseKind::RandomErase => erase_rows(x, nr, &mut rng::rng(seed), None),
        _ => {
            let noise = noise_draw(kind, x.rows(), x.cols(), seed);
            mix(x, &noise, nr)
        }
    })
}

fn mix(x: &Tensor, noise: &Tensor, nr: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &n)| (1.0 - nr) * a + nr * n)
        .collect();
    Tensor::new(x.rows(), x.cols(), data).expect("same shape")
}

/// Sub-seed of the Gaussian matrix inside [`add_noise_augment`].
pub fn augment_noise_seed(seed: u64) -> u64 {
    rng::derive(seed, 0xadd0)
}

/// One AddNoise draw for an `[n × d]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Per-row noise rate; 1 for replaced rows.
    pub rates: Vec<f64>,
    pub replaced: Vec<bool>,
    /// `NR_i · N` with `N` standard Gaussian.
    scaled_noise: Tensor,
}

impl AugmentDraw {
    pub fn new(rows: usize, cols: usize, cfg: &AugmentConfig, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let mut rates = Vec::with_capacity(rows);
        let mut replaced = Vec::with_capacity(rows);
        for _ in 0..rows {
            let u = rng::unit(&mut r);
            if u < cfg.replace_prob {
                rates.push(1.0);
                replaced.push(true);
            } else {
                rates.push(rng::uniform(&mut r, cfg.nr_low, cfg.nr_high));
                replaced.push(false);
            }
        }
        let noise = noise_draw(NoiseKind::Gaussian, rows, cols, augment_noise_seed(seed));
        let mut data = noise.into_data();
        for (i, row) in data.chunks_mut(cols.max(1)).enumerate() {
            for v in row {
                *v *= rates[i];
            }
        }
        AugmentDraw {
            rates,
            replaced,
            scaled_noise: Tensor::new(rows, cols, data).expect("consistent sizes"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .zip(self.scaled_noise.data())
            .enumerate()
            .map(|(k, (&a, &n))| (1.0 - self.rates[k / c]) * a + n)
            .collect();
        Tensor::new(x.rows(), c, data).expect("same shape")
    }

    /// Same map on the tape; gradient reaches `x` scaled by `1 − NR_i`.
    pub fn apply_graph(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let keep: Vec<f64> = self.rates.iter().map(|r| 1.0 - r).collect();
        let keep = g.constant(Tensor::column(&keep));
        let noise = g.constant(self.scaled_noise.clone());
        let kept = g.mul(keep, x)?;
        g.add(kept, noise)
    }
}

/// AddNoise: per row, with probability `replace_prob` the row becomes pure
/// Gaussian noise; otherwise `NR ~ U(nr_low, nr_high)` and Gaussian mixing
/// applies. Returns the corrupted rows and the drawn rates.
pub fn add_noise_augment(x: &Tensor, cfg: &AugmentConfig, seed: u64) -> (Tensor, Vec<f64>) {
    let d = AugmentDraw::new(x.rows(), x.cols(), cfg, seed);
    (d.apply(x), d.rates)
}

/// Per-modality drop probability whose post-repair expected missing rate
/// equals `mr`: solves `p − p^|M| / |M| = mr` by bisection.
pub fn drop_probability(mr: f64, modalities: usize) -> f64 {
    let m = modalities as f64;
    let f = |p: f64| p - libm::pow(p, m) / m;
    let target = mr.min(max_missing_rate(modalities));
    if target <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Masks modalities so the realized rate `1 − ΣM_i/(N·|M|)` has expectation
/// `mr`, keeps at least one modality per sample and substitutes standard
/// Gaussian raw features for masked ones.
pub fn apply_missing(batch: &FeatureBatch, mr: f64, seed: u64) -> Result<FeatureBatch> {
    let nm = batch.num_modalities();
    check_missing_rate(mr, nm)?;
    if mr == 0.0 {
        return Ok(batch.clone());
    }
    let p = drop_probability(mr, nm);
    let mut r = rng::rng(seed);
    let mut mask = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        let mut row: Vec<bool> = (0..nm).map(|_| rng::unit(&mut r) >= p).collect();
        if row.iter().all(|&on| !on) {
            row[rng::index(&mut r, nm)] = true;
        }
        mask.push(row);
    }
    let mut fill = rng::rng(rng::derive(seed, 1));
    let mut out = batch.clone();
    for (m, t) in out.features.iter_mut().enumerate() {
        let per = batch.seq_lens[m] * t.cols();
        let data = t.data_mut();
        for (i, row) in mask.iter().enumerate() {
            if !row[m] {
                for v in &mut data[i * per..(i + 1) * per] {
                    *v = rng::gaussian(&mut fill);
                }
            }
        }
    }
    // AND with any pre-existing mask.
    for (dst, prev) in mask.iter_mut().zip(&batch.mask) {
        for (d, &p) in dst.iter_mut().zip(prev) {
            *d = *d && p;
        }
        if dst.iter().all(|&on| !on) {
            return Err(contract("apply_missing on a batch whose mask already removed every modality"));
        }
    }
    out.mask = mask;
    Ok(out)
}

/// `1 − ΣM_i / (N·|M|)` where `M_i` counts the available modalities of
/// sample `i`.
pub fn missing_rate(mask: &[Vec<bool>]) -> Result<f64> {
    let nm = mask.first().map_or(0, Vec::len);
    if mask.is_empty() || nm == 0 {
        return Err(contract("missing_rate of an empty mask"));
    }
    let mut available = 0usize;
    for (i, row) in mask.iter().enumerate() {
        if row.len() != nm {
            return Err(contract("ragged mask"));
        }
        let k = row.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(contract(format!("mask row {i} has no available modality")));
        }
        available += k;
    }
    Ok(1.0 - available as f64 / (mask.len() * nm) as f64)
}

/// Representation-level corruption of every modality at rate `nr`.
///
/// For the `ood-mix` preset each sample draws one coin shared by all its
/// modalities: Laplace mixing or random erasing.
pub fn corrupt_representations(xs: &[Tensor], nr: f64, preset: NoisePreset, seed: u64) -> Result<Vec<Tensor>> {
    check_noise_rate(nr)?;
    if nr == 0.0 {
        return Ok(xs.to_vec());
    }
    match preset {
        NoisePreset::Gaussian => xs
            .iter()
            .enumerate()
            .map(|(m, x)| mix_noise(x, nr, NoiseKind::Gaussian, rng::derive(seed, m as u64)))
            .collect(),
        NoisePreset::OodMix => {
            let n = xs.first().map_or(0, Tensor::rows);
            let mut coin = rng::rng(rng::derive(seed, 0x00d));
            let laplace: Vec<bool> = (0..n).map(|_| rng::unit(&mut coin) < 0.5).collect();
            let erase: Vec<bool> = laplace.iter().map(|l| !l).collect();
            Ok(xs
                .iter()
                .enumerate()
                .map(|(m, x)| {
                    let s = rng::derive(seed, m as u64);
                    let noise = noise_draw(NoiseKind::Laplace, x.rows(), x.cols(), s);
                    let mixed = mix(x, &noise, nr);
                    let erased = erase_rows(x, nr, &mut rng::rng(rng::derive(s, 1)), Some(&erase));
                    let c = x.cols();
                    let data = (0..x.rows() * c)
                        .map(|k| {
                            if laplace[k / c] {
                                mixed.data()[k]
                            } else {
                                erased.data()[k]
                            }
                        })
                        .collect();
                    Tensor::new(x.rows(), c, data).expect("same shape")
                })
                .collect())
        }
    }
}

/// Replaces the rows flagged in `which` with standard Gaussian draws.
pub fn replace_rows_with_noise(x: &Tensor, which: &[bool], seed: u64) -> Tensor {
    let noise = noise_draw(NoiseKind::Gaussian, x.rows(), x.cols(), seed);
    let c = x.cols();
    let data = (0..x.rows() * c)
        .map(|k| if which[k / c] { noise.data()[k] } else { x.data()[k] })
        .collect();
    Tensor::new(x.rows(), c, data).expect("same shape")
}
