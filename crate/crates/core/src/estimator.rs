//! Quality estimation, per-modality auxiliary predictors and the rank-guided
//! estimator supervision.

use alloc::format;
use alloc::vec::Vec;

use crate::dataio::Task;
use crate::error::{contract, Result};
use crate::nn::Mlp;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// `d → d/2 → 1` MLP with a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimator {
    pub mlp: Mlp,
}

impl Estimator {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Estimator {
            mlp: Mlp::new(store, name, d, (d / 2).max(1), 1, rng),
        }
    }

    /// `α ∈ (0, 1)` per row, shape `[n × 1]`.
    pub fn estimate(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let z = self.mlp.forward(g, x)?;
        Ok(g.sigmoid(z))
    }

    /// Mean of `α²` over standard Gaussian rows.
    pub fn loss_noise_anchor(&self, g: &mut Graph<'_>, noise: &Tensor) -> Result<Var> {
        let n = g.constant(noise.clone());
        let a = self.estimate(g, n)?;
        Ok(noise_anchor(g, a))
    }
}

/// Per-modality head predicting the label from one representation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalPredictor {
    pub mlp: Mlp,
    pub task: Task,
}

impl UnimodalPredictor {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, task: Task, rng: &mut Rng) -> Self {
        UnimodalPredictor {
            mlp: Mlp::new(store, name, d, (d / 2).max(1), 1, rng),
            task,
        }
    }

    /// Returns the `[n × 1]` prediction (a logit for binary tasks) and the
    /// per-sample loss.
    pub fn predict_loss(&self, g: &mut Graph<'_>, x: Var, y: &[f64]) -> Result<(Var, Var)> {
        let p = self.mlp.forward(g, x)?;
        let l = task_loss(g, p, y, self.task)?;
        Ok((p, l))
    }
}

/// Per-sample squared error, or binary cross-entropy on a logit.
pub fn task_loss(g: &mut Graph<'_>, pred: Var, y: &[f64], task: Task) -> Result<Var> {
    let s = g.shape(pred);
    if s.cols != 1 || s.rows != y.len() {
        return Err(contract(format!("task_loss: prediction {s} for {} labels", y.len())));
    }
    let y = g.constant(Tensor::column(y));
    match task {
        Task::Regression => {
            let d = g.sub(pred, y)?;
            Ok(g.square(d))
        }
        Task::Binary => {
            // softplus(z) − y·z
            let sp = g.softplus(pred);
            let yz = g.mul(y, pred)?;
            g.sub(sp, yz)
        }
    }
}

/// `p = 0` iff `α < τ`.
pub fn quality_level(alpha: f64, tau: f64) -> bool {
    alpha >= tau
}

/// Quality scores and levels of a batch, `[n × |M|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityVector {
    pub alpha: Tensor,
    pub levels: Vec<Vec<bool>>,
    pub tau: f64,
}

impl QualityVector {
    pub fn from_alpha(alpha: Tensor, tau: f64) -> Self {
        let levels = (0..alpha.rows())
            .map(|i| alpha.row(i).iter().map(|&a| quality_level(a, tau)).collect())
            .collect();
        QualityVector { alpha, levels, tau }
    }
}

/// Mean of `α²`.
pub fn noise_anchor(g: &mut Graph<'_>, alpha_noise: Var) -> Var {
    let sq = g.square(alpha_noise);
    g.mean(sq)
}

fn zero(g: &mut Graph<'_>) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Mean of `max(0, γ − α)` over samples whose unimodal loss is below `η`;
/// 0 when none qualifies.
pub fn loss_high_anchor(g: &mut Graph<'_>, alpha: Var, unimodal: &[f64], gamma: f64, eta: f64) -> Result<Var> {
    let mut idx = Vec::new();
    for (i, &l) in unimodal.iter().enumerate() {
        let hit = l < eta;
        g.note_decision(hit);
        if hit {
            idx.push(i);
        }
    }
    if idx.is_empty() {
        return Ok(zero(g));
    }
    let a = g.gather_rows(alpha, &idx)?;
    let neg = g.scale(a, -1.0);
    let slack = g.add_scalar(neg, gamma);
    let h = g.hinge(slack);
    Ok(g.mean(h))
}

/// Ordered pairs `(i, j)` with `L_j < L_i`; equal losses are excluded.
pub fn rank_pairs(unimodal: &[f64]) -> Vec<(usize, usize)> {
    let n = unimodal.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if unimodal[j] < unimodal[i] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean over active pairs of `max(0, α_i + γ₁ − α_j)`.
///
/// With `cap = Some(c)` and more than `c` active pairs, `c` pairs are drawn
/// without replacement from a stream seeded by `seed`.
pub fn loss_rank(
    g: &mut Graph<'_>,
    alpha: Var,
    unimodal: &[f64],
    gamma1: f64,
    cap: Option<usize>,
    seed: u64,
) -> Result<Var> {
    let n = unimodal.len();
    for i in 0..n {
        for j in (i + 1)..n {
            g.note_decision(unimodal[j] < unimodal[i]);
            g.note_decision(unimodal[i] < unimodal[j]);
        }
    }
    let mut pairs = rank_pairs(unimodal);
    if pairs.is_empty() {
        return Ok(zero(g));
    }
    if let Some(c) = cap {
        if pairs.len() > c {
            let mut r = rng::rng(seed);
            for k in 0..c {
                let t = k + rng::index(&mut r, pairs.len() - k);
                pairs.swap(k, t);
            }
            pairs.truncate(c);
        }
    }
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let ai = g.gather_rows(alpha, &is)?;
    let aj = g.gather_rows(alpha, &js)?;
    let d = g.sub(ai, aj)?;
    let d = g.add_scalar(d, gamma1);
    let h = g.hinge(d);
    Ok(g.mean(h))
}

/// Batch mean of `max(0, α̂ + γ₁ − α)`.
pub fn loss_corruption_rank(g: &mut Graph<'_>, alpha: Var, alpha_hat: Var, gamma1: f64) -> Result<Var> {
    let d = g.sub(alpha_hat, alpha)?;
    let d = g.add_scalar(d, gamma1);
    let h = g.hinge(d);
    Ok(g.mean(h))
}

/// Estimator terms of one modality; the two rank terms are absent under the
/// rank-guided-training ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimatorTerms {
    pub noise_anchor: Var,
    pub high_anchor: Var,
    pub corruption_rank: Option<Var>,
    pub rank: Option<Var>,
    pub unimodal: Var,
}

impl EstimatorTerms {
    pub fn sum(&self, g: &mut Graph<'_>) -> Result<Var> {
        let mut acc = g.add(self.noise_anchor, self.high_anchor)?;
        for t in [self.corruption_rank, self.rank].into_iter().flatten() {
            acc = g.add(acc, t)?;
        }
        g.add(acc, self.unimodal)
    }
}

/// Unweighted sum over modalities.
pub fn estimator_total(g: &mut Graph<'_>, terms: &[EstimatorTerms]) -> Result<Var> {
    let mut acc = zero(g);
    for t in terms {
        let s = t.sum(g)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}
