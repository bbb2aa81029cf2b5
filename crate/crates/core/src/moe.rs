//! Quality-aware mixture of experts: scaled linear gate, top-k routing and
//! the routing losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::Mlp;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Moe {
    /// `W_G: [h × d]`.
    pub gate: ParamId,
    pub experts: Vec<Mlp>,
    pub k: usize,
    pub dim: usize,
}

/// One sample's routing decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub logits: Vec<f64>,
    /// Descending logit order, ties by ascending index.
    pub selected: Vec<usize>,
    /// Mixing weight of each entry of `selected`.
    pub weights: Vec<f64>,
}

/// Output of [`Moe::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Routed {
    pub out: Var,
    /// `A_G: [n × h]`.
    pub logits: Var,
    pub records: Vec<GateRecord>,
}

impl Moe {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, h: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if h < 2 || k == 0 || k > h {
            return Err(contract(format!("moe: need h ≥ 2 and 1 ≤ k ≤ h, got h={h}, k={k}")));
        }
        let b = 1.0 / libm::sqrt(d as f64);
        let gate = store.add(format!("{name}.gate"), rng::uniform_tensor(rng, h, d, -b, b));
        let experts = (0..h)
            .map(|j| Mlp::new(store, &format!("{name}.expert{j}"), d, d, d, rng))
            .collect();
        Ok(Moe { gate, experts, k, dim: d })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `A_G = X·W_Gᵀ / √d`, shape `[n × h]`.
    pub fn gate(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.gate);
        let wt = g.transpose(w);
        let a = g.matmul(x, wt)?;
        Ok(g.scale(a, 1.0 / libm::sqrt(self.dim as f64)))
    }

    /// Gate, select the top-k experts per row and mix their outputs with a
    /// softmax over the selected logits.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Routed> {
        let logits = self.gate(g, x)?;
        if !g.value(logits).is_finite() {
            return Err(Error::NonFinite { stage: "gate".into() });
        }
        let (n, h) = (g.shape(logits).rows, self.num_experts());
        let mut mask = vec![false; n * h];
        let mut selections = Vec::with_capacity(n);
        for i in 0..n {
            let (_, idx) = top_k_select(g.value(logits).row(i), self.k);
            for &j in &idx {
                mask[i * h + j] = true;
            }
            selections.push(idx);
        }
        let w = g.masked_softmax(logits, &mask)?;
        let mut out = None;
        for j in 0..h {
            if !(0..n).any(|i| mask[i * h + j]) {
                continue;
            }
            let e = self.experts[j].forward(g, x)?;
            let wj = g.slice_cols(w, j, 1)?;
            let term = g.mul(wj, e)?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let records = selections
            .into_iter()
            .enumerate()
            .map(|(i, selected)| GateRecord {
                logits: g.value(logits).row(i).to_vec(),
                weights: selected.iter().map(|&j| g.value(w).get(i, j)).collect(),
                selected,
            })
            .collect();
        Ok(Routed {
            out: out.ok_or_else(|| contract("moe: empty batch"))?,
            logits,
            records,
        })
    }
}

/// The `k` largest entries of `row` and their indices, in descending order
/// with ties broken by ascending index.
pub fn top_k_select(row: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    (idx.iter().map(|&j| row[j]).collect(), idx)
}

/// Population variance of the batch-mean logit vector.
pub fn loss_balance(g: &mut Graph<'_>, logits: Var) -> Var {
    let m = g.col_mean(logits);
    let v = g.row_var(m);
    g.mean(v)
}

/// Mean over samples of `max(0, β − Var(A_G row))`.
pub fn loss_sample_variance(g: &mut Graph<'_>, logits: Var, beta: f64) -> Var {
    let v = g.row_var(logits);
    let neg = g.scale(v, -1.0);
    let s = g.add_scalar(neg, beta);
    let h = g.hinge(s);
    g.mean(h)
}

/// Pair-reduction options of [`loss_same_config`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SameConfigOptions {
    /// Divide by the number of matched pairs.
    pub normalize: bool,
    /// Count `(i, j)` and `(j, i)` separately.
    pub ordered: bool,
}

impl Default for SameConfigOptions {
    fn default() -> Self {
        SameConfigOptions {
            normalize: true,
            ordered: false,
        }
    }
}

/// Unordered pairs `i < j` whose quality-level rows are identical.
pub fn same_config_pairs(levels: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..levels.len() {
        for j in (i + 1)..levels.len() {
            if levels[i] == levels[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// `Σ ‖A_i − A_j‖²` over sample pairs sharing a quality configuration.
pub fn loss_same_config(g: &mut Graph<'_>, logits: Var, levels: &[Vec<bool>], opts: SameConfigOptions) -> Result<Var> {
    if levels.len() != g.shape(logits).rows {
        return Err(contract("loss_same_config: one level row per sample required"));
    }
    let pairs = same_config_pairs(levels);
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let count = pairs.len();
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let a = g.gather_rows(logits, &is)?;
    let b = g.gather_rows(logits, &js)?;
    let d = g.sq_dist(a, b)?;
    let s = g.sum(d);
    Ok(match (opts.normalize, opts.ordered) {
        (true, _) => g.scale(s, 1.0 / count as f64),
        (false, true) => g.scale(s, 2.0),
        (false, false) => s,
    })
}
