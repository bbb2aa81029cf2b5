//! Query-attention quality enhancer and its self-supervised loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::nn::Mlp;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Enhancer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub mlp: Mlp,
    pub dim: usize,
    /// Number of modalities; `cross` must carry one entry per other modality.
    pub modalities: usize,
}

/// Output of [`Enhancer::enhance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Enhanced {
    pub out: Var,
    /// `[n × tokens]` attention weights.
    pub weights: Var,
}

impl Enhancer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, modalities: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / libm::sqrt(d as f64);
        let query = store.add(format!("{name}.q"), rng::uniform_tensor(rng, 1, d, -b, b));
        let key = store.add(format!("{name}.k"), rng::uniform_tensor(rng, d, d, -b, b));
        let value = store.add(format!("{name}.v"), rng::uniform_tensor(rng, d, d, -b, b));
        Enhancer {
            query,
            key,
            value,
            mlp: Mlp::new(store, &format!("{name}.mlp"), 2 * d, 2 * d, d, rng),
            dim: d,
            modalities,
        }
    }

    /// Attends with the learnable query over the cross-modal tokens and the
    /// baseline, concatenates the result with `x` and applies the MLP.
    ///
    /// `cross = None` and `baseline = None` drop the respective tokens; at
    /// least one token must remain.
    pub fn enhance(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        cross: Option<&[Var]>,
        baseline: Option<Var>,
    ) -> Result<Enhanced> {
        let n = g.shape(x).rows;
        let mut tokens: Vec<Var> = Vec::new();
        if let Some(c) = cross {
            if c.len() + 1 != self.modalities {
                return Err(contract(format!(
                    "enhance: expected {} cross-modal entries, got {}",
                    self.modalities - 1,
                    c.len()
                )));
            }
            tokens.extend_from_slice(c);
        }
        if let Some(b) = baseline {
            let z = g.constant(Tensor::zeros(n, self.dim));
            tokens.push(g.add(z, b)?);
        }
        if tokens.is_empty() {
            return Err(contract("enhance: no attention tokens"));
        }
        let q = g.param(self.query);
        let k = g.param(self.key);
        let v = g.param(self.value);
        let scale = libm::sqrt(self.dim as f64);
        let mut scores = Vec::with_capacity(tokens.len());
        let mut values = Vec::with_capacity(tokens.len());
        for &t in &tokens {
            let kt = g.matmul(t, k)?;
            let s = g.mul(kt, q)?;
            // row_mean · d / √d = row_sum / √d
            let s = g.row_mean(s);
            scores.push(g.scale(s, scale));
            values.push(g.matmul(t, v)?);
        }
        let scores = g.concat(&scores)?;
        let w = g.softmax(scores);
        let mut attn = None;
        for (j, &vj) in values.iter().enumerate() {
            let wj = g.slice_cols(w, j, 1)?;
            let term = g.mul(wj, vj)?;
            attn = Some(match attn {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        let attn = attn.expect("at least one token");
        let joined = g.concat(&[attn, x])?;
        Ok(Enhanced {
            out: self.mlp.forward(g, joined)?,
            weights: w,
        })
    }
}

/// Mean of `‖x̃ − x‖²` over rows with `α > τ` (0 when none qualifies); the
/// clean target is detached.
pub fn enhancer_training_loss(g: &mut Graph<'_>, enhanced: Var, clean: Var, alpha: &[f64], tau: f64) -> Result<Var> {
    let mut idx = Vec::new();
    for (i, &a) in alpha.iter().enumerate() {
        let hit = a > tau;
        g.note_decision(hit);
        if hit {
            idx.push(i);
        }
    }
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let target = g.detach(clean);
    let e = g.gather_rows(enhanced, &idx)?;
    let t = g.gather_rows(target, &idx)?;
    let d = g.sq_dist(e, t)?;
    Ok(g.mean(d))
}
