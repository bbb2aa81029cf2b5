//! Sample-specific / modality-specific decomposition and the modality
//! baseline.

use alloc::format;

use crate::error::Result;
use crate::nn::{Linear, Mlp};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const NOR_EPS: f64 = 1e-8;

/// Per-modality decouple network (shared hidden layer, two heads) and
/// couple network.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupleParams {
    pub shared: Linear,
    pub head_s: Linear,
    pub head_c: Linear,
    pub couple: Mlp,
    pub dim: usize,
}

impl DecoupleParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        DecoupleParams {
            shared: Linear::new(store, &format!("{name}.shared"), d, 2 * d, rng),
            head_s: Linear::new(store, &format!("{name}.head_s"), 2 * d, d, rng),
            head_c: Linear::new(store, &format!("{name}.head_c"), 2 * d, d, rng),
            couple: Mlp::new(store, &format!("{name}.couple"), 2 * d, 2 * d, d, rng),
            dim: d,
        }
    }

    /// Returns `(x_s, x_c)`.
    pub fn decouple(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.shared.forward(g, x)?;
        let h = g.relu(h);
        Ok((self.head_s.forward(g, h)?, self.head_c.forward(g, h)?))
    }

    pub fn couple(&self, g: &mut Graph<'_>, x_s: Var, x_c: Var) -> Result<Var> {
        let joined = g.concat(&[x_s, x_c])?;
        self.couple.forward(g, joined)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.shared.zero(store);
        self.head_s.zero(store);
        self.head_c.zero(store);
        self.couple.zero(store);
    }
}

fn nor(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let n = g.row_norm(x);
    let n = g.add_scalar(n, NOR_EPS);
    g.div(x, n)
}

/// Batch mean of `|⟨x_s/‖x_s‖, x_c/‖x_c‖⟩|`.
pub fn loss_orthogonality(g: &mut Graph<'_>, x_s: Var, x_c: Var) -> Result<Var> {
    let d = g.shape(x_s).cols as f64;
    let a = nor(g, x_s)?;
    let b = nor(g, x_c)?;
    let p = g.mul(a, b)?;
    let dot = g.row_mean(p);
    let dot = g.scale(dot, d);
    let dot = g.abs(dot);
    Ok(g.mean(dot))
}

/// Batch mean of `max(‖x − x_c‖² − ε, 0) + max(‖x − x_s‖² − ε, 0)`.
pub fn loss_mutual_info(g: &mut Graph<'_>, x: Var, x_s: Var, x_c: Var, eps: f64) -> Result<Var> {
    let dc = g.sq_dist(x, x_c)?;
    let dc = g.add_scalar(dc, -eps);
    let dc = g.hinge(dc);
    let ds = g.sq_dist(x, x_s)?;
    let ds = g.add_scalar(ds, -eps);
    let ds = g.hinge(ds);
    let t = g.add(dc, ds)?;
    Ok(g.mean(t))
}

/// Mean squared distance of the rows of `x_c` to their batch mean.
pub fn loss_center(g: &mut Graph<'_>, x_c: Var) -> Result<Var> {
    let mu = g.col_mean(x_c);
    let centred = g.sub(x_c, mu)?;
    let s = g.row_sum_sq(centred);
    Ok(g.mean(s))
}

/// Batch mean of `‖x − x_recon‖`, or of its square when `squared`.
pub fn loss_reconstruction(g: &mut Graph<'_>, x: Var, x_recon: Var, squared: bool) -> Result<Var> {
    let diff = g.sub(x, x_recon)?;
    let per = if squared { g.row_sum_sq(diff) } else { g.row_norm(diff) };
    Ok(g.mean(per))
}

/// The four decoupling terms of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoupleTerms {
    pub center: Var,
    pub mutual_info: Var,
    pub reconstruction: Var,
    pub orthogonality: Var,
}

impl DecoupleTerms {
    pub fn sum(&self, g: &mut Graph<'_>) -> Result<Var> {
        let a = g.add(self.center, self.mutual_info)?;
        let b = g.add(self.reconstruction, self.orthogonality)?;
        g.add(a, b)
    }
}

/// Unweighted sum over modalities and terms.
pub fn decouple_total(g: &mut Graph<'_>, terms: &[DecoupleTerms]) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for t in terms {
        let s = t.sum(g)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Modality baseline: EMA buffer `x_b` plus the trainable bias `x_tri`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityState {
    pub x_b: Tensor,
    pub x_tri: ParamId,
    pub lambda: f64,
    pub initialized: bool,
}

impl ModalityState {
    /// `x_b = 0`, `x_tri ~ U(−0.1, 0.1)`.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, lambda: f64, rng: &mut Rng) -> Self {
        let x_tri = store.add(format!("{name}.x_tri"), rng::uniform_tensor(rng, 1, d, -0.1, 0.1));
        ModalityState {
            x_b: Tensor::zeros(1, d),
            x_tri,
            lambda,
            initialized: false,
        }
    }

    /// EMA part `½(λ·x_b + (1 − λ)·mean(x_c))` on plain values.
    pub fn ema_part(&self, x_c: &Tensor) -> Tensor {
        let n = x_c.rows().max(1) as f64;
        let d = x_c.cols();
        let mut out = alloc::vec![0.0; d];
        for r in 0..x_c.rows() {
            for (o, v) in out.iter_mut().zip(x_c.row(r)) {
                *o += v;
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o = 0.5 * (self.lambda * self.x_b.data()[j] + (1.0 - self.lambda) * (*o / n));
        }
        Tensor::row_vector(&out)
    }

    /// New `x_b` value for a batch of (detached) `x_c` rows.
    pub fn update_baseline(&self, x_c: &Tensor, x_tri: &Tensor) -> Tensor {
        let ema = self.ema_part(x_c);
        let data = ema
            .data()
            .iter()
            .zip(x_tri.data())
            .map(|(e, t)| e + 0.5 * t)
            .collect();
        Tensor::new(1, ema.cols(), data).expect("row vector")
    }

    /// Training-step baseline on the tape; gradient flows only into
    /// `x_tri`. The returned var's value is what [`Self::commit`] stores.
    pub fn baseline_train(&self, g: &mut Graph<'_>, x_c: Var) -> Result<Var> {
        let x_c = g.detach(x_c);
        let ema = self.ema_part(g.value(x_c));
        let ema = g.constant(ema);
        let tri = g.param(self.x_tri);
        let half = g.scale(tri, 0.5);
        g.add(ema, half)
    }

    /// Evaluation baseline: the stored buffer.
    pub fn baseline_eval(&self, g: &mut Graph<'_>) -> Var {
        g.constant(self.x_b.clone())
    }

    pub fn commit(&mut self, x_b: Tensor) {
        self.x_b = x_b;
        self.initialized = true;
    }
}
