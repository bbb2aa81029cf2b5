//! Central-difference gradient checking over every coordinate of a
//! [`ParamStore`].

use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Coordinate {
    /// `|analytic − numeric| / max(1, |analytic|)`.
    pub fn rel_error(&self) -> f64 {
        libm::fabs(self.analytic - self.numeric) / libm::fabs(self.analytic).max(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a branch decision.
    pub skipped: Vec<Coordinate>,
}

struct Eval {
    value: f64,
    signature: Option<(u64, u64)>,
}

fn evaluate<F>(store: &ParamStore, frozen: &[Tensor], f: &mut F) -> Result<Eval>
where
    F: for<'g> FnMut(&mut Graph<'g>) -> Result<Var>,
{
    let mut g = Graph::with_params(store)
        .track_kinks()
        .replay_detached(frozen.to_vec());
    let loss = f(&mut g)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            stage: "grad_check objective".into(),
        });
    }
    Ok(Eval {
        value,
        signature: g.signature(),
    })
}

/// Compares backward gradients of `f` with central differences.
///
/// `f` builds a scalar loss on the supplied graph; it must be a deterministic
/// function of the stored parameters. When `only` is given, only those
/// parameters are perturbed. A coordinate is skipped (and reported) when the
/// perturbation flips any branch decision recorded by the graph, which
/// is how hinge, ReLU and top-k kinks are excluded. Values passed through
/// [`Graph::detach`] are held at their unperturbed values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&mut Graph<'g>) -> Result<Var>,
{
    let (base_sig, analytic, frozen) = {
        let mut g = Graph::with_params(store).track_kinks();
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite {
                stage: "grad_check objective".into(),
            });
        }
        let grads = g.backward(loss)?;
        let analytic: Vec<(ParamId, Vec<f64>)> = grads
            .params()
            .map(|(id, t)| (id, t.data().to_vec()))
            .collect();
        (g.signature(), analytic, g.detached_values().to_vec())
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let h = opts.step;
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).shape().len();
        let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g);
        for index in 0..n {
            let a = grad.map_or(0.0, |g| g[index]);
            let orig = store.value(id).data()[index];
            *store.coord_mut(id, index) = orig + h;
            let plus = evaluate(store, &frozen, &mut f);
            *store.coord_mut(id, index) = orig - h;
            let minus = evaluate(store, &frozen, &mut f);
            *store.coord_mut(id, index) = orig;
            let (plus, minus) = (plus?, minus?);
            let coord = Coordinate {
                param: store.name(id).into(),
                index,
                analytic: a,
                numeric: (plus.value - minus.value) / (2.0 * h),
            };
            if plus.signature != base_sig || minus.signature != base_sig {
                report.skipped.push(coord);
                continue;
            }
            report.checked += 1;
            let e = coord.rel_error();
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}
