//! End-to-end model: encoders, estimator, decoupler, baseline, enhancer,
//! fusion, routed experts and predictor, with the composite objective,
//! training loop and metrics.

mod config;
mod loss;
mod metrics;
mod model;
mod train;

pub use config::{ablate, Ablation, UmqConfig};
pub use loss::{DecoupleValues, EstimatorValues, LossReport, LossVars, COMPONENTS};
pub use metrics::{binary_metrics, pearson, regression_metrics, sentiment_class, Metrics};
pub use model::{Branch, Forward, ForwardOptions, ReprCorruption, Router, UmqModel};
pub use train::{train, train_model, EpochRecord, Evaluation, TrainOutcome};

use alloc::format;
use alloc::vec::Vec;

use crate::dataio::FeatureBatch;
use crate::error::{contract, Result};
use crate::moe::GateRecord;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, OpKind};

impl UmqModel {
    /// Finite-difference check of one loss component (see [`COMPONENTS`])
    /// in training mode, over every parameter the component reaches.
    ///
    /// Returns `None` when the component is absent from this configuration.
    pub fn grad_check_component(
        &mut self,
        batch: &FeatureBatch,
        seed: u64,
        component: &str,
        opts: GradCheckOptions,
        fault: Option<OpKind>,
    ) -> Result<Option<GradCheckReport>> {
        if !COMPONENTS.contains(&component) {
            return Err(contract(format!(
                "unknown loss component `{component}` (valid: {})",
                COMPONENTS.join(", ")
            )));
        }
        let mut store = core::mem::take(&mut self.store);
        let result = (|| {
            let touched = {
                let mut g = Graph::with_params(&store);
                let fwd = self.forward(&mut g, batch, &ForwardOptions::train())?;
                let vars = self.composite_loss(&mut g, &fwd, batch, seed)?;
                match vars.component(&mut g, component)? {
                    Some(_) => g.touched_params(),
                    None => return Ok(None),
                }
            };
            let this = &*self;
            let report = grad_check(
                &mut store,
                Some(&touched),
                |g| {
                    if let Some(k) = fault {
                        g.inject_fault(k);
                    }
                    let fwd = this.forward(g, batch, &ForwardOptions::train())?;
                    let vars = this.composite_loss(g, &fwd, batch, seed)?;
                    vars.component(g, component)?
                        .ok_or_else(|| contract("component vanished"))
                },
                opts,
            )?;
            Ok(Some(report))
        })();
        self.store = store;
        result
    }
}

/// Routing statistics over an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    /// How often each expert was selected.
    pub selection_counts: Vec<usize>,
    /// `max / min` selection count (infinite when some expert is unused).
    pub balance_ratio: f64,
    /// Fraction of samples whose gate-logit variance is at least `β`.
    pub variance_fraction: f64,
    /// Fraction of same-configuration pairs that select the same expert set;
    /// `None` without any such pair.
    pub agreement: Option<f64>,
}

impl RoutingStats {
    pub fn compute(routes: &[GateRecord], levels: &[Vec<bool>], experts: usize, beta: f64) -> Self {
        let mut counts = alloc::vec![0usize; experts];
        let mut high_var = 0usize;
        for r in routes {
            for &j in &r.selected {
                counts[j] += 1;
            }
            let h = r.logits.len() as f64;
            let mu = r.logits.iter().sum::<f64>() / h;
            let var = r.logits.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / h;
            high_var += usize::from(var >= beta);
        }
        let max = counts.iter().copied().max().unwrap_or(0) as f64;
        let min = counts.iter().copied().min().unwrap_or(0) as f64;
        let sets: Vec<Vec<usize>> = routes
            .iter()
            .map(|r| {
                let mut s = r.selected.clone();
                s.sort_unstable();
                s
            })
            .collect();
        let (mut same, mut pairs) = (0usize, 0usize);
        for (i, j) in crate::moe::same_config_pairs(levels) {
            pairs += 1;
            same += usize::from(sets[i] == sets[j]);
        }
        RoutingStats {
            selection_counts: counts,
            balance_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
            variance_fraction: if routes.is_empty() {
                0.0
            } else {
                high_var as f64 / routes.len() as f64
            },
            agreement: (pairs > 0).then(|| same as f64 / pairs as f64),
        }
    }
}
