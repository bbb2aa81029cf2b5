use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::loss::LossReport;
use super::metrics::Metrics;
use super::model::{ForwardOptions, ReprCorruption, UmqModel};
use super::config::UmqConfig;
use crate::corruption::{self, CorruptionPlan};
use crate::dataio::{Dataset, Split};
use crate::error::{contract, Error, Result};
use crate::estimator::task_loss;
use crate::moe::GateRecord;
use crate::rng;
use crate::tensor::{AdamW, Graph, Tensor};
use crate::dataio::FeatureBatch;

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of every [`LossReport`] field.
    pub train: Vec<(String, f64)>,
    /// Mean predictive loss on the validation split (clean evaluation).
    pub val_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: UmqModel,
    pub best_epoch: usize,
    pub last: UmqModel,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Routing, predictions and representations of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Mean task loss.
    pub loss: f64,
    pub ids: Vec<usize>,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    /// `[n × |M|]` quality scores (1 under the estimation ablation).
    pub alpha: Tensor,
    pub levels: Vec<Vec<bool>>,
    /// Availability masks after missing-modality corruption.
    pub masks: Vec<Vec<bool>>,
    /// Empty when routing is ablated.
    pub routes: Vec<GateRecord>,
    /// Per modality `[n × d]`: clean encodings, the corrupted inputs to the
    /// enhancer, and its outputs.
    pub clean: Vec<Tensor>,
    pub corrupted: Vec<Tensor>,
    pub enhanced: Vec<Tensor>,
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts.first().map_or(0, Tensor::cols);
    let rows: usize = parts.iter().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(rows, cols, data).expect("consistent columns")
}

impl UmqModel {
    /// One optimizer step on `batch`. The baseline EMA is committed only
    /// when the learning rate is nonzero, so a zero-rate run leaves every
    /// piece of model state untouched.
    pub fn train_step(&mut self, opt: &mut AdamW, batch: &FeatureBatch, seed: u64) -> Result<LossReport> {
        let (report, grads, pending) = {
            let mut g = Graph::with_params(&self.store);
            let fwd = self.forward(&mut g, batch, &ForwardOptions::train())?;
            let vars = self.composite_loss(&mut g, &fwd, batch, seed)?;
            let report = self.report(&g, &vars);
            if !report.total.is_finite() {
                return Err(Error::NonFinite { stage: "total loss".into() });
            }
            let grads = g.backward(vars.total)?;
            (report, grads, fwd.pending_baselines)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads);
        opt.step(&mut self.store)?;
        if opt.config.lr != 0.0 {
            self.commit_baselines(pending);
        }
        Ok(report)
    }

    /// Evaluates `ids` in chunks of the configured batch size under `plan`.
    /// Missing-modality masking is applied to raw features and noise to the
    /// encoded representations, each with a per-chunk seed.
    pub fn evaluate_ids(&self, ds: &Dataset, ids: &[usize], plan: &CorruptionPlan) -> Result<Evaluation> {
        self.evaluate_with(ds, ids, plan, None)
    }

    /// As [`Self::evaluate_ids`], additionally applying `single` (Gaussian
    /// mixing of one modality).
    pub fn evaluate_with(
        &self,
        ds: &Dataset,
        ids: &[usize],
        plan: &CorruptionPlan,
        single: Option<(usize, f64)>,
    ) -> Result<Evaluation> {
        if ids.is_empty() {
            return Err(contract("evaluation on an empty split"));
        }
        plan.validate(ds.num_modalities())?;
        let nm = self.num_modalities();
        let mut out = Evaluation {
            metrics: Metrics::default(),
            loss: 0.0,
            ids: Vec::new(),
            predictions: Vec::new(),
            labels: Vec::new(),
            alpha: Tensor::zeros(0, nm),
            levels: Vec::new(),
            masks: Vec::new(),
            routes: Vec::new(),
            clean: Vec::new(),
            corrupted: Vec::new(),
            enhanced: Vec::new(),
        };
        let (mut alphas, mut clean, mut corrupted, mut enhanced) =
            (Vec::new(), alloc::vec![Vec::new(); nm], alloc::vec![Vec::new(); nm], alloc::vec![Vec::new(); nm]);
        let mut loss_sum = 0.0;
        for (c, chunk) in ids.chunks(self.config.batch_size).enumerate() {
            let mut batch = ds.batch(chunk);
            if plan.missing_rate > 0.0 {
                batch = corruption::apply_missing(&batch, plan.missing_rate, rng::derive(plan.seed, c as u64))?;
            }
            let noise_seed = rng::derive(plan.seed, 0x1_0000 + c as u64);
            let corruption = match single {
                Some((modality, nr)) => ReprCorruption::Single { modality, nr, seed: noise_seed },
                None => ReprCorruption::All {
                    nr: plan.noise_rate,
                    preset: plan.preset,
                    seed: noise_seed,
                },
            };
            let mut g = Graph::with_params(&self.store);
            let fwd = self.forward(&mut g, &batch, &ForwardOptions { train: false, corruption })?;
            let l = task_loss(&mut g, fwd.prediction, &batch.labels, self.task)?;
            loss_sum += g.value(l).data().iter().sum::<f64>();
            out.predictions.extend_from_slice(g.value(fwd.prediction).data());
            out.labels.extend_from_slice(&batch.labels);
            out.ids.extend_from_slice(&batch.ids);
            out.masks.extend(batch.mask.iter().cloned());
            alphas.push(fwd.quality.alpha.clone());
            out.levels.extend(fwd.quality.levels.iter().cloned());
            if let Some(r) = &fwd.routed {
                out.routes.extend(r.records.iter().cloned());
            }
            for m in 0..nm {
                clean[m].push(fwd.clean[m].clone());
                corrupted[m].push(g.value(fwd.encoded[m]).clone());
                enhanced[m].push(g.value(fwd.enhanced[m]).clone());
            }
        }
        out.alpha = stack(&alphas);
        out.clean = clean.iter().map(|p| stack(p)).collect();
        out.corrupted = corrupted.iter().map(|p| stack(p)).collect();
        out.enhanced = enhanced.iter().map(|p| stack(p)).collect();
        out.loss = loss_sum / ids.len() as f64;
        out.metrics = Metrics::compute(self.task, &out.predictions, &out.labels);
        Ok(out)
    }

    pub fn evaluate(&self, ds: &Dataset, split: Split, plan: &CorruptionPlan) -> Result<Evaluation> {
        self.evaluate_ids(ds, ds.split(split), plan)
    }
}

fn mean_fields(rows: &[Vec<(String, f64)>]) -> Vec<(String, f64)> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(j, (name, _))| (name.clone(), rows.iter().map(|r| r[j].1).sum::<f64>() / n))
        .collect()
}

/// Seeded per-epoch shuffling, one optimizer step per batch, validation
/// after every epoch and best-by-validation-loss model retention.
pub fn train(ds: &Dataset, config: &UmqConfig) -> Result<TrainOutcome> {
    if config.task != ds.task {
        return Err(contract(format!(
            "config task {:?} does not match dataset task {:?}",
            config.task, ds.task
        )));
    }
    let mut model = UmqModel::new(config, &ds.modalities, ds.task)?;
    train_model(ds, &mut model)
}

/// Trains an already constructed model in place.
pub fn train_model(ds: &Dataset, model: &mut UmqModel) -> Result<TrainOutcome> {
    let config = model.config.clone();
    let train_ids = ds.split(Split::Train).to_vec();
    if train_ids.is_empty() {
        return Err(contract("empty training split"));
    }
    let mut opt = AdamW::new(config.optimizer, &model.store);
    let clean = CorruptionPlan::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, UmqModel)> = None;
    let mut step = 0u64;
    let mut last_finite: Option<LossReport> = None;
    for epoch in 0..config.epochs {
        let mut order_rng = rng::rng(rng::derive(config.seed, 0x5eed_0000 + epoch as u64));
        let perm = rng::permutation(&mut order_rng, train_ids.len());
        let order: Vec<usize> = perm.iter().map(|&i| train_ids[i]).collect();
        let mut rows = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch = ds.batch(chunk);
            let seed = rng::derive(config.seed, 0xba7c_0000_0000 + step);
            match model.train_step(&mut opt, &batch, seed) {
                Ok(report) => {
                    rows.push(report.fields());
                    last_finite = Some(report);
                }
                Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGrad { .. }) => {
                    return Err(Error::Diverged {
                        step,
                        last_finite: last_finite.map(Box::new),
                    });
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let val = model.evaluate(ds, Split::Val, &clean)?;
        history.push(EpochRecord {
            epoch,
            train: mean_fields(&rows),
            val_loss: val.loss,
            val: val.metrics,
        });
        if best.as_ref().is_none_or(|(l, _, _)| val.loss < *l) {
            best = Some((val.loss, epoch, model.clone()));
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model.clone(),
        history,
        steps: step,
    })
}
