use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::Ablation;
use super::model::{Forward, UmqModel};
use crate::corruption::AugmentDraw;
use crate::dataio::FeatureBatch;
use crate::decouple::{self, DecoupleTerms};
use crate::enhancer::enhancer_training_loss;
use crate::error::Result;
use crate::estimator::{self, EstimatorTerms};
use crate::moe;
use crate::rng;
use crate::tensor::{Graph, Var};

/// Graph nodes of every loss term of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVars {
    pub predictive: Var,
    pub decouple: Option<Vec<DecoupleTerms>>,
    pub decouple_total: Option<Var>,
    pub estimator: Option<Vec<EstimatorTerms>>,
    pub estimator_total: Option<Var>,
    /// Per-modality enhancer terms and their sum.
    pub enhancer_terms: Option<Vec<Var>>,
    pub enhancer: Option<Var>,
    pub balance: Option<Var>,
    pub sample: Option<Var>,
    pub same: Option<Var>,
    pub total: Var,
}

/// Names accepted by [`LossVars::component`].
pub const COMPONENTS: [&str; 15] = [
    "total",
    "L_p",
    "loss_center",
    "loss_mutual_info",
    "loss_reconstruction",
    "loss_orthogonality",
    "loss_noise_anchor",
    "loss_high_anchor",
    "loss_rank",
    "loss_corruption_rank",
    "unimodal_predict_loss",
    "enhancer_training_loss",
    "loss_balance",
    "loss_sample_variance",
    "loss_same_config",
];

fn sum_all(g: &mut Graph<'_>, vs: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vs {
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    Ok(acc)
}

impl LossVars {
    /// The named component summed over modalities; `None` when it is absent
    /// from this configuration.
    pub fn component(&self, g: &mut Graph<'_>, name: &str) -> Result<Option<Var>> {
        let de = |f: fn(&DecoupleTerms) -> Var| -> Vec<Var> {
            self.decouple.iter().flatten().map(f).collect()
        };
        let est = |f: fn(&EstimatorTerms) -> Option<Var>| -> Vec<Var> {
            self.estimator.iter().flatten().filter_map(f).collect()
        };
        let parts: Vec<Var> = match name {
            "total" => return Ok(Some(self.total)),
            "L_p" => return Ok(Some(self.predictive)),
            "loss_center" => de(|t| t.center),
            "loss_mutual_info" => de(|t| t.mutual_info),
            "loss_reconstruction" => de(|t| t.reconstruction),
            "loss_orthogonality" => de(|t| t.orthogonality),
            "loss_noise_anchor" => est(|t| Some(t.noise_anchor)),
            "loss_high_anchor" => est(|t| Some(t.high_anchor)),
            "loss_rank" => est(|t| t.rank),
            "loss_corruption_rank" => est(|t| t.corruption_rank),
            "unimodal_predict_loss" => est(|t| Some(t.unimodal)),
            "enhancer_training_loss" => return Ok(self.enhancer),
            "loss_balance" => return Ok(self.balance),
            "loss_sample_variance" => return Ok(self.sample),
            "loss_same_config" => return Ok(self.same),
            _ => return Ok(None),
        };
        sum_all(g, &parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleValues {
    pub center: f64,
    pub mutual_info: f64,
    pub reconstruction: f64,
    pub orthogonality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorValues {
    /// Noise anchor plus high-quality anchor.
    pub anchor: f64,
    pub corruption_rank: Option<f64>,
    pub rank: Option<f64>,
    pub unimodal: f64,
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub modalities: Vec<String>,
    pub predictive: f64,
    pub decouple: Option<Vec<DecoupleValues>>,
    pub decouple_total: Option<f64>,
    pub estimator: Option<Vec<EstimatorValues>>,
    pub estimator_total: Option<f64>,
    pub enhancer: Option<f64>,
    pub balance: Option<f64>,
    pub sample: Option<f64>,
    pub same: Option<f64>,
    pub total: f64,
    /// `[β_de, β_est, β_EH, β_moe]`.
    pub weights: [f64; 4],
}

impl LossReport {
    pub fn from_vars(g: &Graph<'_>, v: &LossVars, modalities: Vec<String>, weights: [f64; 4]) -> Self {
        let s = |x: Var| g.scalar(x);
        LossReport {
            modalities,
            predictive: s(v.predictive),
            decouple: v.decouple.as_ref().map(|ts| {
                ts.iter()
                    .map(|t| DecoupleValues {
                        center: s(t.center),
                        mutual_info: s(t.mutual_info),
                        reconstruction: s(t.reconstruction),
                        orthogonality: s(t.orthogonality),
                    })
                    .collect()
            }),
            decouple_total: v.decouple_total.map(s),
            estimator: v.estimator.as_ref().map(|ts| {
                ts.iter()
                    .map(|t| EstimatorValues {
                        anchor: s(t.noise_anchor) + s(t.high_anchor),
                        corruption_rank: t.corruption_rank.map(s),
                        rank: t.rank.map(s),
                        unimodal: s(t.unimodal),
                    })
                    .collect()
            }),
            estimator_total: v.estimator_total.map(s),
            enhancer: v.enhancer.map(s),
            balance: v.balance.map(s),
            sample: v.sample.map(s),
            same: v.same.map(s),
            total: s(v.total),
            weights,
        }
    }

    /// Weighted sum of the reported components.
    pub fn recomputed_total(&self) -> f64 {
        let [wde, west, weh, wmoe] = self.weights;
        let routing = self.balance.unwrap_or(0.0) + self.sample.unwrap_or(0.0) + self.same.unwrap_or(0.0);
        self.predictive
            + wde * self.decouple_total.unwrap_or(0.0)
            + west * self.estimator_total.unwrap_or(0.0)
            + weh * self.enhancer.unwrap_or(0.0)
            + wmoe * routing
    }

    /// Flat `(name, value)` list in a stable order; absent terms are omitted.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        out.push(("L_p".into(), self.predictive));
        if let (Some(total), Some(terms)) = (self.decouple_total, &self.decouple) {
            out.push(("L_de".into(), total));
            for (m, t) in self.modalities.iter().zip(terms) {
                out.push((format!("L_de.{m}.center"), t.center));
                out.push((format!("L_de.{m}.mutual_info"), t.mutual_info));
                out.push((format!("L_de.{m}.reconstruction"), t.reconstruction));
                out.push((format!("L_de.{m}.orthogonality"), t.orthogonality));
            }
        }
        if let (Some(total), Some(terms)) = (self.estimator_total, &self.estimator) {
            out.push(("L_est".into(), total));
            for (m, t) in self.modalities.iter().zip(terms) {
                out.push((format!("L_est.{m}.anchor"), t.anchor));
                if let Some(v) = t.corruption_rank {
                    out.push((format!("L_est.{m}.corruption_rank"), v));
                }
                if let Some(v) = t.rank {
                    out.push((format!("L_est.{m}.rank"), v));
                }
                out.push((format!("L_est.{m}.unimodal"), t.unimodal));
            }
        }
        for (name, v) in [
            ("L_EH", self.enhancer),
            ("L_balance", self.balance),
            ("L_sample", self.sample),
            ("L_same", self.same),
        ] {
            if let Some(v) = v {
                out.push((name.into(), v));
            }
        }
        out.push(("total".into(), self.total));
        out
    }
}

impl UmqModel {
    /// Assembles the weighted objective for one forward pass. `seed` drives
    /// every training-only random draw (AddNoise, noise anchors, pair
    /// sampling).
    pub fn composite_loss(&self, g: &mut Graph<'_>, fwd: &Forward, batch: &FeatureBatch, seed: u64) -> Result<LossVars> {
        let cfg = &self.config;
        let n = batch.len();
        let d = cfg.d;
        let per = estimator::task_loss(g, fwd.prediction, &batch.labels, self.task)?;
        let predictive = g.mean(per);

        let mut de_terms = Vec::new();
        let mut est_terms = Vec::new();
        let mut eh_terms = Vec::new();
        for (m, b) in self.branches.iter().enumerate() {
            let x = fwd.encoded[m];
            let draw = AugmentDraw::new(n, d, &cfg.augment, rng::derive(seed, 0x10 + m as u64));
            let x_hat = if b.estimator.is_some() || b.enhancer.is_some() {
                Some(draw.apply_graph(g, x)?)
            } else {
                None
            };

            if let Some(dp) = &b.decouple {
                let (xs, xc) = (fwd.x_s[m], fwd.x_c[m]);
                let recon = dp.couple(g, xs, xc)?;
                de_terms.push(DecoupleTerms {
                    center: decouple::loss_center(g, xc)?,
                    mutual_info: decouple::loss_mutual_info(g, x, xs, xc, cfg.epsilon)?,
                    reconstruction: decouple::loss_reconstruction(g, x, recon, cfg.reconstruction_squared)?,
                    orthogonality: decouple::loss_orthogonality(g, xs, xc)?,
                });
            }

            if let (Some(est), Some(uni), Some(alpha)) = (&b.estimator, &b.unimodal, fwd.alpha[m]) {
                let noise = rng::gaussian_tensor(&mut rng::rng(rng::derive(seed, 0x20 + m as u64)), n, d);
                let noise_anchor = est.loss_noise_anchor(g, &noise)?;
                let (_, lm) = uni.predict_loss(g, x, &batch.labels)?;
                let keys: Vec<f64> = g.value(lm).data().to_vec();
                let high_anchor = estimator::loss_high_anchor(g, alpha, &keys, cfg.gamma, cfg.eta)?;
                let ranked = !cfg.ablated(Ablation::RankGuidedTraining);
                let rank = if ranked {
                    Some(estimator::loss_rank(
                        g,
                        alpha,
                        &keys,
                        cfg.gamma1,
                        cfg.rank_pairs_cap,
                        rng::derive(seed, 0x30 + m as u64),
                    )?)
                } else {
                    None
                };
                let corruption_rank = if ranked {
                    let a_hat = est.estimate(g, x_hat.expect("augmented input"))?;
                    Some(estimator::loss_corruption_rank(g, alpha, a_hat, cfg.gamma1)?)
                } else {
                    None
                };
                est_terms.push(EstimatorTerms {
                    noise_anchor,
                    high_anchor,
                    corruption_rank,
                    rank,
                    unimodal: g.mean(lm),
                });
            }

            if let Some(eh) = &b.enhancer {
                let cross = (!cfg.ablated(Ablation::SampleSpecific)).then_some(fwd.cross[m].as_slice());
                let tilde = eh.enhance(g, x_hat.expect("augmented input"), cross, fwd.baselines[m])?;
                let alpha: Vec<f64> = (0..n).map(|i| fwd.quality.alpha.get(i, m)).collect();
                eh_terms.push(enhancer_training_loss(g, tilde.out, x, &alpha, cfg.tau)?);
            }
        }

        let has_de = self.branches.iter().any(|b| b.decouple.is_some());
        let has_est = self.branches.iter().any(|b| b.estimator.is_some());
        let has_eh = self.branches.iter().any(|b| b.enhancer.is_some());
        let decouple_total = if has_de { Some(decouple::decouple_total(g, &de_terms)?) } else { None };
        let estimator_total = if has_est { Some(estimator::estimator_total(g, &est_terms)?) } else { None };
        let enhancer = if has_eh { sum_all(g, &eh_terms)? } else { None };

        let (balance, sample, same) = match &fwd.routed {
            Some(r) => {
                let same = if cfg.ablated(Ablation::LSame) {
                    None
                } else {
                    Some(moe::loss_same_config(g, r.logits, &fwd.quality.levels, cfg.same_loss)?)
                };
                (
                    Some(moe::loss_balance(g, r.logits)),
                    Some(moe::loss_sample_variance(g, r.logits, cfg.beta)),
                    same,
                )
            }
            None => (None, None, None),
        };

        let mut total = predictive;
        for (w, t) in [
            (cfg.beta_de, decouple_total),
            (cfg.beta_est, estimator_total),
            (cfg.beta_eh, enhancer),
        ] {
            if let Some(t) = t {
                let s = g.scale(t, w);
                total = g.add(total, s)?;
            }
        }
        if let Some(routing) = sum_all(g, &[balance, sample, same].into_iter().flatten().collect::<Vec<_>>())? {
            let s = g.scale(routing, cfg.beta_moe);
            total = g.add(total, s)?;
        }

        Ok(LossVars {
            predictive,
            decouple: has_de.then_some(de_terms),
            decouple_total,
            estimator: has_est.then_some(est_terms),
            estimator_total,
            enhancer_terms: has_eh.then_some(eh_terms),
            enhancer,
            balance,
            sample,
            same,
            total,
        })
    }

    pub fn loss_weights(&self) -> [f64; 4] {
        let c = &self.config;
        [c.beta_de, c.beta_est, c.beta_eh, c.beta_moe]
    }

    pub fn report(&self, g: &Graph<'_>, v: &LossVars) -> LossReport {
        LossReport::from_vars(g, v, self.modality_names(), self.loss_weights())
    }
}
