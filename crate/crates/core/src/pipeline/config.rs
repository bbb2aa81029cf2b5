use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corruption::{AugmentConfig, CorruptionPlan};
use crate::dataio::Task;
use crate::error::{contract, Error, Result};
use crate::moe::SameConfigOptions;
use crate::tensor::AdamWConfig;

/// Structural ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// `α ≡ 1`; no estimator, no estimator losses.
    #[serde(rename = "wo_quality_estimation")]
    QualityEstimation,
    /// Drops the two ranking terms of the estimator loss.
    #[serde(rename = "wo_rank_guided_training")]
    RankGuidedTraining,
    /// `x̄_m = x_m`; no enhancer loss.
    #[serde(rename = "wo_quality_enhancement")]
    QualityEnhancement,
    /// `x_s = x_c = x_m`; no decoupling losses.
    #[serde(rename = "wo_modality_decoupling")]
    ModalityDecoupling,
    /// Removes `x_b` from the enhancer tokens.
    #[serde(rename = "wo_modality_specific")]
    ModalitySpecific,
    /// Removes the cross-modal `x_s · α` tokens.
    #[serde(rename = "wo_sample_specific")]
    SampleSpecific,
    /// One shared expert instead of routing; no routing losses.
    #[serde(rename = "wo_mqmoe")]
    MqMoe,
    #[serde(rename = "wo_l_same")]
    LSame,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::QualityEstimation,
        Ablation::RankGuidedTraining,
        Ablation::QualityEnhancement,
        Ablation::ModalityDecoupling,
        Ablation::ModalitySpecific,
        Ablation::SampleSpecific,
        Ablation::MqMoe,
        Ablation::LSame,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::QualityEstimation => "wo_quality_estimation",
            Ablation::RankGuidedTraining => "wo_rank_guided_training",
            Ablation::QualityEnhancement => "wo_quality_enhancement",
            Ablation::ModalityDecoupling => "wo_modality_decoupling",
            Ablation::ModalitySpecific => "wo_modality_specific",
            Ablation::SampleSpecific => "wo_sample_specific",
            Ablation::MqMoe => "wo_mqmoe",
            Ablation::LSame => "wo_l_same",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownAblation {
                name: name.into(),
                valid: Ablation::ALL.map(Ablation::name).join(", "),
            })
    }
}

/// Every hyperparameter of the model, its losses and its training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UmqConfig {
    /// Shared dimensionality.
    pub d: usize,
    /// Number of experts.
    pub h: usize,
    /// Selected experts.
    pub k: usize,
    /// Quality threshold.
    pub tau: f64,
    /// Variance margin.
    pub beta: f64,
    /// High-quality anchor target.
    pub gamma: f64,
    /// Ranking margin.
    pub gamma1: f64,
    /// Unimodal-loss threshold for high-quality anchors.
    pub eta: f64,
    /// Maximum distance of the mutual-information hinge.
    pub epsilon: f64,
    /// Baseline EMA coefficient.
    pub lambda: f64,
    pub beta_de: f64,
    pub beta_est: f64,
    pub beta_eh: f64,
    pub beta_moe: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: Task,
    /// Square the reconstruction norm.
    pub reconstruction_squared: bool,
    /// Stop the gradient of `α` in the enhancer's cross-modal tokens.
    pub detach_alpha_in_enhancer: bool,
    /// Sample at most this many ordered pairs in the ranking loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_pairs_cap: Option<usize>,
    pub ablation: Vec<Ablation>,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub same_loss: SameConfigOptions,
    /// Evaluation-time corruption.
    pub corruption: CorruptionPlan,
}

impl Default for UmqConfig {
    fn default() -> Self {
        UmqConfig {
            d: 100,
            h: 10,
            k: 3,
            tau: 0.5,
            beta: 0.1,
            gamma: 0.95,
            gamma1: 0.05,
            eta: 0.01,
            epsilon: 0.2,
            lambda: 0.9,
            beta_de: 1e-5,
            beta_est: 1e-3,
            beta_eh: 1e-3,
            beta_moe: 1e-3,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            task: Task::Regression,
            reconstruction_squared: false,
            detach_alpha_in_enhancer: false,
            rank_pairs_cap: None,
            ablation: Vec::new(),
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            same_loss: SameConfigOptions::default(),
            corruption: CorruptionPlan::default(),
        }
    }
}

impl UmqConfig {
    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if self.d < 2 {
            bad.push(format!("d = {} (need ≥ 2)", self.d));
        }
        if !self.ablated(Ablation::MqMoe) && (self.h < 2 || self.k == 0 || self.k > self.h) {
            bad.push(format!("h = {}, k = {} (need h ≥ 2, 1 ≤ k ≤ h)", self.h, self.k));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            bad.push(format!("tau = {} (need 0 < tau < 1)", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push(format!("lambda = {} (need 0 ≤ lambda ≤ 1)", self.lambda));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("gamma1", self.gamma1),
            ("eta", self.eta),
            ("epsilon", self.epsilon),
            ("beta_de", self.beta_de),
            ("beta_est", self.beta_est),
            ("beta_eh", self.beta_eh),
            ("beta_moe", self.beta_moe),
            ("optimizer.lr", self.optimizer.lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{name} = {v} (need finite, ≥ 0)"));
            }
        }
        if self.batch_size == 0 {
            bad.push("batch_size = 0".into());
        }
        if self.ablated(Ablation::ModalitySpecific)
            && self.ablated(Ablation::SampleSpecific)
            && !self.ablated(Ablation::QualityEnhancement)
        {
            bad.push("wo_modality_specific with wo_sample_specific leaves the enhancer no tokens".into());
        }
        let a = &self.augment;
        if !((0.0..=1.0).contains(&a.replace_prob) && 0.0 <= a.nr_low && a.nr_low <= a.nr_high && a.nr_high <= 1.0) {
            bad.push(format!("augment = {a:?}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(contract(format!("invalid config: {}", bad.join("; "))))
        }
    }
}

/// Returns `config` with the named switches added.
pub fn ablate(config: &UmqConfig, switches: &[&str]) -> Result<UmqConfig> {
    let mut out = config.clone();
    for s in switches {
        let a = Ablation::from_name(s)?;
        if !out.ablation.contains(&a) {
            out.ablation.push(a);
        }
    }
    out.ablation.sort();
    Ok(out)
}
