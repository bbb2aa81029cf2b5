use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{Ablation, UmqConfig};
use crate::corruption::{self, NoiseKind, NoisePreset};
use crate::dataio::{Encoder, FeatureBatch, ModalityInfo, Task};
use crate::decouple::{DecoupleParams, ModalityState};
use crate::enhancer::Enhancer;
use crate::error::{contract, Error, Result};
use crate::estimator::{Estimator, QualityVector, UnimodalPredictor};
use crate::moe::{Moe, Routed};
use crate::nn::Mlp;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Per-modality components.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub info: ModalityInfo,
    pub encoder: Encoder,
    pub estimator: Option<Estimator>,
    pub unimodal: Option<UnimodalPredictor>,
    pub decouple: Option<DecoupleParams>,
    pub state: Option<ModalityState>,
    pub enhancer: Option<Enhancer>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Router {
    Moe(Moe),
    /// Single expert used under the `wo_mqmoe` ablation.
    Shared(Mlp),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UmqModel {
    pub config: UmqConfig,
    pub task: Task,
    pub store: ParamStore,
    pub branches: Vec<Branch>,
    pub fusion: Mlp,
    pub router: Router,
    pub predictor: Mlp,
}

/// Representation-level corruption applied after encoding.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum ReprCorruption {
    #[default]
    None,
    /// Every modality at rate `nr` with the given preset.
    All { nr: f64, preset: NoisePreset, seed: u64 },
    /// Gaussian mixing of one modality only.
    Single { modality: usize, nr: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ForwardOptions {
    /// Training mode reads the live baseline and stages its EMA update.
    pub train: bool,
    pub corruption: ReprCorruption,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            corruption: ReprCorruption::None,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    /// Encoded (and possibly corrupted) `x_m`.
    pub encoded: Vec<Var>,
    /// Encodings before representation-level corruption.
    pub clean: Vec<Tensor>,
    pub alpha: Vec<Option<Var>>,
    pub quality: QualityVector,
    pub x_s: Vec<Var>,
    pub x_c: Vec<Var>,
    pub baselines: Vec<Option<Var>>,
    /// Baseline values to commit after a training step.
    pub pending_baselines: Vec<Option<Tensor>>,
    /// Cross-modal tokens `x_s,m' · α_m'` for each modality.
    pub cross: Vec<Vec<Var>>,
    pub enhanced: Vec<Var>,
    pub attention: Vec<Option<Var>>,
    pub fused: Var,
    pub routed: Option<Routed>,
    pub mixed: Var,
    /// `[n × 1]`; a logit for binary tasks.
    pub prediction: Var,
}

fn check(g: &Graph<'_>, v: Var, stage: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into() })
    }
}

impl UmqModel {
    /// Builds a freshly initialized model; parameters are drawn from a
    /// stream derived from `config.seed`.
    pub fn new(config: &UmqConfig, modalities: &[ModalityInfo], task: Task) -> Result<Self> {
        config.validate()?;
        if modalities.len() < 2 {
            return Err(contract("at least two modalities are required"));
        }
        let d = config.d;
        let nm = modalities.len();
        let mut r = rng::rng(rng::derive(config.seed, 0x1417));
        let mut store = ParamStore::new();
        let use_eh = !config.ablated(Ablation::QualityEnhancement);
        let branches = modalities
            .iter()
            .map(|info| {
                let n = &info.name;
                let encoder = Encoder::new(&mut store, &format!("{n}.enc"), info.dim, d, &mut r);
                let (estimator, unimodal) = if config.ablated(Ablation::QualityEstimation) {
                    (None, None)
                } else {
                    (
                        Some(Estimator::new(&mut store, &format!("{n}.est"), d, &mut r)),
                        Some(UnimodalPredictor::new(&mut store, &format!("{n}.uni"), d, task, &mut r)),
                    )
                };
                let decouple = (!config.ablated(Ablation::ModalityDecoupling))
                    .then(|| DecoupleParams::new(&mut store, &format!("{n}.dec"), d, &mut r));
                let state = (use_eh && !config.ablated(Ablation::ModalitySpecific))
                    .then(|| ModalityState::new(&mut store, &format!("{n}.base"), d, config.lambda, &mut r));
                let enhancer = use_eh.then(|| Enhancer::new(&mut store, &format!("{n}.eh"), d, nm, &mut r));
                Branch {
                    info: info.clone(),
                    encoder,
                    estimator,
                    unimodal,
                    decouple,
                    state,
                    enhancer,
                }
            })
            .collect();
        let fusion = Mlp::new(&mut store, "fusion", nm * d, 2 * d, d, &mut r);
        let router = if config.ablated(Ablation::MqMoe) {
            Router::Shared(Mlp::new(&mut store, "shared_expert", d, d, d, &mut r))
        } else {
            Router::Moe(Moe::new(&mut store, "moe", d, config.h, config.k, &mut r)?)
        };
        let predictor = Mlp::new(&mut store, "predictor", d, (d / 2).max(1), 1, &mut r);
        Ok(UmqModel {
            config: config.clone(),
            task,
            store,
            branches,
            fusion,
            router,
            predictor,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.branches.len()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.branches.iter().map(|b| b.info.name.clone()).collect()
    }

    /// Runs every stage on `g`, whose parameter store must be this model's
    /// (or a perturbed copy of it).
    pub fn forward(&self, g: &mut Graph<'_>, batch: &FeatureBatch, opts: &ForwardOptions) -> Result<Forward> {
        let nm = self.num_modalities();
        if batch.num_modalities() != nm {
            return Err(contract(format!(
                "batch has {} modalities, model has {nm}",
                batch.num_modalities()
            )));
        }
        if batch.is_empty() {
            return Err(contract("forward on an empty batch"));
        }
        let cfg = &self.config;
        let n = batch.len();

        let mut encoded = Vec::with_capacity(nm);
        for (b, raw) in self.branches.iter().zip(&batch.features) {
            let raw = g.constant(raw.clone());
            let x = b.encoder.encode(g, raw, b.info.seq_len)?;
            check(g, x, "encode")?;
            encoded.push(x);
        }
        let clean: Vec<Tensor> = encoded.iter().map(|&x| g.value(x).clone()).collect();
        match opts.corruption {
            ReprCorruption::None => {}
            ReprCorruption::All { nr, preset, seed } => {
                let out = corruption::corrupt_representations(&clean, nr, preset, seed)?;
                if nr > 0.0 {
                    for (x, t) in encoded.iter_mut().zip(out) {
                        *x = g.constant(t);
                    }
                }
            }
            ReprCorruption::Single { modality, nr, seed } => {
                if modality >= nm {
                    return Err(contract(format!("no modality {modality}")));
                }
                if nr > 0.0 {
                    let t = corruption::mix_noise(&clean[modality], nr, NoiseKind::Gaussian, seed)?;
                    encoded[modality] = g.constant(t);
                }
            }
        }

        let mut alpha = Vec::with_capacity(nm);
        let mut alpha_values = alloc::vec![1.0; n * nm];
        for (m, b) in self.branches.iter().enumerate() {
            let a = match &b.estimator {
                Some(e) => {
                    let a = e.estimate(g, encoded[m])?;
                    check(g, a, "estimate")?;
                    for i in 0..n {
                        alpha_values[i * nm + m] = g.value(a).data()[i];
                    }
                    Some(a)
                }
                None => None,
            };
            alpha.push(a);
        }
        let quality = QualityVector::from_alpha(Tensor::new(n, nm, alpha_values)?, cfg.tau);
        for row in &quality.levels {
            for &p in row {
                g.note_decision(p);
            }
        }

        let mut x_s = Vec::with_capacity(nm);
        let mut x_c = Vec::with_capacity(nm);
        for (m, b) in self.branches.iter().enumerate() {
            let (s, c) = match &b.decouple {
                Some(dp) => {
                    let (s, c) = dp.decouple(g, encoded[m])?;
                    check(g, s, "decouple")?;
                    check(g, c, "decouple")?;
                    (s, c)
                }
                None => (encoded[m], encoded[m]),
            };
            x_s.push(s);
            x_c.push(c);
        }

        let mut baselines = Vec::with_capacity(nm);
        let mut pending = Vec::with_capacity(nm);
        for (m, b) in self.branches.iter().enumerate() {
            match &b.state {
                Some(st) if opts.train => {
                    let v = st.baseline_train(g, x_c[m])?;
                    pending.push(Some(g.value(v).clone()));
                    baselines.push(Some(v));
                }
                Some(st) => {
                    baselines.push(Some(st.baseline_eval(g)));
                    pending.push(None);
                }
                None => {
                    baselines.push(None);
                    pending.push(None);
                }
            }
        }

        let mut scaled = Vec::with_capacity(nm);
        for m in 0..nm {
            let s = match alpha[m] {
                Some(a) => {
                    let a = if cfg.detach_alpha_in_enhancer { g.detach(a) } else { a };
                    g.mul(x_s[m], a)?
                }
                None => x_s[m],
            };
            scaled.push(s);
        }
        let cross: Vec<Vec<Var>> = (0..nm)
            .map(|m| (0..nm).filter(|&o| o != m).map(|o| scaled[o]).collect())
            .collect();

        let mut enhanced = Vec::with_capacity(nm);
        let mut attention = Vec::with_capacity(nm);
        for (m, b) in self.branches.iter().enumerate() {
            match &b.enhancer {
                Some(eh) => {
                    let c = (!cfg.ablated(Ablation::SampleSpecific)).then_some(cross[m].as_slice());
                    let out = eh.enhance(g, encoded[m], c, baselines[m])?;
                    check(g, out.out, "enhance")?;
                    enhanced.push(out.out);
                    attention.push(Some(out.weights));
                }
                None => {
                    enhanced.push(encoded[m]);
                    attention.push(None);
                }
            }
        }

        let joined = g.concat(&enhanced)?;
        let fused = self.fusion.forward(g, joined)?;
        check(g, fused, "fusion")?;
        let (routed, mixed) = match &self.router {
            Router::Moe(moe) => {
                let r = moe.forward(g, fused)?;
                let out = r.out;
                (Some(r), out)
            }
            Router::Shared(e) => (None, e.forward(g, fused)?),
        };
        check(g, mixed, "experts")?;
        let prediction = self.predictor.forward(g, mixed)?;
        check(g, prediction, "predictor")?;

        Ok(Forward {
            encoded,
            clean,
            alpha,
            quality,
            x_s,
            x_c,
            baselines,
            pending_baselines: pending,
            cross,
            enhanced,
            attention,
            fused,
            routed,
            mixed,
            prediction,
        })
    }

    /// Quality scores of modality `m` for already-encoded rows.
    pub fn estimate_rows(&self, modality: usize, rows: &Tensor) -> Result<Option<Tensor>> {
        let Some(e) = &self.branches[modality].estimator else {
            return Ok(None);
        };
        let mut g = Graph::with_params(&self.store);
        let x = g.constant(rows.clone());
        let a = e.estimate(&mut g, x)?;
        Ok(Some(g.value(a).clone()))
    }

    /// Stores the staged baseline values of a training step.
    pub fn commit_baselines(&mut self, pending: Vec<Option<Tensor>>) {
        for (b, p) in self.branches.iter_mut().zip(pending) {
            if let (Some(st), Some(v)) = (&mut b.state, p) {
                st.commit(v);
            }
        }
    }
}
