//! Subcommands. Each prints exactly one JSON line on stdout; logs go to
//! stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use umq_core::corruption::{self, CorruptionPlan, NoisePreset};
use umq_core::dataio::{generate_synthetic, Dataset, Split, SyntheticSpec, Task};
use umq_core::pipeline::{train_model, Metrics, RoutingStats, UmqConfig, UmqModel, COMPONENTS};
use umq_core::tensor::{GradCheckOptions, OpKind};

use crate::error::{io, Error};
use crate::{checkpoint, config, dataset, report};

/// Global seed fallback when neither a flag nor the config gives one.
pub const SEED_ENV: &str = "UMQ_SEED";
/// Gradient-check acceptance threshold.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "umq", version, about = "Quality-aware multimodal fusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus history.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one corruption plan.
    Eval(EvalArgs),
    /// Sweep missing or noise rates and write a CSV table.
    CorruptEval(CorruptEvalArgs),
    /// Finite-difference check of every loss component.
    Gradcheck(GradcheckArgs),
    /// Per-sample routing decisions and routing statistics.
    RouteAudit(RouteAuditArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Binary,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Binary => Task::Binary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Gaussian,
    OodMix,
}

impl From<PresetArg> for NoisePreset {
    fn from(p: PresetArg) -> NoisePreset {
        match p {
            PresetArg::Gaussian => NoisePreset::Gaussian,
            PresetArg::OodMix => NoisePreset::OodMix,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Missing,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Gaussian,
    OodMix,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Comma-separated feature dimension of each modality.
    #[arg(long, value_delimiter = ',', default_values_t = [20, 12, 16])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    pub latent: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    pub noise_floor: f64,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    pub task: TaskArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `checkpoint/` and `history.csv`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.0)]
    pub mr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub nr: f64,
    #[arg(long, value_enum, default_value_t = PresetArg::Gaussian)]
    pub preset: PresetArg,
    /// Corruption seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorruptEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// Grid `start:stop:step`, inclusive of `stop`.
    #[arg(long, default_value = "0.1:0.7:0.1")]
    pub rates: String,
    /// Noise preset (noise protocol only).
    #[arg(long, value_enum, default_value_t = KindArg::All)]
    pub kind: KindArg,
    /// Corruption seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "corrupt_eval.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check only this loss component.
    #[arg(long)]
    pub component: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Replace the backward rule of one op with a wrong one.
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct RouteAuditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value = "route_audit.csv")]
    pub out: PathBuf,
}

/// Outcome of a failed command: exit code, diagnostic and an optional
/// report still printed on stdout.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub report: Option<Value>,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
            report: None,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Core(umq_core::Error::UnknownAblation { .. }) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
            report: None,
        }
    }
}

impl From<umq_core::Error> for Failure {
    fn from(e: umq_core::Error) -> Self {
        Error::Core(e).into()
    }
}

type Outcome = std::result::Result<Value, Failure>;

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

pub fn metrics_json(m: &Metrics, task: Task) -> Value {
    let map = report::metric_names(task)
        .iter()
        .map(|n| (n.to_string(), json!(report::metric(m, n))))
        .collect::<serde_json::Map<_, _>>();
    Value::Object(map)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir)).map_err(Failure::from)?;
    }
    fs::write(path, text).map_err(io(path)).map_err(Failure::from)
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CorruptEval(a) => corrupt_eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::RouteAudit(a) => route_audit(a),
    }
}

fn synth(a: SynthArgs) -> Outcome {
    if a.dims.len() < 2 {
        return Err(Failure::usage("at least two modalities are required (--dims a,b,...)"));
    }
    let spec = SyntheticSpec {
        n_samples: a.n,
        dims: a.dims.clone(),
        latent_dim: a.latent,
        noise_floor: a.noise_floor,
        task: a.task.into(),
    };
    let seed = resolve_seed(a.seed)?;
    let ds = generate_synthetic(&spec, seed).map_err(|e| Failure::usage(e.to_string()))?;
    let manifest = dataset::write_dataset(&ds, &a.out)?;
    let sha256 = dataset::dataset_digest(&manifest)?;
    let bytes = dataset::data_bytes(&manifest)?;
    eprintln!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(json!({
        "manifest": manifest.display().to_string(),
        "n": ds.len(),
        "dims": a.dims,
        "seed": seed,
        "bytes": bytes,
        "sha256": sha256,
    }))
}

fn effective_config(a: &TrainArgs, data_task: Option<Task>) -> Result<UmqConfig, Failure> {
    let loaded = config::load(a.config.as_deref(), &a.overrides)?;
    let mut cfg = loaded.config;
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !loaded.seed_given {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    if let (Some(t), false) = (data_task, loaded.task_given) {
        cfg.task = t;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Outcome {
    if a.dump_config {
        let task = match &a.data {
            Some(d) => Some(dataset::read_manifest(d)?.task),
            None => None,
        };
        let cfg = effective_config(&a, task)?;
        return Ok(json!({ "config_toml": config::to_toml(&cfg)? }));
    }
    let data = a
        .data
        .as_ref()
        .ok_or_else(|| Failure::usage("--data is required unless --dump-config is given"))?;
    let ds = dataset::load_dataset(data)?;
    let cfg = effective_config(&a, Some(ds.task))?;
    if cfg.task != ds.task {
        return Err(Failure::usage(format!(
            "config task {:?} does not match dataset task {:?}",
            cfg.task, ds.task
        )));
    }
    eprintln!("training {} epochs on {} samples (seed {})", cfg.epochs, ds.len(), cfg.seed);
    let mut model = UmqModel::new(&cfg, &ds.modalities, ds.task)?;
    let outcome = match train_model(&ds, &mut model) {
        Ok(o) => o,
        Err(umq_core::Error::Diverged { step, last_finite }) => {
            let last = last_finite.map(|r| r.total);
            return Err(Failure {
                code: 1,
                message: format!("training diverged at step {step} (last finite total loss {last:?})"),
                report: Some(json!({ "diverged": true, "step": step, "last_finite_total": last })),
            });
        }
        Err(e) => return Err(e.into()),
    };
    for r in &outcome.history {
        eprintln!("epoch {:>3}  val_loss {}", r.epoch, r.val_loss);
    }
    write(&a.out.join("history.csv"), &report::history_csv(&outcome.history, ds.task)?)?;
    checkpoint::save(&outcome.best, Some(outcome.best_epoch), &a.out.join("checkpoint"))?;
    let clean = CorruptionPlan::default();
    let val = outcome.best.evaluate(&ds, Split::Val, &clean)?;
    let test = outcome.best.evaluate(&ds, Split::Test, &clean)?;
    Ok(json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.len(),
        "steps": outcome.steps,
        "val_loss": val.loss,
        "val": metrics_json(&val.metrics, ds.task),
        "test_loss": test.loss,
        "test": metrics_json(&test.metrics, ds.task),
        "checkpoint": a.out.join("checkpoint").display().to_string(),
    }))
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(UmqModel, Dataset), Failure> {
    let model = checkpoint::load(ckpt)?;
    let ds = dataset::load_dataset(data)?;
    if model.modality_names() != ds.modalities.iter().map(|m| m.name.clone()).collect::<Vec<_>>() {
        return Err(Failure::usage("checkpoint modalities do not match the dataset"));
    }
    Ok((model, ds))
}

fn eval(a: EvalArgs) -> Outcome {
    let (model, ds) = load_pair(&a.checkpoint, &a.data)?;
    let plan = CorruptionPlan {
        missing_rate: a.mr,
        noise_rate: a.nr,
        preset: a.preset.into(),
        seed: resolve_seed(a.seed)?,
    };
    plan.validate(ds.num_modalities()).map_err(|e| Failure::usage(e.to_string()))?;
    let e = model.evaluate(&ds, a.split.into(), &plan)?;
    let realized = corruption::missing_rate(&e.masks)?;
    Ok(json!({
        "split": format!("{:?}", a.split).to_lowercase(),
        "n": e.ids.len(),
        "loss": e.loss,
        "metrics": metrics_json(&e.metrics, model.task),
        "realized_mr": realized,
    }))
}

/// Expands `start:stop:step` into an inclusive grid.
pub fn parse_rates(spec: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Failure::usage(format!("rates `{spec}` must be start:stop:step"));
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    match nums[..] {
        [x] if x.is_finite() => Ok(vec![x]),
        [start, stop, step] if start.is_finite() && stop.is_finite() && step > 0.0 => {
            let count = ((stop - start) / step + 1e-9).floor();
            if count < 0.0 {
                return Err(bad());
            }
            Ok((0..=count as usize)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        _ => Err(bad()),
    }
}

fn corrupt_eval(a: CorruptEvalArgs) -> Outcome {
    let (model, ds) = load_pair(&a.checkpoint, &a.data)?;
    let rates = parse_rates(&a.rates)?;
    let seed = resolve_seed(a.seed)?;
    let split: Split = a.split.into();
    let cap = corruption::max_missing_rate(ds.num_modalities());
    let mut points: Vec<(String, CorruptionPlan, f64)> = Vec::new();
    match a.protocol {
        Protocol::Missing => {
            for &r in &rates {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Failure::usage(format!("missing rate {r} outside [0, 1]")));
                }
                let mr = if r > cap {
                    eprintln!("MR {r} exceeds the cap {cap} for {} modalities; clamped", ds.num_modalities());
                    cap
                } else {
                    r
                };
                let plan = CorruptionPlan {
                    missing_rate: mr,
                    seed,
                    ..CorruptionPlan::default()
                };
                points.push(("mask".into(), plan, r));
            }
        }
        Protocol::Noise => {
            let kinds: &[NoisePreset] = match a.kind {
                KindArg::Gaussian => &[NoisePreset::Gaussian],
                KindArg::OodMix => &[NoisePreset::OodMix],
                KindArg::All => &[NoisePreset::Gaussian, NoisePreset::OodMix],
            };
            for &k in kinds {
                for &r in &rates {
                    let plan = CorruptionPlan {
                        noise_rate: r,
                        preset: k,
                        seed,
                        ..CorruptionPlan::default()
                    };
                    plan.validate(ds.num_modalities()).map_err(|e| Failure::usage(e.to_string()))?;
                    points.push((k.name().into(), plan, r));
                }
            }
        }
    }
    let threads = a.threads.max(1).min(points.len().max(1));
    let results = evaluate_points(&model, &ds, split, &points, threads);
    let protocol = match a.protocol {
        Protocol::Missing => "missing",
        Protocol::Noise => "noise",
    };
    let mut rows = Vec::with_capacity(points.len());
    for ((kind, plan, rate), res) in points.iter().zip(results) {
        let e = res?;
        rows.push(report::SweepRow {
            protocol: protocol.into(),
            kind: kind.clone(),
            rate: *rate,
            metrics: e.metrics,
            realized_mr: (plan.missing_rate > 0.0)
                .then(|| corruption::missing_rate(&e.masks))
                .transpose()?,
        });
    }
    write(&a.out, &report::sweep_csv(&rows, model.task)?)?;
    Ok(json!({
        "csv": a.out.display().to_string(),
        "protocol": protocol,
        "rows": rows.len(),
    }))
}

fn evaluate_points(
    model: &UmqModel,
    ds: &Dataset,
    split: Split,
    points: &[(String, CorruptionPlan, f64)],
    threads: usize,
) -> Vec<umq_core::Result<umq_core::pipeline::Evaluation>> {
    let mut slots: Vec<Option<umq_core::Result<umq_core::pipeline::Evaluation>>> = (0..points.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = points.len().div_ceil(threads.max(1)).max(1);
        for (ps, out) in points.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            s.spawn(move || {
                for ((_, plan, _), slot) in ps.iter().zip(out.iter_mut()) {
                    *slot = Some(model.evaluate(ds, split, plan));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every grid point evaluated")).collect()
}

/// Model and batch used by `gradcheck`.
pub fn gradcheck_fixture(seed: u64, samples: usize) -> umq_core::Result<(UmqModel, umq_core::dataio::FeatureBatch)> {
    let ds = generate_synthetic(&SyntheticSpec::default(), seed)?;
    let cfg = UmqConfig {
        d: 16,
        h: 4,
        k: 2,
        seed,
        ..UmqConfig::default()
    };
    let model = UmqModel::new(&cfg, &ds.modalities, ds.task)?;
    let ids: Vec<usize> = ds.split(Split::Train).iter().copied().take(samples).collect();
    Ok((model, ds.batch(&ids)))
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let components: Vec<&str> = match &a.component {
        Some(c) if COMPONENTS.contains(&c.as_str()) => vec![c.as_str()],
        Some(c) => {
            return Err(Failure::usage(format!(
                "unknown component `{c}` (valid: {})",
                COMPONENTS.join(", ")
            )))
        }
        None => COMPONENTS.to_vec(),
    };
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let (mut model, batch) = gradcheck_fixture(a.seed, a.samples)?;
    let mut results = serde_json::Map::new();
    let mut failed = Vec::new();
    for c in components {
        let r = model.grad_check_component(&batch, a.seed, c, GradCheckOptions::default(), fault)?;
        let entry = match &r {
            Some(r) => {
                eprintln!("{c:<24} max rel error {:.3e} ({} coords, {} skipped)", r.max_rel_error, r.checked, r.skipped.len());
                if r.max_rel_error.is_nan() || r.max_rel_error >= GRADCHECK_TOLERANCE {
                    failed.push(c);
                }
                json!({
                    "max_rel_error": r.max_rel_error,
                    "checked": r.checked,
                    "skipped": r.skipped.len(),
                    "worst_param": r.worst.as_ref().map(|w| w.param.clone()),
                })
            }
            None => {
                eprintln!("{c:<24} absent");
                Value::Null
            }
        };
        results.insert(c.to_string(), entry);
    }
    let report = json!({
        "tolerance": GRADCHECK_TOLERANCE,
        "components": results,
        "failed": failed,
        "injected_fault": fault.map(OpKind::name),
    });
    if failed.is_empty() {
        Ok(report)
    } else {
        let op = fault.map_or_else(String::new, |k| format!(" (wrong backward rule for op `{}`)", k.name()));
        Err(Failure {
            code: 1,
            message: format!("gradient check failed for {}{op}", failed.join(", ")),
            report: Some(report),
        })
    }
}

fn route_audit(a: RouteAuditArgs) -> Outcome {
    let (model, ds) = load_pair(&a.checkpoint, &a.data)?;
    let e = model.evaluate(&ds, a.split.into(), &CorruptionPlan::default())?;
    write(&a.out, &report::route_audit_csv(&e)?)?;
    let stats = RoutingStats::compute(&e.routes, &e.levels, model.config.h, model.config.beta);
    Ok(json!({
        "csv": a.out.display().to_string(),
        "rows": e.routes.len(),
        "selection_counts": stats.selection_counts,
        "balance_ratio": stats.balance_ratio,
        "variance_fraction": stats.variance_fraction,
        "agreement": stats.agreement,
    }))
}
