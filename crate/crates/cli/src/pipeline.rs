//! Experiment pipeline behind the CLI: pretraining, adaptation runs,
//! ablation sweeps, embedding export and report handling. Every artifact
//! is a pure function of (config, seed); no timestamps, no absolute paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use viscop_core::checkpoint::{self, CheckpointError};
use viscop_core::data::{self, Benchmark, DataError, DomainTransform, QASample};
use viscop_core::metrics::{self, AdaptationReport, MetricsError};
use viscop_core::model::VlmModel;
use viscop_core::numerics::Rng;
use viscop_core::strategy::{
    apply_strategy, prepare_architecture, AdaptationStrategy, ProbePlacementKind, StrategyPreset,
};
use viscop_core::trainer::{self, TrainConfig, TrainError, TrainReport};
use viscop_core::ModelError;

use crate::config::{ConfigFileError, ExperimentConfig};
use crate::schema;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigFileError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(String),
    #[error("unknown strategy `{0}` (see `viscop strategies`)")]
    UnknownStrategy(String),
    #[error("unknown ablation axis `{0}` (probes | placement | alternatives)")]
    UnknownAxis(String),
    #[error("base checkpoint not found at {0}; run `viscop pretrain` first")]
    MissingBase(String),
    #[error("report invalid: {0}")]
    BadReport(String),
}

impl PipelineError {
    /// Exit codes: 0 success, 2 config error, 3 numeric abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::UnknownStrategy(_)
            | PipelineError::UnknownAxis(_)
            | PipelineError::MissingBase(_) => 2,
            PipelineError::Train(TrainError::NanLoss { .. }) => 3,
            PipelineError::Metrics(MetricsError::SingularCovariance) => 3,
            _ => 1,
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io(e.to_string()))?;
    }
    std::fs::write(path, bytes).map_err(|e| PipelineError::Io(e.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, PipelineError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn loss_csv(report: &TrainReport) -> String {
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    csv
}

#[derive(Debug, Serialize)]
struct OptimizerInfo {
    kind: &'static str,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl OptimizerInfo {
    fn from(cfg: &TrainConfig) -> OptimizerInfo {
        OptimizerInfo {
            kind: "adam",
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    strategy: Option<String>,
    config_hash: String,
    seed: u64,
    datasets: Vec<String>,
    checkpoint: String,
    metrics: serde_json::Value,
    train: TrainConfig,
    optimizer: OptimizerInfo,
}

fn dataset_id(domain: &str, transform: DomainTransform, cfg: &ExperimentConfig) -> String {
    format!(
        "{domain}:{}:{}:seed{}",
        transform.name(),
        cfg.data.samples_per_domain,
        cfg.seed
    )
}

pub fn base_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join("base")
}

pub fn base_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    base_dir(cfg).join("base.ckpt")
}

pub fn adapt_dir(cfg: &ExperimentConfig, strategy: &str) -> PathBuf {
    cfg.output_root().join(format!("adapt-{strategy}"))
}

/// Source-domain pretraining: the stand-in for the pretrained base VLM.
/// Every parameter trains; evaluation runs on the source benchmarks.
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub source_accs: Vec<(String, f64)>,
    pub steps: usize,
    pub final_loss: f64,
}

pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome, PipelineError> {
    let vocab = data::build_vocab(cfg.data.grid);
    let mut model = VlmModel::init_base(&cfg.model_config(), vocab.clone(), cfg.seed)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).set_requires_grad(true);
    }

    let pair = data::make_domain_pair(&cfg.data, cfg.transform, &vocab);
    let pool = data::train_pool(&pair.source);
    let report = trainer::train(&mut model, &pool, &cfg.pretrain)?;
    let source_accs = trainer::evaluate_benchmarks(&model, &pair.source)?;

    let dir = base_dir(cfg);
    let ckpt = dir.join("base.ckpt");
    checkpoint::save_model(&model, &ckpt)?;
    model
        .vocab
        .save(&dir.join("vocab.json"))
        .map_err(|e| PipelineError::Io(e.to_string()))?;
    write(&dir.join("pretrain_loss.csv"), loss_csv(&report).as_bytes())?;

    let manifest = RunManifest {
        command: "pretrain".into(),
        strategy: None,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        datasets: vec![dataset_id("source", DomainTransform::Identity, cfg)],
        checkpoint: "base/base.ckpt".into(),
        metrics: serde_json::json!({
            "source_accuracy": source_accs.iter().map(|(k, v)| (k.clone(), v * 100.0)).collect::<BTreeMap<_, _>>(),
            "final_loss": report.loss_curve.last().copied().unwrap_or(f64::NAN),
        }),
        train: cfg.pretrain.clone(),
        optimizer: OptimizerInfo::from(&cfg.pretrain),
    };
    write(&dir.join("pretrain_manifest.json"), &to_json(&manifest)?)?;

    Ok(PretrainOutcome {
        checkpoint: ckpt,
        final_loss: report.loss_curve.last().copied().unwrap_or(f64::NAN),
        steps: report.steps,
        source_accs,
    })
}

/// Resolve a preset name into a strategy carrying the config's probe
/// settings.
pub fn resolve_strategy(
    cfg: &ExperimentConfig,
    name: &str,
) -> Result<AdaptationStrategy, PipelineError> {
    let preset =
        StrategyPreset::parse(name).ok_or_else(|| PipelineError::UnknownStrategy(name.into()))?;
    let mut strategy = preset.strategy();
    strategy.probe_count = cfg.probes.count;
    strategy.scope = cfg.probes.scope();
    strategy.residual = cfg.probes.residual;
    strategy.per_head_scale = cfg.probes.per_head_scale;
    Ok(strategy)
}

pub struct AdaptOutcome {
    pub report: AdaptationReport,
    pub report_path: PathBuf,
    pub expert_checkpoint: PathBuf,
    pub trainable_params: usize,
    pub steps: usize,
}

/// Full adaptation run: load the base checkpoint, measure base accuracy
/// on every benchmark, extend/gate per the strategy, train on the target
/// train split, evaluate, and emit report + CSV + manifest.
pub fn run_adapt(cfg: &ExperimentConfig, strategy_name: &str) -> Result<AdaptOutcome, PipelineError> {
    let strategy = resolve_strategy(cfg, strategy_name)?;
    let base_path = base_checkpoint_path(cfg);
    if !base_path.exists() {
        return Err(PipelineError::MissingBase(base_path.display().to_string()));
    }
    let mut model = checkpoint::load_model(&base_path)?;
    let pair = data::make_domain_pair(&cfg.data, cfg.transform, &model.vocab);

    // base accuracies come from the unmodified base model
    let base_target = trainer::evaluate_benchmarks(&model, &pair.target)?;
    let base_source = trainer::evaluate_benchmarks(&model, &pair.source)?;

    let mut rng = Rng::seed_from(cfg.seed ^ 0xADA7);
    prepare_architecture(&mut model, &strategy, &mut rng)?;
    let audit = apply_strategy(&mut model, &strategy);
    let trainable_params = model.trainable_params();

    let pool = data::train_pool(&pair.target);
    let train_report = trainer::train(&mut model, &pool, &cfg.adapt)?;
    let violations = audit.violations(&model);
    assert!(
        violations.is_empty(),
        "frozen parameters changed during training: {violations:?}"
    );

    let expert_target = trainer::evaluate_benchmarks(&model, &pair.target)?;
    let expert_source = trainer::evaluate_benchmarks(&model, &pair.source)?;

    let pct = |accs: &[(String, f64)]| -> BTreeMap<String, f64> {
        accs.iter().map(|(k, v)| (k.clone(), v * 100.0)).collect()
    };
    let mut base_accs = pct(&base_target);
    base_accs.extend(pct(&base_source));
    let mut expert_accs = pct(&expert_target);
    expert_accs.extend(pct(&expert_source));
    let target_keys: Vec<String> = base_target.iter().map(|(k, _)| k.clone()).collect();
    let source_keys: Vec<String> = base_source.iter().map(|(k, _)| k.clone()).collect();
    let report = metrics::delta_metrics(&base_accs, &expert_accs, &target_keys, &source_keys)?;

    let dir = adapt_dir(cfg, &strategy.name);
    let expert_ckpt = dir.join("expert.ckpt");
    checkpoint::save_model(&model, &expert_ckpt)?;
    write(&dir.join("loss.csv"), loss_csv(&train_report).as_bytes())?;

    // CSV mirrors the adaptation tables: per-benchmark rows + delta summary
    let mut csv = String::from("benchmark,split,base_acc,expert_acc\n");
    for row in &report.benchmarks {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.benchmark, row.split, row.base_acc, row.expert_acc
        ));
    }
    csv.push_str(&format!(
        "summary,delta,{},{}\n",
        report.delta_target, report.delta_source
    ));
    write(&dir.join("table.csv"), csv.as_bytes())?;

    let report_doc = serde_json::json!({
        "schema_version": schema::REPORT_SCHEMA_VERSION,
        "strategy": strategy.name,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "base_checkpoint": "base/base.ckpt",
        "expert_checkpoint": format!("adapt-{}/expert.ckpt", strategy.name),
        "train_steps": train_report.steps,
        "trainable_params": trainable_params,
        "report": report,
    });
    schema::validate_report(&report_doc).map_err(PipelineError::BadReport)?;
    let report_path = dir.join("report.json");
    write(&report_path, &to_json(&report_doc)?)?;

    let manifest = RunManifest {
        command: "adapt".into(),
        strategy: Some(strategy.name.clone()),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        datasets: vec![
            dataset_id("source", DomainTransform::Identity, cfg),
            dataset_id("target", cfg.transform, cfg),
        ],
        checkpoint: format!("adapt-{}/expert.ckpt", strategy.name),
        metrics: serde_json::json!({
            "delta_target": report.delta_target,
            "delta_source": report.delta_source,
        }),
        train: cfg.adapt.clone(),
        optimizer: OptimizerInfo::from(&cfg.adapt),
    };
    write(&dir.join("adapt_manifest.json"), &to_json(&manifest)?)?;

    Ok(AdaptOutcome {
        report,
        report_path,
        expert_checkpoint: expert_ckpt,
        trainable_params,
        steps: train_report.steps,
    })
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub cell: String,
    pub strategy: String,
    pub trainable_params: usize,
    pub interaction_params: usize,
    pub delta_target: Option<f64>,
    pub delta_source: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

fn ablation_cells(
    cfg: &ExperimentConfig,
    axis: &str,
) -> Result<Vec<(String, AdaptationStrategy)>, PipelineError> {
    let viscop = |cfg: &ExperimentConfig| resolve_strategy(cfg, "viscop");
    Ok(match axis {
        "probes" => [1usize, 4, 8, 16, 32]
            .into_iter()
            .map(|m| {
                let mut s = viscop(cfg)?;
                s.probe_count = m;
                s.name = format!("viscop-m{m}");
                Ok((format!("m={m}"), s))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?,
        "placement" => {
            let kinds = [
                ("every-layer", ProbePlacementKind::EveryLayer),
                ("every-2", ProbePlacementKind::EveryK(2)),
                ("every-3", ProbePlacementKind::EveryK(3)),
                ("last-only", ProbePlacementKind::LastOnly),
            ];
            kinds
                .into_iter()
                .map(|(label, kind)| {
                    let mut s = viscop(cfg)?;
                    s.placement = kind;
                    s.name = format!("viscop-{label}");
                    Ok((label.to_string(), s))
                })
                .collect::<Result<Vec<_>, PipelineError>>()?
        }
        "alternatives" => [
            "vp-only",
            "vlc-ve-lora-llm-lora",
            "vlc-last4-llm-lora",
            "qformer-style",
            "viscop",
        ]
        .into_iter()
        .map(|name| Ok((name.to_string(), resolve_strategy(cfg, name)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?,
        other => return Err(PipelineError::UnknownAxis(other.into())),
    })
}

/// Ablation sweep over one axis. With `audit_only` the rows carry the
/// parameter audit but skip training (no deltas).
pub fn run_ablate(
    cfg: &ExperimentConfig,
    axis: &str,
    audit_only: bool,
) -> Result<Vec<AblationRow>, PipelineError> {
    let base_path = base_checkpoint_path(cfg);
    if !base_path.exists() {
        return Err(PipelineError::MissingBase(base_path.display().to_string()));
    }
    let cells = ablation_cells(cfg, axis)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, strategy) in cells {
        let mut model = checkpoint::load_model(&base_path)?;
        let mut rng = Rng::seed_from(cfg.seed ^ 0xADA7);
        prepare_architecture(&mut model, &strategy, &mut rng)?;
        apply_strategy(&mut model, &strategy);
        let trainable_params = model.trainable_params();
        let interaction_params = model.store.param_count_by_prefix("interaction.");

        let (delta_target, delta_source) = if audit_only {
            (None, None)
        } else {
            drop(model);
            let outcome = run_adapt_with_strategy(cfg, strategy.clone())?;
            (
                Some(outcome.report.delta_target),
                Some(outcome.report.delta_source),
            )
        };
        rows.push(AblationRow {
            axis: axis.to_string(),
            cell,
            strategy: strategy.name.clone(),
            trainable_params,
            interaction_params,
            delta_target,
            delta_source,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        });
    }

    let mut csv = String::from(
        "axis,cell,strategy,trainable_params,interaction_params,delta_target,delta_source,config_hash,seed\n",
    );
    for r in &rows {
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.cell,
            r.strategy,
            r.trainable_params,
            r.interaction_params,
            fmt(&r.delta_target),
            fmt(&r.delta_source),
            r.config_hash,
            r.seed
        ));
    }
    write(
        &cfg.output_root().join(format!("ablate-{axis}.csv")),
        csv.as_bytes(),
    )?;
    Ok(rows)
}

/// `run_adapt` for a strategy object (used by ablation cells whose
/// strategies are not plain presets).
fn run_adapt_with_strategy(
    cfg: &ExperimentConfig,
    strategy: AdaptationStrategy,
) -> Result<AdaptOutcome, PipelineError> {
    // identical to run_adapt but without preset resolution
    let base_path = base_checkpoint_path(cfg);
    let mut model = checkpoint::load_model(&base_path)?;
    let pair = data::make_domain_pair(&cfg.data, cfg.transform, &model.vocab);
    let base_target = trainer::evaluate_benchmarks(&model, &pair.target)?;
    let base_source = trainer::evaluate_benchmarks(&model, &pair.source)?;
    let mut rng = Rng::seed_from(cfg.seed ^ 0xADA7);
    prepare_architecture(&mut model, &strategy, &mut rng)?;
    apply_strategy(&mut model, &strategy);
    let trainable_params = model.trainable_params();
    let pool = data::train_pool(&pair.target);
    let train_report = trainer::train(&mut model, &pool, &cfg.adapt)?;
    let expert_target = trainer::evaluate_benchmarks(&model, &pair.target)?;
    let expert_source = trainer::evaluate_benchmarks(&model, &pair.source)?;
    let pct = |accs: &[(String, f64)]| -> BTreeMap<String, f64> {
        accs.iter().map(|(k, v)| (k.clone(), v * 100.0)).collect()
    };
    let mut base_accs = pct(&base_target);
    base_accs.extend(pct(&base_source));
    let mut expert_accs = pct(&expert_target);
    expert_accs.extend(pct(&expert_source));
    let target_keys: Vec<String> = base_target.iter().map(|(k, _)| k.clone()).collect();
    let source_keys: Vec<String> = base_source.iter().map(|(k, _)| k.clone()).collect();
    let report = metrics::delta_metrics(&base_accs, &expert_accs, &target_keys, &source_keys)?;
    let dir = adapt_dir(cfg, &strategy.name);
    let expert_ckpt = dir.join("expert.ckpt");
    checkpoint::save_model(&model, &expert_ckpt)?;
    Ok(AdaptOutcome {
        report,
        report_path: dir.join("report.json"),
        expert_checkpoint: expert_ckpt,
        trainable_params,
        steps: train_report.steps,
    })
}

/// Pooled embeddings of every paired eval sample under a checkpointed
/// model, written as CSV, plus the (BD, PSD) statistics.
pub struct EmbeddingOutcome {
    pub csv_path: PathBuf,
    pub bd: f64,
    pub psd: f64,
    pub rows: usize,
}

pub fn run_export_embeddings(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_name: &str,
) -> Result<EmbeddingOutcome, PipelineError> {
    if !checkpoint_path.exists() {
        return Err(PipelineError::MissingBase(
            checkpoint_path.display().to_string(),
        ));
    }
    let model = checkpoint::load_model(checkpoint_path)?;
    let pair = data::make_domain_pair(&cfg.data, cfg.transform, &model.vocab);
    let eval_of = |benchmarks: &[Benchmark]| -> Vec<QASample> {
        let mut v: Vec<QASample> = benchmarks
            .iter()
            .flat_map(|b| b.eval().cloned().collect::<Vec<_>>())
            .collect();
        v.sort_by_key(|s| s.pair_id);
        v
    };
    let mut rows: Vec<(u64, String, Vec<f64>)> = Vec::new();
    let mut source_pairs = Vec::new();
    let mut target_pairs = Vec::new();
    for s in eval_of(&pair.source) {
        let e = model.pooled_embedding(&s.video)?;
        source_pairs.push((s.pair_id, e.clone()));
        rows.push((s.pair_id, "source".into(), e));
    }
    for s in eval_of(&pair.target) {
        let e = model.pooled_embedding(&s.video)?;
        target_pairs.push((s.pair_id, e.clone()));
        rows.push((s.pair_id, "target".into(), e));
    }
    let (bd, psd) = metrics::paired_embedding_stats(&source_pairs, &target_pairs)?;
    let csv = metrics::embeddings_to_csv(&rows);
    let csv_path = cfg.output_root().join(format!("{out_name}.csv"));
    write(&csv_path, csv.as_bytes())?;
    let stats = serde_json::json!({ "bd": bd, "psd": psd, "rows": rows.len() });
    write(
        &cfg.output_root().join(format!("{out_name}_stats.json")),
        &to_json(&stats)?,
    )?;
    Ok(EmbeddingOutcome {
        csv_path,
        bd,
        psd,
        rows: rows.len(),
    })
}

/// BD/PSD over an embeddings CSV (raw export or externally projected
/// coordinates in the same column layout).
pub fn stats_from_embeddings_csv(path: &Path) -> Result<(f64, f64), PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(e.to_string()))?;
    let rows = metrics::embeddings_from_csv(&text)?;
    let mut source = Vec::new();
    let mut target = Vec::new();
    for (id, domain, embed) in rows {
        match domain.as_str() {
            "source" => source.push((id, embed)),
            "target" => target.push((id, embed)),
            other => {
                return Err(PipelineError::Io(format!(
                    "unknown domain `{other}` in embeddings csv"
                )))
            }
        }
    }
    Ok(metrics::paired_embedding_stats(&source, &target)?)
}

/// Load and re-validate a written report.
pub fn load_report(path: &Path) -> Result<serde_json::Value, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(e.to_string()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::BadReport(e.to_string()))?;
    schema::validate_report(&doc).map_err(PipelineError::BadReport)?;
    Ok(doc)
}
