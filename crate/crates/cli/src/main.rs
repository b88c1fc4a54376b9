//! Reproducible experiment driver: pretrain the base model, run
//! adaptation strategies and ablation sweeps, export embeddings, emit
//! reports. Exit codes: 0 success, 2 config error, 3 numeric abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use viscop_cli::config::ExperimentConfig;
use viscop_cli::pipeline::{self, PipelineError};
use viscop_core::strategy::StrategyPreset;

#[derive(Parser)]
#[command(
    name = "viscop",
    about = "Domain adaptation experiments with visual probes on a desk-scale VLM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model on the source domain and save its checkpoint.
    Pretrain {
        /// Experiment config (TOML). Omit to use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adapt the base model to the target domain under a named strategy.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Strategy preset (see `viscop strategies`).
        #[arg(long)]
        strategy: String,
    },
    /// Sweep one ablation axis: probes | placement | alternatives.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: String,
        /// Audit parameter counts only; skip training.
        #[arg(long)]
        audit_only: bool,
    },
    /// Export pooled embeddings of paired eval samples to CSV with BD/PSD.
    ExportEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to embed with; defaults to the base checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output name under the output root (CSV + stats JSON).
        #[arg(long, default_value = "embeddings")]
        out: String,
    },
    /// Validate and summarize a run report, or compute BD/PSD from an
    /// embeddings CSV (raw or externally projected coordinates).
    Report {
        /// Path to a report.json written by `adapt`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Path to an embeddings CSV.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// List the adaptation strategy presets.
    Strategies,
    /// Print the default configuration as TOML.
    DumpConfig,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, PipelineError> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(&config)?;
            let out = pipeline::run_pretrain(&cfg)?;
            println!("base checkpoint: {}", out.checkpoint.display());
            println!("steps: {}  final loss: {:.6}", out.steps, out.final_loss);
            for (name, acc) in &out.source_accs {
                println!("source accuracy  {name}: {:.2}%", acc * 100.0);
            }
        }
        Command::Adapt { config, strategy } => {
            let cfg = load_config(&config)?;
            let out = pipeline::run_adapt(&cfg, &strategy)?;
            println!("expert checkpoint: {}", out.expert_checkpoint.display());
            println!("report: {}", out.report_path.display());
            for b in &out.report.benchmarks {
                println!(
                    "{:<28} [{}] base {:6.2}%  expert {:6.2}%",
                    b.benchmark, b.split, b.base_acc, b.expert_acc
                );
            }
            println!(
                "delta_target: {:+.2}  delta_source: {:+.2}",
                out.report.delta_target, out.report.delta_source
            );
        }
        Command::Ablate {
            config,
            axis,
            audit_only,
        } => {
            let cfg = load_config(&config)?;
            let rows = pipeline::run_ablate(&cfg, &axis, audit_only)?;
            for r in &rows {
                let deltas = match (r.delta_target, r.delta_source) {
                    (Some(t), Some(s)) => format!("dt {t:+.2} ds {s:+.2}"),
                    _ => "audit only".to_string(),
                };
                println!(
                    "{:<12} {:<22} params {:>8}  {}",
                    r.cell, r.strategy, r.trainable_params, deltas
                );
            }
            println!(
                "wrote {}",
                cfg.output_root().join(format!("ablate-{axis}.csv")).display()
            );
        }
        Command::ExportEmbeddings {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ckpt = checkpoint.unwrap_or_else(|| pipeline::base_checkpoint_path(&cfg));
            let res = pipeline::run_export_embeddings(&cfg, &ckpt, &out)?;
            println!("wrote {} ({} rows)", res.csv_path.display(), res.rows);
            println!("bd: {:.6}  psd: {:.6}", res.bd, res.psd);
        }
        Command::Report { run, embeddings } => match (run, embeddings) {
            (Some(path), _) => {
                let doc = pipeline::load_report(&path)?;
                println!("report ok: {}", path.display());
                println!(
                    "strategy {}  seed {}  steps {}",
                    doc["strategy"].as_str().unwrap_or("?"),
                    doc["seed"],
                    doc["train_steps"]
                );
                println!(
                    "delta_target: {}  delta_source: {}",
                    doc["report"]["delta_target"], doc["report"]["delta_source"]
                );
            }
            (None, Some(path)) => {
                let (bd, psd) = pipeline::stats_from_embeddings_csv(&path)?;
                println!("bd: {bd:.6}  psd: {psd:.6}");
            }
            (None, None) => {
                return Err(PipelineError::Io(
                    "report needs --run <report.json> or --embeddings <csv>".into(),
                ))
            }
        },
        Command::Strategies => {
            for preset in StrategyPreset::all() {
                let s = preset.strategy();
                let groups: Vec<String> = s.groups.iter().map(|g| format!("{g:?}")).collect();
                println!("{:<22} trains: {}", preset.name(), groups.join(", "));
            }
        }
        Command::DumpConfig => {
            print!("{}", ExperimentConfig::default().dump_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
