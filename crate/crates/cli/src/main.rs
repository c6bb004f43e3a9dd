//! `madrag` — experiment runner for the toy multimodal RAG testbed.
//!
//! Exit code 0 on success; on failure a machine-readable error JSON is
//! written to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, ValueEnum};
use madrag_core::intervention::{LayerSpec, MixConfig, MixForm};
use madrag_core::layout::Variant;
use madrag_core::toytask::TrainConfig;
use madrag_core::transformer::ModelConfig;
use madrag_cli::{
    artifacts::{write_json, ArtifactMeta},
    config::{DatasetParams, ExperimentConfig, ModelSource},
    runner,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Closedbook,
    Rag,
    Swap,
    Dualq,
    Madrag,
}

impl ModeArg {
    fn variant(self) -> Variant {
        match self {
            ModeArg::Closedbook => Variant::ClosedBook,
            ModeArg::Rag => Variant::VanillaRag,
            ModeArg::Swap => Variant::SwapQc,
            ModeArg::Dualq => Variant::DualQuestionNoInt,
            ModeArg::Madrag => Variant::MadRag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormArg {
    OutputMix,
    StrictWeightMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportArg {
    Table,
    Quadrant,
    Sweep,
    Timing,
    Robustness,
}

#[derive(Parser, Debug)]
#[command(
    name = "madrag",
    about = "Toy multimodal RAG attention-intervention experiment runner"
)]
struct Args {
    /// Input layout variants to evaluate; defaults to all five.
    #[arg(long, value_enum)]
    mode: Vec<ModeArg>,

    /// Attention mixing weight for the intervention.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,

    /// Intervention layers: all, early, middle, later, or comma-separated
    /// indices like 0,1.
    #[arg(long, default_value = "all")]
    layers: String,

    /// Mixing form.
    #[arg(long, value_enum, default_value_t = FormArg::OutputMix)]
    form: FormArg,

    /// Experiment seed; fixed and recorded in every output artifact.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Retrieved chunks per sample in the evaluation split.
    #[arg(long, default_value_t = 4)]
    chunks: usize,

    /// Fraction of chunks that are distractors.
    #[arg(long = "distractor-frac", default_value_t = 1.0)]
    distractor_frac: f64,

    /// Evaluation samples.
    #[arg(long, default_value_t = 200)]
    samples: usize,

    /// Output directory for CSV/JSON/PGM artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Train a fresh model (the default when no checkpoint is given).
    #[arg(long, conflicts_with = "checkpoint")]
    train: bool,

    /// Training steps when training.
    #[arg(long = "train-steps", default_value_t = 6000)]
    train_steps: usize,

    /// Load weights from a checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Save the (trained) weights to this path.
    #[arg(long = "save-checkpoint")]
    save_checkpoint: Option<PathBuf>,

    /// Which analysis to run.
    #[arg(long, value_enum, default_value_t = ReportArg::Table)]
    report: ReportArg,

    /// Seeds for the robustness panel report.
    #[arg(long = "panel-seeds", value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
    panel_seeds: Vec<u64>,
}

fn parse_layers(text: &str) -> Result<LayerSpec> {
    match text.to_ascii_lowercase().as_str() {
        "all" => Ok(LayerSpec::All),
        "early" => Ok(LayerSpec::Early),
        "middle" => Ok(LayerSpec::Middle),
        "later" => Ok(LayerSpec::Later),
        other => {
            let indices: std::result::Result<Vec<usize>, _> =
                other.split(',').map(|s| s.trim().parse::<usize>()).collect();
            match indices {
                Ok(list) if !list.is_empty() => Ok(LayerSpec::Explicit(list)),
                _ => bail!(
                    "invalid --layers value '{text}': expected all, early, middle, later, \
                     or comma-separated indices"
                ),
            }
        }
    }
}

fn build_config(args: &Args) -> Result<ExperimentConfig> {
    let variants: Vec<Variant> = if args.mode.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.mode.iter().map(|m| m.variant()).collect()
    };
    let form = match args.form {
        FormArg::OutputMix => MixForm::OutputMix,
        FormArg::StrictWeightMix => MixForm::StrictWeightMix,
    };
    let mix = MixConfig::new(args.alpha, parse_layers(&args.layers)?, form)?;
    let source = match &args.checkpoint {
        Some(path) => ModelSource::Checkpoint(path.clone()),
        None => ModelSource::Train(TrainConfig {
            steps: args.train_steps,
            seed: args.seed,
            ..TrainConfig::default()
        }),
    };
    Ok(ExperimentConfig {
        dataset: DatasetParams {
            n_samples: args.samples,
            chunks_per_sample: args.chunks,
            distractor_fraction: args.distractor_frac,
            ..DatasetParams::default()
        },
        model: ModelConfig::tiny(),
        source,
        variants,
        mix,
        seed: args.seed,
        out_dir: args.out.clone(),
        ..ExperimentConfig::default()
    })
}

fn run(args: &Args) -> Result<()> {
    let cfg = build_config(args)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let meta = ArtifactMeta::new(cfg.seed, &cfg.content_hash());
    let (weights, train_accuracy) = runner::prepare_weights(&cfg)?;
    if let Some(path) = &args.save_checkpoint {
        runner::save_weights(&weights, path)?;
    }
    match args.report {
        ReportArg::Table => {
            let bundle = runner::run_experiment_with_weights(&cfg, &weights, train_accuracy)?;
            for r in &bundle.results {
                println!(
                    "{:<22} acc={:.4} rho_image={:.4} rho_context={:.4}",
                    r.variant, r.accuracy, r.mean_rho_image, r.mean_rho_context
                );
            }
        }
        ReportArg::Quadrant => {
            let samples = runner::generate_eval_dataset(&cfg)?;
            let cb = runner::evaluate_variant(&weights, &samples, Variant::ClosedBook, &cfg.mix)?;
            let rag = runner::evaluate_variant(&weights, &samples, Variant::VanillaRag, &cfg.mix)?;
            let method = runner::evaluate_variant(&weights, &samples, Variant::MadRag, &cfg.mix)?;
            let report = runner::quadrant_analysis(
                &cb.eval.correct,
                &rag.eval.correct,
                &method.eval.correct,
            )?;
            runner::write_quadrant_csv(&cfg.out_dir.join("quadrant.csv"), &meta, &report)?;
            write_json(&cfg.out_dir.join("quadrant.json"), &meta, &report)?;
            for cell in &report.cells {
                println!(
                    "cb={} rag={} n={} method_acc={:.4} delta={:+.4} {}",
                    cell.cb_correct,
                    cell.rag_correct,
                    cell.n,
                    cell.method_accuracy,
                    cell.delta,
                    cell.label
                );
            }
        }
        ReportArg::Sweep => {
            let samples = runner::generate_eval_dataset(&cfg)?;
            let alpha_rows = runner::alpha_sweep(&weights, &samples, &cfg.mix, &cfg.alphas)?;
            runner::write_alpha_csv(&cfg.out_dir.join("alpha_sweep.csv"), &meta, &alpha_rows)?;
            let layer_rows = runner::layer_sweep(&weights, &samples, &cfg.mix, &cfg.layer_presets)?;
            runner::write_layer_csv(&cfg.out_dir.join("layer_sweep.csv"), &meta, &layer_rows)?;
            let chunk_rows = runner::context_quantity_sweep(&cfg, &weights, &cfg.chunk_counts)?;
            runner::write_chunk_csv(&cfg.out_dir.join("chunk_sweep.csv"), &meta, &chunk_rows)?;
            for r in &alpha_rows {
                println!("alpha={:.2} acc={:.4} rho_image={:.4}", r.alpha, r.accuracy, r.mean_rho_image);
            }
            for r in &chunk_rows {
                println!(
                    "chunks={} vanilla_acc={:.4} madrag_acc={:.4} gap={:+.4}",
                    r.chunks, r.vanilla_accuracy, r.madrag_accuracy, r.accuracy_gap
                );
            }
        }
        ReportArg::Timing => {
            let samples = runner::generate_eval_dataset(&cfg)?;
            let report = runner::timing_benchmark(&weights, &samples, &cfg.mix, 3, 4)?;
            runner::write_timing_csv(&cfg.out_dir.join("timing.csv"), &meta, &report)?;
            for r in &report.rows {
                println!(
                    "{:<22} {:.6}s/sample  {:.2}x vs vanilla",
                    r.variant, r.mean_seconds, r.ratio_vs_vanilla
                );
            }
            println!("matched-length ratio: {:.2}x", report.matched_length_ratio);
        }
        ReportArg::Robustness => {
            let panel = runner::robustness_panel(&cfg, &args.panel_seeds)?;
            write_json(&cfg.out_dir.join("robustness.json"), &meta, &panel)?;
            println!(
                "rho drop {}/{}  accuracy drop {}/{}  intervention recovers {}/{}",
                panel.rho_drop_count,
                panel.outcomes.len(),
                panel.accuracy_drop_count,
                panel.outcomes.len(),
                panel.intervention_recovers_count,
                panel.outcomes.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": {
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
