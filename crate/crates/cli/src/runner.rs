//! Experiment runner: variant comparisons, quadrant analysis, sweeps and
//! timing, with deterministic artifact output.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use madrag_core::instrumentation::SinkFilterConfig;
use madrag_core::intervention::{LayerSpec, MixConfig};
use madrag_core::layout::Variant;
use madrag_core::toytask::{self, EvalResult, ToySample};
use madrag_core::transformer::{load_checkpoint, save_checkpoint, ModelWeights};
use madrag_core::{export_heatmap, greedy_decode};
use serde::Serialize;

use crate::artifacts::{
    write_csv, write_heatmap_csv, write_json, write_pgm, ArtifactMeta,
};
use crate::config::{ExperimentConfig, ModelSource};

/// Offset between the training-set seed and the evaluation-set seed, so the
/// two splits never share samples for the same experiment seed.
const EVAL_SEED_OFFSET: u64 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_rho_image: f64,
    pub mean_rho_context: f64,
    #[serde(skip)]
    pub eval: EvalResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunBundle {
    pub config_hash: String,
    pub seed: u64,
    pub train_accuracy: Option<f64>,
    pub results: Vec<VariantResult>,
}

impl RunBundle {
    pub fn result(&self, variant: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant.name())
    }
}

pub fn generate_eval_dataset(cfg: &ExperimentConfig) -> Result<Vec<ToySample>> {
    generate_with_chunks(cfg, cfg.dataset.chunks_per_sample)
}

fn generate_with_chunks(cfg: &ExperimentConfig, chunks: usize) -> Result<Vec<ToySample>> {
    let d = &cfg.dataset;
    Ok(toytask::generate_dataset(
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        d.n_samples,
        d.grid_rows,
        d.grid_cols,
        d.n_symbols,
        chunks,
        d.distractor_fraction,
    )?)
}

/// Train per the config's training source, or load the referenced
/// checkpoint. Training happens on a dedicated closed-book split.
pub fn prepare_weights(cfg: &ExperimentConfig) -> Result<(ModelWeights, Option<f64>)> {
    match &cfg.source {
        ModelSource::Checkpoint(path) => {
            let weights = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if weights.config != cfg.model {
                bail!(
                    "checkpoint model configuration {:?} does not match the requested {:?}",
                    weights.config,
                    cfg.model
                );
            }
            Ok((weights, None))
        }
        ModelSource::Train(tc) => {
            let d = &cfg.dataset;
            // A large training split keeps batches effectively fresh, so the
            // model learns the lookup rule instead of memorizing samples.
            let train_samples = toytask::generate_dataset(
                cfg.seed,
                d.n_samples.max(16384),
                d.grid_rows,
                d.grid_cols,
                d.n_symbols,
                0,
                0.0,
            )?;
            let mut tc = tc.clone();
            tc.seed = cfg.seed;
            let outcome = toytask::train(cfg.model, &train_samples, &tc)?;
            Ok((outcome.weights, Some(outcome.train_accuracy)))
        }
    }
}

pub fn evaluate_variant(
    weights: &ModelWeights,
    samples: &[ToySample],
    variant: Variant,
    mix: &MixConfig,
) -> Result<VariantResult> {
    let mix_arg = (variant == Variant::MadRag).then_some(mix);
    let eval = toytask::evaluate(weights, samples, variant, mix_arg)?;
    Ok(VariantResult {
        variant: variant.name().to_string(),
        n_samples: samples.len(),
        accuracy: eval.accuracy(),
        mean_rho_image: eval.mean_rho_image(),
        mean_rho_context: eval.mean_rho_context(),
        eval,
    })
}

/// Run every configured variant on the evaluation split and emit the result
/// bundle: results.csv, stats.csv, summary.json and per-variant heatmaps.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunBundle> {
    let (weights, train_accuracy) = prepare_weights(cfg)?;
    run_experiment_with_weights(cfg, &weights, train_accuracy)
}

pub fn run_experiment_with_weights(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    train_accuracy: Option<f64>,
) -> Result<RunBundle> {
    let samples = generate_eval_dataset(cfg)?;
    let meta = ArtifactMeta::new(cfg.seed, &cfg.content_hash());
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;

    let mut results = Vec::new();
    for &variant in &cfg.variants {
        let eval_samples: &[ToySample] = &samples;
        results.push(evaluate_variant(weights, eval_samples, variant, &cfg.mix)?);
    }

    write_results_csv(&cfg.out_dir.join("results.csv"), &meta, &results)?;
    write_stats_csv(&cfg.out_dir.join("stats.csv"), &meta, &results)?;
    for (result, &variant) in results.iter().zip(&cfg.variants) {
        if !samples.is_empty() {
            export_sample_heatmap(cfg, weights, &samples[0], variant, &meta)?;
        }
        let _ = result;
    }

    let bundle = RunBundle {
        config_hash: meta.config_hash.clone(),
        seed: cfg.seed,
        train_accuracy,
        results,
    };
    write_summary_json(&cfg.out_dir.join("summary.json"), &meta, &bundle)?;
    Ok(bundle)
}

fn write_results_csv(path: &Path, meta: &ArtifactMeta, results: &[VariantResult]) -> Result<()> {
    let rows: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{},{},{:.12},{:.12},{:.12}",
                r.variant, r.n_samples, r.accuracy, r.mean_rho_image, r.mean_rho_context
            )
        })
        .collect();
    write_csv(
        path,
        meta,
        "variant,n_samples,accuracy,mean_rho_image,mean_rho_context",
        &rows,
    )
}

fn write_stats_csv(path: &Path, meta: &ArtifactMeta, results: &[VariantResult]) -> Result<()> {
    let mut rows = Vec::new();
    for r in results {
        for (sample_id, entry) in r.eval.ratios.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{},{:.12},{:.12}",
                sample_id, r.variant, entry.step, entry.layer, entry.rho_image, entry.rho_context
            ));
        }
    }
    write_csv(
        path,
        meta,
        "sample_id,variant,step,layer,rho_image,rho_context",
        &rows,
    )
}

fn write_summary_json(path: &Path, meta: &ArtifactMeta, bundle: &RunBundle) -> Result<()> {
    #[derive(Serialize)]
    struct VariantSummary<'a> {
        variant: &'a str,
        n_samples: usize,
        accuracy: f64,
        mean_rho_image: f64,
        mean_rho_context: f64,
        correct: &'a [bool],
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        train_accuracy: Option<f64>,
        variants: Vec<VariantSummary<'a>>,
    }
    let summary = Summary {
        train_accuracy: bundle.train_accuracy,
        variants: bundle
            .results
            .iter()
            .map(|r| VariantSummary {
                variant: &r.variant,
                n_samples: r.n_samples,
                accuracy: r.accuracy,
                mean_rho_image: r.mean_rho_image,
                mean_rho_context: r.mean_rho_context,
                correct: &r.eval.correct,
            })
            .collect(),
    };
    write_json(path, meta, &summary)
}

/// Head-averaged image-token attention from the step-1 query row at the
/// last layer, exported as PGM and CSV. Sink filtering is attempted with
/// the default threshold; a degenerate (all-masked) result falls back to
/// the unfiltered map.
fn export_sample_heatmap(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    sample: &ToySample,
    variant: Variant,
    meta: &ArtifactMeta,
) -> Result<()> {
    let layout = toytask::variant_layout(sample, variant)?;
    let tokens = toytask::variant_tokens(sample, variant);
    let hook = if variant == Variant::MadRag {
        Some(madrag_core::MixIntervention::new(
            layout.clone(),
            cfg.mix.clone(),
            weights.config.n_layers,
        )?)
    } else {
        None
    };
    let hook_ref = hook
        .as_ref()
        .map(|h| h as &dyn madrag_core::AttentionHook);
    let decoded = greedy_decode(
        weights,
        &layout,
        &sample.image_features,
        &tokens,
        hook_ref,
        1,
        None,
    )?;
    let trace = &decoded.traces[0];
    let layer = weights.config.n_layers - 1;
    let n_heads = weights.config.n_heads;
    let img = layout.image_range();
    let query = layout.prompt_len() - 1;
    let mut row = vec![0.0; img.len()];
    for head in 0..n_heads {
        let rec = trace.record(layer, head);
        for (slot, col) in img.clone().enumerate() {
            row[slot] += rec.rows.get2(query, col) / n_heads as f64;
        }
    }
    let sink_cfg = SinkFilterConfig::default();
    let map = match export_heatmap(&row, cfg.dataset.grid_rows, cfg.dataset.grid_cols, Some(&sink_cfg))
    {
        Ok(map) => map,
        Err(madrag_core::Error::DegenerateFilter { .. }) => {
            export_heatmap(&row, cfg.dataset.grid_rows, cfg.dataset.grid_cols, None)?
        }
        Err(e) => return Err(e.into()),
    };
    let base = cfg.out_dir.join(format!("heatmap_{}", variant.name()));
    write_pgm(&base.with_extension("pgm"), meta, &map)?;
    write_heatmap_csv(&base.with_extension("csv"), meta, &map)?;
    Ok(())
}

/// Persist trained weights for reuse via `--checkpoint`.
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    save_checkpoint(weights, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Quadrant analysis
// ---------------------------------------------------------------------------

pub const DISTRACTION_CELL_LABEL: &str = "attention-distraction cases";

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct QuadrantCell {
    pub cb_correct: bool,
    pub rag_correct: bool,
    pub n: usize,
    pub method_accuracy: f64,
    /// Method accuracy minus the cell's defining baseline (1 when the RAG
    /// baseline was correct on the cell, 0 otherwise).
    pub delta: f64,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct QuadrantReport {
    pub total: usize,
    pub cells: Vec<QuadrantCell>,
}

/// Partition samples by (closed-book correct?, RAG correct?) and score the
/// method within each cell.
pub fn quadrant_analysis(
    cb_correct: &[bool],
    rag_correct: &[bool],
    method_correct: &[bool],
) -> Result<QuadrantReport> {
    if cb_correct.len() != rag_correct.len() || cb_correct.len() != method_correct.len() {
        bail!(
            "correctness vectors differ in length: {} vs {} vs {}",
            cb_correct.len(),
            rag_correct.len(),
            method_correct.len()
        );
    }
    let mut cells = Vec::with_capacity(4);
    for (cb, rag) in [(true, true), (true, false), (false, true), (false, false)] {
        let members: Vec<usize> = (0..cb_correct.len())
            .filter(|&i| cb_correct[i] == cb && rag_correct[i] == rag)
            .collect();
        let n = members.len();
        let hits = members.iter().filter(|&&i| method_correct[i]).count();
        let method_accuracy = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        let baseline = if rag { 1.0 } else { 0.0 };
        let delta = if n == 0 { 0.0 } else { method_accuracy - baseline };
        let label = if cb && !rag {
            DISTRACTION_CELL_LABEL.to_string()
        } else {
            String::new()
        };
        cells.push(QuadrantCell {
            cb_correct: cb,
            rag_correct: rag,
            n,
            method_accuracy,
            delta,
            label,
        });
    }
    Ok(QuadrantReport {
        total: cb_correct.len(),
        cells,
    })
}

pub fn write_quadrant_csv(path: &Path, meta: &ArtifactMeta, report: &QuadrantReport) -> Result<()> {
    let rows: Vec<String> = report
        .cells
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{:.12},{:.12},{}",
                c.cb_correct, c.rag_correct, c.n, c.method_accuracy, c.delta, c.label
            )
        })
        .collect();
    write_csv(
        path,
        meta,
        "cb_correct,rag_correct,n,method_accuracy,delta,label",
        &rows,
    )
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub mean_rho_image: f64,
}

/// One intervention run per mixing weight.
pub fn alpha_sweep(
    weights: &ModelWeights,
    samples: &[ToySample],
    base_mix: &MixConfig,
    alphas: &[f64],
) -> Result<Vec<AlphaRow>> {
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mix = MixConfig::new(alpha, base_mix.layers.clone(), base_mix.form)?;
        let result = evaluate_variant(weights, samples, Variant::MadRag, &mix)?;
        rows.push(AlphaRow {
            alpha,
            accuracy: result.accuracy,
            mean_rho_image: result.mean_rho_image,
        });
    }
    Ok(rows)
}

pub fn write_alpha_csv(path: &Path, meta: &ArtifactMeta, rows: &[AlphaRow]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.4},{:.12},{:.12}", r.alpha, r.accuracy, r.mean_rho_image))
        .collect();
    write_csv(path, meta, "alpha,accuracy,mean_rho_image", &lines)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSweepRow {
    pub layers: String,
    pub accuracy: f64,
    pub mean_rho_image: f64,
}

/// Intervention restricted to each configured layer preset.
pub fn layer_sweep(
    weights: &ModelWeights,
    samples: &[ToySample],
    base_mix: &MixConfig,
    presets: &[LayerSpec],
) -> Result<Vec<LayerSweepRow>> {
    let mut rows = Vec::with_capacity(presets.len());
    for preset in presets {
        let mix = MixConfig::new(base_mix.alpha, preset.clone(), base_mix.form)?;
        let result = evaluate_variant(weights, samples, Variant::MadRag, &mix)?;
        rows.push(LayerSweepRow {
            layers: format!("{preset:?}").to_lowercase(),
            accuracy: result.accuracy,
            mean_rho_image: result.mean_rho_image,
        });
    }
    Ok(rows)
}

pub fn write_layer_csv(path: &Path, meta: &ArtifactMeta, rows: &[LayerSweepRow]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{:.12},{:.12}", r.layers, r.accuracy, r.mean_rho_image))
        .collect();
    write_csv(path, meta, "layers,accuracy,mean_rho_image", &lines)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkSweepRow {
    pub chunks: usize,
    pub vanilla_accuracy: f64,
    pub vanilla_rho_image: f64,
    pub madrag_accuracy: f64,
    pub madrag_rho_image: f64,
    pub accuracy_gap: f64,
}

/// Accuracy and image-attention ratio for the vanilla layout and the
/// intervention at each retrieved-chunk count.
pub fn context_quantity_sweep(
    cfg: &ExperimentConfig,
    weights: &ModelWeights,
    chunk_counts: &[usize],
) -> Result<Vec<ChunkSweepRow>> {
    let mut rows = Vec::with_capacity(chunk_counts.len());
    for &chunks in chunk_counts {
        let samples = generate_with_chunks(cfg, chunks)?;
        let vanilla = evaluate_variant(weights, &samples, Variant::VanillaRag, &cfg.mix)?;
        let madrag = evaluate_variant(weights, &samples, Variant::MadRag, &cfg.mix)?;
        rows.push(ChunkSweepRow {
            chunks,
            vanilla_accuracy: vanilla.accuracy,
            vanilla_rho_image: vanilla.mean_rho_image,
            madrag_accuracy: madrag.accuracy,
            madrag_rho_image: madrag.mean_rho_image,
            accuracy_gap: madrag.accuracy - vanilla.accuracy,
        });
    }
    Ok(rows)
}

pub fn write_chunk_csv(path: &Path, meta: &ArtifactMeta, rows: &[ChunkSweepRow]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{:.12},{:.12},{:.12},{:.12},{:.12}",
                r.chunks,
                r.vanilla_accuracy,
                r.vanilla_rho_image,
                r.madrag_accuracy,
                r.madrag_rho_image,
                r.accuracy_gap
            )
        })
        .collect();
    write_csv(
        path,
        meta,
        "chunks,vanilla_accuracy,vanilla_rho_image,madrag_accuracy,madrag_rho_image,accuracy_gap",
        &lines,
    )
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub mean_seconds: f64,
    pub ratio_vs_vanilla: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Intervention time over the dual-question no-intervention baseline,
    /// i.e. the overhead at matched total sequence length.
    pub matched_length_ratio: f64,
    pub warmup: usize,
    pub max_new_tokens: usize,
}

/// Wall-clock decode time per variant. Timing output is inherently noisy
/// and is excluded from byte-identity reproducibility claims.
pub fn timing_benchmark(
    weights: &ModelWeights,
    samples: &[ToySample],
    mix: &MixConfig,
    warmup: usize,
    max_new_tokens: usize,
) -> Result<TimingReport> {
    if samples.len() < 100 {
        bail!(
            "timing requires at least 100 samples, got {}",
            samples.len()
        );
    }
    let mut means = Vec::new();
    for &variant in &Variant::ALL {
        let mut total = 0.0;
        for (i, sample) in samples.iter().enumerate() {
            let layout = toytask::variant_layout(sample, variant)?;
            let tokens = toytask::variant_tokens(sample, variant);
            let hook = if variant == Variant::MadRag {
                Some(madrag_core::MixIntervention::new(
                    layout.clone(),
                    mix.clone(),
                    weights.config.n_layers,
                )?)
            } else {
                None
            };
            let hook_ref = hook
                .as_ref()
                .map(|h| h as &dyn madrag_core::AttentionHook);
            let start = Instant::now();
            greedy_decode(
                weights,
                &layout,
                &sample.image_features,
                &tokens,
                hook_ref,
                max_new_tokens,
                None,
            )?;
            let elapsed = start.elapsed().as_secs_f64();
            if i >= warmup {
                total += elapsed;
            }
        }
        let counted = samples.len() - warmup.min(samples.len());
        means.push((variant, total / counted as f64));
    }
    let vanilla = means
        .iter()
        .find(|(v, _)| *v == Variant::VanillaRag)
        .map(|(_, m)| *m)
        .unwrap();
    let dualq = means
        .iter()
        .find(|(v, _)| *v == Variant::DualQuestionNoInt)
        .map(|(_, m)| *m)
        .unwrap();
    let madrag = means
        .iter()
        .find(|(v, _)| *v == Variant::MadRag)
        .map(|(_, m)| *m)
        .unwrap();
    Ok(TimingReport {
        rows: means
            .into_iter()
            .map(|(variant, mean_seconds)| TimingRow {
                variant: variant.name().to_string(),
                mean_seconds,
                ratio_vs_vanilla: mean_seconds / vanilla,
            })
            .collect(),
        matched_length_ratio: madrag / dualq,
        warmup,
        max_new_tokens,
    })
}

pub fn write_timing_csv(path: &Path, meta: &ArtifactMeta, report: &TimingReport) -> Result<()> {
    let lines: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{},{:.9},{:.4}", r.variant, r.mean_seconds, r.ratio_vs_vanilla))
        .collect();
    write_csv(path, meta, "variant,mean_seconds,ratio_vs_vanilla", &lines)
}

// ---------------------------------------------------------------------------
// Robustness panel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rho_drop: bool,
    pub accuracy_drop: bool,
    pub intervention_recovers: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessPanel {
    pub outcomes: Vec<SeedOutcome>,
    pub rho_drop_count: usize,
    pub accuracy_drop_count: usize,
    pub intervention_recovers_count: usize,
}

/// Re-run the three directional distraction claims across seeds. Directions
/// are asserted only on the fixed acceptance seed; other seeds are reported
/// here with pass counts.
pub fn robustness_panel(base: &ExperimentConfig, seeds: &[u64]) -> Result<RobustnessPanel> {
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.variants = vec![Variant::ClosedBook, Variant::VanillaRag, Variant::MadRag];
        let (weights, _) = prepare_weights(&cfg)?;
        let samples = generate_eval_dataset(&cfg)?;
        let cb = evaluate_variant(&weights, &samples, Variant::ClosedBook, &cfg.mix)?;
        let vr = evaluate_variant(&weights, &samples, Variant::VanillaRag, &cfg.mix)?;
        let mr = evaluate_variant(&weights, &samples, Variant::MadRag, &cfg.mix)?;
        outcomes.push(SeedOutcome {
            seed,
            rho_drop: vr.mean_rho_image < cb.mean_rho_image,
            accuracy_drop: vr.accuracy < cb.accuracy,
            intervention_recovers: mr.accuracy >= vr.accuracy,
        });
    }
    let count = |f: fn(&SeedOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    Ok(RobustnessPanel {
        rho_drop_count: count(|o| o.rho_drop),
        accuracy_drop_count: count(|o| o.accuracy_drop),
        intervention_recovers_count: count(|o| o.intervention_recovers),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_cells_partition_the_samples() {
        let cb = [true, true, false, false];
        let rag = [true, false, true, false];
        let method = [true, true, false, false];
        let report = quadrant_analysis(&cb, &rag, &method).unwrap();
        assert_eq!(report.total, 4);
        assert!(report.cells.iter().all(|c| c.n == 1));
        let total: usize = report.cells.iter().map(|c| c.n).sum();
        assert_eq!(total, report.total);
    }

    #[test]
    fn quadrant_method_equal_to_rag_has_zero_deltas() {
        let cb = [true, false, true, false, true];
        let rag = [true, true, false, false, true];
        let report = quadrant_analysis(&cb, &rag, &rag).unwrap();
        for cell in &report.cells {
            assert_eq!(cell.delta, 0.0, "cell {cell:?}");
        }
    }

    #[test]
    fn quadrant_labels_the_distraction_cell() {
        let report = quadrant_analysis(&[true], &[false], &[true]).unwrap();
        let cell = report
            .cells
            .iter()
            .find(|c| c.cb_correct && !c.rag_correct)
            .unwrap();
        assert_eq!(cell.label, DISTRACTION_CELL_LABEL);
        assert_eq!(cell.n, 1);
        assert_eq!(cell.delta, 1.0);
    }

    #[test]
    fn quadrant_rejects_mismatched_lengths() {
        assert!(quadrant_analysis(&[true], &[true, false], &[true]).is_err());
    }
}
