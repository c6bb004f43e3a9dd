//! Experiment-runner library behind the `madrag` binary: configuration,
//! artifact writers and the analysis protocols (variant tables, quadrant
//! analysis, sweeps, timing, robustness panels).

pub mod artifacts;
pub mod config;
pub mod runner;

pub use artifacts::{ArtifactMeta, ARTIFACT_VERSION};
pub use config::{DatasetParams, ExperimentConfig, ModelSource};
pub use runner::{
    alpha_sweep, context_quantity_sweep, evaluate_variant, generate_eval_dataset, layer_sweep,
    prepare_weights, quadrant_analysis, robustness_panel, run_experiment,
    run_experiment_with_weights, timing_benchmark, AlphaRow, ChunkSweepRow, LayerSweepRow,
    QuadrantCell, QuadrantReport, RobustnessPanel, RunBundle, TimingReport, TimingRow,
    VariantResult, DISTRACTION_CELL_LABEL,
};
