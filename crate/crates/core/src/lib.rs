//! Toy-scale multimodal autoregressive transformer with attention-mixing
//! interventions and attention-distraction diagnostics.
//!
//! The crate provides a deterministic dense-math decoder stack, prompt and
//! sequence layout handling for retrieval-augmented multimodal inputs, a
//! hook mechanism for rewriting attention during the forward pass, the
//! dual-question attention-mixing intervention itself, instrumentation for
//! modality attention ratios and heatmaps, and a synthetic trainable lookup
//! task used to reproduce the distraction phenomenon end to end.

pub mod error;
pub mod grad;
pub mod instrumentation;
pub mod intervention;
pub mod layout;
pub mod tensor;
pub mod toytask;
pub mod transformer;

pub use error::{Error, Result};
pub use instrumentation::{
    compute_ratios, export_heatmap, filter_sinks, heatmap_to_csv, heatmap_to_pgm,
    reshape_heatmap, select_visual_heads, top_context_tokens, AttentionStats, Heatmap, RatioEntry,
    SinkBaseline, SinkFilterConfig,
};
pub use intervention::{
    apply_intervention, mix_outputs, mix_weights_strict, KeyMap, LayerSpec, MixConfig, MixForm,
    MixIntervention,
};
pub use layout::{
    build_layout, duplicate_question, render_prompt, DatasetStyle, PromptMode, Segment,
    SegmentKind, SequenceLayout, Variant,
};
pub use tensor::{masked_attention, matmul, softmax_rows, CausalMask, Tensor, NEG_SENTINEL};
pub use toytask::{
    closed_book_solve, evaluate, generate_dataset, load_dataset, save_dataset, train, EvalResult,
    TaskVocab, ToySample, TrainConfig, TrainOutcome,
};
pub use transformer::{
    embed_sequence, embed_sequence_with_offset, forward, forward_with_hidden, greedy_decode,
    load_checkpoint, positional_value, save_checkpoint, AttentionHook, AttentionRecord,
    DecodeResult, ForwardTrace, HookContext, HookUpdate, ModelConfig, ModelWeights,
};
