//! Synthetic multimodal lookup task plus a tiny trainer.
//!
//! Each sample encodes a grid of cells as image features (one-hot symbol
//! plus positional channels), a question addressing one cell, the symbol at
//! that cell as the answer, and zero or more context chunks that either
//! restate the answer or assert a false (address, symbol) fact. The task is
//! closed-book solvable by construction, which is what lets retrieved
//! distractors demonstrate attention distraction at desk scale.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrumentation::{compute_ratios, RatioEntry};
use crate::intervention::{MixConfig, MixIntervention};
use crate::layout::{build_layout, SequenceLayout, Variant};
use crate::tensor::Tensor;
use crate::transformer::{greedy_decode, AttentionHook, ModelConfig, ModelWeights};

/// Symbolic vocabulary for the lookup task: a few reserved ids, then row
/// address tokens, column address tokens and symbol tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVocab {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_symbols: usize,
}

impl TaskVocab {
    pub const PAD: u32 = 0;
    pub const EOS: u32 = 1;
    pub const ASK: u32 = 2;
    const RESERVED: usize = 4;

    pub fn row_token(&self, r: usize) -> u32 {
        (Self::RESERVED + r) as u32
    }

    pub fn col_token(&self, c: usize) -> u32 {
        (Self::RESERVED + self.grid_rows + c) as u32
    }

    pub fn symbol_token(&self, s: usize) -> u32 {
        (Self::RESERVED + self.grid_rows + self.grid_cols + s) as u32
    }

    pub fn required_vocab(&self) -> usize {
        Self::RESERVED + self.grid_rows + self.grid_cols + self.n_symbols
    }

    /// Width of one image-cell feature vector: one-hot symbol plus one-hot
    /// row and column channels.
    pub fn patch_dim(&self) -> usize {
        self.n_symbols + self.grid_rows + self.grid_cols
    }

    /// Question token triple for cell (r, c); the trailing ASK token is the
    /// prediction site.
    pub fn question_tokens(&self, r: usize, c: usize) -> Vec<u32> {
        vec![self.row_token(r), self.col_token(c), Self::ASK]
    }

    pub const QUESTION_LEN: usize = 3;
    pub const CHUNK_LEN: usize = 3;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub image_features: Tensor,
    pub question_tokens: Vec<u32>,
    pub answer_token: u32,
    pub context_tokens: Vec<u32>,
    pub vocab: TaskVocab,
}

impl ToySample {
    pub fn image_token_count(&self) -> usize {
        self.image_features.shape()[0]
    }
}

/// Decode the answer from image features and question alone: find the cell
/// whose positional channels match the addressed (row, col) and read its
/// symbol channels. This is the closed-book solvability oracle.
pub fn closed_book_solve(sample: &ToySample) -> Result<u32> {
    let vocab = &sample.vocab;
    let r = sample.question_tokens[0] as usize - 4;
    let c = sample.question_tokens[1] as usize - 4 - vocab.grid_rows;
    let v = sample.image_token_count();
    for cell in 0..v {
        let feat = sample.image_features.row(cell);
        let row_on = feat[vocab.n_symbols + r] > 0.5;
        let col_on = feat[vocab.n_symbols + vocab.grid_rows + c] > 0.5;
        if row_on && col_on {
            let (best, _) = feat[..vocab.n_symbols]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            return Ok(vocab.symbol_token(best));
        }
    }
    Err(Error::Dataset("no cell matches the question address".into()))
}

/// Deterministic synthetic dataset. `distractor_fraction` of each sample's
/// chunks assert a false symbol for some cell; the rest restate the true
/// (address, answer) pair.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    seed: u64,
    n_samples: usize,
    grid_rows: usize,
    grid_cols: usize,
    n_symbols: usize,
    chunks_per_sample: usize,
    distractor_fraction: f64,
) -> Result<Vec<ToySample>> {
    if n_symbols < 2 {
        return Err(Error::Dataset("n_symbols must be >= 2".into()));
    }
    if grid_rows < 1 || grid_cols < 1 {
        return Err(Error::Dataset("grid must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&distractor_fraction) {
        return Err(Error::Dataset(format!(
            "distractor_fraction {distractor_fraction} outside [0, 1]"
        )));
    }
    let vocab = TaskVocab {
        grid_rows,
        grid_cols,
        n_symbols,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = grid_rows * grid_cols;
    let n_distractors = (distractor_fraction * chunks_per_sample as f64).round() as usize;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let grid: Vec<usize> = (0..v).map(|_| rng.random_range(0..n_symbols)).collect();
        let qr = rng.random_range(0..grid_rows);
        let qc = rng.random_range(0..grid_cols);
        let answer_sym = grid[qr * grid_cols + qc];

        let mut data = Vec::with_capacity(v * vocab.patch_dim());
        for r in 0..grid_rows {
            for c in 0..grid_cols {
                let mut feat = vec![0.0; vocab.patch_dim()];
                feat[grid[r * grid_cols + c]] = 1.0;
                feat[n_symbols + r] = 1.0;
                feat[n_symbols + grid_rows + c] = 1.0;
                data.extend_from_slice(&feat);
            }
        }
        let image_features = Tensor::from_vec(&[v, vocab.patch_dim()], data)?;

        let mut chunk_is_distractor = vec![false; chunks_per_sample];
        for flag in chunk_is_distractor.iter_mut().take(n_distractors) {
            *flag = true;
        }
        chunk_is_distractor.shuffle(&mut rng);

        let mut context_tokens = Vec::with_capacity(chunks_per_sample * TaskVocab::CHUNK_LEN);
        for &distract in &chunk_is_distractor {
            if distract {
                // A false statement about some cell: never the true symbol
                // for that address, hence never the true (address, symbol)
                // pair either.
                let dr = rng.random_range(0..grid_rows);
                let dc = rng.random_range(0..grid_cols);
                let truth = grid[dr * grid_cols + dc];
                let mut sym = rng.random_range(0..n_symbols);
                while sym == truth {
                    sym = rng.random_range(0..n_symbols);
                }
                context_tokens.extend([
                    vocab.row_token(dr),
                    vocab.col_token(dc),
                    vocab.symbol_token(sym),
                ]);
            } else {
                context_tokens.extend([
                    vocab.row_token(qr),
                    vocab.col_token(qc),
                    vocab.symbol_token(answer_sym),
                ]);
            }
        }

        samples.push(ToySample {
            image_features,
            question_tokens: vocab.question_tokens(qr, qc),
            answer_token: vocab.symbol_token(answer_sym),
            context_tokens,
            vocab,
        });
    }
    Ok(samples)
}

/// Line-delimited JSON serialization.
pub fn save_dataset(samples: &[ToySample], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for s in samples {
        writeln!(file, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<ToySample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gradient_check: bool,
    /// Random positional offset range applied per training sample, so the
    /// model stays usable at the longer eval-time layouts.
    pub position_jitter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            steps: 6000,
            batch_size: 32,
            seed: 0,
            gradient_check: false,
            position_jitter: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Adam over explicit backprop gradients, cross-entropy on the answer token
/// at the closed-book prediction site.
pub fn train(config: ModelConfig, samples: &[ToySample], tc: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if tc.learning_rate <= 0.0 || tc.steps < 1 || tc.batch_size < 1 {
        return Err(Error::Dataset(
            "learning rate must be > 0 and steps/batch >= 1".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let vocab = samples[0].vocab;
    if vocab.required_vocab() > config.vocab_size {
        return Err(Error::Dataset(format!(
            "task needs vocab {} but model has {}",
            vocab.required_vocab(),
            config.vocab_size
        )));
    }
    if vocab.patch_dim() != config.image_patch_dim {
        return Err(Error::Dataset(format!(
            "task patch dim {} != model image_patch_dim {}",
            vocab.patch_dim(),
            config.image_patch_dim
        )));
    }

    let mut weights = ModelWeights::random(config, tc.seed)?;
    let mut m = weights.zeros_like();
    let mut vbuf = weights.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed));
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let layout_for = |s: &ToySample| -> Result<SequenceLayout> {
        build_layout(
            Variant::ClosedBook,
            s.image_token_count(),
            s.question_tokens.len(),
            0,
            0,
        )
    };

    if tc.gradient_check {
        run_gradient_check(&weights, &samples[0], &layout_for(&samples[0])?)?;
    }

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..tc.steps {
        let mut grads = weights.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let layout = layout_for(s)?;
            let offset = if tc.position_jitter > 0 {
                rng.random_range(0..=tc.position_jitter)
            } else {
                0
            };
            batch_loss += crate::grad::accumulate_loss_and_grads(
                &weights,
                &layout,
                &s.image_features,
                &s.question_tokens,
                offset,
                layout.total_len() - 1,
                s.answer_token,
                &mut grads,
            )?;
        }
        batch_loss /= tc.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
            });
        }
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;

        let t = (step + 1) as f64;
        let corr1 = 1.0 - beta1.powf(t);
        let corr2 = 1.0 - beta2.powf(t);
        let scale = 1.0 / tc.batch_size as f64;
        let mut w_params = weights.named_params_mut();
        let mut m_params = m.named_params_mut();
        let mut v_params = vbuf.named_params_mut();
        let g_params = grads.named_params();
        for i in 0..w_params.len() {
            let w = w_params[i].1.data_mut();
            let mb = m_params[i].1.data_mut();
            let vb = v_params[i].1.data_mut();
            let g = g_params[i].1.data();
            for j in 0..w.len() {
                let gj = g[j] * scale;
                mb[j] = beta1 * mb[j] + (1.0 - beta1) * gj;
                vb[j] = beta2 * vb[j] + (1.0 - beta2) * gj * gj;
                let mhat = mb[j] / corr1;
                let vhat = vb[j] / corr2;
                w[j] -= tc.learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    // Training accuracy on (a prefix of) the training set.
    let probe = &samples[..samples.len().min(512)];
    let eval = evaluate(&weights, probe, Variant::ClosedBook, None)?;
    Ok(TrainOutcome {
        weights,
        initial_loss,
        final_loss,
        train_accuracy: eval.accuracy(),
    })
}

fn run_gradient_check(
    weights: &ModelWeights,
    sample: &ToySample,
    layout: &SequenceLayout,
) -> Result<()> {
    let mut grads = weights.zeros_like();
    let target_pos = layout.total_len() - 1;
    crate::grad::accumulate_loss_and_grads(
        weights,
        layout,
        &sample.image_features,
        &sample.question_tokens,
        0,
        target_pos,
        sample.answer_token,
        &mut grads,
    )?;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names: Vec<(String, usize)> = weights
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    for _ in 0..10 {
        let (name, len) = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..*len);
        let probe = |delta: f64| -> Result<f64> {
            let mut w = weights.clone();
            for (n, t) in w.named_params_mut() {
                if n == *name {
                    t.data_mut()[idx] += delta;
                }
            }
            crate::grad::sample_loss(
                &w,
                layout,
                &sample.image_features,
                &sample.question_tokens,
                0,
                target_pos,
                sample.answer_token,
            )
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        let analytic = grads
            .named_params()
            .iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1
            .data()[idx];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        if (analytic - numeric).abs() / denom > 1e-4 {
            return Err(Error::Dataset(format!(
                "gradient check failed at {name}[{idx}]: analytic {analytic}, numeric {numeric}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub correct: Vec<bool>,
    pub predicted: Vec<u32>,
    pub ratios: Vec<RatioEntry>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }

    pub fn mean_rho_image(&self) -> f64 {
        self.ratios.iter().map(|r| r.rho_image).sum::<f64>() / self.ratios.len().max(1) as f64
    }

    pub fn mean_rho_context(&self) -> f64 {
        self.ratios.iter().map(|r| r.rho_context).sum::<f64>() / self.ratios.len().max(1) as f64
    }
}

/// Assemble the text-token stream for a sample under a variant (question and
/// context placed per the layout; image positions carry features, not
/// tokens).
pub fn variant_tokens(sample: &ToySample, variant: Variant) -> Vec<u32> {
    let q = &sample.question_tokens;
    let c = &sample.context_tokens;
    match variant {
        Variant::ClosedBook => q.clone(),
        Variant::VanillaRag => q.iter().chain(c.iter()).copied().collect(),
        Variant::SwapQc => c.iter().chain(q.iter()).copied().collect(),
        Variant::DualQuestionNoInt | Variant::MadRag => {
            q.iter().chain(c.iter()).chain(q.iter()).copied().collect()
        }
    }
}

pub fn variant_layout(sample: &ToySample, variant: Variant) -> Result<SequenceLayout> {
    let cn = match variant {
        Variant::ClosedBook => 0,
        _ => sample.context_tokens.len(),
    };
    build_layout(
        variant,
        sample.image_token_count(),
        sample.question_tokens.len(),
        cn,
        0,
    )
}

/// Greedy-decode one answer token per sample and capture the last-layer
/// head-averaged attention ratios of the first decode step.
pub fn evaluate(
    weights: &ModelWeights,
    samples: &[ToySample],
    variant: Variant,
    mix: Option<&MixConfig>,
) -> Result<EvalResult> {
    let n_layers = weights.config.n_layers;
    let mut correct = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut ratios = Vec::with_capacity(samples.len());
    for sample in samples {
        let layout = variant_layout(sample, variant)?;
        let tokens = variant_tokens(sample, variant);
        let hook: Option<MixIntervention> = if variant == Variant::MadRag {
            let cfg = mix.cloned().unwrap_or_default();
            Some(MixIntervention::new(layout.clone(), cfg, n_layers)?)
        } else {
            None
        };
        let hook_ref: Option<&dyn AttentionHook> =
            hook.as_ref().map(|h| h as &dyn AttentionHook);
        let result = greedy_decode(
            weights,
            &layout,
            &sample.image_features,
            &tokens,
            hook_ref,
            1,
            None,
        )?;
        let answer = result.tokens[0];
        predicted.push(answer);
        correct.push(answer == sample.answer_token);
        ratios.push(compute_ratios(
            &result.traces[0],
            &layout,
            1,
            n_layers - 1,
            true,
        )?);
    }
    Ok(EvalResult {
        correct,
        predicted,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(9, 20, 4, 4, 8, 3, 0.5).unwrap();
        let b = generate_dataset(9, 20, 4, 4, 8, 3, 0.5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(10, 20, 4, 4, 8, 3, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn closed_book_solvable_for_all_samples() {
        let samples = generate_dataset(3, 100, 4, 4, 16, 4, 1.0).unwrap();
        for s in &samples {
            assert_eq!(closed_book_solve(s).unwrap(), s.answer_token);
        }
    }

    #[test]
    fn zero_distractor_fraction_restates_answer() {
        let samples = generate_dataset(5, 30, 3, 3, 4, 4, 0.0).unwrap();
        for s in &samples {
            for chunk in s.context_tokens.chunks(TaskVocab::CHUNK_LEN) {
                assert_eq!(chunk[0], s.question_tokens[0]);
                assert_eq!(chunk[1], s.question_tokens[1]);
                assert_eq!(chunk[2], s.answer_token);
            }
        }
    }

    #[test]
    fn distractors_never_state_a_true_pair() {
        let samples = generate_dataset(5, 50, 3, 3, 5, 4, 1.0).unwrap();
        for s in &samples {
            let v = s.vocab;
            for chunk in s.context_tokens.chunks(TaskVocab::CHUNK_LEN) {
                let r = chunk[0] as usize - 4;
                let c = chunk[1] as usize - 4 - v.grid_rows;
                let sym = chunk[2];
                let feat = s.image_features.row(r * v.grid_cols + c);
                let (truth, _) = feat[..v.n_symbols]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                assert_ne!(sym, v.symbol_token(truth));
            }
        }
    }

    #[test]
    fn empty_context_usable_for_closed_book_only() {
        let samples = generate_dataset(1, 5, 2, 2, 3, 0, 0.0).unwrap();
        assert!(samples.iter().all(|s| s.context_tokens.is_empty()));
        assert!(variant_layout(&samples[0], Variant::ClosedBook).is_ok());
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let samples = generate_dataset(2, 10, 3, 3, 4, 2, 0.5).unwrap();
        save_dataset(&samples, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), samples);
    }

    fn small_config(vocab: &TaskVocab) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_k: 8,
            d_ff: 32,
            vocab_size: vocab.required_vocab().max(16),
            max_seq: 64,
            image_patch_dim: vocab.patch_dim(),
        }
    }

    #[test]
    fn constant_answer_trains_to_near_zero_loss() {
        let mut samples = generate_dataset(4, 64, 2, 2, 3, 0, 0.0).unwrap();
        let constant = samples[0].vocab.symbol_token(0);
        for s in &mut samples {
            s.answer_token = constant;
        }
        let tc = TrainConfig {
            steps: 150,
            batch_size: 8,
            position_jitter: 0,
            ..Default::default()
        };
        let outcome = train(small_config(&samples[0].vocab), &samples, &tc).unwrap();
        assert!(outcome.final_loss < 0.1, "loss {}", outcome.final_loss);
    }

    #[test]
    fn training_reduces_loss() {
        let samples = generate_dataset(8, 256, 2, 2, 4, 0, 0.0).unwrap();
        let tc = TrainConfig {
            steps: 120,
            batch_size: 8,
            ..Default::default()
        };
        let outcome = train(small_config(&samples[0].vocab), &samples, &tc).unwrap();
        assert!(outcome.final_loss < outcome.initial_loss);
    }

    #[test]
    fn gradient_check_flag_passes() {
        let samples = generate_dataset(8, 16, 2, 2, 3, 0, 0.0).unwrap();
        let tc = TrainConfig {
            steps: 1,
            batch_size: 2,
            gradient_check: true,
            ..Default::default()
        };
        train(small_config(&samples[0].vocab), &samples, &tc).unwrap();
    }
}
