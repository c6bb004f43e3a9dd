//! Small pre-norm decoder stack with image-token embedding, full attention
//! capture, greedy decoding and a hook point where interventions rewrite
//! per-head attention outputs before the output projection.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::tensor::{matmul, CausalMask, Tensor};

pub const LN_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub image_patch_dim: usize,
}

impl ModelConfig {
    /// 2-layer, 2-head preset: trainable in seconds, attention matrices
    /// small enough for exhaustive oracles.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_k: 16,
            d_ff: 64,
            vocab_size: 64,
            max_seq: 128,
            image_patch_dim: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::InvalidShape {
                op: "ModelConfig",
                reason: format!(
                    "d_model {} != n_heads {} * d_k {}",
                    self.d_model, self.n_heads, self.d_k
                ),
            });
        }
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("image_patch_dim", self.image_patch_dim),
        ] {
            if v < 1 {
                return Err(Error::InvalidShape {
                    op: "ModelConfig",
                    reason: format!("{name} must be >= 1"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embedding table `[vocab x d_model]`.
    pub embed: Tensor,
    /// Image feature projector `[image_patch_dim x d_model]`.
    pub img_proj: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// Untied output head `[d_model x vocab]` plus bias.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl ModelWeights {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |shape: &[usize], scale: f64| {
            let n: usize = shape.iter().product();
            // Box-Muller keeps us off the rand_distr dependency.
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    scale
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        let scale = 0.08;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: normal(&[d, d], scale),
                wk: normal(&[d, d], scale),
                wv: normal(&[d, d], scale),
                wo: normal(&[d, d], scale),
                ln1_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap(),
                ln1_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap(),
                ln2_b: Tensor::zeros(&[d]),
                w1: normal(&[d, config.d_ff], scale),
                b1: Tensor::zeros(&[config.d_ff]),
                w2: normal(&[config.d_ff, d], scale),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        // Content embeddings start at unit scale so token and image content
        // is not drowned out by the unit-amplitude positional encoding.
        Ok(ModelWeights {
            config,
            embed: normal(&[config.vocab_size, d], 1.0),
            img_proj: normal(&[config.image_patch_dim, d], 1.0),
            layers,
            lnf_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap(),
            lnf_b: Tensor::zeros(&[d]),
            w_out: normal(&[d, config.vocab_size], scale),
            b_out: Tensor::zeros(&[config.vocab_size]),
        })
    }

    /// Same shapes, all zeros. Used for gradient and optimizer state buffers.
    pub fn zeros_like(&self) -> ModelWeights {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        ModelWeights {
            config: self.config,
            embed: z(&self.embed),
            img_proj: z(&self.img_proj),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ln1_g: z(&l.ln1_g),
                    ln1_b: z(&l.ln1_b),
                    ln2_g: z(&l.ln2_g),
                    ln2_b: z(&l.ln2_b),
                    w1: z(&l.w1),
                    b1: z(&l.b1),
                    w2: z(&l.w2),
                    b2: z(&l.b2),
                })
                .collect(),
            lnf_g: z(&self.lnf_g),
            lnf_b: z(&self.lnf_b),
            w_out: z(&self.w_out),
            b_out: z(&self.b_out),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("img_proj".into(), &self.img_proj),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("img_proj".into(), &mut self.img_proj),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Post-softmax attention rows for one (layer, head) of a captured forward
/// pass. Rows of intervened layers reflect the intervention.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub rows: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub records: Vec<AttentionRecord>,
    /// Post-block hidden states per layer, captured only when requested.
    pub hidden: Option<Vec<Tensor>>,
}

impl ForwardTrace {
    pub fn record(&self, layer: usize, head: usize) -> &AttentionRecord {
        let n_heads = self.records.iter().filter(|r| r.layer == 0).count();
        &self.records[layer * n_heads + head]
    }
}

/// Per-head view handed to an attention hook: post-softmax weights, raw
/// per-head outputs (pre `W_O`) and per-head value rows.
pub struct HookContext<'a> {
    pub layer: usize,
    pub weights: &'a [Tensor],
    pub outputs: &'a [Tensor],
    pub values: &'a [Tensor],
}

/// Replacement rows returned by a hook: `n_rows` rows starting at
/// `row_start`, one `[n_rows x d_k]` output tensor and one `[n_rows x L]`
/// weight tensor per head.
pub struct HookUpdate {
    pub row_start: usize,
    pub n_rows: usize,
    pub outputs: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

pub trait AttentionHook {
    fn active_layer(&self, layer: usize) -> bool;
    fn rewrite(&self, ctx: &HookContext) -> Result<HookUpdate>;
}

/// Sinusoidal positional encoding value at (position, channel).
pub fn positional_value(pos: usize, channel: usize, d_model: usize) -> f64 {
    let pair = (channel / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
    if channel % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Content embedding only: image positions carry projected image features,
/// text positions carry embedding-table rows. No positional term.
pub fn embed_content(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
) -> Result<Tensor> {
    let cfg = &weights.config;
    let l = layout.total_len();
    let img = layout.image_range();
    if image_features.len() > 0 && image_features.shape()[1] != cfg.image_patch_dim {
        return Err(Error::InvalidShape {
            op: "embed_content",
            reason: format!(
                "image feature width {} != image_patch_dim {}",
                image_features.shape()[1],
                cfg.image_patch_dim
            ),
        });
    }
    if image_features.shape()[0] != img.len() {
        return Err(Error::Layout(format!(
            "layout has {} image positions but {} feature rows were provided",
            img.len(),
            image_features.shape()[0]
        )));
    }
    if token_ids.len() != l - img.len() {
        return Err(Error::Layout(format!(
            "layout has {} text positions but {} token ids were provided",
            l - img.len(),
            token_ids.len()
        )));
    }
    let mut out = Tensor::zeros(&[l, cfg.d_model]);
    let mut next_token = 0usize;
    for pos in 0..l {
        if img.contains(&pos) {
            let feat = image_features.row(pos - img.start);
            let row = out.row_mut(pos);
            for (p, &f) in feat.iter().enumerate() {
                if f == 0.0 {
                    continue;
                }
                let proj = weights.img_proj.row(p);
                for (c, r) in row.iter_mut().enumerate() {
                    *r += f * proj[c];
                }
            }
        } else {
            let id = token_ids[next_token] as usize;
            next_token += 1;
            if id >= cfg.vocab_size {
                return Err(Error::Layout(format!(
                    "token id {id} out of vocab {}",
                    cfg.vocab_size
                )));
            }
            out.row_mut(pos).copy_from_slice(weights.embed.row(id));
        }
    }
    Ok(out)
}

/// Content embedding plus sinusoidal positions starting at `pos_offset`.
pub fn embed_sequence_with_offset(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
    pos_offset: usize,
) -> Result<Tensor> {
    let mut out = embed_content(weights, layout, image_features, token_ids)?;
    let d = weights.config.d_model;
    for pos in 0..layout.total_len() {
        let row = out.row_mut(pos);
        for (c, v) in row.iter_mut().enumerate() {
            *v += positional_value(pos + pos_offset, c, d);
        }
    }
    Ok(out)
}

pub fn embed_sequence(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
) -> Result<Tensor> {
    embed_sequence_with_offset(weights, layout, image_features, token_ids, 0)
}

/// Per-row layer norm. Returns the normalized tensor plus per-row mean and
/// reciprocal standard deviation for the backward pass.
pub(crate) fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let mut means = Vec::with_capacity(m);
    let mut rstds = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let or = out.row_mut(i);
        for j in 0..n {
            or[j] = (row[j] - mean) * rstd * g.data()[j] + b.data()[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Tensor,
    pub n1: Tensor,
    pub ln1_mean: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub att_weights: Vec<Tensor>,
    pub att_concat: Tensor,
    pub x_mid: Tensor,
    pub n2: Tensor,
    pub ln2_mean: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub ff_pre: Tensor,
    pub ff_act: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub embedded: Tensor,
    pub layers: Vec<LayerCache>,
    pub x_final: Tensor,
    pub lnf_mean: Vec<f64>,
    pub lnf_rstd: Vec<f64>,
    pub nf: Tensor,
}

pub(crate) struct ForwardOutput {
    pub trace: ForwardTrace,
    pub cache: Option<ForwardCache>,
}

fn head_slice(x: &Tensor, head: usize, d_k: usize) -> Tensor {
    let l = x.shape()[0];
    let mut out = Tensor::zeros(&[l, d_k]);
    for i in 0..l {
        out.row_mut(i)
            .copy_from_slice(&x.row(i)[head * d_k..(head + 1) * d_k]);
    }
    out
}

fn validate_update(update: &HookUpdate, n_heads: usize, l: usize, d_k: usize) -> Result<()> {
    if update.outputs.len() != n_heads || update.weights.len() != n_heads {
        return Err(Error::HookContract(format!(
            "hook returned {} output heads / {} weight heads, expected {n_heads}",
            update.outputs.len(),
            update.weights.len()
        )));
    }
    if update.row_start + update.n_rows > l {
        return Err(Error::HookContract(format!(
            "hook rows {}..{} exceed sequence length {l}",
            update.row_start,
            update.row_start + update.n_rows
        )));
    }
    for t in &update.outputs {
        if t.shape() != [update.n_rows, d_k] {
            return Err(Error::HookContract(format!(
                "hook output shape {:?}, expected [{}, {d_k}]",
                t.shape(),
                update.n_rows
            )));
        }
    }
    for t in &update.weights {
        if t.shape() != [update.n_rows, l] {
            return Err(Error::HookContract(format!(
                "hook weight shape {:?}, expected [{}, {l}]",
                t.shape(),
                update.n_rows
            )));
        }
    }
    Ok(())
}

pub(crate) fn forward_full(
    weights: &ModelWeights,
    embedded: &Tensor,
    mask: &CausalMask,
    hook: Option<&dyn AttentionHook>,
    capture_hidden: bool,
    want_cache: bool,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let l = embedded.shape()[0];
    if l > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: l,
            max: cfg.max_seq,
        });
    }
    if mask.len() != l || embedded.shape()[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: embedded.shape().to_vec(),
            rhs: vec![mask.len(), cfg.d_model],
        });
    }
    if hook.is_some() && want_cache {
        return Err(Error::Intervention(
            "the training cache path does not support hooks".into(),
        ));
    }

    let mut x = embedded.clone();
    let mut records = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let mut hidden = capture_hidden.then(Vec::new);
    let mut layer_caches = want_cache.then(Vec::new);

    for (li, lw) in weights.layers.iter().enumerate() {
        let (n1, ln1_mean, ln1_rstd) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = matmul(&n1, &lw.wq)?;
        let k = matmul(&n1, &lw.wk)?;
        let v = matmul(&n1, &lw.wv)?;

        let mut head_weights = Vec::with_capacity(cfg.n_heads);
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        let mut head_values = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = head_slice(&q, h, cfg.d_k);
            let kh = head_slice(&k, h, cfg.d_k);
            let vh = head_slice(&v, h, cfg.d_k);
            let (wh, oh) = crate::tensor::masked_attention(&qh, &kh, &vh, mask)?;
            head_weights.push(wh);
            head_outputs.push(oh);
            head_values.push(vh);
        }

        if let Some(hook) = hook {
            if hook.active_layer(li) {
                let update = hook.rewrite(&HookContext {
                    layer: li,
                    weights: &head_weights,
                    outputs: &head_outputs,
                    values: &head_values,
                })?;
                validate_update(&update, cfg.n_heads, l, cfg.d_k)?;
                for h in 0..cfg.n_heads {
                    for r in 0..update.n_rows {
                        head_outputs[h]
                            .row_mut(update.row_start + r)
                            .copy_from_slice(update.outputs[h].row(r));
                        head_weights[h]
                            .row_mut(update.row_start + r)
                            .copy_from_slice(update.weights[h].row(r));
                    }
                }
            }
        }

        for (h, wh) in head_weights.iter().enumerate() {
            records.push(AttentionRecord {
                layer: li,
                head: h,
                rows: wh.clone(),
            });
        }

        let mut att_concat = Tensor::zeros(&[l, cfg.d_model]);
        for (h, oh) in head_outputs.iter().enumerate() {
            for i in 0..l {
                att_concat.row_mut(i)[h * cfg.d_k..(h + 1) * cfg.d_k]
                    .copy_from_slice(oh.row(i));
            }
        }
        let attn_out = matmul(&att_concat, &lw.wo)?;

        let mut x_mid = x.clone();
        for (a, b) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
            *a += b;
        }

        let (n2, ln2_mean, ln2_rstd) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
        let mut ff_pre = matmul(&n2, &lw.w1)?;
        for i in 0..l {
            let row = ff_pre.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v += lw.b1.data()[j];
            }
        }
        let mut ff_act = ff_pre.clone();
        for v in ff_act.data_mut() {
            *v = gelu(*v);
        }
        let mut ff_out = matmul(&ff_act, &lw.w2)?;
        for i in 0..l {
            let row = ff_out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v += lw.b2.data()[j];
            }
        }

        let x_in = x.clone();
        let mut x_next = x_mid.clone();
        for (a, b) in x_next.data_mut().iter_mut().zip(ff_out.data()) {
            *a += b;
        }

        if let Some(caches) = layer_caches.as_mut() {
            caches.push(LayerCache {
                x_in,
                n1,
                ln1_mean,
                ln1_rstd,
                q,
                k,
                v,
                att_weights: head_weights.clone(),
                att_concat,
                x_mid,
                n2,
                ln2_mean,
                ln2_rstd,
                ff_pre,
                ff_act,
            });
        }
        if let Some(hs) = hidden.as_mut() {
            hs.push(x_next.clone());
        }
        x = x_next;
    }

    let (nf, lnf_mean, lnf_rstd) = layer_norm(&x, &weights.lnf_g, &weights.lnf_b);
    let mut logits = matmul(&nf, &weights.w_out)?;
    for i in 0..l {
        let row = logits.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += weights.b_out.data()[j];
        }
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "forward" });
    }

    let cache = layer_caches.map(|layers| ForwardCache {
        embedded: embedded.clone(),
        layers,
        x_final: x,
        lnf_mean,
        lnf_rstd,
        nf,
    });

    Ok(ForwardOutput {
        trace: ForwardTrace {
            logits,
            records,
            hidden,
        },
        cache,
    })
}

/// Standard pre-norm decoder forward pass with full attention capture.
pub fn forward(
    weights: &ModelWeights,
    embedded: &Tensor,
    mask: &CausalMask,
    hook: Option<&dyn AttentionHook>,
) -> Result<ForwardTrace> {
    Ok(forward_full(weights, embedded, mask, hook, false, false)?.trace)
}

/// Forward pass that also captures per-layer hidden states.
pub fn forward_with_hidden(
    weights: &ModelWeights,
    embedded: &Tensor,
    mask: &CausalMask,
    hook: Option<&dyn AttentionHook>,
) -> Result<ForwardTrace> {
    Ok(forward_full(weights, embedded, mask, hook, true, false)?.trace)
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    /// One trace per decode step, in order.
    pub traces: Vec<ForwardTrace>,
    /// Layout of the final pass, including the generated segment.
    pub final_layout: SequenceLayout,
}

/// Greedy decoding by full recomputation (no KV cache), so prefix stability
/// is directly assertable. Ties break toward the lowest token id. Generated
/// rows are never rewritten by the hook: the intervention targets the
/// context-question rows of the prompt, whose hidden states are identical in
/// every recomputation.
pub fn greedy_decode(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    prompt_tokens: &[u32],
    hook: Option<&dyn AttentionHook>,
    max_new_tokens: usize,
    stop_token: Option<u32>,
) -> Result<DecodeResult> {
    if max_new_tokens < 1 {
        return Err(Error::InvalidShape {
            op: "greedy_decode",
            reason: "max_new_tokens must be >= 1".into(),
        });
    }
    let mut generated: Vec<u32> = Vec::new();
    let mut traces = Vec::new();
    loop {
        let step_layout = layout.with_generated(generated.len());
        let mut tokens = prompt_tokens.to_vec();
        tokens.extend_from_slice(&generated);
        let embedded = embed_sequence(weights, &step_layout, image_features, &tokens)?;
        let mask = CausalMask::new(step_layout.total_len());
        let trace = forward(weights, &embedded, &mask, hook)?;
        let last = trace.logits.row(step_layout.total_len() - 1);
        let mut best = 0usize;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        traces.push(trace);
        generated.push(best as u32);
        if generated.len() >= max_new_tokens || stop_token == Some(best as u32) {
            break;
        }
    }
    Ok(DecodeResult {
        tokens: generated.clone(),
        traces,
        final_layout: layout.with_generated(generated.len()),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    arrays: Vec<CheckpointArray>,
}

/// Save weights as a JSON container of named arrays. The f64 encoding is
/// shortest-round-trip, so save/load is value-exact.
pub fn save_checkpoint(weights: &ModelWeights, path: &Path) -> Result<()> {
    let arrays = weights
        .named_params()
        .into_iter()
        .map(|(name, t)| CheckpointArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: weights.config,
        arrays,
    };
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            ckpt.format_version
        )));
    }
    let mut weights = ModelWeights::random(ckpt.config, 0)?;
    let mut by_name: std::collections::HashMap<String, CheckpointArray> = ckpt
        .arrays
        .into_iter()
        .map(|a| (a.name.clone(), a))
        .collect();
    for (name, t) in weights.named_params_mut() {
        let arr = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if arr.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                arr.shape,
                t.shape()
            )));
        }
        *t = Tensor::from_vec(&arr.shape, arr.data)?;
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected arrays in checkpoint: {:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    Ok(weights)
}

