//! Explicit backpropagation through the full decoder stack, for training
//! the toy model and for the finite-difference gradient check.
//!
//! The backward pass consumes the cache built by the training forward path
//! (no hooks) and mirrors it step by step in reverse.

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::tensor::{matmul, CausalMask, Tensor};
use crate::transformer::{
    embed_sequence_with_offset, forward_full, gelu_grad, ForwardCache, ModelWeights,
};

/// Cross-entropy of `logits[target_pos]` against `target_token`, plus the
/// logit gradient (softmax minus one-hot at that row, zero elsewhere).
fn cross_entropy_at(
    logits: &Tensor,
    target_pos: usize,
    target_token: u32,
) -> Result<(f64, Tensor)> {
    let vocab = logits.cols();
    let target = target_token as usize;
    if target >= vocab || target_pos >= logits.rows() {
        return Err(Error::InvalidShape {
            op: "cross_entropy_at",
            reason: format!("target ({target_pos}, {target}) outside logits"),
        });
    }
    let row = logits.row(target_pos);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[target] / z).ln();
    let mut d_logits = Tensor::zeros(&[logits.rows(), vocab]);
    let dr = d_logits.row_mut(target_pos);
    for (j, e) in exps.iter().enumerate() {
        dr[j] = e / z - if j == target { 1.0 } else { 0.0 };
    }
    Ok((loss, d_logits))
}

/// dx for a layer-norm row given upstream gradient, cached statistics and
/// the gain; accumulates gain/bias gradients.
fn layer_norm_backward(
    x: &Tensor,
    means: &[f64],
    rstds: &[f64],
    g: &Tensor,
    d_out: &Tensor,
    d_g: &mut Tensor,
    d_b: &mut Tensor,
) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut dx = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let d_row = d_out.row(i);
        let (mean, rstd) = (means[i], rstds[i]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; n];
        for j in 0..n {
            let xhat = (row[j] - mean) * rstd;
            d_g.data_mut()[j] += d_row[j] * xhat;
            d_b.data_mut()[j] += d_row[j];
            dxhat[j] = d_row[j] * g.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat;
        }
        let inv_n = 1.0 / n as f64;
        let dxr = dx.row_mut(i);
        for j in 0..n {
            let xhat = (row[j] - mean) * rstd;
            dxr[j] = rstd * (dxhat[j] - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
    dx
}

fn add_colsum(d_bias: &mut Tensor, d_out: &Tensor) {
    let (m, n) = (d_out.shape()[0], d_out.shape()[1]);
    for i in 0..m {
        let row = d_out.row(i);
        for j in 0..n {
            d_bias.data_mut()[j] += row[j];
        }
    }
}

fn add_matmul_t_a(acc: &mut Tensor, a: &Tensor, b: &Tensor) {
    // acc += a^T b
    let prod = matmul(&a.transpose2(), b).unwrap();
    for (x, y) in acc.data_mut().iter_mut().zip(prod.data()) {
        *x += y;
    }
}

fn backward(
    weights: &ModelWeights,
    cache: &ForwardCache,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
    d_logits: &Tensor,
    grads: &mut ModelWeights,
) -> Result<()> {
    let cfg = &weights.config;
    let l = cache.embedded.shape()[0];
    let d = cfg.d_model;
    let d_k = cfg.d_k;
    let scale = 1.0 / (d_k as f64).sqrt();

    add_colsum(&mut grads.b_out, d_logits);
    add_matmul_t_a(&mut grads.w_out, &cache.nf, d_logits);
    let d_nf = matmul(d_logits, &weights.w_out.transpose2())?;

    let mut d_x = layer_norm_backward(
        &cache.x_final,
        &cache.lnf_mean,
        &cache.lnf_rstd,
        &weights.lnf_g,
        &d_nf,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for li in (0..cfg.n_layers).rev() {
        let lw = &weights.layers[li];
        let lg = &mut grads.layers[li];
        let lc = &cache.layers[li];

        // x_next = x_mid + ff_out
        let d_ff_out = d_x.clone();
        let mut d_x_mid = d_x;

        // ff_out = gelu(n2 w1 + b1) w2 + b2
        add_colsum(&mut lg.b2, &d_ff_out);
        add_matmul_t_a(&mut lg.w2, &lc.ff_act, &d_ff_out);
        let d_ff_act = matmul(&d_ff_out, &lw.w2.transpose2())?;
        let mut d_ff_pre = d_ff_act;
        for (v, pre) in d_ff_pre.data_mut().iter_mut().zip(lc.ff_pre.data()) {
            *v *= gelu_grad(*pre);
        }
        add_colsum(&mut lg.b1, &d_ff_pre);
        add_matmul_t_a(&mut lg.w1, &lc.n2, &d_ff_pre);
        let d_n2 = matmul(&d_ff_pre, &lw.w1.transpose2())?;
        let d_from_ln2 = layer_norm_backward(
            &lc.x_mid,
            &lc.ln2_mean,
            &lc.ln2_rstd,
            &lw.ln2_g,
            &d_n2,
            &mut lg.ln2_g,
            &mut lg.ln2_b,
        );
        for (a, b) in d_x_mid.data_mut().iter_mut().zip(d_from_ln2.data()) {
            *a += b;
        }

        // x_mid = x_in + att_concat wo
        let d_attn_out = d_x_mid.clone();
        let mut d_x_in = d_x_mid;
        add_matmul_t_a(&mut lg.wo, &lc.att_concat, &d_attn_out);
        let d_att_concat = matmul(&d_attn_out, &lw.wo.transpose2())?;

        let mut d_q = Tensor::zeros(&[l, d]);
        let mut d_k_full = Tensor::zeros(&[l, d]);
        let mut d_v_full = Tensor::zeros(&[l, d]);
        for h in 0..cfg.n_heads {
            let col0 = h * d_k;
            let wh = &lc.att_weights[h];
            // d_o for this head, and the head's v rows
            for i in 0..l {
                // dW row i (over j <= i), then softmax backward into dS,
                // then into q and k.
                let mut dw = vec![0.0; i + 1];
                for (j, dwj) in dw.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..d_k {
                        acc += d_att_concat.get2(i, col0 + c) * lc.v.get2(j, col0 + c);
                    }
                    *dwj = acc;
                }
                // d_v from this row: w_ij * d_o_i
                for j in 0..=i {
                    let w = wh.get2(i, j);
                    if w != 0.0 {
                        for c in 0..d_k {
                            d_v_full.data_mut()[j * d + col0 + c] +=
                                w * d_att_concat.get2(i, col0 + c);
                        }
                    }
                }
                let dot: f64 = (0..=i).map(|j| wh.get2(i, j) * dw[j]).sum();
                for j in 0..=i {
                    let ds = wh.get2(i, j) * (dw[j] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..d_k {
                        d_q.data_mut()[i * d + col0 + c] +=
                            ds * scale * lc.k.get2(j, col0 + c);
                        d_k_full.data_mut()[j * d + col0 + c] +=
                            ds * scale * lc.q.get2(i, col0 + c);
                    }
                }
            }
        }

        add_matmul_t_a(&mut lg.wq, &lc.n1, &d_q);
        add_matmul_t_a(&mut lg.wk, &lc.n1, &d_k_full);
        add_matmul_t_a(&mut lg.wv, &lc.n1, &d_v_full);
        let mut d_n1 = matmul(&d_q, &lw.wq.transpose2())?;
        for (a, b) in d_n1
            .data_mut()
            .iter_mut()
            .zip(matmul(&d_k_full, &lw.wk.transpose2())?.data())
        {
            *a += b;
        }
        for (a, b) in d_n1
            .data_mut()
            .iter_mut()
            .zip(matmul(&d_v_full, &lw.wv.transpose2())?.data())
        {
            *a += b;
        }
        let d_from_ln1 = layer_norm_backward(
            &lc.x_in,
            &lc.ln1_mean,
            &lc.ln1_rstd,
            &lw.ln1_g,
            &d_n1,
            &mut lg.ln1_g,
            &mut lg.ln1_b,
        );
        for (a, b) in d_x_in.data_mut().iter_mut().zip(d_from_ln1.data()) {
            *a += b;
        }
        d_x = d_x_in;
    }

    // Embedding backward: image rows into the projector, text rows into the
    // table. Positional terms are fixed.
    let img = layout.image_range();
    let mut next_token = 0usize;
    for pos in 0..l {
        let d_row = d_x.row(pos);
        if img.contains(&pos) {
            let feat = image_features.row(pos - img.start);
            for (p, &f) in feat.iter().enumerate() {
                if f == 0.0 {
                    continue;
                }
                for (c, &dv) in d_row.iter().enumerate() {
                    grads.img_proj.data_mut()[p * cfg.d_model + c] += f * dv;
                }
            }
        } else {
            let id = token_ids[next_token] as usize;
            next_token += 1;
            for (c, &dv) in d_row.iter().enumerate() {
                grads.embed.data_mut()[id * cfg.d_model + c] += dv;
            }
        }
    }
    Ok(())
}

/// Forward-only loss of one sample, for finite-difference oracles.
pub fn sample_loss(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
    pos_offset: usize,
    target_pos: usize,
    target_token: u32,
) -> Result<f64> {
    let embedded = embed_sequence_with_offset(weights, layout, image_features, token_ids, pos_offset)?;
    let mask = CausalMask::new(layout.total_len());
    let out = forward_full(weights, &embedded, &mask, None, false, false)?;
    let (loss, _) = cross_entropy_at(&out.trace.logits, target_pos, target_token)?;
    Ok(loss)
}

/// Loss and analytic parameter gradients of one sample, accumulated into
/// `grads` (a `zeros_like` weight buffer).
pub fn accumulate_loss_and_grads(
    weights: &ModelWeights,
    layout: &SequenceLayout,
    image_features: &Tensor,
    token_ids: &[u32],
    pos_offset: usize,
    target_pos: usize,
    target_token: u32,
    grads: &mut ModelWeights,
) -> Result<f64> {
    let embedded = embed_sequence_with_offset(weights, layout, image_features, token_ids, pos_offset)?;
    let mask = CausalMask::new(layout.total_len());
    let out = forward_full(weights, &embedded, &mask, None, false, true)?;
    let cache = out.cache.expect("training forward builds a cache");
    let (loss, d_logits) = cross_entropy_at(&out.trace.logits, target_pos, target_token)?;
    backward(
        weights,
        &cache,
        layout,
        image_features,
        token_ids,
        &d_logits,
        grads,
    )?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Variant};
    use crate::transformer::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_k: 4,
            d_ff: 12,
            vocab_size: 10,
            max_seq: 16,
            image_patch_dim: 5,
        };
        let weights = ModelWeights::random(cfg, 42).unwrap();
        let layout = build_layout(Variant::ClosedBook, 3, 2, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = Tensor::from_vec(
            &[3, 5],
            (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let token_ids = [3u32, 7];
        let target_pos = layout.total_len() - 1;
        let target = 5u32;

        let mut grads = weights.zeros_like();
        accumulate_loss_and_grads(
            &weights,
            &layout,
            &feats,
            &token_ids,
            0,
            target_pos,
            target,
            &mut grads,
        )
        .unwrap();

        let h = 1e-5;
        let names: Vec<String> = weights.named_params().iter().map(|(n, _)| n.clone()).collect();
        let mut checked = 0usize;
        for name in names {
            let len = weights
                .named_params()
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .len();
            for _ in 0..3 {
                let idx = rng.random_range(0..len);
                let probe = |delta: f64| {
                    let mut w = weights.clone();
                    for (n, t) in w.named_params_mut() {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    }
                    sample_loss(&w, &layout, &feats, &token_ids, 0, target_pos, target).unwrap()
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let analytic = grads
                    .named_params()
                    .iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .data()[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-4,
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 40);
    }
}
