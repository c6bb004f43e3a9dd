//! Attention mixing between the two question segments of a dual-question
//! layout.
//!
//! Two forms ship. `OutputMix` is canonical: it convexly combines the
//! pre-computed per-head attention outputs of the two question copies, and
//! handles the context-question's causal self-prefix naturally.
//! `StrictWeightMix` combines attention weights instead, zero-padding the
//! image-question row outside the image keys; its rows are sub-stochastic
//! (row sum = alpha * image mass + (1 - alpha)), which is asserted, not
//! assumed. The two forms differ by exactly alpha times the image-question
//! row's non-image attention contribution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::tensor::Tensor;
use crate::transformer::{AttentionHook, HookContext, HookUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixForm {
    #[default]
    OutputMix,
    StrictWeightMix,
}

/// Which layers the intervention applies to. The named presets split the
/// stack into three equal contiguous thirds: layer `i` falls in third
/// `3 * i / n_layers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerSpecRepr", into = "LayerSpecRepr")]
pub enum LayerSpec {
    All,
    Early,
    Middle,
    Later,
    Explicit(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerSpecRepr {
    Named(String),
    List(Vec<usize>),
}

impl TryFrom<LayerSpecRepr> for LayerSpec {
    type Error = String;
    fn try_from(repr: LayerSpecRepr) -> std::result::Result<Self, String> {
        match repr {
            LayerSpecRepr::Named(s) => match s.as_str() {
                "all" => Ok(LayerSpec::All),
                "early" => Ok(LayerSpec::Early),
                "middle" => Ok(LayerSpec::Middle),
                "later" => Ok(LayerSpec::Later),
                other => Err(format!("unknown layer preset '{other}'")),
            },
            LayerSpecRepr::List(v) => Ok(LayerSpec::Explicit(v)),
        }
    }
}

impl From<LayerSpec> for LayerSpecRepr {
    fn from(spec: LayerSpec) -> Self {
        match spec {
            LayerSpec::All => LayerSpecRepr::Named("all".into()),
            LayerSpec::Early => LayerSpecRepr::Named("early".into()),
            LayerSpec::Middle => LayerSpecRepr::Named("middle".into()),
            LayerSpec::Later => LayerSpecRepr::Named("later".into()),
            LayerSpec::Explicit(v) => LayerSpecRepr::List(v),
        }
    }
}

impl LayerSpec {
    pub fn resolve(&self, n_layers: usize) -> Result<BTreeSet<usize>> {
        let third = |i: usize| 3 * i / n_layers;
        let set: BTreeSet<usize> = match self {
            LayerSpec::All => (0..n_layers).collect(),
            LayerSpec::Early => (0..n_layers).filter(|&i| third(i) == 0).collect(),
            LayerSpec::Middle => (0..n_layers).filter(|&i| third(i) == 1).collect(),
            LayerSpec::Later => (0..n_layers).filter(|&i| third(i) == 2).collect(),
            LayerSpec::Explicit(v) => {
                let set: BTreeSet<usize> = v.iter().copied().collect();
                if let Some(&bad) = set.iter().find(|&&i| i >= n_layers) {
                    return Err(Error::Intervention(format!(
                        "layer {bad} out of range for {n_layers} layers"
                    )));
                }
                set
            }
        };
        Ok(set)
    }
}

/// Mixing weight alpha, target layers and mixing form. Serializes to the
/// CLI JSON config fields `alpha`, `layers`, `form`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub alpha: f64,
    pub layers: LayerSpec,
    pub form: MixForm,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            alpha: 0.5,
            layers: LayerSpec::All,
            form: MixForm::OutputMix,
        }
    }
}

impl MixConfig {
    pub fn new(alpha: f64, layers: LayerSpec, form: MixForm) -> Result<Self> {
        let cfg = MixConfig {
            alpha,
            layers,
            form,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Intervention(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Intervention(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Convex combination of the two question segments' per-head attention
/// outputs: position `t` of the image question pairs with position `t` of
/// the context question.
pub fn mix_outputs(o_qi: &Tensor, o_qc: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if o_qi.shape() != o_qc.shape() {
        return Err(Error::ShapeMismatch {
            op: "mix_outputs",
            lhs: o_qi.shape().to_vec(),
            rhs: o_qc.shape().to_vec(),
        });
    }
    o_qi.lerp(o_qc, alpha)
}

/// Column alignment between the image-question rows (image keys only) and
/// the context-question rows (all preceding keys).
#[derive(Debug, Clone, Copy)]
pub struct KeyMap {
    pub image_start: usize,
    pub image_len: usize,
}

/// Strict weight-space mix with its per-head outputs.
#[derive(Debug, Clone)]
pub struct MixedAttention {
    /// Mixed weights `[H x T x K]`. Rows are sub-stochastic in general.
    pub weights: Tensor,
    /// Mixed outputs `[H x T x d_v]`, when values were supplied.
    pub outputs: Option<Tensor>,
}

/// Weight-space mix: `alpha * [A(Q_I, I), 0, 0] + (1 - alpha) * A(Q_C, All)`.
pub fn mix_weights_strict(
    a_qi_image: &Tensor,
    a_qc_all: &Tensor,
    alpha: f64,
    key_map: KeyMap,
) -> Result<MixedAttention> {
    check_alpha(alpha)?;
    if a_qi_image.shape().len() != 3 || a_qc_all.shape().len() != 3 {
        return Err(Error::InvalidShape {
            op: "mix_weights_strict",
            reason: "expected [H x T x V] and [H x T x K]".into(),
        });
    }
    let (h, t, v) = (
        a_qi_image.shape()[0],
        a_qi_image.shape()[1],
        a_qi_image.shape()[2],
    );
    let k = a_qc_all.shape()[2];
    if a_qc_all.shape()[0] != h || a_qc_all.shape()[1] != t {
        return Err(Error::ShapeMismatch {
            op: "mix_weights_strict",
            lhs: a_qi_image.shape().to_vec(),
            rhs: a_qc_all.shape().to_vec(),
        });
    }
    if key_map.image_len != v || key_map.image_start + key_map.image_len > k {
        return Err(Error::Intervention(format!(
            "key map image columns {}..{} misaligned with V={v}, K={k}",
            key_map.image_start,
            key_map.image_start + key_map.image_len
        )));
    }
    let mut weights = Tensor::zeros(&[h, t, k]);
    for hi in 0..h {
        for ti in 0..t {
            for ki in 0..k {
                let qc = a_qc_all.data()[(hi * t + ti) * k + ki];
                let qi = if (key_map.image_start..key_map.image_start + v).contains(&ki) {
                    a_qi_image.data()[(hi * t + ti) * v + (ki - key_map.image_start)]
                } else {
                    0.0
                };
                weights.data_mut()[(hi * t + ti) * k + ki] = alpha * qi + (1.0 - alpha) * qc;
            }
        }
    }
    Ok(MixedAttention {
        weights,
        outputs: None,
    })
}

/// Apply mixed weights `[H x T x K]` to per-head values `[H x K x d_v]`.
pub fn attend_values(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    if weights.shape().len() != 3
        || values.shape().len() != 3
        || weights.shape()[0] != values.shape()[0]
        || weights.shape()[2] != values.shape()[1]
    {
        return Err(Error::ShapeMismatch {
            op: "attend_values",
            lhs: weights.shape().to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    let (h, t, k) = (weights.shape()[0], weights.shape()[1], weights.shape()[2]);
    let dv = values.shape()[2];
    let mut out = Tensor::zeros(&[h, t, dv]);
    for hi in 0..h {
        for ti in 0..t {
            for ki in 0..k {
                let w = weights.data()[(hi * t + ti) * k + ki];
                if w == 0.0 {
                    continue;
                }
                for c in 0..dv {
                    out.data_mut()[(hi * t + ti) * dv + c] +=
                        w * values.data()[(hi * k + ki) * dv + c];
                }
            }
        }
    }
    Ok(out)
}

/// Rewrite the context-question rows of one layer's per-head attention.
///
/// Only the context-question rows change; the replacement happens before
/// the output projection, during the prefill pass. The returned weight rows
/// are the recorded mixed rows: full-row convex mixes for `OutputMix`
/// (stochastic) and zero-padded mixes for `StrictWeightMix`
/// (sub-stochastic).
pub fn apply_intervention(
    weights: &[Tensor],
    outputs: &[Tensor],
    values: &[Tensor],
    layout: &SequenceLayout,
    cfg: &MixConfig,
) -> Result<HookUpdate> {
    cfg.validate()?;
    if !layout.is_dual_question() {
        return Err(Error::Intervention(format!(
            "intervention requires a dual-question layout, got {:?}",
            layout.variant
        )));
    }
    let qi = layout.image_question_range().unwrap();
    let qc = layout.context_question_range().unwrap();
    if qi.len() != qc.len() {
        return Err(Error::Intervention(format!(
            "question segments disagree: {} vs {} tokens",
            qi.len(),
            qc.len()
        )));
    }
    let t_len = qi.len();
    let img = layout.image_range();
    let alpha = cfg.alpha;
    let l = weights[0].shape()[0];
    let d_k = outputs[0].shape()[1];

    let mut out_heads = Vec::with_capacity(weights.len());
    let mut weight_heads = Vec::with_capacity(weights.len());
    for h in 0..weights.len() {
        let mut o = Tensor::zeros(&[t_len, d_k]);
        let mut w = Tensor::zeros(&[t_len, l]);
        for t in 0..t_len {
            let qi_row = qi.start + t;
            let qc_row = qc.start + t;
            match cfg.form {
                MixForm::OutputMix => {
                    for c in 0..d_k {
                        o.set2(
                            t,
                            c,
                            alpha * outputs[h].get2(qi_row, c)
                                + (1.0 - alpha) * outputs[h].get2(qc_row, c),
                        );
                    }
                    for j in 0..l {
                        w.set2(
                            t,
                            j,
                            alpha * weights[h].get2(qi_row, j)
                                + (1.0 - alpha) * weights[h].get2(qc_row, j),
                        );
                    }
                }
                MixForm::StrictWeightMix => {
                    for j in 0..l {
                        let qi_part = if img.contains(&j) {
                            weights[h].get2(qi_row, j)
                        } else {
                            0.0
                        };
                        w.set2(
                            t,
                            j,
                            alpha * qi_part + (1.0 - alpha) * weights[h].get2(qc_row, j),
                        );
                    }
                    for c in 0..d_k {
                        let mut acc = 0.0;
                        for j in 0..l {
                            let wv = w.get2(t, j);
                            if wv != 0.0 {
                                acc += wv * values[h].get2(j, c);
                            }
                        }
                        o.set2(t, c, acc);
                    }
                }
            }
        }
        out_heads.push(o);
        weight_heads.push(w);
    }
    Ok(HookUpdate {
        row_start: qc.start,
        n_rows: t_len,
        outputs: out_heads,
        weights: weight_heads,
    })
}

/// [`AttentionHook`] that applies the mix at the configured layers of a
/// dual-question layout.
pub struct MixIntervention {
    cfg: MixConfig,
    layout: SequenceLayout,
    layer_set: BTreeSet<usize>,
}

impl MixIntervention {
    pub fn new(layout: SequenceLayout, cfg: MixConfig, n_layers: usize) -> Result<Self> {
        cfg.validate()?;
        if !layout.is_dual_question() {
            return Err(Error::Intervention(format!(
                "intervention requires a dual-question layout, got {:?}",
                layout.variant
            )));
        }
        let layer_set = cfg.layers.resolve(n_layers)?;
        Ok(MixIntervention {
            cfg,
            layout,
            layer_set,
        })
    }

    pub fn layer_set(&self) -> &BTreeSet<usize> {
        &self.layer_set
    }
}

impl AttentionHook for MixIntervention {
    fn active_layer(&self, layer: usize) -> bool {
        self.layer_set.contains(&layer)
    }

    fn rewrite(&self, ctx: &HookContext) -> Result<HookUpdate> {
        apply_intervention(ctx.weights, ctx.outputs, ctx.values, &self.layout, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mix_outputs_endpoints_and_midpoint() {
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(mix_outputs(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mix_outputs(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_outputs(&a, &b, 0.5).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn mix_outputs_rejects_shape_and_alpha() {
        let a = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::zeros(&[1, 3, 2]);
        assert!(mix_outputs(&a, &b, 0.5).is_err());
        assert!(mix_outputs(&a, &a, 1.5).is_err());
    }

    #[test]
    fn strict_mix_hand_fixture() {
        // Keys are [I0, I1, Q_I, C]; the image-question row holds 0.1 self
        // mass outside the image keys, so the mixed row is sub-stochastic.
        let a_qi = Tensor::from_vec(&[1, 1, 2], vec![0.6, 0.3]).unwrap();
        let a_qc = Tensor::from_vec(&[1, 1, 4], vec![0.1, 0.1, 0.2, 0.6]).unwrap();
        let mixed = mix_weights_strict(
            &a_qi,
            &a_qc,
            0.5,
            KeyMap {
                image_start: 0,
                image_len: 2,
            },
        )
        .unwrap();
        let expect = [0.35, 0.2, 0.1, 0.3];
        for (got, want) in mixed.weights.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        let sum: f64 = mixed.weights.data().iter().sum();
        assert!((sum - (0.5 * 0.9 + 0.5 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn strict_mix_alpha_zero_is_identity() {
        let a_qi = Tensor::from_vec(&[1, 1, 2], vec![0.6, 0.3]).unwrap();
        let a_qc = Tensor::from_vec(&[1, 1, 4], vec![0.1, 0.1, 0.2, 0.6]).unwrap();
        let mixed = mix_weights_strict(
            &a_qi,
            &a_qc,
            0.0,
            KeyMap {
                image_start: 0,
                image_len: 2,
            },
        )
        .unwrap();
        assert_eq!(mixed.weights.data(), a_qc.data());
    }

    #[test]
    fn strict_mix_rejects_misaligned_key_map() {
        let a_qi = Tensor::zeros(&[1, 1, 2]);
        let a_qc = Tensor::zeros(&[1, 1, 4]);
        assert!(mix_weights_strict(
            &a_qi,
            &a_qc,
            0.5,
            KeyMap {
                image_start: 3,
                image_len: 2
            }
        )
        .is_err());
    }

    #[test]
    fn strict_row_sum_identity_on_random_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (h, t, v, k) = (2, 3, 4, 10);
            let softmax_row = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            };
            let mut qi_data = Vec::new();
            let mut qi_image_mass = Vec::new();
            for _ in 0..h * t {
                // A full Q_I row over v image keys plus leftover mass elsewhere.
                let full = softmax_row(&mut rng, v + 2);
                qi_image_mass.push(full[..v].iter().sum::<f64>());
                qi_data.extend_from_slice(&full[..v]);
            }
            let mut qc_data = Vec::new();
            for _ in 0..h * t {
                qc_data.extend(softmax_row(&mut rng, k));
            }
            let a_qi = Tensor::from_vec(&[h, t, v], qi_data).unwrap();
            let a_qc = Tensor::from_vec(&[h, t, k], qc_data).unwrap();
            let alpha = rng.random_range(0.0..1.0);
            let mixed = mix_weights_strict(
                &a_qi,
                &a_qc,
                alpha,
                KeyMap {
                    image_start: 0,
                    image_len: v,
                },
            )
            .unwrap();
            for (row, &rho) in qi_image_mass.iter().enumerate() {
                let sum: f64 = mixed.weights.data()[row * k..(row + 1) * k].iter().sum();
                let expect = alpha * rho + (1.0 - alpha) * 1.0;
                assert!((sum - expect).abs() < 1e-12);
            }
        }
    }

    fn random_hook_inputs(
        rng: &mut ChaCha8Rng,
        layout: &SequenceLayout,
        n_heads: usize,
        d_k: usize,
    ) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
        let l = layout.total_len();
        let mut weights = Vec::new();
        let mut values = Vec::new();
        let mut outputs = Vec::new();
        for _ in 0..n_heads {
            let mut w = Tensor::zeros(&[l, l]);
            for i in 0..l {
                let raw: Vec<f64> = (0..=i).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (j, r) in raw.iter().enumerate() {
                    w.set2(i, j, r / s);
                }
            }
            let mut v = Tensor::zeros(&[l, d_k]);
            for val in v.data_mut() {
                *val = rng.random_range(-1.0..1.0);
            }
            let o = crate::tensor::matmul(&w, &v).unwrap();
            weights.push(w);
            values.push(v);
            outputs.push(o);
        }
        (weights, outputs, values)
    }

    #[test]
    fn forms_agree_when_qi_mass_is_image_only() {
        // Force every Q_I row's mass onto image keys, with outputs consistent
        // (O = W V); then OutputMix and StrictWeightMix coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = build_layout(Variant::MadRag, 4, 2, 3, 0).unwrap();
        let (mut weights, _, values) = random_hook_inputs(&mut rng, &layout, 2, 3);
        let img = layout.image_range();
        let qi = layout.image_question_range().unwrap();
        for w in &mut weights {
            for row in qi.clone() {
                let mass: f64 = img.clone().map(|j| w.get2(row, j)).sum();
                for j in 0..w.cols() {
                    let v = if img.contains(&j) {
                        w.get2(row, j) / mass
                    } else {
                        0.0
                    };
                    w.set2(row, j, v);
                }
            }
        }
        let outputs: Vec<Tensor> = weights
            .iter()
            .zip(&values)
            .map(|(w, v)| crate::tensor::matmul(w, v).unwrap())
            .collect();
        let mk = |form| MixConfig {
            alpha: 0.5,
            layers: LayerSpec::All,
            form,
        };
        let a = apply_intervention(&weights, &outputs, &values, &layout, &mk(MixForm::OutputMix))
            .unwrap();
        let b = apply_intervention(
            &weights,
            &outputs,
            &values,
            &layout,
            &mk(MixForm::StrictWeightMix),
        )
        .unwrap();
        for h in 0..2 {
            assert!(a.outputs[h].max_abs_diff(&b.outputs[h]) < 1e-9);
        }
    }

    #[test]
    fn form_gap_equals_alpha_times_non_image_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = build_layout(Variant::MadRag, 3, 2, 4, 0).unwrap();
        let (weights, outputs, values) = random_hook_inputs(&mut rng, &layout, 2, 3);
        let alpha = 0.37;
        let mk = |form| MixConfig {
            alpha,
            layers: LayerSpec::All,
            form,
        };
        let a = apply_intervention(&weights, &outputs, &values, &layout, &mk(MixForm::OutputMix))
            .unwrap();
        let b = apply_intervention(
            &weights,
            &outputs,
            &values,
            &layout,
            &mk(MixForm::StrictWeightMix),
        )
        .unwrap();
        let img = layout.image_range();
        let qi = layout.image_question_range().unwrap();
        for h in 0..2 {
            for t in 0..2 {
                let qi_row = qi.start + t;
                for c in 0..3 {
                    let mut non_image = 0.0;
                    for j in 0..layout.total_len() {
                        if !img.contains(&j) {
                            non_image += weights[h].get2(qi_row, j) * values[h].get2(j, c);
                        }
                    }
                    let gap = a.outputs[h].get2(t, c) - b.outputs[h].get2(t, c);
                    assert!((gap - alpha * non_image).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn intervention_rejects_non_dual_layout() {
        let layout = build_layout(Variant::VanillaRag, 2, 2, 2, 0).unwrap();
        assert!(MixIntervention::new(layout, MixConfig::default(), 2).is_err());
    }

    #[test]
    fn layer_presets_partition_the_stack() {
        for n in 1..=12 {
            let mut seen = BTreeSet::new();
            for spec in [LayerSpec::Early, LayerSpec::Middle, LayerSpec::Later] {
                for l in spec.resolve(n).unwrap() {
                    assert!(seen.insert(l));
                }
            }
            assert_eq!(seen, LayerSpec::All.resolve(n).unwrap());
        }
    }

    #[test]
    fn layer_spec_serde_round_trip() {
        for (spec, json) in [
            (LayerSpec::All, "\"all\""),
            (LayerSpec::Early, "\"early\""),
            (LayerSpec::Explicit(vec![0, 2]), "[0,2]"),
        ] {
            assert_eq!(serde_json::to_string(&spec).unwrap(), json);
            assert_eq!(serde_json::from_str::<LayerSpec>(json).unwrap(), spec);
        }
    }
}
