//! Attention diagnostics: modality attention ratios, sink-token filtering,
//! heatmap export, visual-head selection and top-attended context tokens.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::tensor::Tensor;
use crate::transformer::ForwardTrace;

/// Fraction of one query row's attention mass on the image and context
/// segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub step: usize,
    pub layer: usize,
    pub head_averaged: bool,
    pub rho_image: f64,
    pub rho_context: f64,
}

/// Per-step attention ratios for one decoded sample.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttentionStats {
    pub entries: Vec<RatioEntry>,
}

impl AttentionStats {
    pub fn mean_rho_image(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.rho_image))
    }

    pub fn mean_rho_context(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.rho_context))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkBaseline {
    Median,
    Mean,
}

/// Threshold rule for sink-token filtering: a token is a sink when its
/// (head-averaged) mass exceeds `threshold_multiplier` times the baseline
/// statistic over all image-token masses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkFilterConfig {
    pub threshold_multiplier: f64,
    pub statistic: SinkBaseline,
    pub renormalize: bool,
}

impl Default for SinkFilterConfig {
    fn default() -> Self {
        SinkFilterConfig {
            threshold_multiplier: 5.0,
            statistic: SinkBaseline::Median,
            renormalize: false,
        }
    }
}

/// Image-token attention reshaped to the image grid, with an optional
/// min-max normalization for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Tensor,
    pub normalized: bool,
}

/// The query row that produced decode step `t` (1-based): the last prompt
/// position for the first step, then each newly generated position.
fn query_row_for_step(layout: &SequenceLayout, step: usize) -> Result<usize> {
    if step == 0 || layout.prompt_len() == 0 {
        return Err(Error::Instrumentation(format!(
            "step {step} has no preceding query position"
        )));
    }
    Ok(layout.prompt_len() + step - 2)
}

/// Attention mass from the query row of decode step `t` onto the image and
/// context key columns, head-averaged when flagged (per-head takes head 0).
pub fn compute_ratios(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    step: usize,
    layer: usize,
    average_heads: bool,
) -> Result<RatioEntry> {
    let row_idx = query_row_for_step(layout, step)?;
    let heads: Vec<&Tensor> = trace
        .records
        .iter()
        .filter(|r| r.layer == layer)
        .map(|r| &r.rows)
        .collect();
    if heads.is_empty() {
        return Err(Error::Instrumentation(format!("no records for layer {layer}")));
    }
    if row_idx >= heads[0].rows() {
        return Err(Error::Instrumentation(format!(
            "query row {row_idx} outside trace of length {}",
            heads[0].rows()
        )));
    }
    let selected: Vec<&Tensor> = if average_heads {
        heads
    } else {
        vec![heads[0]]
    };
    let img = layout.image_range();
    let ctx = layout.context_range();
    let mut rho_image = 0.0;
    let mut rho_context = 0.0;
    for rows in &selected {
        let row = rows.row(row_idx);
        rho_image += img.clone().map(|j| row[j]).sum::<f64>();
        rho_context += ctx.clone().map(|j| row[j]).sum::<f64>();
    }
    let n = selected.len() as f64;
    Ok(RatioEntry {
        step,
        layer,
        head_averaged: average_heads,
        rho_image: rho_image / n,
        rho_context: rho_context / n,
    })
}

/// Zero-mask tokens whose head-averaged mass exceeds the threshold over the
/// baseline statistic. Returns the mask (true = kept) and the filtered
/// tensor.
pub fn filter_sinks(
    image_attention: &Tensor,
    cfg: &SinkFilterConfig,
) -> Result<(Vec<bool>, Tensor)> {
    if image_attention.shape().len() != 2 || image_attention.shape()[1] == 0 {
        return Err(Error::Instrumentation(
            "filter_sinks expects a [heads x V] tensor with V >= 1".into(),
        ));
    }
    if cfg.threshold_multiplier <= 1.0 {
        return Err(Error::Instrumentation(format!(
            "threshold multiplier {} must be > 1",
            cfg.threshold_multiplier
        )));
    }
    let (h, v) = (image_attention.shape()[0], image_attention.shape()[1]);
    let masses: Vec<f64> = (0..v)
        .map(|j| (0..h).map(|i| image_attention.get2(i, j)).sum::<f64>() / h as f64)
        .collect();
    let baseline = match cfg.statistic {
        SinkBaseline::Mean => masses.iter().sum::<f64>() / v as f64,
        SinkBaseline::Median => {
            let mut sorted = masses.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if v % 2 == 1 {
                sorted[v / 2]
            } else {
                0.5 * (sorted[v / 2 - 1] + sorted[v / 2])
            }
        }
    };
    let keep: Vec<bool> = masses
        .iter()
        .map(|&m| m <= cfg.threshold_multiplier * baseline)
        .collect();
    if keep.iter().all(|&k| !k) {
        return Err(Error::DegenerateFilter { n: v });
    }
    let mut filtered = image_attention.clone();
    for i in 0..h {
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                filtered.set2(i, j, 0.0);
            }
        }
        if cfg.renormalize {
            let sum: f64 = filtered.row(i).iter().sum();
            if sum > 0.0 {
                for val in filtered.row_mut(i) {
                    *val /= sum;
                }
            }
        }
    }
    Ok((keep, filtered))
}

/// The `k` (layer, head) pairs with the highest total image-key attention
/// mass from the final query position; ties break by (layer, head) order.
pub fn select_visual_heads(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    k: usize,
) -> Result<Vec<(usize, usize)>> {
    if trace.records.is_empty() {
        return Err(Error::Instrumentation("empty trace".into()));
    }
    let img = layout.image_range();
    let last = trace.records[0].rows.rows() - 1;
    let mut scored: Vec<((usize, usize), f64)> = trace
        .records
        .iter()
        .map(|r| {
            let row = r.rows.row(last);
            ((r.layer, r.head), img.clone().map(|j| row[j]).sum::<f64>())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(lh, _)| lh).collect())
}

/// Row-major reshape of an image-attention row to the image grid, with
/// optional sink filtering first and min-max normalization for rendering.
/// A constant row normalizes to all zeros by convention.
pub fn export_heatmap(
    image_attention: &[f64],
    grid_rows: usize,
    grid_cols: usize,
    sink_cfg: Option<&SinkFilterConfig>,
) -> Result<Heatmap> {
    let v = image_attention.len();
    if grid_rows * grid_cols != v {
        return Err(Error::Instrumentation(format!(
            "{v} image tokens do not factor into a {grid_rows}x{grid_cols} grid"
        )));
    }
    let mut values = image_attention.to_vec();
    if let Some(cfg) = sink_cfg {
        let t = Tensor::from_vec(&[1, v], values.clone())?;
        let (_, filtered) = filter_sinks(&t, cfg)?;
        values = filtered.data().to_vec();
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if max > min {
        values.iter().map(|x| (x - min) / (max - min)).collect()
    } else {
        vec![0.0; v]
    };
    Ok(Heatmap {
        grid: Tensor::from_vec(&[grid_rows, grid_cols], normalized)?,
        normalized: true,
    })
}

/// Row-major reshape without normalization, for bijection checks and raw
/// exports.
pub fn reshape_heatmap(image_attention: &[f64], grid_rows: usize, grid_cols: usize) -> Result<Heatmap> {
    if grid_rows * grid_cols != image_attention.len() {
        return Err(Error::Instrumentation(format!(
            "{} image tokens do not factor into a {grid_rows}x{grid_cols} grid",
            image_attention.len()
        )));
    }
    Ok(Heatmap {
        grid: Tensor::from_vec(&[grid_rows, grid_cols], image_attention.to_vec())?,
        normalized: false,
    })
}

/// Render a heatmap as ASCII PGM (P2), values scaled to 0-255.
pub fn heatmap_to_pgm(map: &Heatmap, comment: &str) -> String {
    let (rows, cols) = (map.grid.shape()[0], map.grid.shape()[1]);
    let max = map
        .grid
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = if map.normalized || max <= 0.0 { 1.0 } else { max };
    let mut out = String::new();
    writeln!(out, "P2").unwrap();
    if !comment.is_empty() {
        writeln!(out, "# {comment}").unwrap();
    }
    writeln!(out, "{cols} {rows}").unwrap();
    writeln!(out, "255").unwrap();
    for r in 0..rows {
        let line: Vec<String> = map
            .grid
            .row(r)
            .iter()
            .map(|v| format!("{}", ((v / scale).clamp(0.0, 1.0) * 255.0).round() as u32))
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

/// Render a heatmap as CSV rows.
pub fn heatmap_to_csv(map: &Heatmap) -> String {
    let (rows, cols) = (map.grid.shape()[0], map.grid.shape()[1]);
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{:.12}", map.grid.get2(r, c)))
            .collect();
        writeln!(out, "{}", line.join(",")).unwrap();
    }
    out
}

/// Top-k context key columns by head-averaged attention from the first
/// generated position, descending mass, ties by position. `k` larger than
/// the context clamps to all context positions.
pub fn top_context_tokens(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    token_ids: &[u32],
    k: usize,
) -> Result<Vec<(usize, u32, f64)>> {
    let ctx = layout.context_range();
    if ctx.is_empty() {
        return Err(Error::Instrumentation(
            "layout has no context segment".into(),
        ));
    }
    if k < 1 {
        return Err(Error::Instrumentation("k must be >= 1".into()));
    }
    // Head-averaged last-layer row at the answer's first generated position;
    // falls back to the last row when the trace carries no generated segment.
    let gen = layout.generated_range();
    let n_layers = trace.records.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
    let heads: Vec<&Tensor> = trace
        .records
        .iter()
        .filter(|r| r.layer == n_layers - 1)
        .map(|r| &r.rows)
        .collect();
    let l = heads[0].rows();
    let row_idx = if gen.is_empty() { l - 1 } else { gen.start.min(l - 1) };
    let mut scored: Vec<(usize, u32, f64)> = ctx
        .clone()
        .map(|j| {
            let mass = heads.iter().map(|h| h.row(row_idx)[j]).sum::<f64>() / heads.len() as f64;
            let text_index = text_position_index(layout, j);
            let id = token_ids.get(text_index).copied().unwrap_or(0);
            (j, id, mass)
        })
        .collect();
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k.min(ctx.len()));
    Ok(scored)
}

/// Index of absolute position `pos` within the text-token stream (the
/// stream skips image positions).
fn text_position_index(layout: &SequenceLayout, pos: usize) -> usize {
    let img = layout.image_range();
    if pos >= img.end {
        pos - img.len()
    } else {
        pos
    }
}
