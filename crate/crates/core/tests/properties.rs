//! Property-based invariants: attention stochasticity and causality, the
//! strict-mix row-sum law, heatmap reshape bijectivity, ratio bounds and
//! sink-filter idempotence.

use madrag_core::{
    build_layout, embed_sequence, filter_sinks, forward, masked_attention, reshape_heatmap,
    CausalMask, KeyMap, MixConfig, MixIntervention, ModelConfig, ModelWeights, SinkFilterConfig,
    Tensor, Variant,
};
use madrag_core::instrumentation::compute_ratios;
use madrag_core::intervention::mix_weights_strict;
use madrag_core::AttentionHook;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_stochastic_and_causal(
        len in 1usize..8,
        d in 1usize..5,
        seed_data in prop::collection::vec(-2.0f64..2.0, 8 * 4 * 3),
    ) {
        let take = |offset: usize| {
            let data: Vec<f64> = (0..len * d).map(|i| seed_data[offset + i]).collect();
            Tensor::from_vec(&[len, d], data).unwrap()
        };
        let q = take(0);
        let k = take(32);
        let v = take(64);
        let (weights, _) = masked_attention(&q, &k, &v, &CausalMask::new(len)).unwrap();
        for i in 0..len {
            let row = weights.row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            for (j, &w) in row.iter().enumerate() {
                prop_assert!(w >= 0.0);
                if j > i {
                    prop_assert_eq!(w, 0.0, "future position ({}, {}) attended", i, j);
                }
            }
        }
    }

    #[test]
    fn strict_mix_row_sums_follow_the_convexity_law(
        alpha in 0.0f64..=1.0,
        t in 1usize..4,
        v in 1usize..4,
        extra in 1usize..5,
    ) {
        let k = v + extra;
        let key_map = KeyMap { image_start: 0, image_len: v };
        // Random stochastic rows for Q_C over all keys, sub-stochastic
        // image-only rows for Q_I.
        let mk_stochastic = |rows: usize, cols: usize, salt: u64| {
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let mut row: Vec<f64> = (0..cols)
                    .map(|j| (((i * cols + j) as u64 + salt) * 2654435761 % 1000) as f64 / 1000.0
                        + 0.01)
                    .collect();
                let s: f64 = row.iter().sum();
                for v in &mut row { *v /= s; }
                data.extend(row);
            }
            Tensor::from_vec(&[1, rows, cols], data).unwrap()
        };
        let qc = mk_stochastic(t, k, 7);
        let mut qi = mk_stochastic(t, v, 13);
        // Scale Q_I rows by a rho_I < 1 to emulate mass lost to non-image
        // positions.
        let rho = 0.6;
        for val in qi.data_mut() { *val *= rho; }
        let mixed = mix_weights_strict(&qi, &qc, alpha, key_map).unwrap();
        for i in 0..t {
            let sum: f64 = (0..k).map(|j| mixed.weights.data()[i * k + j]).sum();
            let expected = alpha * rho + (1.0 - alpha);
            prop_assert!((sum - expected).abs() < 1e-12,
                "row {} sums to {} expected {}", i, sum, expected);
        }
    }

    #[test]
    fn heatmap_reshape_is_a_bijection(
        rows in 1usize..6,
        cols in 1usize..6,
        raw in prop::collection::vec(0.0f64..1.0, 36),
    ) {
        let values: Vec<f64> = raw[..rows * cols].to_vec();
        let map = reshape_heatmap(&values, rows, cols).unwrap();
        prop_assert_eq!(map.grid.shape(), &[rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(map.grid.get2(r, c), values[r * cols + c]);
            }
        }
    }

    #[test]
    fn sink_filter_is_idempotent_on_kept_heads(
        masses in prop::collection::vec(0.001f64..1.0, 12),
    ) {
        let heads = Tensor::from_vec(&[2, 6], masses).unwrap();
        let cfg = SinkFilterConfig::default();
        match filter_sinks(&heads, &cfg) {
            Ok((keep_once, filtered)) => {
                let (keep_twice, refiltered) = filter_sinks(&filtered, &cfg).unwrap();
                prop_assert_eq!(&keep_once, &keep_twice,
                    "second filtering pass changed the mask");
                prop_assert_eq!(filtered.data(), refiltered.data());
            }
            Err(_) => {
                // Degenerate all-masked inputs are rejected, not silently
                // emptied; nothing further to check.
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn modality_ratios_are_bounded_and_additive(
        seed in 0u64..1000,
        cn in 1usize..7,
        alpha in 0.0f64..=1.0,
    ) {
        let cfg = ModelConfig::tiny();
        let weights = ModelWeights::random(cfg, seed).unwrap();
        let layout = build_layout(Variant::MadRag, 4, 3, cn, 0).unwrap();
        let n_text = layout.total_len() - 4;
        let tokens: Vec<u32> = (0..n_text).map(|i| (i % cfg.vocab_size) as u32).collect();
        let features = Tensor::from_vec(
            &[4, cfg.image_patch_dim],
            (0..4 * cfg.image_patch_dim).map(|i| ((i % 7) as f64) / 7.0).collect(),
        ).unwrap();
        let embedded = embed_sequence(&weights, &layout, &features, &tokens).unwrap();
        let mask = CausalMask::new(layout.total_len());
        let mix = MixConfig { alpha, ..MixConfig::default() };
        let hook = MixIntervention::new(layout.clone(), mix, cfg.n_layers).unwrap();
        let trace = forward(&weights, &embedded, &mask, Some(&hook as &dyn AttentionHook)).unwrap();

        let step_layout = layout.with_generated(1);
        for layer in 0..cfg.n_layers {
            let entry = compute_ratios(&trace, &step_layout, 1, layer, true).unwrap();
            prop_assert!(entry.rho_image >= 0.0 && entry.rho_context >= 0.0);
            prop_assert!(entry.rho_image + entry.rho_context <= 1.0 + 1e-9,
                "layer {}: rho_I {} + rho_C {} exceeds 1", layer, entry.rho_image, entry.rho_context);
        }
    }
}
