//! Criterion benchmarks: raw masked-attention kernel, plus full greedy
//! decoding with and without the attention-mixing intervention.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use madrag_core::{
    build_layout, generate_dataset, greedy_decode, masked_attention, AttentionHook, CausalMask,
    MixConfig, MixIntervention, ModelConfig, ModelWeights, Tensor, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

fn bench_attention_kernel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (len, d_k) = (64, 16);
    let q = random_tensor(&mut rng, len, d_k);
    let k = random_tensor(&mut rng, len, d_k);
    let v = random_tensor(&mut rng, len, d_k);
    let mask = CausalMask::new(len);
    c.bench_function("masked_attention_64x16", |b| {
        b.iter(|| masked_attention(black_box(&q), black_box(&k), black_box(&v), &mask).unwrap())
    });
}

fn bench_decode(c: &mut Criterion) {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::random(config, 0).unwrap();
    let samples = generate_dataset(0, 1, 4, 4, 16, 4, 0.5).unwrap();
    let sample = &samples[0];
    let v = sample.image_token_count();
    let t = sample.question_tokens.len();
    let cn = sample.context_tokens.len();

    let rag_layout = build_layout(Variant::VanillaRag, v, t, cn, 0).unwrap();
    let rag_tokens: Vec<u32> = sample
        .question_tokens
        .iter()
        .chain(sample.context_tokens.iter())
        .copied()
        .collect();
    c.bench_function("greedy_decode_vanilla_rag", |b| {
        b.iter(|| {
            greedy_decode(
                &weights,
                black_box(&rag_layout),
                &sample.image_features,
                &rag_tokens,
                None,
                4,
                None,
            )
            .unwrap()
        })
    });

    let dual_layout = build_layout(Variant::MadRag, v, t, cn, 0).unwrap();
    let dual_tokens: Vec<u32> = sample
        .question_tokens
        .iter()
        .chain(sample.context_tokens.iter())
        .chain(sample.question_tokens.iter())
        .copied()
        .collect();
    let hook =
        MixIntervention::new(dual_layout.clone(), MixConfig::default(), config.n_layers).unwrap();
    c.bench_function("greedy_decode_madrag", |b| {
        b.iter(|| {
            greedy_decode(
                &weights,
                black_box(&dual_layout),
                &sample.image_features,
                &dual_tokens,
                Some(&hook as &dyn AttentionHook),
                4,
                None,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_attention_kernel, bench_decode);
criterion_main!(benches);
