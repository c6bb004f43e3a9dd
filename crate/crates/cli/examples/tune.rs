//! Scratch harness for tuning the toy-task trainer. Not part of the shipped
//! workflows; kept as an example so hyperparameter probes stay reproducible.

use madrag_core::toytask::{generate_dataset, train, TrainConfig};
use madrag_core::transformer::ModelConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let jitter: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let samples = generate_dataset(seed, 16384, 4, 4, 16, 0, 0.0).unwrap();
    let tc = TrainConfig {
        learning_rate: lr,
        steps,
        batch_size: 32,
        seed,
        gradient_check: false,
        position_jitter: jitter,
    };
    let t0 = std::time::Instant::now();
    let out = train(ModelConfig::tiny(), &samples, &tc).unwrap();
    println!(
        "steps={steps} lr={lr} jitter={jitter} seed={seed}: loss {:.4} -> {:.4}, train_acc {:.4} ({:.1}s)",
        out.initial_loss,
        out.final_loss,
        out.train_accuracy,
        t0.elapsed().as_secs_f64()
    );
}
