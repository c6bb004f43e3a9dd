//! Experiment configuration and its stable content hash.

use std::path::PathBuf;

use madrag_core::intervention::{LayerSpec, MixConfig};
use madrag_core::layout::Variant;
use madrag_core::toytask::TrainConfig;
use madrag_core::transformer::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_samples: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_symbols: usize,
    pub chunks_per_sample: usize,
    pub distractor_fraction: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_samples: 200,
            grid_rows: 4,
            grid_cols: 4,
            n_symbols: 16,
            chunks_per_sample: 4,
            distractor_fraction: 1.0,
        }
    }
}

/// Where the evaluated weights come from: a fresh training run or a saved
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Train(TrainConfig),
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub model: ModelConfig,
    pub source: ModelSource,
    pub variants: Vec<Variant>,
    pub mix: MixConfig,
    pub alphas: Vec<f64>,
    pub layer_presets: Vec<LayerSpec>,
    pub chunk_counts: Vec<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetParams::default(),
            model: ModelConfig::tiny(),
            source: ModelSource::Train(TrainConfig::default()),
            variants: Variant::ALL.to_vec(),
            mix: MixConfig::default(),
            alphas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            layer_presets: vec![
                LayerSpec::All,
                LayerSpec::Early,
                LayerSpec::Middle,
                LayerSpec::Later,
            ],
            chunk_counts: vec![0, 2, 4, 6],
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Stable hex digest of the configuration content. The output directory
    /// is excluded so the same experiment written elsewhere hashes (and
    /// therefore reproduces) identically.
    pub fn content_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out_dir = PathBuf::new();
        let json = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let a = ExperimentConfig::default();
        let json = serde_json::to_string(&a).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
    }
}
