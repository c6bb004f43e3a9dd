//! Output writers. Every emitted file embeds the run's seed, configuration
//! hash and artifact format version so results stay attributable.

use std::fs;
use std::path::Path;

use anyhow::Result;
use madrag_core::instrumentation::Heatmap;
use serde::Serialize;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_hash: String,
    pub artifact_version: u32,
}

impl ArtifactMeta {
    pub fn new(seed: u64, config_hash: &str) -> Self {
        ArtifactMeta {
            seed,
            config_hash: config_hash.to_string(),
            artifact_version: ARTIFACT_VERSION,
        }
    }

    /// Comment line prefixed to CSV and PGM outputs.
    pub fn comment(&self) -> String {
        format!(
            "seed={} config={} version={}",
            self.seed, self.config_hash, self.artifact_version
        )
    }
}

/// CSV with a leading `#` metadata comment, a header row and pre-formatted
/// data rows.
pub fn write_csv(path: &Path, meta: &ArtifactMeta, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("# {}\n{header}\n", meta.comment());
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// JSON wrapper `{ meta, data }`.
pub fn write_json<T: Serialize>(path: &Path, meta: &ArtifactMeta, data: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Wrapper<'a, T> {
        meta: &'a ArtifactMeta,
        data: &'a T,
    }
    let text = serde_json::to_string_pretty(&Wrapper { meta, data })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_pgm(path: &Path, meta: &ArtifactMeta, map: &Heatmap) -> Result<()> {
    let text = madrag_core::heatmap_to_pgm(map, &meta.comment());
    fs::write(path, text)?;
    Ok(())
}

pub fn write_heatmap_csv(path: &Path, meta: &ArtifactMeta, map: &Heatmap) -> Result<()> {
    let body = madrag_core::heatmap_to_csv(map);
    let text = format!("# {}\n{body}", meta.comment());
    fs::write(path, text)?;
    Ok(())
}
