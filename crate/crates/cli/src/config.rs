//! Run configuration: one JSON document drives the whole pipeline, with
//! dotted-path command-line overrides. All randomness flows from the
//! single top-level seed through named substreams, so every component is
//! independently reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trident_core::corpus::GenSpec;
use trident_core::decoding::DecodeConfig;
use trident_core::model::{Direction, ModelConfig};
use trident_core::rng;
use trident_core::training::TrainConfig;

use crate::error::CliError;

pub const OUT_ROOT_ENV: &str = "TRIDENT_OUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub valid_n: usize,
    pub test_n: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            valid_n: 200,
            test_n: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub merges: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            merges: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSection {
    #[serde(flatten)]
    pub settings: DecodeConfig,
    /// Candidate producer: "model" decodes the trained checkpoint;
    /// "tfidf", "mean_pool", and "max_pool" retrieve bidwords from the
    /// matching-baseline index over the training pairs.
    pub method: String,
    /// Which bidword direction to decode: "ab" (ad sources) or "qb"
    /// (query sources).
    pub direction: String,
    /// Override the source file; defaults to the direction's test TSV.
    pub source_file: Option<String>,
    /// Cap on the number of sources decoded.
    pub max_sources: Option<usize>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            settings: DecodeConfig::default(),
            method: "model".to_string(),
            direction: "qb".to_string(),
            source_file: None,
            max_sources: None,
        }
    }
}

impl DecodeSection {
    pub fn method(&self) -> Result<Option<trident_core::baselines::VectorizerMode>, CliError> {
        match self.method.as_str() {
            "model" => Ok(None),
            "tfidf" => Ok(Some(trident_core::baselines::VectorizerMode::TfIdf)),
            "mean_pool" => Ok(Some(trident_core::baselines::VectorizerMode::MeanPool)),
            "max_pool" => Ok(Some(trident_core::baselines::VectorizerMode::MaxPool)),
            other => Err(CliError::Config(format!(
                "decode.method must be model|tfidf|mean_pool|max_pool, got {other:?}"
            ))),
        }
    }

    pub fn direction(&self) -> Result<Direction, CliError> {
        match self.direction.as_str() {
            "ab" => Ok(Direction::AB),
            "qb" => Ok(Direction::QB),
            other => Err(CliError::Config(format!(
                "decode.direction must be \"ab\" or \"qb\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// How many top candidates form the generated set for P/R/F1.
    pub top_k_prf: usize,
    /// Exclude pairs flagged noisy from the reference-based metrics.
    pub exclude_noisy_refs: bool,
    pub max_items: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k_prf: 5,
            exclude_noisy_refs: true,
            max_items: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Fractions of the ad/query training data to keep.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Cap on evaluated test sources per run.
    pub max_sources: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fractions: vec![0.25, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            max_sources: 150,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    /// Cap on evaluated test sources.
    pub max_sources: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { max_sources: 200 }
    }
}

/// The full pipeline configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub gen: GenSpec,
    pub split: SplitConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Parses a config file and applies `--set key=value` overrides.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("config does not match the schema: {e}")))?;
        config.resolve_seeds();
        config.validate()?;
        Ok(config)
    }

    /// Derives component seeds from the top-level seed.
    pub fn resolve_seeds(&mut self) {
        self.gen.seed = rng::derive(self.seed, "corpus");
        self.train.seed = rng::derive(self.seed, "train");
    }

    pub fn init_seed(&self) -> u64 {
        rng::derive(self.seed, "init")
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive(self.seed, "split")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.out_dir.is_empty() {
            return Err(CliError::Config("out_dir must be set".to_string()));
        }
        self.gen.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.decode.direction()?;
        self.decode.method()?;
        if self.decode.settings.beam < 1 {
            return Err(CliError::Config("decode.beam must be >= 1".to_string()));
        }
        if self.eval.top_k_prf < 1 {
            return Err(CliError::Config("eval.top_k_prf must be >= 1".to_string()));
        }
        if self.sweep.fractions.is_empty()
            || self.sweep.fractions.iter().any(|f| !(0.0 < *f && *f <= 1.0))
        {
            return Err(CliError::Config(
                "sweep.fractions must be non-empty values in (0, 1]".to_string(),
            ));
        }
        if self.sweep.seeds.is_empty() {
            return Err(CliError::Config("sweep.seeds must be non-empty".to_string()));
        }
        Ok(())
    }

    /// Output directory, honoring the root override environment variable
    /// for relative paths.
    pub fn out_dir(&self) -> PathBuf {
        let dir = PathBuf::from(&self.out_dir);
        if dir.is_absolute() {
            return dir;
        }
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) if !root.is_empty() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

/// Sets `path` (dotted) in the JSON tree. The value is parsed as JSON when
/// possible and falls back to a plain string.
fn apply_override(root: &mut serde_json::Value, path: &str, raw: &str) -> Result<(), CliError> {
    let parsed = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override path {path:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(CliError::Config(format!(
                "override path {path:?} crosses a non-object value"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let last = parts[parts.len() - 1];
    match cursor.as_object_mut() {
        Some(map) => {
            map.insert(last.to_string(), parsed);
            Ok(())
        }
        None => Err(CliError::Config(format!(
            "override path {path:?} crosses a non-object value"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn tempdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("trident-cfg-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = tempdir("defaults");
        let path = write_config(&dir, r#"{"seed": 7, "out_dir": "runs/x"}"#);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.lambda, 0.6);
        assert_eq!(cfg.decode.settings.beam, 32);
        assert_eq!(cfg.gen.seed, rng::derive(7, "corpus"));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = tempdir("overrides");
        let path = write_config(&dir, r#"{"seed": 1, "out_dir": "runs/x"}"#);
        let overrides = vec![
            ("train.lambda".to_string(), "0.9".to_string()),
            ("decode.direction".to_string(), "ab".to_string()),
            ("gen.n_topics".to_string(), "6".to_string()),
        ];
        let cfg = RunConfig::load(&path, &overrides).unwrap();
        assert_eq!(cfg.train.lambda, 0.9);
        assert_eq!(cfg.decode.direction, "ab");
        assert_eq!(cfg.gen.n_topics, 6);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempdir("invalid");
        let path = write_config(&dir, r#"{"seed": 1, "out_dir": "runs/x"}"#);
        let bad = vec![("train.lambda".to_string(), "1.5".to_string())];
        assert!(matches!(
            RunConfig::load(&path, &bad),
            Err(CliError::Config(_))
        ));
        let bad_dir = vec![("decode.direction".to_string(), "xy".to_string())];
        assert!(matches!(
            RunConfig::load(&path, &bad_dir),
            Err(CliError::Config(_))
        ));
        std::fs::remove_dir_all(dir).ok();
    }

}
