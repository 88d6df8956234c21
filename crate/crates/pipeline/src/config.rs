//! Run configuration: JSON file, command-line overrides, and the
//! effective configuration echoed into every report.

use std::path::{Path, PathBuf};

use cm3_core::decoding::{DecodeConfig, Strategy};
use cm3_core::ngram::{DEFAULT_DELTA, DEFAULT_ORDER};
use cm3_core::objective::InfillConfig;
use cm3_core::retrieval::{RetrievalParams, DEFAULT_EMBED_DIM};
use cm3_core::vocab::{DEFAULT_N_IMAGE, DEFAULT_N_MASKS, DEFAULT_N_TEXT, DEFAULT_SEQ_LEN, DEFAULT_TOKENS_PER_IMAGE};
use cm3_core::VocabLayout;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PipelineError, Result};
use crate::experiments::ExperimentConfig;

pub const THREADS_ENV: &str = "CM3_PIPELINE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub n_text: u32,
    pub n_image: u32,
    pub n_masks: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            n_text: DEFAULT_N_TEXT,
            n_image: DEFAULT_N_IMAGE,
            n_masks: DEFAULT_N_MASKS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Decoding settings plus the pool shape used by `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    #[serde(flatten)]
    pub base: DecodeConfig,
    pub n_candidates: usize,
    /// Pool split such as `"cfg=4,cdk=4"`; when absent every candidate uses `strategy`.
    pub mix: Option<String>,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            base: DecodeConfig::default(),
            n_candidates: 8,
            mix: None,
        }
    }
}

impl DecodeSettings {
    /// Per-strategy configs and counts; counts must add up to `n_candidates`.
    pub fn pool_mix(&self) -> Result<Vec<(DecodeConfig, usize)>> {
        let parts = match &self.mix {
            None => vec![(self.base.strategy, self.n_candidates)],
            Some(m) => parse_mix(m)?,
        };
        let total: usize = parts.iter().map(|p| p.1).sum();
        if total != self.n_candidates {
            return Err(PipelineError::Usage(format!(
                "mix asks for {total} candidates but n is {}",
                self.n_candidates
            )));
        }
        if total == 0 {
            return Err(PipelineError::Usage("candidate count must be >= 1".into()));
        }
        Ok(parts
            .into_iter()
            .map(|(s, n)| {
                (
                    DecodeConfig {
                        strategy: s,
                        ..self.base
                    },
                    n,
                )
            })
            .collect())
    }
}

/// Parses `name=count` pairs separated by commas.
pub fn parse_mix(s: &str) -> Result<Vec<(Strategy, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (name, n) = p
                .split_once('=')
                .ok_or_else(|| PipelineError::Usage(format!("mix entry {p:?} is not name=count")))?;
            let strategy = Strategy::parse(name.trim()).map_err(|e| PipelineError::Usage(e.to_string()))?;
            let n = n
                .trim()
                .parse()
                .map_err(|_| PipelineError::Usage(format!("mix count {n:?} is not an integer")))?;
            Ok((strategy, n))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramConfig {
    pub order: usize,
    pub delta: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub k: usize,
    pub patch_size: usize,
    pub iters: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_N_IMAGE as usize,
            patch_size: 8,
            iters: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub vocab: VocabConfig,
    pub tokens_per_image: usize,
    pub seq_len: usize,
    /// Retrieved documents placed before each query (0..=3).
    pub retrieved: usize,
    pub paths: PathsConfig,
    pub decode: DecodeSettings,
    pub retrieval: RetrievalParams,
    pub infill: InfillConfig,
    pub ngram: NGramConfig,
    pub embedder: EmbedderConfig,
    pub vq: VqConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: None,
            vocab: VocabConfig::default(),
            tokens_per_image: DEFAULT_TOKENS_PER_IMAGE,
            seq_len: DEFAULT_SEQ_LEN,
            retrieved: 2,
            paths: PathsConfig::default(),
            decode: DecodeSettings::default(),
            retrieval: RetrievalParams::default(),
            infill: InfillConfig::default(),
            ngram: NGramConfig::default(),
            embedder: EmbedderConfig::default(),
            vq: VqConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn vocab_layout(&self) -> Result<VocabLayout> {
        Ok(VocabLayout::new(
            self.vocab.n_text,
            self.vocab.n_image,
            self.vocab.n_masks,
        )?)
    }

    /// Cross-field checks run after overrides are applied.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab_layout()?;
        if self.retrieved > cm3_core::retrieval::TRAINING_RETRIEVALS {
            return Err(PipelineError::Config(format!(
                "retrieved {} not in 0..=3",
                self.retrieved
            )));
        }
        if self.tokens_per_image == 0 || self.seq_len == 0 {
            return Err(PipelineError::Config(
                "tokens_per_image and seq_len must be >= 1".into(),
            ));
        }
        self.decode.base.validate()?;
        self.infill.validate(&vocab)?;
        self.experiment.validate()?;
        Ok(())
    }
}

/// Dotted paths of keys in `user` that `reference` does not have.
pub fn unknown_keys(user: &Value, reference: &Value) -> Vec<String> {
    fn walk(u: &Value, r: &Value, prefix: &str, out: &mut Vec<String>) {
        if let (Value::Object(u), Value::Object(r)) = (u, r) {
            for (k, v) in u {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match r.get(k) {
                    None => out.push(path),
                    Some(rv) => walk(v, rv, &path, out),
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(user, reference, "", &mut out);
    out
}

/// Parses a config document. Empty input gives the defaults; unknown keys
/// are returned as warnings rather than rejected.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    if text.trim().is_empty() {
        return Ok((RunConfig::default(), Vec::new()));
    }
    let value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    if !value.is_object() {
        return Err(PipelineError::Config("top level must be a JSON object".into()));
    }
    let reference = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let warnings = unknown_keys(&value, &reference)
        .into_iter()
        .map(|k| format!("unknown config key {k:?} ignored"))
        .collect();
    let cfg = serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok((cfg, warnings))
}

pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Thread count: flag, then the environment variable, then the config file.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>, config: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(v) = env.map(str::trim).filter(|v| !v.is_empty()) {
        let n: usize = v
            .parse()
            .map_err(|_| PipelineError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        return Ok(Some(n));
    }
    Ok(config)
}
