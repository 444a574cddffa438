//! Pipeline configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use irnlm::corpus::StreamMode;
use irnlm::decode::{DummyStrategy, LogisticConfig};
use irnlm::encoding::{default_lambda_grid, HrfParams};
use irnlm::glove::GloveConfig;
use irnlm::minigpt::TrainConfig;
use irnlm::synth::{BoldConfig, CorpusConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::design::{EventTime, StreamRows};
use crate::error::CliError;
use crate::experiments::GptShape;
use crate::feature::Feature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every derived seed.
    pub seed: u64,
    /// Directory holding all derived artifacts.
    pub workdir: PathBuf,
    pub paths: Paths,
    pub corpus: CorpusStage,
    pub synth: SynthStage,
    pub glove: GloveConfig,
    pub gpt: GptStage,
    pub embed: EmbedStage,
    pub encode: EncodeStage,
    pub stats: StatsStage,
    pub decode: DecodeStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workdir: PathBuf::from("irnlm-work"),
            paths: Paths::default(),
            corpus: CorpusStage::default(),
            synth: SynthStage::default(),
            glove: GloveConfig::default(),
            gpt: GptStage::default(),
            embed: EmbedStage::default(),
            encode: EncodeStage::default(),
            stats: StatsStage::default(),
            decode: DecodeStage::default(),
        }
    }
}

/// External inputs. Unset entries are produced by the `synth` stages
/// inside the work directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Annotated corpus the models are trained on.
    pub train_corpus: Option<PathBuf>,
    /// Annotated stimulus corpus, with timings and run ids.
    pub stimulus: Option<PathBuf>,
    /// Directory of `audio_run{r}.csv` envelopes for the stimulus runs.
    pub audio_dir: Option<PathBuf>,
    /// `word<TAB>category` table used for semantic decoding labels.
    pub word_categories: Option<PathBuf>,
    /// Directory of `sub-XX/run-R.bold` files.
    pub bold_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusStage {
    /// Streams processed when a command does not name one.
    pub modes: Vec<StreamMode>,
}

impl Default for CorpusStage {
    fn default() -> Self {
        CorpusStage {
            modes: vec![StreamMode::Syntactic, StreamMode::Semantic],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    pub train_corpus: CorpusConfig,
    pub stimulus: CorpusConfig,
    pub bold: BoldConfig,
    /// Features driving the semantic and syntactic voxels.
    pub drive_semantic: Feature,
    pub drive_syntactic: Feature,
    pub layout_seed: u64,
}

impl Default for SynthStage {
    fn default() -> Self {
        SynthStage {
            train_corpus: CorpusConfig {
                n_tokens: 100_000,
                n_runs: 1,
                ..Default::default()
            },
            stimulus: CorpusConfig::default(),
            bold: BoldConfig::default(),
            drive_semantic: Feature::glove(StreamMode::Semantic),
            drive_syntactic: Feature::glove(StreamMode::Syntactic),
            layout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptStage {
    pub shape: GptShape,
    pub train: TrainConfig,
}

impl Default for GptStage {
    fn default() -> Self {
        GptStage {
            shape: GptShape::default(),
            train: TrainConfig {
                epochs: 3,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedStage {
    /// Sliding-window length `N` for contextual extraction.
    pub window: usize,
    /// Hidden layer to read; the model's default extraction layer if unset.
    pub layer: Option<usize>,
}

impl Default for EmbedStage {
    fn default() -> Self {
        EmbedStage {
            window: 16,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeStage {
    pub hrf: HrfParams,
    pub lambdas: Vec<f64>,
    /// Feature sets encoded when a command does not name one.
    pub features: Vec<Feature>,
    pub event_time: EventTime,
    pub stream_rows: StreamRows,
}

impl Default for EncodeStage {
    fn default() -> Self {
        EncodeStage {
            hrf: HrfParams::default(),
            lambdas: default_lambda_grid(),
            features: vec![
                Feature::glove(StreamMode::Syntactic),
                Feature::glove(StreamMode::Semantic),
            ],
            event_time: EventTime::Offset,
            stream_rows: StreamRows::ZeroFill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsStage {
    pub q: f64,
    pub fwhm_mm: f64,
    /// Percentile above which voxels count as peaks.
    pub percentile: f64,
    /// Feature pair entering the specificity index.
    pub semantic: Feature,
    pub syntactic: Feature,
}

impl Default for StatsStage {
    fn default() -> Self {
        StatsStage {
            q: 0.005,
            fwhm_mm: 6.0,
            percentile: 90.0,
            semantic: Feature::glove(StreamMode::Semantic),
            syntactic: Feature::glove(StreamMode::Syntactic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeStage {
    pub logistic: LogisticConfig,
    pub dummy: DummyStrategy,
    pub features: Vec<Feature>,
}

impl Default for DecodeStage {
    fn default() -> Self {
        DecodeStage {
            logistic: LogisticConfig::default(),
            dummy: DummyStrategy::MostFrequent,
            features: vec![
                Feature::glove(StreamMode::Syntactic),
                Feature::glove(StreamMode::Semantic),
            ],
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from the defaults) and applies `key.path=value`
    /// overrides, where `value` is JSON or a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("config file {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Config(format!("config file {}: {e}", p.display())))?
            }
            None => serde_json::to_value(PipelineConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if !(self.stats.q > 0.0 && self.stats.q < 1.0) {
            return bad("stats.q", "must lie in (0, 1)");
        }
        if !(self.stats.fwhm_mm >= 0.0) {
            return bad("stats.fwhm_mm", "must be >= 0");
        }
        if !(self.stats.percentile > 0.0 && self.stats.percentile < 100.0) {
            return bad("stats.percentile", "must lie in (0, 100)");
        }
        if self.encode.lambdas.is_empty() || self.encode.lambdas.iter().any(|&l| !(l > 0.0)) {
            return bad("encode.lambdas", "needs at least one positive value");
        }
        if self.embed.window < 1 {
            return bad("embed.window", "must be >= 1");
        }
        if self.corpus.modes.is_empty() {
            return bad("corpus.modes", "needs at least one stream");
        }
        for (name, p) in [
            ("paths.train_corpus", &self.paths.train_corpus),
            ("paths.stimulus", &self.paths.stimulus),
            ("paths.audio_dir", &self.paths.audio_dir),
            ("paths.word_categories", &self.paths.word_categories),
            ("paths.bold_dir", &self.paths.bold_dir),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Seed of one stage, derived from the root seed and the stage label.
    /// A seed written in the stage's own section is added on top.
    pub fn stage_seed(&self, label: &str, offset: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes")).wrapping_add(offset)
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Ok(())
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    format!("{:x}", Sha256::digest(&bytes))
}
