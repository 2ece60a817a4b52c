//! Layered run configuration.
//!
//! A run is configured in three layers, later layers winning field by field:
//!
//! 1. profile defaults (`tiny` or `full_scale`), derived from one root seed;
//! 2. an optional TOML config file with any subset of sections and fields;
//! 3. command-line overrides (`--profile`, `--seed`, `--out-dir`).
//!
//! The resolved [`RunConfig`] has no optional fields, round-trips through
//! TOML bit-for-bit, and is written verbatim into every run directory so the
//! run is reproducible from its own artifacts. Unknown keys anywhere —
//! top-level or inside a section — are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mage_core::error::{MageError, Result};
use mage_core::evalkit::EmbedderConfig;
use mage_core::fluxformer::FluxConfig;
use mage_core::mixwavcodec::CodecConfig;
use mage_core::sampler::InferenceConfig;
use mage_core::synthbench::{BenchConfig, Split};

/// Root seed used when neither the config file nor the flags set one.
pub const DEFAULT_SEED: u64 = 7;

/// Preset bundle of dataset / model / training sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Minutes-scale models sized for laptops and CI.
    Tiny,
    /// Full-size geometry (hours of compute; same code paths).
    FullScale,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Profile::Tiny => write!(f, "tiny"),
            Profile::FullScale => write!(f, "full_scale"),
        }
    }
}

/// Training-loop bookkeeping shared by both trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps for `train-codec`.
    pub codec_steps: usize,
    /// Optimizer steps for `train-flux`.
    pub flux_steps: usize,
    /// Examples per optimizer step.
    pub batch_size: usize,
    /// Checkpoint cadence in steps (a final checkpoint is always written).
    pub ckpt_every: usize,
    /// Loss-CSV cadence in steps (the final step is always logged).
    pub log_every: usize,
}

/// What `evaluate` scores and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Dataset split to evaluate.
    pub split: Split,
    /// Cap on evaluated examples per table row; 0 means the whole split.
    pub max_examples: usize,
    /// Toy joint-embedding model used for similarity and distribution
    /// metrics.
    pub embedder: EmbedderConfig,
}

/// Grid settings for `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Model seeds each variant is trained with (medians are taken across
    /// these).
    pub seeds: Vec<u64>,
    /// Backbone training steps per variant × seed (a reduced budget; the
    /// grid retrains the backbone many times).
    pub flux_steps: usize,
    /// Cap on evaluated examples per variant; 0 means the whole split.
    pub max_examples: usize,
}

/// Fully-resolved configuration for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root seed; sections that were not explicitly configured derive their
    /// seeds from it.
    pub seed: u64,
    /// Directory new run directories are created under.
    pub out_dir: String,
    pub dataset: BenchConfig,
    pub codec: CodecConfig,
    pub flux: FluxConfig,
    pub inference: InferenceConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// The complete default configuration for a profile and root seed.
    pub fn profile_defaults(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Tiny => {
                let mut flux = FluxConfig::tiny(seed);
                // The core preset is sized for long runs; the tiny profile
                // trains in minutes, so it uses a hotter schedule.
                flux.learning_rate = 2e-3;
                flux.lr_decay_steps = vec![600, 900];
                RunConfig {
                    profile,
                    seed,
                    out_dir: "runs".to_string(),
                    dataset: BenchConfig::tiny(seed),
                    codec: CodecConfig::tiny(seed),
                    flux,
                    inference: InferenceConfig::default_quality(seed),
                    train: TrainConfig {
                        codec_steps: 500,
                        flux_steps: 1200,
                        batch_size: 4,
                        ckpt_every: 250,
                        log_every: 10,
                    },
                    eval: EvalConfig {
                        split: Split::Val,
                        max_examples: 8,
                        embedder: EmbedderConfig {
                            seed,
                            ..EmbedderConfig::default()
                        },
                    },
                    ablate: AblateConfig {
                        seeds: vec![1, 2, 3],
                        flux_steps: 400,
                        max_examples: 6,
                    },
                }
            }
            Profile::FullScale => RunConfig {
                profile,
                seed,
                out_dir: "runs".to_string(),
                dataset: BenchConfig::full_scale(seed),
                codec: CodecConfig::full_scale(seed),
                flux: FluxConfig::full_scale(seed),
                inference: InferenceConfig::default_quality(seed),
                train: TrainConfig {
                    codec_steps: 200_000,
                    flux_steps: 400_000,
                    batch_size: 16,
                    ckpt_every: 10_000,
                    log_every: 100,
                },
                eval: EvalConfig {
                    split: Split::Test,
                    max_examples: 0,
                    embedder: EmbedderConfig {
                        seed,
                        ..EmbedderConfig::default()
                    },
                },
                ablate: AblateConfig {
                    seeds: vec![1, 2, 3],
                    flux_steps: 100_000,
                    max_examples: 0,
                },
            },
        }
    }

    /// Validates every section and the cross-section consistency rules.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.codec.validate()?;
        self.flux.validate()?;
        self.inference.validate()?;
        if self.flux.latent_dim != self.codec.latent_dim {
            return Err(MageError::Config(format!(
                "flux.latent_dim ({}) must equal codec.latent_dim ({})",
                self.flux.latent_dim, self.codec.latent_dim
            )));
        }
        if self.flux.cond.num_classes != self.dataset.num_classes {
            return Err(MageError::Config(format!(
                "flux.cond.num_classes ({}) must equal dataset.num_classes ({})",
                self.flux.cond.num_classes, self.dataset.num_classes
            )));
        }
        if self.flux.cond.frame_dim != self.dataset.frame_dim {
            return Err(MageError::Config(format!(
                "flux.cond.frame_dim ({}) must equal dataset.frame_dim ({})",
                self.flux.cond.frame_dim, self.dataset.frame_dim
            )));
        }
        let tokens = self
            .dataset
            .segment_samples
            .div_ceil(self.codec.downsample_ratio());
        if self.flux.max_positions < tokens {
            return Err(MageError::Config(format!(
                "flux.max_positions ({}) is too small: {}-sample clips at \
                 downsample ratio {} need {} audio tokens",
                self.flux.max_positions,
                self.dataset.segment_samples,
                self.codec.downsample_ratio(),
                tokens
            )));
        }
        if self.train.batch_size == 0
            || self.train.codec_steps == 0
            || self.train.flux_steps == 0
            || self.train.log_every == 0
        {
            return Err(MageError::Config(
                "train.batch_size, train.codec_steps, train.flux_steps, and \
                 train.log_every must all be positive"
                    .into(),
            ));
        }
        if self.ablate.seeds.is_empty() {
            return Err(MageError::Config("ablate.seeds must not be empty".into()));
        }
        if self.ablate.flux_steps == 0 {
            return Err(MageError::Config("ablate.flux_steps must be positive".into()));
        }
        Ok(())
    }

    /// Serializes the resolved config as canonical TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MageError::Config(e.to_string()))
    }

    /// Parses a fully-resolved config (every field present).
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MageError::Config(e.to_string()))
    }
}

/// The raw shape of a user config file: everything optional, unknown keys
/// rejected. Section bodies stay as raw TOML values so individual fields can
/// override profile defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub dataset: Option<toml::Value>,
    pub codec: Option<toml::Value>,
    pub flux: Option<toml::Value>,
    pub inference: Option<toml::Value>,
    pub train: Option<toml::Value>,
    pub eval: Option<toml::Value>,
    pub ablate: Option<toml::Value>,
}

impl ConfigFile {
    /// Parses a config file's text.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MageError::Config(e.to_string()))
    }

    /// Reads and parses a config file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MageError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Resolves the file against its profile's defaults and validates the
    /// result.
    pub fn resolve(self) -> Result<RunConfig> {
        let profile = self.profile.unwrap_or(Profile::Tiny);
        let seed = self.seed.unwrap_or(DEFAULT_SEED);
        let mut cfg = RunConfig::profile_defaults(profile, seed);
        if let Some(out_dir) = self.out_dir {
            cfg.out_dir = out_dir;
        }
        overlay(&mut cfg.dataset, self.dataset, "dataset")?;
        overlay(&mut cfg.codec, self.codec, "codec")?;
        overlay(&mut cfg.flux, self.flux, "flux")?;
        overlay(&mut cfg.inference, self.inference, "inference")?;
        overlay(&mut cfg.train, self.train, "train")?;
        overlay(&mut cfg.eval, self.eval, "eval")?;
        overlay(&mut cfg.ablate, self.ablate, "ablate")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads and resolves a config file, or the pure profile defaults when no
/// path is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let file = match path {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    file.resolve()
}

/// Merges a partial TOML section onto a fully-populated default, then
/// re-deserializes so unknown keys and type errors surface with the section
/// name attached.
fn overlay<T>(slot: &mut T, patch: Option<toml::Value>, section: &str) -> Result<()>
where
    T: Serialize + DeserializeOwned,
{
    let Some(patch) = patch else {
        return Ok(());
    };
    let mut base = toml::Value::try_from(&*slot)
        .map_err(|e| MageError::Config(format!("[{section}]: {e}")))?;
    merge_value(&mut base, patch);
    *slot = base
        .try_into()
        .map_err(|e| MageError::Config(format!("[{section}]: {e}")))?;
    Ok(())
}

/// Recursive table merge: patch tables override base keys field by field;
/// any non-table value replaces the base value outright.
fn merge_value(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(base), toml::Value::Table(patch)) => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => merge_value(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Default run directory for a config: `<out_dir>/run-<first 12 hex of the
/// config hash>`, so identical configs share a directory and different
/// configs never collide.
pub fn default_run_dir(cfg: &RunConfig, config_hash: &str) -> PathBuf {
    PathBuf::from(&cfg.out_dir).join(format!("run-{}", &config_hash[..12]))
}
