//! Workflow commands and the plumbing they share.
//!
//! Each submodule implements one subcommand; this module holds what they
//! have in common: config-flag resolution, checkpoint formats (model +
//! optimizer + RNG state, so training resumes bit-exactly), and loss-curve
//! CSV handling.

pub mod ablate;
pub mod evaluate;
pub mod make_data;
pub mod synth;
pub mod train_codec;
pub mod train_flux;

pub use ablate::{ablate, AblateArgs};
pub use evaluate::{evaluate, EvaluateArgs};
pub use make_data::{make_data, MakeDataArgs};
pub use synth::{edit, generate, EditArgs, GenerateArgs};
pub use train_codec::{train_codec, TrainCodecArgs};
pub use train_flux::{train_flux, TrainFluxArgs};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mage_core::audio::Waveform;
use mage_core::ckpt::Checkpoint;
use mage_core::error::{MageError, Result};
use mage_core::fluxformer::train::FluxTrainState;
use mage_core::fluxformer::{FluxConfig, FluxFormer};
use mage_core::mixwavcodec::train::CodecTrainState;
use mage_core::mixwavcodec::{Codec, CodecConfig};
use mage_core::rng::RngState;
use mage_core::scalar::Scalar;
use mage_core::TrainScalar;

use crate::config::{default_run_dir, ConfigFile, Profile, RunConfig};
use crate::runs::{sha256_hex, RunContext};

/// Configuration and run-directory flags shared by every subcommand.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML run-configuration file; any subset of fields, unknown keys
    /// rejected.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Size preset for fields the config file leaves unset.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Parent directory for new run directories.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Run directory to create or reuse (default: `<out_dir>/run-<config
    /// hash>`).
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
}

impl ConfigArgs {
    /// Resolves flags + config file + profile defaults into a full config.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut file = match &self.config {
            Some(path) => ConfigFile::read(path)?,
            None => ConfigFile::default(),
        };
        if let Some(profile) = self.profile {
            file.profile = Some(profile);
        }
        if let Some(dir) = &self.out_dir {
            file.out_dir = Some(dir.to_string_lossy().into_owned());
        }
        file.resolve()
    }

    /// Resolves the config and opens (or creates) the run directory.
    pub fn open(&self, command: &str) -> Result<RunContext> {
        let cfg = self.resolve()?;
        let hash = sha256_hex(cfg.to_toml()?.as_bytes());
        let root = self
            .run_dir
            .clone()
            .unwrap_or_else(|| default_run_dir(&cfg, &hash));
        RunContext::open(root, cfg, command)
    }
}

/// Upcasts a waveform to the f64 the evaluation stack works in.
pub fn wave_to_f64<T: Scalar>(wave: &Waveform<T>) -> Waveform<f64> {
    Waveform {
        samples: wave.samples.mapv(|v| v.to_f64c()),
        sample_rate: wave.sample_rate,
    }
}

/// Everything beyond tensors that a codec training checkpoint carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecCkptMeta {
    pub codec: CodecConfig,
    pub rng: RngState,
    pub opt_g_steps: u64,
    pub opt_d_steps: u64,
}

/// Writes a complete codec training checkpoint (models, both optimizers,
/// RNG state).
pub fn save_codec_checkpoint(path: &Path, state: &mut CodecTrainState<TrainScalar>) -> Result<()> {
    let meta = CodecCkptMeta {
        codec: state.codec.cfg.clone(),
        rng: RngState::capture(state.rng()),
        opt_g_steps: state.opt_g.steps_taken(),
        opt_d_steps: state.opt_d.steps_taken(),
    };
    let mut ckpt = Checkpoint::new("codec", state.step, &meta)?;
    ckpt.add_params("codec", &state.codec.params);
    ckpt.add_params("disc", &state.disc.params);
    ckpt.add_named("opt_g", &state.opt_g.state_tensors());
    ckpt.add_named("opt_d", &state.opt_d.state_tensors());
    ckpt.save(path)
}

fn check_kind(ckpt: &Checkpoint, want: &str, path: &Path) -> Result<()> {
    if ckpt.kind != want {
        return Err(MageError::Checkpoint(format!(
            "{} is a '{}' checkpoint, expected '{}'",
            path.display(),
            ckpt.kind,
            want
        )));
    }
    Ok(())
}

/// Restores a full codec training state for resuming.
pub fn load_codec_state(path: &Path) -> Result<CodecTrainState<TrainScalar>> {
    let ckpt = Checkpoint::load(path)?;
    check_kind(&ckpt, "codec", path)?;
    let meta: CodecCkptMeta = ckpt.config_as()?;
    let mut state = CodecTrainState::new(meta.codec.clone())?;
    ckpt.restore_params("codec", &mut state.codec.params)?;
    ckpt.restore_params("disc", &mut state.disc.params)?;
    state.opt_g.load_state(meta.opt_g_steps, &ckpt.tensors_under("opt_g"));
    state.opt_d.load_state(meta.opt_d_steps, &ckpt.tensors_under("opt_d"));
    *state.rng() = meta.rng.restore()?;
    state.step = ckpt.step;
    Ok(state)
}

/// Loads just the codec (decoder/encoder weights) for inference.
pub fn load_codec(path: &Path) -> Result<Codec<TrainScalar>> {
    if !path.exists() {
        return Err(MageError::Data(format!(
            "codec checkpoint not found: {}",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    check_kind(&ckpt, "codec", path)?;
    let meta: CodecCkptMeta = ckpt.config_as()?;
    let mut codec = Codec::new(meta.codec)?;
    ckpt.restore_params("codec", &mut codec.params)?;
    Ok(codec)
}

/// Everything beyond tensors that a backbone training checkpoint carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluxCkptMeta {
    pub flux: FluxConfig,
    pub rng: RngState,
    pub opt_steps: u64,
    /// The frozen codec checkpoint this backbone was trained against.
    pub codec_ckpt: String,
    /// Content hash of that codec checkpoint at training time.
    pub codec_sha256: String,
}

/// Writes a complete backbone training checkpoint.
pub fn save_flux_checkpoint(
    path: &Path,
    trainer: &FluxTrainState<TrainScalar>,
    codec_ckpt: &str,
    codec_sha256: &str,
) -> Result<()> {
    let meta = FluxCkptMeta {
        flux: trainer.model.cfg.clone(),
        rng: trainer.rng_state(),
        opt_steps: trainer.opt.steps_taken(),
        codec_ckpt: codec_ckpt.to_string(),
        codec_sha256: codec_sha256.to_string(),
    };
    let mut ckpt = Checkpoint::new("flux", trainer.step as u64, &meta)?;
    ckpt.add_params("flux", &trainer.model.params);
    ckpt.add_named("opt", &trainer.opt.state_tensors());
    ckpt.save(path)
}

/// Restores a full backbone training state for resuming.
pub fn load_flux_state(path: &Path) -> Result<(FluxTrainState<TrainScalar>, FluxCkptMeta)> {
    let ckpt = Checkpoint::load(path)?;
    check_kind(&ckpt, "flux", path)?;
    let meta: FluxCkptMeta = ckpt.config_as()?;
    let model = FluxFormer::new(meta.flux.clone())?;
    let mut trainer = FluxTrainState::new(model);
    ckpt.restore_params("flux", &mut trainer.model.params)?;
    trainer.opt.load_state(meta.opt_steps, &ckpt.tensors_under("opt"));
    trainer.rng = meta.rng.restore()?;
    trainer.step = ckpt.step as usize;
    Ok((trainer, meta))
}

/// Loads just the backbone for inference, with its provenance metadata.
pub fn load_flux_model(path: &Path) -> Result<(FluxFormer<TrainScalar>, FluxCkptMeta)> {
    if !path.exists() {
        return Err(MageError::Data(format!(
            "flow-backbone checkpoint not found: {}",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    check_kind(&ckpt, "flux", path)?;
    let meta: FluxCkptMeta = ckpt.config_as()?;
    let mut model = FluxFormer::new(meta.flux.clone())?;
    ckpt.restore_params("flux", &mut model.params)?;
    Ok((model, meta))
}

/// Picks the backbone checkpoint: the explicit flag, else the newest one in
/// the run directory.
pub fn resolve_flux_ckpt(ctx: &RunContext, flag: &Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(path) => Ok(path.clone()),
        None => crate::runs::latest_checkpoint(&ctx.paths.checkpoints(), "flux")?.ok_or_else(
            || {
                MageError::Data(format!(
                    "no flow-backbone checkpoint in {}; run `mage train-flux` \
                     first or pass --flux-ckpt",
                    ctx.paths.checkpoints().display()
                ))
            },
        ),
    }
}

/// Picks the codec checkpoint for an inference command: the explicit flag,
/// else the path recorded in the backbone checkpoint (verified by content
/// hash so a silently swapped codec cannot decode with the wrong weights).
pub fn resolve_codec_ckpt(flag: &Option<PathBuf>, flux_meta: &FluxCkptMeta) -> Result<PathBuf> {
    if let Some(path) = flag {
        return Ok(path.clone());
    }
    let recorded = PathBuf::from(&flux_meta.codec_ckpt);
    if !recorded.exists() {
        return Err(MageError::Data(format!(
            "codec checkpoint recorded at training time is gone ({}); \
             pass --codec-ckpt",
            recorded.display()
        )));
    }
    let bytes = std::fs::read(&recorded)?;
    if sha256_hex(&bytes) != flux_meta.codec_sha256 {
        return Err(MageError::Checkpoint(format!(
            "{} no longer matches the codec this backbone was trained \
             against; pass --codec-ckpt explicitly",
            recorded.display()
        )));
    }
    Ok(recorded)
}

/// Opens a loss-curve CSV. A fresh log gets the header; on resume, rows
/// recorded after the restored step are dropped so the resumed curve
/// concatenates exactly onto the kept prefix.
pub fn open_loss_csv(
    path: &Path,
    header: &[&str],
    resume_at_step: Option<u64>,
) -> Result<csv::Writer<std::fs::File>> {
    if let (Some(step), true) = (resume_at_step, path.exists()) {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| MageError::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut kept: Vec<csv::StringRecord> = Vec::new();
        for record in reader.records() {
            let record =
                record.map_err(|e| MageError::Data(format!("bad row in loss log: {e}")))?;
            let row_step: u64 = record
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MageError::Data("loss log rows must start with a step".into()))?;
            if row_step <= step {
                kept.push(record);
            }
        }
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
        writer
            .write_record(header)
            .and_then(|()| kept.iter().try_for_each(|r| writer.write_record(r)))
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
        Ok(writer)
    } else {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
        writer
            .write_record(header)
            .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
        Ok(writer)
    }
}

/// Writes one CSV row of shortest-round-trip-formatted floats after the
/// step column.
pub fn write_loss_row(
    writer: &mut csv::Writer<std::fs::File>,
    step: u64,
    values: &[f64],
) -> Result<()> {
    let mut row = vec![step.to_string()];
    row.extend(values.iter().map(|v| v.to_string()));
    writer
        .write_record(&row)
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}
