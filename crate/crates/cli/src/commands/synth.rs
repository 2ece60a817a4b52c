//! `mage generate` and `mage edit`: run the Euler sampler from a trained
//! backbone + codec pair, write the WAV, and record a JSON sidecar with
//! everything needed to reproduce the file.

use std::path::PathBuf;

use serde::Serialize;

use mage_core::audio::{WavEncoding, Waveform};
use mage_core::error::{MageError, Result};
use mage_core::sampler::{self, InferenceConfig, InferenceRecord};
use mage_core::synthbench::{dataset_records, materialize_example, FrameSequence};
use mage_core::TrainScalar;

use crate::commands::{load_codec, load_flux_model, resolve_codec_ckpt, resolve_flux_ckpt, ConfigArgs};
use crate::config::RunConfig;
use crate::runs::RunContext;

/// Flags shared by `generate` and `edit`.
#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Flow-backbone checkpoint (default: newest in the run directory).
    #[arg(long, value_name = "FILE")]
    pub flux_ckpt: Option<PathBuf>,
    /// Codec checkpoint (default: the one the backbone was trained against).
    #[arg(long, value_name = "FILE")]
    pub codec_ckpt: Option<PathBuf>,
    /// Class label to condition on.
    #[arg(long)]
    pub prompt: Option<usize>,
    /// Dataset example index whose target frame track conditions the model.
    #[arg(long, value_name = "EXAMPLE")]
    pub frames: Option<usize>,
    /// Euler integration steps (default: inference.num_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale; passing it enables classifier-free guidance.
    #[arg(long, value_name = "GAMMA")]
    pub cfg_gamma: Option<f64>,
    /// Sampling seed (default: inference.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write 32-bit float WAV instead of 16-bit PCM.
    #[arg(long)]
    pub float_wav: bool,
    /// Output WAV path (default: a descriptive name under `audio/`).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, clap::Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Mixture WAV to edit (required).
    #[arg(long, value_name = "FILE")]
    pub mixture: Option<PathBuf>,
}

/// Sidecar written next to every output WAV.
#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    record: &'a InferenceRecord,
    flux_ckpt: String,
    codec_ckpt: String,
    mixture: Option<String>,
    output: String,
}

impl SynthArgs {
    fn inference_config(&self, cfg: &RunConfig) -> InferenceConfig {
        InferenceConfig {
            num_steps: self.steps.unwrap_or(cfg.inference.num_steps),
            guidance_scale: self.cfg_gamma.unwrap_or(cfg.inference.guidance_scale),
            cfg_enabled: self.cfg_gamma.is_some() || cfg.inference.cfg_enabled,
            seed: self.seed.unwrap_or(cfg.inference.seed),
        }
    }

    /// Materializes the conditioning frame track from a dataset example
    /// index.
    fn frames_payload(&self, cfg: &RunConfig) -> Result<Option<FrameSequence<TrainScalar>>> {
        let Some(index) = self.frames else {
            return Ok(None);
        };
        let records = dataset_records(&cfg.dataset)?;
        let record = records.get(index).ok_or_else(|| {
            MageError::InvalidArgument(format!(
                "--frames {index} is out of range; the dataset has {} examples",
                records.len()
            ))
        })?;
        let example = materialize_example::<TrainScalar>(&cfg.dataset, record)?;
        Ok(Some(example.target_frames().clone()))
    }

    fn validate_prompt(&self, cfg: &RunConfig) -> Result<()> {
        if let Some(p) = self.prompt {
            if p >= cfg.dataset.num_classes {
                return Err(MageError::InvalidArgument(format!(
                    "--prompt {p} is out of range; the dataset has {} classes",
                    cfg.dataset.num_classes
                )));
            }
        }
        Ok(())
    }

    fn default_name(&self, mode: &str, icfg: &InferenceConfig) -> String {
        let p = self.prompt.map_or("x".to_string(), |p| p.to_string());
        let f = self.frames.map_or("x".to_string(), |f| f.to_string());
        let guidance = if icfg.cfg_enabled {
            format!("-g{:.2}", icfg.guidance_scale)
        } else {
            String::new()
        };
        format!(
            "{mode}-p{p}-f{f}-s{}-k{}{guidance}.wav",
            icfg.seed, icfg.num_steps
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn write_outputs(
        &self,
        ctx: &RunContext,
        wave: &Waveform<TrainScalar>,
        record: &InferenceRecord,
        icfg: &InferenceConfig,
        flux_ckpt: &PathBuf,
        codec_ckpt: &PathBuf,
        mixture: Option<&PathBuf>,
    ) -> Result<PathBuf> {
        let path = match &self.out {
            Some(p) => p.clone(),
            None => ctx.paths.audio().join(self.default_name(&record.mode, icfg)),
        };
        let encoding = if self.float_wav {
            WavEncoding::Float32
        } else {
            WavEncoding::Pcm16
        };
        wave.write_wav(&path, encoding)?;
        let sidecar = Sidecar {
            record,
            flux_ckpt: flux_ckpt.to_string_lossy().into_owned(),
            codec_ckpt: codec_ckpt.to_string_lossy().into_owned(),
            mixture: mixture.map(|m| m.to_string_lossy().into_owned()),
            output: path.to_string_lossy().into_owned(),
        };
        let text = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(path.with_extension("json"), text)?;
        Ok(path)
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let args = args.synth;
    let ctx = args.cfg.open("generate")?;
    args.validate_prompt(&ctx.config)?;
    if args.prompt.is_none() && args.frames.is_none() {
        eprintln!("warning: no conditioning provided; sampling unconditionally");
    }
    let flux_path = resolve_flux_ckpt(&ctx, &args.flux_ckpt)?;
    let (flux, meta) = load_flux_model(&flux_path)?;
    let codec_path = resolve_codec_ckpt(&args.codec_ckpt, &meta)?;
    let codec = load_codec(&codec_path)?;
    let frames = args.frames_payload(&ctx.config)?;
    let icfg = args.inference_config(&ctx.config);

    let (wave, record) = sampler::generate(
        &flux,
        &codec,
        args.prompt,
        frames.as_ref(),
        ctx.config.dataset.sample_rate,
        ctx.config.dataset.segment_samples,
        &icfg,
    )?;
    let path = args.write_outputs(&ctx, &wave, &record, &icfg, &flux_path, &codec_path, None)?;
    println!("wrote {} ({} model evaluations)", path.display(), record.model_evals);
    ctx.finish(&format!("generated {}", path.display()))
}

pub fn edit(args: EditArgs) -> Result<()> {
    let mixture_path = args.mixture.clone().ok_or_else(|| {
        MageError::InvalidArgument("edit requires --mixture <WAV> (the audio to re-synthesize)".into())
    })?;
    let args = args.synth;
    let ctx = args.cfg.open("edit")?;
    args.validate_prompt(&ctx.config)?;
    let flux_path = resolve_flux_ckpt(&ctx, &args.flux_ckpt)?;
    let (flux, meta) = load_flux_model(&flux_path)?;
    let codec_path = resolve_codec_ckpt(&args.codec_ckpt, &meta)?;
    let codec = load_codec(&codec_path)?;
    if !mixture_path.exists() {
        return Err(MageError::Data(format!(
            "mixture WAV not found: {}",
            mixture_path.display()
        )));
    }
    let mixture = Waveform::<TrainScalar>::read_wav(&mixture_path)?;
    let frames = args.frames_payload(&ctx.config)?;
    let icfg = args.inference_config(&ctx.config);

    let (wave, record) =
        sampler::edit(&flux, &codec, &mixture, args.prompt, frames.as_ref(), &icfg)?;
    let path = args.write_outputs(
        &ctx,
        &wave,
        &record,
        &icfg,
        &flux_path,
        &codec_path,
        Some(&mixture_path),
    )?;
    println!("wrote {} ({} model evaluations)", path.display(), record.model_evals);
    ctx.finish(&format!(
        "edited {} -> {}",
        mixture_path.display(),
        path.display()
    ))
}
