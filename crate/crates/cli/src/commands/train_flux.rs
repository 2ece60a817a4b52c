//! `mage train-flux`: train the flow backbone in the latent space of a
//! frozen codec, with the same checkpoint / CSV / bit-exact-resume contract
//! as the codec trainer.
//!
//! The codec is structurally frozen: its checkpoint is only ever read, and
//! the backbone trainer never holds codec parameters, so there is no flag to
//! unfreeze and nothing that could drift.

use std::path::PathBuf;

use rand::Rng;

use mage_core::error::{MageError, Result};
use mage_core::fluxformer::train::{prepare_example, FluxExample, FluxTrainState};
use mage_core::fluxformer::FluxFormer;
use mage_core::rng::seeded_rng;
use mage_core::synthbench::{dataset_records, materialize_example, Split};
use mage_core::TrainScalar;

use crate::commands::{
    load_codec, load_flux_state, open_loss_csv, save_flux_checkpoint, write_loss_row, ConfigArgs,
};
use crate::runs::{checkpoint_path, latest_checkpoint, sha256_hex};

#[derive(Debug, clap::Args)]
pub struct TrainFluxArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Frozen codec checkpoint providing the latent space (default: the
    /// newest codec checkpoint in this run).
    #[arg(long, value_name = "FILE")]
    pub codec_ckpt: Option<PathBuf>,
    /// Total optimizer steps (default: train.flux_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Examples per optimizer step (default: train.batch_size).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint
    /// (default: train.ckpt_every).
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    /// Continue from the newest backbone checkpoint in this run.
    #[arg(long)]
    pub resume: bool,
}

const LOSS_HEADER: [&str; 5] = ["step", "loss", "grad_norm", "clip_scale", "lr"];

/// Encodes every train-split example into backbone training inputs, one at a
/// time so full-scale datasets never hold all waveforms in memory.
pub fn prepare_training_set(
    cfg: &crate::config::RunConfig,
    codec: &mage_core::mixwavcodec::Codec<TrainScalar>,
) -> Result<Vec<FluxExample<TrainScalar>>> {
    let records = dataset_records(&cfg.dataset)?;
    let mut prepared = Vec::new();
    for record in records.iter().filter(|r| r.split == Split::Train) {
        let example = materialize_example::<TrainScalar>(&cfg.dataset, record)?;
        prepared.push(prepare_example(codec, &example)?);
    }
    if prepared.is_empty() {
        return Err(MageError::Data("the train split is empty".into()));
    }
    Ok(prepared)
}

/// Draws the step's batch indices from a per-step generator, so batch
/// composition is a pure function of (seed, step) and resuming cannot
/// disturb it.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, pool: usize) -> Vec<usize> {
    let mut rng = seeded_rng(seed, "flux-batches", step);
    (0..batch_size).map(|_| rng.gen_range(0..pool)).collect()
}

pub fn train_flux(args: TrainFluxArgs) -> Result<()> {
    let mut ctx = args.cfg.open("train-flux")?;
    let total = args.steps.unwrap_or(ctx.config.train.flux_steps);
    let batch_size = args.batch_size.unwrap_or(ctx.config.train.batch_size);
    let ckpt_every = args.ckpt_every.unwrap_or(ctx.config.train.ckpt_every);
    let log_every = ctx.config.train.log_every;
    let ckpt_dir = ctx.paths.checkpoints();

    let codec_path = match &args.codec_ckpt {
        Some(path) => path.clone(),
        None => latest_checkpoint(&ckpt_dir, "codec")?.ok_or_else(|| {
            MageError::Data(format!(
                "no codec checkpoint in {}; run `mage train-codec` first or \
                 pass --codec-ckpt",
                ckpt_dir.display()
            ))
        })?,
    };
    let codec = load_codec(&codec_path)?;
    let codec_sha = sha256_hex(&std::fs::read(&codec_path)?);
    if codec.cfg.latent_dim != ctx.config.flux.latent_dim {
        return Err(MageError::Config(format!(
            "codec checkpoint has latent_dim {}, backbone expects {}",
            codec.cfg.latent_dim, ctx.config.flux.latent_dim
        )));
    }

    let existing = latest_checkpoint(&ckpt_dir, "flux")?;
    let mut trainer: FluxTrainState<TrainScalar> = match (&existing, args.resume) {
        (Some(path), true) => {
            let (trainer, meta) = load_flux_state(path)?;
            if meta.codec_sha256 != codec_sha {
                return Err(MageError::Checkpoint(format!(
                    "{} was trained against a different codec checkpoint; \
                     keep using {} or start a fresh run",
                    path.display(),
                    meta.codec_ckpt
                )));
            }
            println!("resuming from {} at step {}", path.display(), trainer.step);
            trainer
        }
        (Some(path), false) => {
            return Err(MageError::Config(format!(
                "{} already exists; pass --resume to continue training or \
                 use a fresh --run-dir",
                path.display()
            )));
        }
        (None, true) => {
            return Err(MageError::Data(format!(
                "--resume given but {} holds no backbone checkpoint",
                ckpt_dir.display()
            )));
        }
        (None, false) => FluxTrainState::new(FluxFormer::new(ctx.config.flux.clone())?),
    };
    if trainer.step >= total {
        println!("checkpoint already at step {} >= {total}; nothing to do", trainer.step);
        return ctx.finish(&format!("already at step {}", trainer.step));
    }

    println!("encoding the train split with the frozen codec…");
    let prepared = prepare_training_set(&ctx.config, &codec)?;
    println!("{} training examples ready", prepared.len());

    let csv_path = ctx.paths.logs().join("flux-loss.csv");
    let resume_at = if args.resume { Some(trainer.step as u64) } else { None };
    let mut log = open_loss_csv(&csv_path, &LOSS_HEADER, resume_at)?;

    let codec_path_str = codec_path.to_string_lossy().into_owned();
    let mut last_loss = f64::NAN;
    while trainer.step < total {
        let batch: Vec<FluxExample<TrainScalar>> = batch_indices(
            ctx.config.flux.seed,
            trainer.step as u64,
            batch_size,
            prepared.len(),
        )
        .into_iter()
        .map(|i| prepared[i].clone())
        .collect();
        let report = trainer.train_step(&batch)?;
        last_loss = report.loss;
        if trainer.step % log_every == 0 || trainer.step == total {
            write_loss_row(
                &mut log,
                trainer.step as u64,
                &[report.loss, report.grad_norm, report.clip_scale, report.lr],
            )?;
        }
        if (ckpt_every > 0 && trainer.step % ckpt_every == 0) || trainer.step == total {
            let path = checkpoint_path(&ckpt_dir, "flux", trainer.step as u64);
            save_flux_checkpoint(&path, &trainer, &codec_path_str, &codec_sha)?;
            ctx.add_checkpoint(&path)?;
            ctx.set_steps("flux", trainer.step as u64)?;
            println!(
                "step {}/{total}: loss {:.4}, checkpoint {}",
                trainer.step,
                report.loss,
                path.display()
            );
        }
    }
    log.flush()
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;

    println!("trained backbone to step {total} (final loss {last_loss:.4})");
    ctx.finish(&format!(
        "backbone trained to step {total} against {codec_path_str}, final loss {last_loss:.6}"
    ))
}
