//! `mage train-codec`: adversarial training of the waveform codec, with
//! periodic checkpoints, a loss-curve CSV, and bit-exact resume.

use mage_core::error::{MageError, Result};
use mage_core::mixwavcodec::train::{codec_train_step, sample_codec_batch, CodecTrainState};
use mage_core::TrainScalar;

use crate::commands::{
    open_loss_csv, save_codec_checkpoint, load_codec_state, write_loss_row, ConfigArgs,
};
use crate::runs::{checkpoint_path, latest_checkpoint};

#[derive(Debug, clap::Args)]
pub struct TrainCodecArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Total optimizer steps (default: train.codec_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Clips per optimizer step (default: train.batch_size).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint
    /// (default: train.ckpt_every).
    #[arg(long)]
    pub ckpt_every: Option<usize>,
    /// Continue from the newest codec checkpoint in this run.
    #[arg(long)]
    pub resume: bool,
}

const LOSS_HEADER: [&str; 8] = [
    "step",
    "total",
    "waveform_l1",
    "spectral",
    "kl",
    "adversarial",
    "feature_match",
    "disc_loss",
];

pub fn train_codec(args: TrainCodecArgs) -> Result<()> {
    let mut ctx = args.cfg.open("train-codec")?;
    let total = args.steps.unwrap_or(ctx.config.train.codec_steps) as u64;
    let batch_size = args.batch_size.unwrap_or(ctx.config.train.batch_size);
    let ckpt_every = args.ckpt_every.unwrap_or(ctx.config.train.ckpt_every) as u64;
    let log_every = ctx.config.train.log_every as u64;
    let ckpt_dir = ctx.paths.checkpoints();

    let existing = latest_checkpoint(&ckpt_dir, "codec")?;
    let mut state: CodecTrainState<TrainScalar> = match (&existing, args.resume) {
        (Some(path), true) => {
            let state = load_codec_state(path)?;
            println!("resuming from {} at step {}", path.display(), state.step);
            state
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
                "--resume given but {} holds no codec checkpoint",
                ckpt_dir.display()
            )));
        }
        (None, false) => CodecTrainState::new(ctx.config.codec.clone())?,
    };
    if state.step >= total {
        println!("checkpoint already at step {} >= {total}; nothing to do", state.step);
        return ctx.finish(&format!("already at step {}", state.step));
    }

    let csv_path = ctx.paths.logs().join("codec-loss.csv");
    let resume_at = if args.resume { Some(state.step) } else { None };
    let mut log = open_loss_csv(&csv_path, &LOSS_HEADER, resume_at)?;

    let mut last_saved = state.step;
    let mut last_total = f64::NAN;
    while state.step < total {
        let batch =
            sample_codec_batch::<TrainScalar, _>(&ctx.config.dataset, batch_size, state.rng())?;
        let losses = codec_train_step(&mut state, &batch)?;
        last_total = losses.total;
        if state.step % log_every == 0 || state.step == total {
            write_loss_row(
                &mut log,
                state.step,
                &[
                    losses.total,
                    losses.waveform_l1,
                    losses.multiscale_spectral,
                    losses.kl,
                    losses.adversarial,
                    losses.feature_match,
                    losses.discriminator_loss,
                ],
            )?;
        }
        if (ckpt_every > 0 && state.step % ckpt_every == 0) || state.step == total {
            let path = checkpoint_path(&ckpt_dir, "codec", state.step);
            save_codec_checkpoint(&path, &mut state)?;
            ctx.add_checkpoint(&path)?;
            ctx.set_steps("codec", state.step)?;
            last_saved = state.step;
            println!(
                "step {}/{total}: total loss {:.4}, checkpoint {}",
                state.step,
                losses.total,
                path.display()
            );
        }
    }
    log.flush()
        .map_err(|e| MageError::Io(std::io::Error::other(e.to_string())))?;
    debug_assert_eq!(last_saved, total);

    println!("trained codec to step {total} (final total loss {last_total:.4})");
    ctx.finish(&format!(
        "codec trained to step {total}, final total loss {last_total:.6}"
    ))
}
