//! Flow-matching training loop for the multimodal transformer.
//!
//! Examples arrive with latents already produced by a frozen codec (the
//! trainer never holds codec parameters, so it cannot update them). Each
//! step draws a fresh modality mask, interpolation time, and noise sample
//! per example, runs the backbone on one tape, and takes a clipped AdamW
//! step on the mean flow-matching loss. The learning rate halves at the
//! configured step marks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MageError, Result};
use crate::graph::Tape;
use crate::mixwavcodec::{Codec, EncodeMode, LatentSequence};
use crate::nn::AdamW;
use crate::rng::{seeded_rng, RngState};
use crate::scalar::Scalar;
use crate::synthbench::TrainingExample;

use super::{
    apply_static_frame_augmentation, flow_loss_tape, interpolate, sample_mask, ConditionSet,
    FluxFormer, ModeMask,
};

/// One pre-encoded training example: target latents plus optional
/// conditioning payloads. The curriculum can only activate modalities that
/// are present.
#[derive(Debug, Clone)]
pub struct FluxExample<T: Scalar> {
    pub target: LatentSequence<T>,
    pub mixture: Option<LatentSequence<T>>,
    pub prompt: Option<usize>,
    pub frames: Option<Array2<T>>,
}

/// Encodes a benchmark example with a frozen codec (posterior means, so
/// preparation is deterministic) and attaches prompt and frame payloads.
pub fn prepare_example<T: Scalar>(
    codec: &Codec<T>,
    example: &TrainingExample<T>,
) -> Result<FluxExample<T>> {
    let target = codec.encode(example.target(), EncodeMode::<ChaCha8Rng>::Deterministic)?;
    let mixture = codec.encode(&example.mixture, EncodeMode::<ChaCha8Rng>::Deterministic)?;
    Ok(FluxExample {
        target,
        mixture: Some(mixture),
        prompt: Some(example.target_label()),
        frames: Some(example.target_frames().features.clone()),
    })
}

/// Scalar diagnostics from one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

/// Mutable training state: model, optimizer, step counter, and the
/// curriculum RNG (capturable for bit-exact resume).
#[derive(Debug, Clone)]
pub struct FluxTrainState<T: Scalar> {
    pub model: FluxFormer<T>,
    pub opt: AdamW<T>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> FluxTrainState<T> {
    /// Fresh optimizer and curriculum stream for a new model.
    pub fn new(model: FluxFormer<T>) -> Self {
        let rng = seeded_rng(model.cfg.seed, "flux-train", 0);
        let opt = AdamW::new(model.cfg.learning_rate, 0.0);
        FluxTrainState {
            model,
            opt,
            step: 0,
            rng,
        }
    }

    /// The learning rate in effect at `step` (halved at each decay mark).
    pub fn lr_at(&self, step: usize) -> f64 {
        let halvings = self
            .model
            .cfg
            .lr_decay_steps
            .iter()
            .filter(|&&mark| mark <= step)
            .count();
        self.model.cfg.learning_rate * 0.5f64.powi(halvings as i32)
    }

    /// One optimizer step with curriculum-sampled masks.
    pub fn train_step(&mut self, batch: &[FluxExample<T>]) -> Result<StepReport> {
        let probs = self.model.cfg.mask_probs;
        let masks: Vec<ModeMask> = (0..batch.len())
            .map(|_| sample_mask(&mut self.rng, probs))
            .collect();
        self.train_step_masked(batch, &masks)
    }

    /// One optimizer step with caller-fixed masks (overfitting checks,
    /// per-regime probes).
    pub fn train_step_masked(
        &mut self,
        batch: &[FluxExample<T>],
        masks: &[ModeMask],
    ) -> Result<StepReport> {
        if batch.is_empty() || batch.len() != masks.len() {
            return Err(MageError::InvalidArgument(format!(
                "batch of {} examples with {} masks",
                batch.len(),
                masks.len()
            )));
        }
        let cfg = self.model.cfg.clone();
        let sigma_min = T::from_f64c(cfg.sigma_min);
        let static_prob = if cfg.static_visual {
            1.0
        } else {
            cfg.static_aug_prob
        };

        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        for (example, &mask) in batch.iter().zip(masks) {
            let frames = match (mask.m_v, &example.frames) {
                (true, Some(f)) => Some(apply_static_frame_augmentation(
                    f,
                    &mut self.rng,
                    static_prob,
                )),
                (true, None) => {
                    return Err(MageError::InvalidArgument(
                        "mask activates visual frames the example does not carry".into(),
                    ))
                }
                (false, _) => None,
            };
            let mixture = if mask.m_a {
                match &example.mixture {
                    Some(m) => Some(m.clone()),
                    None => {
                        return Err(MageError::InvalidArgument(
                            "mask activates a mixture the example does not carry".into(),
                        ))
                    }
                }
            } else {
                None
            };
            let prompt = if mask.m_t {
                match example.prompt {
                    Some(p) => Some(p),
                    None => {
                        return Err(MageError::InvalidArgument(
                            "mask activates a prompt the example does not carry".into(),
                        ))
                    }
                }
            } else {
                None
            };
            let cond = ConditionSet::new(mixture, prompt, frames, mask)?;

            let t = T::from_f64c(self.rng.gen::<f64>());
            let z1 = &example.target.tokens;
            let z0 = Array2::from_shape_fn(z1.dim(), |_| T::std_normal(&mut self.rng));
            let sample = interpolate(&z0, z1, t, sigma_min)?;
            let u_hat =
                self.model
                    .predict_velocity_tape(&mut tape, &bound, &sample.z_t, &cond, t)?;
            losses.push(flow_loss_tape(&mut tape, u_hat, &sample, cfg.loss_form));
        }
        let total = if losses.len() == 1 {
            losses[0]
        } else {
            let mut acc = losses[0];
            for &l in &losses[1..] {
                acc = tape.add(acc, l);
            }
            tape.scale(acc, T::from_f64c(1.0 / losses.len() as f64))
        };
        let loss_value = tape.value(total)[[]].to_f64c();
        if !loss_value.is_finite() {
            return Err(MageError::Numeric(format!(
                "non-finite training loss {loss_value} at step {}",
                self.step
            )));
        }
        let grads = tape.backward(total);
        let named = bound.grads(&grads);

        self.opt.lr = self.lr_at(self.step);
        let stats = self
            .opt
            .step(&mut self.model.params, &named, Some(cfg.grad_clip));
        self.step += 1;
        Ok(StepReport {
            loss: loss_value,
            grad_norm: stats.grad_norm,
            clip_scale: stats.clip_scale,
            lr: self.opt.lr,
        })
    }

    /// Snapshot of the curriculum RNG for checkpointing.
    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }
}
