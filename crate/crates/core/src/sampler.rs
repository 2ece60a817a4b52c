//! Inference engine: Euler integration of the learned velocity field.
//!
//! Sampling integrates `dz/dt = û(z, conditions, t)` from `t = 0` (noise)
//! to `t = 1` (data) with a fixed-step Euler solver, optionally applying
//! classifier-free guidance by combining the conditional velocity with the
//! fully-masked (unconditional) one. The same integrator serves
//! zero-mixture generation and mixture-grounded editing; the only
//! difference is whether the condition set carries a mixture latent.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::fluxformer::{apply_static_frame_augmentation, ConditionSet, FluxFormer};
use crate::mixwavcodec::{Codec, EncodeMode, LatentSequence};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;
use crate::synthbench::FrameSequence;

/// Euler-solver and guidance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Uniform Euler steps from t=0 to t=1.
    pub num_steps: usize,
    /// Guidance scale; 1 recovers the conditional field, 0 the
    /// unconditional one.
    pub guidance_scale: f64,
    /// When set, every step evaluates the model twice (conditional and
    /// fully masked) and combines the two velocities.
    pub cfg_enabled: bool,
    pub seed: u64,
}

impl InferenceConfig {
    /// Quality default: 8 steps, no guidance.
    pub fn default_quality(seed: u64) -> Self {
        InferenceConfig {
            num_steps: 8,
            guidance_scale: 2.0,
            cfg_enabled: false,
            seed,
        }
    }

    /// Fastest preset: two function evaluations total (two plain steps).
    pub fn two_step(seed: u64) -> Self {
        InferenceConfig {
            num_steps: 2,
            ..InferenceConfig::default_quality(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(MageError::Config("num_steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(MageError::Config(format!(
                "guidance scale {} must be nonnegative",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    /// Model evaluations one integration will spend.
    pub fn evals_per_run(&self) -> usize {
        self.num_steps * (1 + usize::from(self.cfg_enabled))
    }
}

/// Anything that can evaluate a velocity field (the trained transformer in
/// production, closed-form stubs in tests).
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, z: &Array2<T>, cond: &ConditionSet<T>, t: T) -> Result<Array2<T>>;
}

impl<T: Scalar> VelocityField<T> for FluxFormer<T> {
    fn velocity(&self, z: &Array2<T>, cond: &ConditionSet<T>, t: T) -> Result<Array2<T>> {
        self.predict_velocity(z, cond, t)
    }
}

/// Classifier-free guidance: `û = û_uncond + γ·(û_cond − û_uncond)`.
///
/// The γ=0 and γ=1 identities are honored bit-exactly (those endpoints
/// return the corresponding input unchanged rather than re-deriving it
/// through float arithmetic).
pub fn cfg_velocity<T: Scalar>(
    u_cond: &Array2<T>,
    u_uncond: &Array2<T>,
    gamma: T,
) -> Result<Array2<T>> {
    if u_cond.dim() != u_uncond.dim() {
        return Err(MageError::Shape(format!(
            "guidance inputs disagree: {:?} vs {:?}",
            u_cond.dim(),
            u_uncond.dim()
        )));
    }
    if gamma == T::one() {
        return Ok(u_cond.clone());
    }
    if gamma == T::zero() {
        return Ok(u_uncond.clone());
    }
    Ok(ndarray::Zip::from(u_cond)
        .and(u_uncond)
        .map_collect(|&c, &u| u + gamma * (c - u)))
}

/// Integrates the velocity field from t=0 to t=1 with uniform Euler steps.
///
/// Returns the terminal state and the number of model evaluations spent.
/// Deterministic given `(z0, cond, model, cfg)`; a non-finite state aborts
/// with the offending step index.
pub fn euler_integrate<T: Scalar, M: VelocityField<T>>(
    model: &M,
    z0: &Array2<T>,
    cond: &ConditionSet<T>,
    cfg: &InferenceConfig,
) -> Result<(Array2<T>, usize)> {
    cfg.validate()?;
    cond.validate()?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(MageError::Numeric(
            "initial noise state is non-finite".into(),
        ));
    }
    let dt = T::one() / T::from_f64c(cfg.num_steps as f64);
    let gamma = T::from_f64c(cfg.guidance_scale);
    let uncond = cond.fully_masked();
    let mut z = z0.clone();
    let mut evals = 0usize;
    for step in 0..cfg.num_steps {
        let t = T::from_f64c(step as f64 / cfg.num_steps as f64);
        let u_cond = model.velocity(&z, cond, t)?;
        evals += 1;
        let u = if cfg.cfg_enabled {
            let u_uncond = model.velocity(&z, &uncond, t)?;
            evals += 1;
            cfg_velocity(&u_cond, &u_uncond, gamma)?
        } else {
            u_cond
        };
        ndarray::Zip::from(&mut z)
            .and(&u)
            .for_each(|zi, &ui| *zi = *zi + dt * ui);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric(format!(
                "integration state became non-finite after step {step} of {}",
                cfg.num_steps
            )));
        }
    }
    Ok((z, evals))
}

/// Sidecar record describing one inference run (serialized next to the
/// audio output so every sample is reproducible).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    /// "generate" or "edit".
    pub mode: String,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub cfg_enabled: bool,
    pub seed: u64,
    pub prompt: Option<usize>,
    pub num_frames: Option<usize>,
    pub static_visual: bool,
    pub segment_len: usize,
    pub sample_rate: u32,
    pub model_evals: usize,
}

/// Collapses frames to one repeated frame when the model was trained in
/// static-visual mode, so inference matches the training-time view.
fn inference_frames<T: Scalar>(
    flux: &FluxFormer<T>,
    frames: Option<&FrameSequence<T>>,
    seed: u64,
) -> Option<Array2<T>> {
    frames.map(|f| {
        if flux.cfg.static_visual {
            let mut rng = seeded_rng(seed, "static-frame", 0);
            apply_static_frame_augmentation(&f.features, &mut rng, 1.0)
        } else {
            f.features.clone()
        }
    })
}

fn decode_terminal<T: Scalar>(
    codec: &Codec<T>,
    tokens: Array2<T>,
    sample_rate: u32,
    segment_len: usize,
) -> Result<Waveform<T>> {
    let latent = LatentSequence {
        tokens,
        downsample_ratio: codec.cfg.downsample_ratio(),
        sample_rate,
        segment_len,
    };
    codec.decode(&latent)
}

/// Zero-mixture generation: noise in, waveform out.
///
/// The condition set never carries a mixture latent here; prompt and frames
/// are optional (with neither, this is unconditional sampling).
pub fn generate<T: Scalar>(
    flux: &FluxFormer<T>,
    codec: &Codec<T>,
    prompt: Option<usize>,
    frames: Option<&FrameSequence<T>>,
    sample_rate: u32,
    segment_len: usize,
    cfg: &InferenceConfig,
) -> Result<(Waveform<T>, InferenceRecord)> {
    if segment_len == 0 {
        return Err(MageError::InvalidArgument(
            "segment length must be positive".into(),
        ));
    }
    let ratio = codec.cfg.downsample_ratio();
    let num_tokens = segment_len.div_ceil(ratio);
    let frame_matrix = inference_frames(flux, frames, cfg.seed);
    let cond = ConditionSet::for_generate(prompt, frame_matrix)?;
    let mut rng = seeded_rng(cfg.seed, "sampler-noise", 0);
    let z0 = Array2::from_shape_fn((num_tokens, flux.cfg.latent_dim), |_| {
        T::std_normal(&mut rng)
    });
    let (z1, evals) = euler_integrate(flux, &z0, &cond, cfg)?;
    let wave = decode_terminal(codec, z1, sample_rate, segment_len)?;
    let record = InferenceRecord {
        mode: "generate".into(),
        num_steps: cfg.num_steps,
        guidance_scale: cfg.guidance_scale,
        cfg_enabled: cfg.cfg_enabled,
        seed: cfg.seed,
        prompt,
        num_frames: frames.map(|f| f.num_frames()),
        static_visual: flux.cfg.static_visual,
        segment_len,
        sample_rate,
        model_evals: evals,
    };
    Ok((wave, record))
}

/// Mixture-grounded editing: the mixture is encoded with the frozen codec
/// and rides along in the condition set while noise is integrated to the
/// edited latents.
pub fn edit<T: Scalar>(
    flux: &FluxFormer<T>,
    codec: &Codec<T>,
    mixture: &Waveform<T>,
    prompt: Option<usize>,
    frames: Option<&FrameSequence<T>>,
    cfg: &InferenceConfig,
) -> Result<(Waveform<T>, InferenceRecord)> {
    let z_m = codec.encode(
        mixture,
        EncodeMode::<rand_chacha::ChaCha8Rng>::Deterministic,
    )?;
    let frame_matrix = inference_frames(flux, frames, cfg.seed);
    let cond = ConditionSet::for_edit(z_m.clone(), prompt, frame_matrix)?;
    let mut rng = seeded_rng(cfg.seed, "sampler-noise", 0);
    let z0 = Array2::from_shape_fn(z_m.tokens.dim(), |_| T::std_normal(&mut rng));
    let (z1, evals) = euler_integrate(flux, &z0, &cond, cfg)?;
    let wave = decode_terminal(codec, z1, mixture.sample_rate, mixture.len())?;
    let record = InferenceRecord {
        mode: "edit".into(),
        num_steps: cfg.num_steps,
        guidance_scale: cfg.guidance_scale,
        cfg_enabled: cfg.cfg_enabled,
        seed: cfg.seed,
        prompt,
        num_frames: frames.map(|f| f.num_frames()),
        static_visual: flux.cfg.static_visual,
        segment_len: mixture.len(),
        sample_rate: mixture.sample_rate,
        model_evals: evals,
    };
    Ok((wave, record))
}
