//! Controlled multimodal flow transformer over codec latent sequences.
//!
//! The backbone is a U-shaped transformer (encoder stages, one bottleneck,
//! decoder stages with projected long skips) that predicts the velocity
//! field of a flow-matching interpolant between Gaussian noise and target
//! latents. One network serves two operating modes: zero-mixture
//! generation (no mixture latent in the condition set) and
//! mixture-grounded editing (the mixture latent is projected into every
//! token so edits stay anchored to the observed audio).
//!
//! Per-position tokens are formed by projecting the current latent state
//! and the mixture latent (or a learned null latent) to `hidden/2` each and
//! concatenating, plus learned positional embeddings. Conditioning enters
//! four ways:
//!
//! * a prompt token (projected class embedding) prepended to the sequence;
//! * adaptive layer normalization at every layer, driven by a Fourier
//!   timestep embedding plus the projected global scene summary;
//! * cross-gated modulation (or an ablation fusion operator) applied to
//!   the audio rows at every decoder stage using frame features aligned to
//!   the token timeline;
//! * a mixture-stream gate that attenuates mixture content unsupported by
//!   the prompt and scene evidence before the token concatenation.
//!
//! A dynamic mask curriculum drops modalities during training so the same
//! network serves every conditioning subset at inference. A masked-off
//! modality follows the exact code path of an absent one, so masking and
//! removal are bit-identical by construction.

pub mod train;

use ndarray::{Array2, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condkit::{
    avna_indices, encode_prompt_tape, encode_scene_tape, init_cond_params, SceneVars,
};
pub use crate::condkit::{AlignStrategy, CondConfig};
use crate::error::{MageError, Result};
use crate::graph::{Tape, Var};
use crate::mixwavcodec::LatentSequence;
use crate::nn::{init_lecun, init_normal, init_zeros, BoundParams, ParamStore};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;

/// Number of Fourier frequency pairs in the timestep embedding.
pub const TIME_FREQS: usize = 8;

/// Layer-norm epsilon used throughout the backbone.
const LN_EPS: f64 = 1e-5;

/// Training/inference regime implied by a modality mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Mixture-grounded editing: the mixture latent is active.
    Edit,
    /// Zero-mixture generation: no mixture latent, at least the possibility
    /// of prompt/scene conditioning.
    Generate,
    /// Fully unconditional pass (also the guidance baseline).
    Unconditional,
}

/// Which modalities are active: `(m_a, m_t, m_v)` for mixture audio, text
/// prompt, and visual frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeMask {
    pub m_a: bool,
    pub m_t: bool,
    pub m_v: bool,
    pub regime: Regime,
}

impl ModeMask {
    /// Editing mask: mixture active, prompt/visual as given.
    pub fn edit(m_t: bool, m_v: bool) -> Self {
        ModeMask {
            m_a: true,
            m_t,
            m_v,
            regime: Regime::Edit,
        }
    }

    /// Generation mask: no mixture, prompt/visual as given.
    pub fn generate(m_t: bool, m_v: bool) -> Self {
        ModeMask {
            m_a: false,
            m_t,
            m_v,
            regime: Regime::Generate,
        }
    }

    /// Fully unconditional mask.
    pub fn unconditional() -> Self {
        ModeMask {
            m_a: false,
            m_t: false,
            m_v: false,
            regime: Regime::Unconditional,
        }
    }

    /// Checks the regime/bit consistency rules.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.regime {
            Regime::Edit => self.m_a,
            Regime::Generate => !self.m_a,
            Regime::Unconditional => !self.m_a && !self.m_t && !self.m_v,
        };
        if ok {
            Ok(())
        } else {
            Err(MageError::InvalidArgument(format!(
                "mask bits ({}, {}, {}) violate regime {:?}",
                self.m_a as u8, self.m_t as u8, self.m_v as u8, self.regime
            )))
        }
    }

    /// The mask bits as `(m_a, m_t, m_v)`.
    pub fn bits(&self) -> (bool, bool, bool) {
        (self.m_a, self.m_t, self.m_v)
    }
}

/// Draws a modality mask from the training curriculum.
///
/// The regime is categorical over `probs = [edit, generate, unconditional]`.
/// Within edit and generate, the `(m_t, m_v)` pair is uniform over
/// `{(1,1), (0,1), (1,0)}`; unconditional is always `(0,0,0)`.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, probs: [f64; 3]) -> ModeMask {
    let u: f64 = rng.gen();
    if u < probs[0] {
        let (m_t, m_v) = sample_sub_branch(rng);
        ModeMask::edit(m_t, m_v)
    } else if u < probs[0] + probs[1] {
        let (m_t, m_v) = sample_sub_branch(rng);
        ModeMask::generate(m_t, m_v)
    } else {
        ModeMask::unconditional()
    }
}

fn sample_sub_branch<R: Rng + ?Sized>(rng: &mut R) -> (bool, bool) {
    match rng.gen_range(0..3u32) {
        0 => (true, true),
        1 => (false, true),
        _ => (true, false),
    }
}

/// With probability `prob`, replaces every frame by one uniformly chosen
/// frame (the frame count, and hence the timestamp grid, is preserved);
/// otherwise returns the input unchanged.
pub fn apply_static_frame_augmentation<T: Scalar, R: Rng + ?Sized>(
    frames: &Array2<T>,
    rng: &mut R,
    prob: f64,
) -> Array2<T> {
    let u: f64 = rng.gen();
    if u >= prob || frames.nrows() == 0 {
        return frames.clone();
    }
    let k = rng.gen_range(0..frames.nrows());
    let row = frames.row(k).to_owned();
    Array2::from_shape_fn((frames.nrows(), frames.ncols()), |(_, c)| row[c])
}

/// The conditioning bundle for one forward pass.
///
/// Prompt and scene are carried as raw inputs (class label, frame-feature
/// matrix); the model encodes them on its own tape so gradients reach the
/// prompt table and the scene-attention parameters. The mask decides which
/// entries take effect: a masked-off modality is read as `None` by the
/// forward pass, making masking and physical absence the same code path.
#[derive(Debug, Clone)]
pub struct ConditionSet<T: Scalar> {
    pub mixture: Option<LatentSequence<T>>,
    pub prompt: Option<usize>,
    pub frames: Option<Array2<T>>,
    pub mask: ModeMask,
}

impl<T: Scalar> ConditionSet<T> {
    /// Builds and validates a condition set with an explicit mask.
    pub fn new(
        mixture: Option<LatentSequence<T>>,
        prompt: Option<usize>,
        frames: Option<Array2<T>>,
        mask: ModeMask,
    ) -> Result<Self> {
        let set = ConditionSet {
            mixture,
            prompt,
            frames,
            mask,
        };
        set.validate()?;
        Ok(set)
    }

    /// Editing condition set; the mask bits mirror which inputs are given.
    pub fn for_edit(
        mixture: LatentSequence<T>,
        prompt: Option<usize>,
        frames: Option<Array2<T>>,
    ) -> Result<Self> {
        let mask = ModeMask::edit(prompt.is_some(), frames.is_some());
        ConditionSet::new(Some(mixture), prompt, frames, mask)
    }

    /// Generation condition set; the mask bits mirror which inputs are given.
    pub fn for_generate(prompt: Option<usize>, frames: Option<Array2<T>>) -> Result<Self> {
        if prompt.is_none() && frames.is_none() {
            return ConditionSet::unconditional();
        }
        let mask = ModeMask::generate(prompt.is_some(), frames.is_some());
        ConditionSet::new(None, prompt, frames, mask)
    }

    /// Fully unconditional set.
    pub fn unconditional() -> Result<Self> {
        ConditionSet::new(None, None, None, ModeMask::unconditional())
    }

    /// A copy of this set with everything masked off (the guidance
    /// baseline); the underlying payloads are dropped as well so the
    /// resulting set is literally unconditional.
    pub fn fully_masked(&self) -> Self {
        ConditionSet {
            mixture: None,
            prompt: None,
            frames: None,
            mask: ModeMask::unconditional(),
        }
    }

    /// Checks mask consistency and that every active modality has data.
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if self.mask.m_a && self.mixture.is_none() {
            return Err(MageError::InvalidArgument(
                "mask activates the mixture but none was provided".into(),
            ));
        }
        if self.mask.m_t && self.prompt.is_none() {
            return Err(MageError::InvalidArgument(
                "mask activates the prompt but none was provided".into(),
            ));
        }
        if self.mask.m_v && self.frames.is_none() {
            return Err(MageError::InvalidArgument(
                "mask activates the visual frames but none were provided".into(),
            ));
        }
        Ok(())
    }

    /// The mixture latent, if active under the mask.
    pub fn effective_mixture(&self) -> Option<&LatentSequence<T>> {
        if self.mask.m_a {
            self.mixture.as_ref()
        } else {
            None
        }
    }

    /// The prompt label, if active under the mask.
    pub fn effective_prompt(&self) -> Option<usize> {
        if self.mask.m_t {
            self.prompt
        } else {
            None
        }
    }

    /// The frame features, if active under the mask.
    pub fn effective_frames(&self) -> Option<&Array2<T>> {
        if self.mask.m_v {
            self.frames.as_ref()
        } else {
            None
        }
    }
}

/// One training point on the noise-to-data path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T: Scalar> {
    pub z0: Array2<T>,
    pub z1: Array2<T>,
    pub t: T,
    /// `t·z1 + (1 − (1−σ_min)·t)·z0`, computed in the element dtype.
    pub z_t: Array2<T>,
    /// `z1 − (1−σ_min)·z0`, the regression target for the velocity field.
    pub u_t: Array2<T>,
    pub sigma_min: T,
}

/// Builds the interpolant state and target velocity at time `t`.
pub fn interpolate<T: Scalar>(
    z0: &Array2<T>,
    z1: &Array2<T>,
    t: T,
    sigma_min: T,
) -> Result<FlowSample<T>> {
    if z0.dim() != z1.dim() {
        return Err(MageError::Shape(format!(
            "interpolate: z0 is {:?}, z1 is {:?}",
            z0.dim(),
            z1.dim()
        )));
    }
    if t < T::zero() || t > T::one() {
        return Err(MageError::InvalidArgument(format!(
            "interpolation time {} outside [0, 1]",
            t.to_f64c()
        )));
    }
    let keep = T::one() - (T::one() - sigma_min) * t;
    let z_t = ndarray::Zip::from(z0)
        .and(z1)
        .map_collect(|&a, &b| b * t + a * keep);
    let shrink = T::one() - sigma_min;
    let u_t = ndarray::Zip::from(z0)
        .and(z1)
        .map_collect(|&a, &b| b - shrink * a);
    Ok(FlowSample {
        z0: z0.clone(),
        z1: z1.clone(),
        t,
        z_t,
        u_t,
        sigma_min,
    })
}

/// Which regression loss the trainer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Mean L1 on the velocity plus mean L1 on the implied endpoint
    /// `z1 − (û + (1−σ_min)·z0)` (the default).
    L1Endpoint,
    /// Mean squared error on the velocity alone.
    L2,
}

/// Flow-matching loss on the tape; `u_hat` is the model output `[N, D]`.
pub fn flow_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    u_hat: Var,
    sample: &FlowSample<T>,
    form: LossForm,
) -> Var {
    let u_t = tape.constant(sample.u_t.clone().into_dyn());
    match form {
        LossForm::L2 => tape.mse_loss(u_hat, u_t),
        LossForm::L1Endpoint => {
            let velocity = tape.l1_loss(u_hat, u_t);
            let shrink = T::one() - sample.sigma_min;
            let anchored = sample.z0.mapv(|v| v * shrink);
            let anchored = tape.constant(anchored.into_dyn());
            let implied_z1 = tape.add(u_hat, anchored);
            let z1 = tape.constant(sample.z1.clone().into_dyn());
            let endpoint = tape.l1_loss(implied_z1, z1);
            tape.add(velocity, endpoint)
        }
    }
}

/// Flow-matching loss on plain arrays (no gradients).
pub fn flow_loss<T: Scalar>(u_hat: &Array2<T>, sample: &FlowSample<T>, form: LossForm) -> T {
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.clone().into_dyn());
    let loss = flow_loss_tape(&mut tape, u, sample, form);
    tape.value(loss)[[]]
}

/// How aligned scene evidence is fused into decoder-stage features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Cross-gated modulation `h ⊙ sigmoid(W_s s̄ + b)` (default). With the
    /// text-plus-visual gate variant the prompt adds `W_p p` to the
    /// pre-activation.
    Cgm,
    /// Additive fusion `h + W_s s̄`.
    Add,
    /// `h + tanh(W_g s̄ + b_g) ⊙ (W_s s̄)`.
    GatedResidual,
    /// Self-attention over the concatenation of audio rows and projected
    /// scene tokens; the audio rows take the attended residual.
    SelfAttn,
    /// Cross-attention: audio rows query the projected scene tokens.
    CrossAttn,
    /// No decoder-stage fusion at all (gating-removal ablation); scene
    /// evidence then conditions only through adaptive layer normalization
    /// and the mixture gate.
    Disabled,
}

/// What drives the cross-gate pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Gate from scene evidence only; the prompt conditions solely through
    /// its prepended token (default).
    VisualOnly,
    /// Gate from scene evidence plus the projected prompt.
    TextPlusVisual,
}

/// Architecture and curriculum settings for the flow transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxConfig {
    /// Codec latent dimension `D`.
    pub latent_dim: usize,
    /// Token width; must be even (target/mixture halves) and divisible by
    /// `heads`.
    pub hidden: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Feed-forward expansion factor.
    pub mlp_ratio: usize,
    /// Largest token count the positional table supports.
    pub max_positions: usize,
    /// Prompt/scene encoder dimensions.
    pub cond: CondConfig,
    pub sigma_min: f64,
    pub loss_form: LossForm,
    pub gate_variant: GateVariant,
    pub fusion: FusionVariant,
    /// When false, decoder fusion sees the global summary broadcast over
    /// positions instead of time-aligned frame tokens.
    pub use_avna: bool,
    pub align_strategy: AlignStrategy,
    /// Regime probabilities `[edit, generate, unconditional]`.
    pub mask_probs: [f64; 3],
    pub static_aug_prob: f64,
    /// Forces the static-frame path at train and inference time.
    pub static_visual: bool,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Steps at which the learning rate halves.
    pub lr_decay_steps: Vec<usize>,
    pub seed: u64,
}

impl FluxConfig {
    /// Small profile matched to the compact benchmark and codec.
    pub fn tiny(seed: u64) -> Self {
        FluxConfig {
            latent_dim: 16,
            hidden: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            mlp_ratio: 4,
            max_positions: 100,
            cond: CondConfig {
                num_classes: 4,
                frame_dim: 32,
                cond_dim: 64,
                seed,
            },
            sigma_min: 1e-4,
            loss_form: LossForm::L1Endpoint,
            gate_variant: GateVariant::VisualOnly,
            fusion: FusionVariant::Cgm,
            use_avna: true,
            align_strategy: AlignStrategy::TimeGrid,
            mask_probs: [0.70, 0.20, 0.10],
            static_aug_prob: 0.25,
            static_visual: false,
            learning_rate: 1e-4,
            grad_clip: 5.0,
            lr_decay_steps: Vec::new(),
            seed,
        }
    }

    /// Wider profile paired with the full-scale codec.
    pub fn full_scale(seed: u64) -> Self {
        FluxConfig {
            latent_dim: 128,
            hidden: 256,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            mlp_ratio: 4,
            max_positions: 202,
            cond: CondConfig {
                num_classes: 8,
                frame_dim: 32,
                cond_dim: 64,
                seed,
            },
            ..FluxConfig::tiny(seed)
        }
    }

    /// Checks dimension and probability constraints.
    pub fn validate(&self) -> Result<()> {
        self.cond.validate()?;
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(MageError::Config(format!(
                "hidden width {} must be positive and even",
                self.hidden
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(MageError::Config(format!(
                "hidden width {} must divide into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.latent_dim == 0 || self.mlp_ratio == 0 || self.max_positions == 0 {
            return Err(MageError::Config("zero-sized model dimension".into()));
        }
        if self.enc_blocks == 0 || self.dec_blocks != self.enc_blocks {
            return Err(MageError::Config(
                "encoder and decoder stage counts must be equal and positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(MageError::Config(format!(
                "sigma_min {} outside [0, 1)",
                self.sigma_min
            )));
        }
        let sum: f64 = self.mask_probs.iter().sum();
        if self.mask_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MageError::Config(format!(
                "mask probabilities {:?} must be nonnegative and sum to 1",
                self.mask_probs
            )));
        }
        if !(0.0..=1.0).contains(&self.static_aug_prob) {
            return Err(MageError::Config(
                "static augmentation probability outside [0, 1]".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.grad_clip <= 0.0 {
            return Err(MageError::Config(
                "learning rate and gradient clip must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostic switches for wiring tests; the default is a normal forward.
#[derive(Debug, Clone, Default)]
pub struct ForwardDiag {
    /// Zeroes (omits) the long-skip path into the given decoder stage.
    pub disable_skip: Option<usize>,
    /// Applies this permutation to the first `N` positional-embedding rows.
    pub permute_positions: Option<Vec<usize>>,
}

/// The flow transformer: configuration plus one parameter store holding
/// both the backbone and the conditioning encoders.
#[derive(Debug, Clone)]
pub struct FluxFormer<T: Scalar> {
    pub cfg: FluxConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FluxFormer<T> {
    /// Initializes all parameters from the config seed.
    pub fn new(cfg: FluxConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_cond_params(&cfg.cond, &mut params);

        let mut rng = seeded_rng(cfg.seed, "flux-init", 0);
        let h = cfg.hidden;
        let half = h / 2;
        let d = cfg.latent_dim;
        let c = cfg.cond.cond_dim;
        let f = 2 * TIME_FREQS;

        params.insert("tok.zt.w", init_lecun(&mut rng, &[d, half], d));
        params.insert("tok.zt.b", init_zeros(&[half]));
        params.insert("tok.zm.w", init_lecun(&mut rng, &[d, half], d));
        params.insert("tok.zm.b", init_zeros(&[half]));
        params.insert("tok.null", init_normal(&mut rng, &[d], 1.0));
        params.insert("pos", init_normal(&mut rng, &[cfg.max_positions, h], 0.02));
        params.insert("prompt.proj.w", init_lecun(&mut rng, &[c, h], c));
        params.insert("prompt.proj.b", init_zeros(&[h]));
        params.insert("t.mlp1.w", init_lecun(&mut rng, &[f, h], f));
        params.insert("t.mlp1.b", init_zeros(&[h]));
        params.insert("t.mlp2.w", init_lecun(&mut rng, &[h, h], h));
        params.insert("t.mlp2.b", init_zeros(&[h]));
        params.insert("vsum.w", init_lecun(&mut rng, &[c, h], c));
        params.insert("vamaf.s.w", init_lecun(&mut rng, &[c, half], c));
        params.insert("vamaf.p.w", init_lecun(&mut rng, &[c, half], c));
        params.insert("vamaf.b", init_zeros(&[half]));
        if cfg.align_strategy == AlignStrategy::EmbeddingSpace {
            params.insert("avna.proj.w", init_lecun(&mut rng, &[d, c], d));
        }

        let block = |params: &mut ParamStore<T>, rng: &mut _, prefix: &str| {
            for ada in ["ada1", "ada2"] {
                params.insert(&format!("{prefix}.{ada}.scale.w"), init_zeros(&[h, h]));
                params.insert(&format!("{prefix}.{ada}.scale.b"), init_zeros(&[h]));
                params.insert(&format!("{prefix}.{ada}.shift.w"), init_zeros(&[h, h]));
                params.insert(&format!("{prefix}.{ada}.shift.b"), init_zeros(&[h]));
            }
            for name in ["q", "k", "v", "o"] {
                params.insert(
                    &format!("{prefix}.attn.{name}.w"),
                    init_lecun(rng, &[h, h], h),
                );
                params.insert(&format!("{prefix}.attn.{name}.b"), init_zeros(&[h]));
            }
            let m = h * cfg.mlp_ratio;
            params.insert(&format!("{prefix}.mlp.fc1.w"), init_lecun(rng, &[h, m], h));
            params.insert(&format!("{prefix}.mlp.fc1.b"), init_zeros(&[m]));
            params.insert(&format!("{prefix}.mlp.fc2.w"), init_lecun(rng, &[m, h], m));
            params.insert(&format!("{prefix}.mlp.fc2.b"), init_zeros(&[h]));
        };
        for i in 0..cfg.enc_blocks {
            block(&mut params, &mut rng, &format!("enc{i}"));
        }
        block(&mut params, &mut rng, "mid");
        for j in 0..cfg.dec_blocks {
            block(&mut params, &mut rng, &format!("dec{j}"));
            params.insert(&format!("skip{j}.w"), init_lecun(&mut rng, &[h, h], h));
            match cfg.fusion {
                FusionVariant::Cgm => {
                    params.insert(&format!("fuse{j}.s.w"), init_lecun(&mut rng, &[c, h], c));
                    params.insert(&format!("fuse{j}.b"), init_zeros(&[h]));
                    if cfg.gate_variant == GateVariant::TextPlusVisual {
                        params.insert(&format!("fuse{j}.p.w"), init_lecun(&mut rng, &[c, h], c));
                    }
                }
                FusionVariant::Add => {
                    params.insert(&format!("fuse{j}.s.w"), init_lecun(&mut rng, &[c, h], c));
                }
                FusionVariant::GatedResidual => {
                    params.insert(&format!("fuse{j}.s.w"), init_lecun(&mut rng, &[c, h], c));
                    params.insert(&format!("fuse{j}.g.w"), init_lecun(&mut rng, &[c, h], c));
                    params.insert(&format!("fuse{j}.g.b"), init_zeros(&[h]));
                }
                FusionVariant::SelfAttn | FusionVariant::CrossAttn => {
                    params.insert(&format!("fuse{j}.s.w"), init_lecun(&mut rng, &[c, h], c));
                    for name in ["q", "k", "v", "o"] {
                        params.insert(
                            &format!("fuse{j}.attn.{name}.w"),
                            init_lecun(&mut rng, &[h, h], h),
                        );
                        params.insert(&format!("fuse{j}.attn.{name}.b"), init_zeros(&[h]));
                    }
                }
                FusionVariant::Disabled => {}
            }
        }
        params.insert("out.w", init_lecun(&mut rng, &[h, d], h));
        params.insert("out.b", init_zeros(&[d]));

        Ok(FluxFormer { cfg, params })
    }

    /// Predicts the velocity field on an existing tape (training path).
    pub fn predict_velocity_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z_t: &Array2<T>,
        cond: &ConditionSet<T>,
        t: T,
    ) -> Result<Var> {
        self.forward(tape, bound, z_t, cond, t, &ForwardDiag::default())
    }

    /// Forward pass with diagnostic switches (wiring tests).
    pub fn predict_velocity_diag(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z_t: &Array2<T>,
        cond: &ConditionSet<T>,
        t: T,
        diag: &ForwardDiag,
    ) -> Result<Var> {
        self.forward(tape, bound, z_t, cond, t, diag)
    }

    /// Predicts the velocity field with frozen parameters (inference path).
    pub fn predict_velocity(
        &self,
        z_t: &Array2<T>,
        cond: &ConditionSet<T>,
        t: T,
    ) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.predict_velocity_tape(&mut tape, &bound, z_t, cond, t)?;
        Ok(to2(tape.value(out)))
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        z_t: &Array2<T>,
        cond: &ConditionSet<T>,
        t: T,
        diag: &ForwardDiag,
    ) -> Result<Var> {
        cond.validate()?;
        let cfg = &self.cfg;
        let n = z_t.nrows();
        if z_t.ncols() != cfg.latent_dim || n == 0 {
            return Err(MageError::Shape(format!(
                "latent state is {}x{}, expected Nx{}",
                n,
                z_t.ncols(),
                cfg.latent_dim
            )));
        }
        if n > cfg.max_positions {
            return Err(MageError::Shape(format!(
                "{n} tokens exceed the positional table of {}",
                cfg.max_positions
            )));
        }
        if t < T::zero() || t > T::one() {
            return Err(MageError::InvalidArgument(format!(
                "timestep {} outside [0, 1]",
                t.to_f64c()
            )));
        }
        if z_t.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric("non-finite latent state input".into()));
        }
        if let Some(m) = cond.effective_mixture() {
            if m.tokens.dim() != z_t.dim() {
                return Err(MageError::Shape(format!(
                    "mixture latent is {:?}, state is {:?}",
                    m.tokens.dim(),
                    z_t.dim()
                )));
            }
        }

        // Conditioning encodings.
        let prompt_vec = match cond.effective_prompt() {
            Some(label) => Some(encode_prompt_tape(&cfg.cond, tape, bound, &[label])?),
            None => None,
        };
        let scene: Option<SceneVars> = match cond.effective_frames() {
            Some(frames) => Some(encode_scene_tape(&cfg.cond, tape, bound, frames)?),
            None => None,
        };
        let sbar: Option<Var> = match &scene {
            Some(sv) => Some(self.aligned_scene_tokens(tape, bound, sv, z_t, n)),
            None => None,
        };

        // Token formation: target half plus gated mixture half.
        let zt_const = tape.constant(z_t.clone().into_dyn());
        let zt_half = self.linear(tape, bound, zt_const, "tok.zt");
        let zm_src = match cond.effective_mixture() {
            Some(m) => tape.constant(m.tokens.clone().into_dyn()),
            None => {
                let null = bound.var("tok.null");
                tape.repeat_row(null, n)
            }
        };
        let zm_half = self.linear(tape, bound, zm_src, "tok.zm");
        let zm_gate = {
            let zero = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[n, cfg.hidden / 2])));
            let b = bound.var("vamaf.b");
            let mut pre = tape.add_row(zero, b);
            if let Some(s) = sbar {
                let ws = bound.var("vamaf.s.w");
                let term = tape.matmul(s, ws);
                pre = tape.add(pre, term);
            }
            if let Some(p) = prompt_vec {
                let wp = bound.var("vamaf.p.w");
                let term = tape.matmul(p, wp);
                let term = tape.reshape(term, &[cfg.hidden / 2]);
                pre = tape.add_row(pre, term);
            }
            tape.sigmoid(pre)
        };
        let zm_half = tape.mul(zm_half, zm_gate);
        let tokens = tape.concat_cols(&[zt_half, zm_half]);

        let pos = bound.var("pos");
        let pos_rows = match &diag.permute_positions {
            Some(perm) => {
                if perm.len() != n {
                    return Err(MageError::InvalidArgument(
                        "position permutation length mismatch".into(),
                    ));
                }
                tape.gather_rows(pos, perm.clone())
            }
            None => tape.slice_rows(pos, 0, n),
        };
        let tokens = tape.add(tokens, pos_rows);

        let (mut seq, p_off) = match prompt_vec {
            Some(p) => {
                let ptok = self.linear(tape, bound, p, "prompt.proj");
                (tape.concat_rows(&[ptok, tokens]), 1usize)
            }
            None => (tokens, 0usize),
        };

        // Conditioning vector for adaptive normalization.
        let tf = tape.constant(time_features::<T>(t).into_dyn());
        let te = {
            let a = self.linear(tape, bound, tf, "t.mlp1");
            let a = tape.silu(a);
            self.linear(tape, bound, a, "t.mlp2")
        };
        let cvec = match &scene {
            Some(sv) => {
                let w = bound.var("vsum.w");
                let vs = tape.matmul(sv.summary, w);
                tape.add(te, vs)
            }
            None => te,
        };

        // Encoder stages, bottleneck, decoder stages with long skips.
        let mut skips = Vec::with_capacity(cfg.enc_blocks);
        for i in 0..cfg.enc_blocks {
            seq = self.block(tape, bound, seq, cvec, &format!("enc{i}"));
            self.check_finite(tape, seq, &format!("encoder stage {i}"))?;
            skips.push(seq);
        }
        seq = self.block(tape, bound, seq, cvec, "mid");
        self.check_finite(tape, seq, "bottleneck")?;
        for j in 0..cfg.dec_blocks {
            if diag.disable_skip != Some(j) {
                let source = skips[cfg.enc_blocks - 1 - j];
                let w = bound.var(&format!("skip{j}.w"));
                let projected = tape.matmul(source, w);
                seq = tape.add(seq, projected);
            }
            seq = self.block(tape, bound, seq, cvec, &format!("dec{j}"));
            let audio = if p_off > 0 {
                tape.slice_rows(seq, 1, 1 + n)
            } else {
                seq
            };
            let fused = self.fuse(tape, bound, j, audio, sbar, prompt_vec, n);
            seq = if p_off > 0 {
                let head = tape.slice_rows(seq, 0, 1);
                tape.concat_rows(&[head, fused])
            } else {
                fused
            };
            self.check_finite(tape, seq, &format!("decoder stage {j}"))?;
        }

        let audio = if p_off > 0 {
            tape.slice_rows(seq, 1, 1 + n)
        } else {
            seq
        };
        let normed = tape.layer_norm_rows(audio, T::from_f64c(LN_EPS));
        let out = self.linear(tape, bound, normed, "out");
        self.check_finite(tape, out, "output projection")?;
        Ok(out)
    }

    /// Scene tokens on the audio grid: AVNA (time grid or embedding space)
    /// or the broadcast global summary when alignment is ablated.
    fn aligned_scene_tokens(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        scene: &SceneVars,
        z_t: &Array2<T>,
        n: usize,
    ) -> Var {
        if !self.cfg.use_avna {
            let summary1 = tape.reshape(scene.summary, &[self.cfg.cond.cond_dim]);
            return tape.repeat_row(summary1, n);
        }
        let t_v = tape.shape(scene.per_frame)[0];
        let indices = match self.cfg.align_strategy {
            AlignStrategy::TimeGrid => avna_indices(t_v, n),
            AlignStrategy::EmbeddingSpace => {
                // The nearest-neighbor choice is made outside the graph
                // (argmin has no useful gradient); only the row gather is
                // differentiable, routing gradients into the chosen frames.
                let w = to2(tape.value(bound.var("avna.proj.w")));
                let frames = to2(tape.value(scene.per_frame));
                let projected = z_t.mapv(|v| v.to_f64c()).dot(&w.mapv(|v| v.to_f64c()));
                cosine_nearest(&projected, &frames.mapv(|v| v.to_f64c()))
            }
        };
        tape.gather_rows(scene.per_frame, indices)
    }

    fn fuse(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        stage: usize,
        h: Var,
        sbar: Option<Var>,
        prompt_vec: Option<Var>,
        n: usize,
    ) -> Var {
        let hid = self.cfg.hidden;
        match self.cfg.fusion {
            FusionVariant::Cgm => {
                let zero = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[n, hid])));
                let b = bound.var(&format!("fuse{stage}.b"));
                let mut pre = tape.add_row(zero, b);
                if let Some(s) = sbar {
                    let ws = bound.var(&format!("fuse{stage}.s.w"));
                    let term = tape.matmul(s, ws);
                    pre = tape.add(pre, term);
                }
                if self.cfg.gate_variant == GateVariant::TextPlusVisual {
                    if let Some(p) = prompt_vec {
                        let wp = bound.var(&format!("fuse{stage}.p.w"));
                        let term = tape.matmul(p, wp);
                        let term = tape.reshape(term, &[hid]);
                        pre = tape.add_row(pre, term);
                    }
                }
                let gate = tape.sigmoid(pre);
                tape.mul(h, gate)
            }
            FusionVariant::Add => match sbar {
                Some(s) => {
                    let ws = bound.var(&format!("fuse{stage}.s.w"));
                    let term = tape.matmul(s, ws);
                    tape.add(h, term)
                }
                None => h,
            },
            FusionVariant::GatedResidual => match sbar {
                Some(s) => {
                    let ws = bound.var(&format!("fuse{stage}.s.w"));
                    let wg = bound.var(&format!("fuse{stage}.g.w"));
                    let bg = bound.var(&format!("fuse{stage}.g.b"));
                    let contrib = tape.matmul(s, ws);
                    let gate_pre = tape.matmul(s, wg);
                    let gate_pre = tape.add_row(gate_pre, bg);
                    let gate = tape.tanh(gate_pre);
                    let gated = tape.mul(gate, contrib);
                    tape.add(h, gated)
                }
                None => h,
            },
            FusionVariant::SelfAttn => match sbar {
                Some(s) => {
                    let ws = bound.var(&format!("fuse{stage}.s.w"));
                    let vt = tape.matmul(s, ws);
                    let joint = tape.concat_rows(&[h, vt]);
                    let attended =
                        self.mha(tape, bound, joint, joint, &format!("fuse{stage}.attn"));
                    let audio = tape.slice_rows(attended, 0, n);
                    tape.add(h, audio)
                }
                None => h,
            },
            FusionVariant::CrossAttn => match sbar {
                Some(s) => {
                    let ws = bound.var(&format!("fuse{stage}.s.w"));
                    let vt = tape.matmul(s, ws);
                    let attended = self.mha(tape, bound, h, vt, &format!("fuse{stage}.attn"));
                    tape.add(h, attended)
                }
                None => h,
            },
            FusionVariant::Disabled => h,
        }
    }

    fn linear(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var, prefix: &str) -> Var {
        let w = bound.var(&format!("{prefix}.w"));
        let b = bound.var(&format!("{prefix}.b"));
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn ada_ln(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        cvec: Var,
        prefix: &str,
    ) -> Var {
        let h = self.cfg.hidden;
        let ln = tape.layer_norm_rows(x, T::from_f64c(LN_EPS));
        let scale = self.linear(tape, bound, cvec, &format!("{prefix}.scale"));
        let scale = tape.reshape(scale, &[h]);
        let scale = tape.add_scalar(scale, T::one());
        let shift = self.linear(tape, bound, cvec, &format!("{prefix}.shift"));
        let shift = tape.reshape(shift, &[h]);
        let modulated = tape.mul_row(ln, scale);
        tape.add_row(modulated, shift)
    }

    /// Multi-head attention; queries from `q_src`, keys/values from
    /// `kv_src` (pass the same var for self-attention).
    fn mha(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        q_src: Var,
        kv_src: Var,
        prefix: &str,
    ) -> Var {
        let heads = self.cfg.heads;
        let dh = self.cfg.hidden / heads;
        let q = self.linear(tape, bound, q_src, &format!("{prefix}.q"));
        let k = self.linear(tape, bound, kv_src, &format!("{prefix}.k"));
        let v = self.linear(tape, bound, kv_src, &format!("{prefix}.v"));
        let inv_sqrt = T::from_f64c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, (head + 1) * dh);
            let kh = tape.slice_cols(k, head * dh, (head + 1) * dh);
            let vh = tape.slice_cols(v, head * dh, (head + 1) * dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, inv_sqrt);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh));
        }
        let cat = tape.concat_cols(&outs);
        self.linear(tape, bound, cat, &format!("{prefix}.o"))
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        cvec: Var,
        prefix: &str,
    ) -> Var {
        let h1 = self.ada_ln(tape, bound, x, cvec, &format!("{prefix}.ada1"));
        let attn = self.mha(tape, bound, h1, h1, &format!("{prefix}.attn"));
        let x = tape.add(x, attn);
        let h2 = self.ada_ln(tape, bound, x, cvec, &format!("{prefix}.ada2"));
        let m = self.linear(tape, bound, h2, &format!("{prefix}.mlp.fc1"));
        let m = tape.silu(m);
        let m = self.linear(tape, bound, m, &format!("{prefix}.mlp.fc2"));
        tape.add(x, m)
    }

    fn check_finite(&self, tape: &Tape<T>, v: Var, stage: &str) -> Result<()> {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(MageError::Numeric(format!(
                "non-finite activations after {stage}"
            )));
        }
        Ok(())
    }
}

/// Fourier features of the scalar timestep: `[1, 2·TIME_FREQS]` with
/// `sin(2^i·π·t), cos(2^i·π·t)` pairs.
pub fn time_features<T: Scalar>(t: T) -> Array2<T> {
    let tf = t.to_f64c();
    let mut out = Array2::<T>::zeros((1, 2 * TIME_FREQS));
    for i in 0..TIME_FREQS {
        let omega = std::f64::consts::PI * (1u64 << i) as f64;
        out[[0, 2 * i]] = T::from_f64c((omega * tf).sin());
        out[[0, 2 * i + 1]] = T::from_f64c((omega * tf).cos());
    }
    out
}

/// Cosine nearest-neighbor frame index for each projected audio token;
/// ties break toward the smaller frame index.
fn cosine_nearest(tokens: &Array2<f64>, frames: &Array2<f64>) -> Vec<usize> {
    let frame_norms: Vec<f64> = frames
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt().max(1e-12))
        .collect();
    tokens
        .rows()
        .into_iter()
        .map(|tok| {
            let tn = tok.dot(&tok).sqrt().max(1e-12);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, frame) in frames.rows().into_iter().enumerate() {
                let cosv = tok.dot(&frame) / (tn * frame_norms[k]);
                if cosv > best.1 {
                    best = (k, cosv);
                }
            }
            best.0
        })
        .collect()
}

fn to2<T: Scalar>(value: &ArrayD<T>) -> Array2<T> {
    value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d value")
        .to_owned()
}

#[cfg(test)]
mod tests;
