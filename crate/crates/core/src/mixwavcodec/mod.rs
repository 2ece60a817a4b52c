//! Continuous latent waveform codec.
//!
//! A strided convolutional encoder maps a waveform to an `N×D` latent
//! sequence (`N = ceil(len / prod(strides))`) and a mirrored transposed-
//! convolutional decoder maps it back. Stages use snake-activated residual
//! units (one k3 and one k1 convolution per unit) around the resampling
//! convolutions, and the bottleneck is a diagonal-Gaussian VAE when
//! enabled. Training (see [`train`]) is mixture-aware with noise-robust
//! decoding and a lightweight adversarial objective.

pub mod train;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::graph::{Tape, Var};
use crate::nn::{init_lecun, init_zeros, BoundParams, ParamStore};
use crate::rng::seeded_rng;
use crate::scalar::{c, Scalar};

pub use train::{codec_train_step, CodecLossBreakdown, CodecTrainState, Discriminator};

/// Latent sequence produced by the encoder: `tokens[N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T: Scalar> {
    pub tokens: Array2<T>,
    /// Samples per token.
    pub downsample_ratio: usize,
    pub sample_rate: u32,
    /// Original (pre-padding) waveform length the decoder should restore.
    pub segment_len: usize,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.segment_len.div_ceil(self.downsample_ratio);
        if self.num_tokens() != expect {
            return Err(MageError::Shape(format!(
                "latent has {} tokens, expected ceil({} / {}) = {expect}",
                self.num_tokens(),
                self.segment_len,
                self.downsample_ratio
            )));
        }
        if self.tokens.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

/// Codec architecture and training weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Channels after the input convolution.
    pub base_width: usize,
    /// Per-stage channel multipliers (same length as `strides`).
    pub channel_multipliers: Vec<usize>,
    /// Per-stage downsampling factors.
    pub strides: Vec<usize>,
    /// Latent dimensionality D.
    pub latent_dim: usize,
    pub vae_bottleneck: bool,
    /// Adversarial loss weight α.
    pub adv_weight: f64,
    /// Feature-matching loss weight β.
    pub fm_weight: f64,
    /// Latent perturbation noise σ used during training.
    pub noise_std: f64,
    /// KL weight for the VAE bottleneck.
    pub kl_weight: f64,
    /// Multi-resolution spectral loss geometries `(win, hop)`.
    pub loss_resolutions: Vec<(usize, usize)>,
    /// Discriminator STFT geometry `(win, hop)`.
    pub disc_resolution: (usize, usize),
    pub disc_width: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl CodecConfig {
    /// Small fast profile: strides `[2,2,2,10]` (ratio 80), so an
    /// 8000-sample clip yields 100 tokens.
    pub fn tiny(seed: u64) -> Self {
        CodecConfig {
            base_width: 12,
            channel_multipliers: vec![1, 2, 2, 4],
            strides: vec![2, 2, 2, 10],
            latent_dim: 16,
            vae_bottleneck: true,
            adv_weight: 0.1,
            fm_weight: 1.0,
            noise_std: 0.1,
            kl_weight: 1e-4,
            loss_resolutions: vec![(256, 64), (128, 32), (64, 16)],
            disc_resolution: (256, 64),
            disc_width: 24,
            learning_rate: 2e-3,
            seed,
        }
    }

    /// Full-scale geometry: strides `[2,4,4,10]` (ratio 320), so a
    /// 64640-sample clip yields 202 tokens of dimension 128.
    pub fn full_scale(seed: u64) -> Self {
        CodecConfig {
            base_width: 32,
            channel_multipliers: vec![1, 2, 4, 8],
            strides: vec![2, 4, 4, 10],
            latent_dim: 128,
            vae_bottleneck: true,
            adv_weight: 0.1,
            fm_weight: 1.0,
            noise_std: 0.1,
            kl_weight: 1e-4,
            loss_resolutions: vec![(512, 128), (256, 64), (128, 32)],
            disc_resolution: (512, 128),
            disc_width: 32,
            learning_rate: 1e-4,
            seed,
        }
    }

    pub fn downsample_ratio(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.channel_multipliers.len() != self.strides.len() {
            return Err(MageError::Config(format!(
                "need matching stride/multiplier lists, got {} strides and {} multipliers",
                self.strides.len(),
                self.channel_multipliers.len()
            )));
        }
        if self.strides.iter().any(|&s| s < 2 || s % 2 != 0) {
            return Err(MageError::Config(
                "strides must be even and at least 2 (kernel 2s, padding s/2)".into(),
            ));
        }
        if self.base_width == 0 || self.latent_dim == 0 || self.disc_width == 0 {
            return Err(MageError::Config("widths must be positive".into()));
        }
        if self.adv_weight < 0.0
            || self.fm_weight < 0.0
            || self.noise_std < 0.0
            || self.kl_weight < 0.0
        {
            return Err(MageError::Config(
                "loss weights and noise std must be nonnegative".into(),
            ));
        }
        if self.loss_resolutions.is_empty() {
            return Err(MageError::Config(
                "need at least one loss resolution".into(),
            ));
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width * self.channel_multipliers[i]
    }
}

/// How the VAE bottleneck is read at encode time.
pub enum EncodeMode<'r, R: Rng> {
    /// Return the posterior mean (evaluation / latent-bank building).
    Deterministic,
    /// Reparameterized sample (training-style stochastic encode).
    Sample(&'r mut R),
}

/// Encoder/decoder with its parameters.
#[derive(Debug, Clone)]
pub struct Codec<T: Scalar> {
    pub cfg: CodecConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Codec<T> {
    /// Fresh codec with seeded initialization.
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed, "codec-init", 0);
        let w0 = cfg.base_width;

        params.insert("enc.in.w", init_lecun(&mut rng, &[w0, 1, 7], 7));
        params.insert("enc.in.b", init_zeros(&[w0]));
        let mut ch = w0;
        for (i, (&s, _)) in cfg.strides.iter().zip(&cfg.channel_multipliers).enumerate() {
            let out = cfg.stage_width(i);
            insert_res_unit(&mut params, &mut rng, &format!("enc.s{i}.res"), ch);
            params.insert(
                &format!("enc.s{i}.down.w"),
                init_lecun(&mut rng, &[out, ch, 2 * s], ch * 2 * s),
            );
            params.insert(&format!("enc.s{i}.down.b"), init_zeros(&[out]));
            ch = out;
        }
        params.insert("enc.out.a", init_zeros(&[ch]));
        let bottleneck = if cfg.vae_bottleneck {
            2 * cfg.latent_dim
        } else {
            cfg.latent_dim
        };
        params.insert(
            "enc.out.w",
            init_lecun(&mut rng, &[bottleneck, ch, 3], ch * 3),
        );
        params.insert("enc.out.b", init_zeros(&[bottleneck]));

        params.insert(
            "dec.in.w",
            init_lecun(&mut rng, &[ch, cfg.latent_dim, 3], cfg.latent_dim * 3),
        );
        params.insert("dec.in.b", init_zeros(&[ch]));
        for i in (0..cfg.strides.len()).rev() {
            let s = cfg.strides[i];
            let in_ch = cfg.stage_width(i);
            let out_ch = if i == 0 { w0 } else { cfg.stage_width(i - 1) };
            params.insert(
                &format!("dec.s{i}.up.w"),
                init_lecun(&mut rng, &[in_ch, out_ch, 2 * s], in_ch * 2),
            );
            params.insert(&format!("dec.s{i}.up.b"), init_zeros(&[out_ch]));
            insert_res_unit(&mut params, &mut rng, &format!("dec.s{i}.res"), out_ch);
        }
        params.insert("dec.out.a", init_zeros(&[w0]));
        params.insert("dec.out.w", init_lecun(&mut rng, &[1, w0, 7], w0 * 7));
        params.insert("dec.out.b", init_zeros(&[1]));

        Ok(Codec { cfg, params })
    }

    /// Encoder forward pass on a tape: waveform `[L]` (already padded to a
    /// ratio multiple) to `(mean, logvar)` each `[D, N]`. `logvar` is `None`
    /// without a VAE bottleneck.
    pub fn encode_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
    ) -> (Var, Option<Var>) {
        let len = tape.shape(x)[0];
        let mut h = tape.reshape(x, &[1, len]);
        let (w, b) = (bound.var("enc.in.w"), bound.var("enc.in.b"));
        h = tape.conv1d(h, w, b, 1, 3);
        for (i, &s) in self.cfg.strides.iter().enumerate() {
            h = res_unit(tape, bound, &format!("enc.s{i}.res"), h);
            let (w, b) = (
                bound.var(&format!("enc.s{i}.down.w")),
                bound.var(&format!("enc.s{i}.down.b")),
            );
            h = tape.conv1d(h, w, b, s, s / 2);
        }
        let a = bound.var("enc.out.a");
        h = tape.snake(h, a);
        let (w, b) = (bound.var("enc.out.w"), bound.var("enc.out.b"));
        let out = tape.conv1d(h, w, b, 1, 1);
        if self.cfg.vae_bottleneck {
            let d = self.cfg.latent_dim;
            let mean = tape.slice_rows(out, 0, d);
            // Bounded parameterization |logvar| <= 8 keeps exp(logvar/2)
            // inside a sane range for any parameter values.
            let raw = tape.slice_rows(out, d, 2 * d);
            let squashed = tape.scale(raw, c::<T>(1.0 / 8.0));
            let squashed = tape.tanh(squashed);
            let logvar = tape.scale(squashed, c::<T>(8.0));
            (mean, Some(logvar))
        } else {
            (out, None)
        }
    }

    /// Decoder forward pass on a tape: latent `[D, N]` to waveform `[N·ratio]`.
    pub fn decode_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, z: Var) -> Var {
        let (w, b) = (bound.var("dec.in.w"), bound.var("dec.in.b"));
        let mut h = tape.conv1d(z, w, b, 1, 1);
        for i in (0..self.cfg.strides.len()).rev() {
            let s = self.cfg.strides[i];
            let (w, b) = (
                bound.var(&format!("dec.s{i}.up.w")),
                bound.var(&format!("dec.s{i}.up.b")),
            );
            h = tape.conv_transpose1d(h, w, b, s, s / 2);
            h = res_unit(tape, bound, &format!("dec.s{i}.res"), h);
        }
        let a = bound.var("dec.out.a");
        h = tape.snake(h, a);
        let (w, b) = (bound.var("dec.out.w"), bound.var("dec.out.b"));
        h = tape.conv1d(h, w, b, 1, 3);
        let bounded = tape.tanh(h);
        let len = tape.shape(bounded)[1];
        tape.reshape(bounded, &[len])
    }

    /// Right-pads a waveform with zeros to a ratio multiple.
    pub fn pad_input(&self, x: &Waveform<T>) -> Array1<T> {
        let ratio = self.cfg.downsample_ratio();
        let padded_len = x.len().div_ceil(ratio) * ratio;
        let mut out = Array1::<T>::zeros(padded_len);
        out.slice_mut(ndarray::s![..x.len()]).assign(&x.samples);
        out
    }

    /// Encodes a waveform into a latent sequence.
    pub fn encode<R: Rng>(
        &self,
        x: &Waveform<T>,
        mode: EncodeMode<'_, R>,
    ) -> Result<LatentSequence<T>> {
        if x.samples.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric(
                "encode input contains non-finite samples".into(),
            ));
        }
        let padded = self.pad_input(x);
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(padded.into_dyn());
        let (mean, logvar) = self.encode_tape(&mut tape, &bound, xv);
        let mean_val = as2_owned(tape.value(mean));
        let z = match (mode, logvar) {
            (EncodeMode::Sample(rng), Some(lv)) => {
                let lv_val = as2_owned(tape.value(lv));
                let mut z = mean_val;
                for (zi, &l) in z.iter_mut().zip(lv_val.iter()) {
                    let std = (l * c::<T>(0.5)).exp();
                    *zi = *zi + std * T::std_normal(rng);
                }
                z
            }
            _ => mean_val,
        };
        let latent = LatentSequence {
            tokens: z.t().to_owned(),
            downsample_ratio: self.cfg.downsample_ratio(),
            sample_rate: x.sample_rate,
            segment_len: x.len(),
        };
        latent.validate()?;
        Ok(latent)
    }

    /// Decodes a latent sequence back to a waveform of the original length.
    pub fn decode(&self, z: &LatentSequence<T>) -> Result<Waveform<T>> {
        if z.latent_dim() != self.cfg.latent_dim {
            return Err(MageError::Shape(format!(
                "latent dimension {} does not match codec dimension {}",
                z.latent_dim(),
                self.cfg.latent_dim
            )));
        }
        z.validate()?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z.tokens.t().to_owned().into_dyn());
        let out = self.decode_tape(&mut tape, &bound, zv);
        let full = tape.value(out);
        let samples = Array1::from_iter(full.iter().take(z.segment_len).copied());
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric(
                "decoder produced non-finite samples".into(),
            ));
        }
        Waveform::new(samples, z.sample_rate)
    }
}

/// Adds `z̃ = z + σ·ε` perturbation with standard-normal `ε`.
pub fn perturb_latents<T: Scalar, R: Rng>(
    z: &LatentSequence<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<LatentSequence<T>> {
    if sigma < 0.0 {
        return Err(MageError::InvalidArgument(format!(
            "perturbation std must be nonnegative, got {sigma}"
        )));
    }
    let mut out = z.clone();
    if sigma > 0.0 {
        let s = c::<T>(sigma);
        for v in out.tokens.iter_mut() {
            *v = *v + s * T::std_normal(rng);
        }
    }
    Ok(out)
}

fn insert_res_unit<T: Scalar>(
    params: &mut ParamStore<T>,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    ch: usize,
) {
    params.insert(&format!("{prefix}.a1"), init_zeros(&[ch]));
    params.insert(
        &format!("{prefix}.c1.w"),
        init_lecun(rng, &[ch, ch, 3], ch * 3),
    );
    params.insert(&format!("{prefix}.c1.b"), init_zeros(&[ch]));
    params.insert(&format!("{prefix}.a2"), init_zeros(&[ch]));
    params.insert(&format!("{prefix}.c2.w"), init_lecun(rng, &[ch, ch, 1], ch));
    params.insert(&format!("{prefix}.c2.b"), init_zeros(&[ch]));
}

fn res_unit<T: Scalar>(tape: &mut Tape<T>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let a1 = bound.var(&format!("{prefix}.a1"));
    let mut u = tape.snake(x, a1);
    let (w1, b1) = (
        bound.var(&format!("{prefix}.c1.w")),
        bound.var(&format!("{prefix}.c1.b")),
    );
    u = tape.conv1d(u, w1, b1, 1, 1);
    let a2 = bound.var(&format!("{prefix}.a2"));
    u = tape.snake(u, a2);
    let (w2, b2) = (
        bound.var(&format!("{prefix}.c2.w")),
        bound.var(&format!("{prefix}.c2.b")),
    );
    u = tape.conv1d(u, w2, b2, 1, 0);
    tape.add(x, u)
}

fn as2_owned<T: Scalar>(v: &ndarray::ArrayD<T>) -> Array2<T> {
    v.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-D value")
}
