//! Codec training: reconstruction + KL + adversarial objectives.
//!
//! Each step runs one generator update (L1 waveform + multi-resolution
//! spectral magnitude L1 + KL, plus hinge-adversarial and feature-matching
//! terms against a single STFT-magnitude convolutional discriminator) and,
//! when the adversarial weights are active, one discriminator update. The
//! reconstruction path always decodes *perturbed* latents `z̃ = z + σ·ε`,
//! which is what makes the decoder robust to the latent noise seen during
//! flow sampling.

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{MageError, Result};
use crate::graph::{Tape, Var};
use crate::nn::{init_kaiming, init_zeros, AdamW, BoundParams, ParamStore};
use crate::rng::seeded_rng;
use crate::scalar::{c, Scalar};
use crate::stft::StftPlan;
use crate::synthbench::{
    clip_seed, clip_spec, clip_split_ranges, make_mixture, synth_source, BenchConfig, MixtureRule,
};

use super::{Codec, CodecConfig};

/// Gradient clipping threshold for both codec and discriminator updates.
const GRAD_CLIP: f64 = 10.0;

/// STFT-magnitude convolutional discriminator.
///
/// Log-magnitude frames are treated as a channels×time map and passed
/// through three strided convolutions (leaky-ReLU activations, which are
/// also the feature-matching taps) and a linear head producing a per-frame
/// logit map.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub params: ParamStore<T>,
    plan: StftPlan<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &CodecConfig) -> Self {
        let bins = cfg.disc_resolution.0 / 2 + 1;
        let w = cfg.disc_width;
        let mut rng = seeded_rng(cfg.seed, "disc-init", 0);
        let mut params = ParamStore::new();
        params.insert("c0.w", init_kaiming(&mut rng, &[w, bins, 3], bins * 3));
        params.insert("c0.b", init_zeros(&[w]));
        params.insert("c1.w", init_kaiming(&mut rng, &[w, w, 3], w * 3));
        params.insert("c1.b", init_zeros(&[w]));
        params.insert("c2.w", init_kaiming(&mut rng, &[w, w, 3], w * 3));
        params.insert("c2.b", init_zeros(&[w]));
        params.insert("head.w", init_kaiming(&mut rng, &[1, w, 3], w * 3));
        params.insert("head.b", init_zeros(&[1]));
        Discriminator {
            params,
            plan: StftPlan::new(cfg.disc_resolution.0, cfg.disc_resolution.1),
        }
    }

    /// Forward pass: waveform `[L]` to `(logit map, feature taps)`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> (Var, Vec<Var>) {
        let mag = self.plan.magnitude_tape(tape, x);
        let log_mag = {
            let shifted = tape.add_scalar(mag, c::<T>(1e-5));
            tape.ln(shifted)
        };
        // [frames, bins] -> [bins, frames] as channels x time.
        let mut h = tape.transpose2(log_mag);
        let mut feats = Vec::with_capacity(3);
        for (i, stride) in [(0usize, 1usize), (1, 2), (2, 2)] {
            let (w, b) = (bound.var(&format!("c{i}.w")), bound.var(&format!("c{i}.b")));
            h = tape.conv1d(h, w, b, stride, 1);
            h = leaky_relu(tape, h);
            feats.push(h);
        }
        let (w, b) = (bound.var("head.w"), bound.var("head.b"));
        let logits = tape.conv1d(h, w, b, 1, 1);
        (logits, feats)
    }
}

fn leaky_relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    // max(x, 0) - 0.2 * max(-x, 0)
    let pos = tape.relu(x);
    let negated = tape.neg(x);
    let neg = tape.relu(negated);
    let scaled = tape.scale(neg, c::<T>(0.2));
    tape.sub(pos, scaled)
}

/// Per-step loss values (all already weighted into `total` as configured).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecLossBreakdown {
    pub waveform_l1: f64,
    pub multiscale_spectral: f64,
    pub kl: f64,
    pub adversarial: f64,
    pub feature_match: f64,
    pub discriminator_loss: f64,
    /// Generator objective: `l1 + spectral + kl_weight·kl + α·adv + β·fm`.
    pub total: f64,
}

impl CodecLossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("waveform_l1", self.waveform_l1),
            ("multiscale_spectral", self.multiscale_spectral),
            ("kl", self.kl),
            ("adversarial", self.adversarial),
            ("feature_match", self.feature_match),
            ("discriminator_loss", self.discriminator_loss),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(MageError::Numeric(format!(
                    "codec loss term {name} is non-finite ({v})"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable training state: codec, discriminator, optimizers, loss plans,
/// and the step RNG.
pub struct CodecTrainState<T: Scalar> {
    pub codec: Codec<T>,
    pub disc: Discriminator<T>,
    pub opt_g: AdamW<T>,
    pub opt_d: AdamW<T>,
    loss_plans: Vec<StftPlan<T>>,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Scalar> CodecTrainState<T> {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = Codec::new(cfg.clone())?;
        let disc = Discriminator::new(&cfg);
        let loss_plans = cfg
            .loss_resolutions
            .iter()
            .map(|&(w, h)| StftPlan::new(w, h))
            .collect();
        let rng = seeded_rng(cfg.seed, "codec-train", 0);
        Ok(CodecTrainState {
            opt_g: AdamW::new(cfg.learning_rate, 0.0),
            opt_d: AdamW::new(cfg.learning_rate, 0.0),
            codec,
            disc,
            loss_plans,
            rng,
            step: 0,
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fixed noise draws for one clip's generator pass, kept explicit so tests
/// can probe the loss as a deterministic function of the parameters.
pub struct NoiseDraw<T: Scalar> {
    /// Standard-normal reparameterization noise `[D, N]` (VAE only).
    pub vae_eps: Array2<T>,
    /// Perturbation noise, already scaled by σ, `[D, N]`.
    pub perturb: Array2<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn sample<R: Rng>(cfg: &CodecConfig, num_tokens: usize, rng: &mut R) -> Self {
        let d = cfg.latent_dim;
        let mut vae_eps = Array2::<T>::zeros((d, num_tokens));
        if cfg.vae_bottleneck {
            for v in vae_eps.iter_mut() {
                *v = T::std_normal(rng);
            }
        }
        let mut perturb = Array2::<T>::zeros((d, num_tokens));
        if cfg.noise_std > 0.0 {
            let s = c::<T>(cfg.noise_std);
            for v in perturb.iter_mut() {
                *v = s * T::std_normal(rng);
            }
        }
        NoiseDraw { vae_eps, perturb }
    }
}

/// Unweighted generator loss terms for one batch, as tape variables.
pub struct GeneratorLossVars {
    pub waveform_l1: Var,
    pub spectral: Var,
    pub kl: Var,
    pub adversarial: Option<Var>,
    pub feature_match: Option<Var>,
    pub total: Var,
    /// Decoded waveforms (padded length), detached values for the
    /// discriminator step.
    pub decoded: Vec<ArrayD<f64>>,
}

/// Builds the generator objective on `tape` for a batch of target
/// waveforms. Parameters must already be bound (codec trainable,
/// discriminator frozen).
pub fn generator_losses<T: Scalar>(
    tape: &mut Tape<T>,
    codec: &Codec<T>,
    codec_bound: &BoundParams,
    disc: &Discriminator<T>,
    disc_bound: &BoundParams,
    loss_plans: &[StftPlan<T>],
    batch: &[Waveform<T>],
    noise: &[NoiseDraw<T>],
) -> Result<GeneratorLossVars> {
    let cfg = &codec.cfg;
    let use_adv = cfg.adv_weight > 0.0 || cfg.fm_weight > 0.0;
    let mut l1_terms = Vec::new();
    let mut spec_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut adv_terms = Vec::new();
    let mut fm_terms = Vec::new();
    let mut decoded = Vec::new();

    for (item, draw) in batch.iter().zip(noise) {
        if item.samples.iter().any(|v| !v.is_finite()) {
            return Err(MageError::Numeric(
                "training batch contains non-finite samples".into(),
            ));
        }
        let padded = codec.pad_input(item);
        let x = tape.constant(padded.clone().into_dyn());
        let (mean, logvar) = codec.encode_tape(tape, codec_bound, x);

        let z = if let Some(lv) = logvar {
            // KL(q || N(0, I)) = 0.5 * mean(mu^2 + exp(lv) - 1 - lv)
            let mu2 = tape.square(mean);
            let var = tape.exp(lv);
            let sum = tape.add(mu2, var);
            let centered = tape.sub(sum, lv);
            let shifted = tape.add_scalar(centered, c::<T>(-1.0));
            let kl_mean = tape.mean_all(shifted);
            kl_terms.push(tape.scale(kl_mean, c::<T>(0.5)));
            // Reparameterized sample.
            let half_lv = tape.scale(lv, c::<T>(0.5));
            let std = tape.exp(half_lv);
            let eps = tape.constant(draw.vae_eps.clone().into_dyn());
            let noise_term = tape.mul(std, eps);
            tape.add(mean, noise_term)
        } else {
            mean
        };

        // Noise-robust decoding path: decode perturbed latents.
        let z_tilde = if cfg.noise_std > 0.0 {
            let p = tape.constant(draw.perturb.clone().into_dyn());
            tape.add(z, p)
        } else {
            z
        };
        let y = codec.decode_tape(tape, codec_bound, z_tilde);
        decoded.push(tape.value(y).mapv(|v| v.to_f64c()));

        let target = tape.constant(padded.into_dyn());
        l1_terms.push(tape.l1_loss(y, target));
        spec_terms.push(crate::stft::multi_resolution_mag_l1(
            tape, loss_plans, y, target,
        ));

        if use_adv {
            let (fake_logits, fake_feats) = disc.forward_tape(tape, disc_bound, y);
            let mean_logit = tape.mean_all(fake_logits);
            adv_terms.push(tape.neg(mean_logit));
            let (_, real_feats) = disc.forward_tape(tape, disc_bound, target);
            let mut layer_terms = Vec::new();
            for (f, r) in fake_feats.iter().zip(&real_feats) {
                layer_terms.push(tape.l1_loss(*f, *r));
            }
            let fm_sum = tape.add_many(&layer_terms);
            fm_terms.push(tape.scale(fm_sum, c::<T>(1.0 / real_feats.len() as f64)));
        }
    }

    let inv_b = c::<T>(1.0 / batch.len() as f64);
    let mean_of = |tape: &mut Tape<T>, terms: &[Var]| {
        let s = tape.add_many(terms);
        tape.scale(s, inv_b)
    };
    let waveform_l1 = mean_of(tape, &l1_terms);
    let spectral = mean_of(tape, &spec_terms);
    let kl = if kl_terms.is_empty() {
        tape.constant(ndarray::arr0(T::zero()).into_dyn())
    } else {
        mean_of(tape, &kl_terms)
    };
    let adversarial = (!adv_terms.is_empty()).then(|| mean_of(tape, &adv_terms));
    let feature_match = (!fm_terms.is_empty()).then(|| mean_of(tape, &fm_terms));

    let mut total_parts = vec![waveform_l1, spectral, tape.scale(kl, c::<T>(cfg.kl_weight))];
    if let Some(adv) = adversarial {
        total_parts.push(tape.scale(adv, c::<T>(cfg.adv_weight)));
    }
    if let Some(fm) = feature_match {
        total_parts.push(tape.scale(fm, c::<T>(cfg.fm_weight)));
    }
    let total = tape.add_many(&total_parts);

    Ok(GeneratorLossVars {
        waveform_l1,
        spectral,
        kl,
        adversarial,
        feature_match,
        total,
        decoded,
    })
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).iter().next().expect("scalar var").to_f64c()
}

/// One full training step: generator update, then (when adversarial terms
/// are active) a discriminator update on the detached reconstructions.
pub fn codec_train_step<T: Scalar>(
    state: &mut CodecTrainState<T>,
    batch: &[Waveform<T>],
) -> Result<CodecLossBreakdown> {
    if batch.is_empty() {
        return Err(MageError::InvalidArgument("empty training batch".into()));
    }
    let cfg = state.codec.cfg.clone();
    let use_adv = cfg.adv_weight > 0.0 || cfg.fm_weight > 0.0;
    let ratio = cfg.downsample_ratio();

    // Pre-draw all stochastic inputs so the graph itself is deterministic.
    let noise: Vec<NoiseDraw<T>> = batch
        .iter()
        .map(|w| {
            let tokens = w.len().div_ceil(ratio);
            NoiseDraw::sample(&cfg, tokens, &mut state.rng)
        })
        .collect();

    // Generator step.
    let mut tape = Tape::new();
    let codec_bound = state.codec.params.bind(&mut tape);
    let disc_bound = state.disc.params.bind_frozen(&mut tape);
    let losses = generator_losses(
        &mut tape,
        &state.codec,
        &codec_bound,
        &state.disc,
        &disc_bound,
        &state.loss_plans,
        batch,
        &noise,
    )?;
    let grads = tape.backward(losses.total);
    let grad_map = codec_bound.grads(&grads);
    state
        .opt_g
        .step(&mut state.codec.params, &grad_map, Some(GRAD_CLIP));

    let mut breakdown = CodecLossBreakdown {
        waveform_l1: scalar_of(&tape, losses.waveform_l1),
        multiscale_spectral: scalar_of(&tape, losses.spectral),
        kl: scalar_of(&tape, losses.kl),
        adversarial: losses.adversarial.map_or(0.0, |v| scalar_of(&tape, v)),
        feature_match: losses.feature_match.map_or(0.0, |v| scalar_of(&tape, v)),
        discriminator_loss: 0.0,
        total: scalar_of(&tape, losses.total),
    };

    // Discriminator step on detached reconstructions.
    if use_adv {
        let mut d_tape = Tape::new();
        let d_bound = state.disc.params.bind(&mut d_tape);
        let mut d_terms = Vec::new();
        for (item, fake) in batch.iter().zip(&losses.decoded) {
            let padded = state.codec.pad_input(item);
            let real = d_tape.constant(padded.into_dyn());
            let fake = d_tape.constant(fake.mapv(|v| T::from_f64c(v)));
            let (real_logits, _) = state.disc.forward_tape(&mut d_tape, &d_bound, real);
            let (fake_logits, _) = state.disc.forward_tape(&mut d_tape, &d_bound, fake);
            // hinge: mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))
            let neg_real = d_tape.neg(real_logits);
            let one_minus = d_tape.add_scalar(neg_real, c::<T>(1.0));
            let real_hinge = d_tape.relu(one_minus);
            let real_term = d_tape.mean_all(real_hinge);
            let one_plus = d_tape.add_scalar(fake_logits, c::<T>(1.0));
            let fake_hinge = d_tape.relu(one_plus);
            let fake_term = d_tape.mean_all(fake_hinge);
            d_terms.push(d_tape.add(real_term, fake_term));
        }
        let d_sum = d_tape.add_many(&d_terms);
        let d_loss = d_tape.scale(d_sum, c::<T>(1.0 / batch.len() as f64));
        let d_grads = d_tape.backward(d_loss);
        let d_grad_map = d_bound.grads(&d_grads);
        state
            .opt_d
            .step(&mut state.disc.params, &d_grad_map, Some(GRAD_CLIP));
        breakdown.discriminator_loss = scalar_of(&d_tape, d_loss);
    }

    breakdown.check_finite()?;
    state.step += 1;
    Ok(breakdown)
}

/// Draws one codec training batch from the benchmark's train split: each
/// item is either an isolated source or a `x1 + λ·x2` mixture of two
/// distinct-class sources (λ ~ U[0.3, 1.0]), with per-source amplitude
/// augmentation in [0.5, 1.5] followed by clipping.
pub fn sample_codec_batch<T: Scalar, R: Rng>(
    bench: &BenchConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Waveform<T>>> {
    bench.validate()?;
    let train_range = clip_split_ranges(bench)[0].clone();
    if train_range.is_empty() {
        return Err(MageError::Data("no training clips available".into()));
    }
    let draw_source = |rng: &mut R, exclude: Option<usize>| -> Result<Waveform<T>> {
        let class = loop {
            let k = rng.gen_range(0..bench.num_classes);
            if Some(k) != exclude {
                break k;
            }
        };
        let clip = rng.gen_range(train_range.clone());
        let spec = clip_spec(bench, class, clip)?;
        let wave = synth_source::<T>(
            &spec,
            bench.segment_samples,
            bench.sample_rate,
            clip_seed(bench, class, clip),
        )?;
        let gain = c::<T>(rng.gen_range(0.5..1.5));
        Ok(Waveform::new(wave.samples * gain, wave.sample_rate)?.clipped())
    };
    let mut out = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        if i % 2 == 0 {
            out.push(draw_source(rng, None)?);
        } else {
            let a = draw_source(rng, None)?;
            // A second source from a different class.
            let b = draw_source(rng, None)?;
            let lambda = rng.gen_range(0.3..1.0);
            out.push(make_mixture(&a, &b, MixtureRule::Codec { lambda })?);
        }
    }
    Ok(out)
}
