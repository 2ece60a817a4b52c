use super::train::{FluxExample, FluxTrainState};
use super::*;
use crate::mixwavcodec::LatentSequence;
use crate::rng::seeded_rng;
use approx::assert_abs_diff_eq;
use ndarray::Array1;

type F = f64;

fn scalar_arr(v: f64) -> Array2<F> {
    Array2::from_elem((1, 1), v)
}

/// A model small enough that every wiring test runs in milliseconds.
fn micro_config(seed: u64) -> FluxConfig {
    let mut cfg = FluxConfig::tiny(seed);
    cfg.latent_dim = 3;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.max_positions = 8;
    cfg.cond = CondConfig {
        num_classes: 3,
        frame_dim: 4,
        cond_dim: 6,
        seed,
    };
    cfg
}

fn micro_latent(tokens: Array2<F>) -> LatentSequence<F> {
    let n = tokens.nrows();
    LatentSequence {
        tokens,
        downsample_ratio: 4,
        sample_rate: 8_000,
        segment_len: 4 * n,
    }
}

fn random_state(rows: usize, cols: usize, seed: u64) -> Array2<F> {
    let mut rng = seeded_rng(seed, "test-state", 0);
    Array2::from_shape_fn((rows, cols), |_| F::std_normal(&mut rng))
}

/// Full multimodal editing condition set for the micro model.
fn micro_cond(cfg: &FluxConfig, n: usize, seed: u64) -> ConditionSet<F> {
    let mut rng = seeded_rng(seed, "test-cond", 1);
    let mixture = micro_latent(Array2::from_shape_fn((n, cfg.latent_dim), |_| {
        F::std_normal(&mut rng)
    }));
    let frames = Array2::from_shape_fn((3, cfg.cond.frame_dim), |_| F::std_normal(&mut rng));
    ConditionSet::for_edit(mixture, Some(1), Some(frames)).unwrap()
}

#[test]
fn interpolation_matches_hand_computed_point() {
    let s = interpolate(&scalar_arr(2.0), &scalar_arr(4.0), 0.5, 1e-4).unwrap();
    assert_abs_diff_eq!(s.z_t[[0, 0]], 3.0001, epsilon = 1e-12);
    assert_abs_diff_eq!(s.u_t[[0, 0]], 2.0002, epsilon = 1e-12);
}

#[test]
fn interpolation_hits_both_endpoints() {
    let z0 = random_state(4, 3, 10);
    let z1 = random_state(4, 3, 11);
    let sigma = 1e-4;
    let at0 = interpolate(&z0, &z1, 0.0, sigma).unwrap();
    assert_eq!(at0.z_t, z0);
    let at1 = interpolate(&z0, &z1, 1.0, sigma).unwrap();
    for ((a, b), c) in at1.z_t.iter().zip(z1.iter()).zip(z0.iter()) {
        assert_abs_diff_eq!(*a, b + sigma * c, epsilon = 1e-14);
    }
}

#[test]
fn interpolation_rejects_bad_inputs() {
    let err = interpolate(&scalar_arr(0.0), &random_state(2, 1, 0), 0.5, 1e-4);
    assert!(err.is_err());
    let err = interpolate(&scalar_arr(0.0), &scalar_arr(1.0), 1.5, 1e-4);
    assert!(err.is_err());
}

#[test]
fn flow_loss_matches_hand_computed_point() {
    let sample = interpolate(&scalar_arr(2.0), &scalar_arr(4.0), 0.5, 1e-4).unwrap();
    let loss = flow_loss(&scalar_arr(0.0), &sample, LossForm::L1Endpoint);
    assert_abs_diff_eq!(loss, 4.0004, epsilon = 1e-12);
    let l2 = flow_loss(&scalar_arr(0.0), &sample, LossForm::L2);
    assert_abs_diff_eq!(l2, 2.0002 * 2.0002, epsilon = 1e-12);
}

#[test]
fn flow_loss_velocity_and_endpoint_terms_agree() {
    // The endpoint residual z1 - (u_hat + (1 - sigma_min) z0) equals the
    // velocity residual u_t - u_hat, so the combined loss is exactly twice
    // the velocity L1 for any prediction.
    let z0 = random_state(3, 4, 20);
    let z1 = random_state(3, 4, 21);
    let sample = interpolate(&z0, &z1, 0.37, 1e-4).unwrap();
    let u_hat = random_state(3, 4, 22);
    let both = flow_loss(&u_hat, &sample, LossForm::L1Endpoint);
    let velocity_only: f64 = (&sample.u_t - &u_hat).mapv(f64::abs).mean().unwrap();
    assert_abs_diff_eq!(both, 2.0 * velocity_only, epsilon = 1e-12);
}

#[test]
fn flow_loss_is_zero_at_the_true_velocity() {
    let z0 = random_state(2, 5, 30);
    let z1 = random_state(2, 5, 31);
    let sample = interpolate(&z0, &z1, 0.9, 1e-4).unwrap();
    let loss = flow_loss(&sample.u_t.clone(), &sample, LossForm::L1Endpoint);
    assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
}

#[test]
fn mask_regime_frequencies_match_curriculum() {
    let mut rng = seeded_rng(7, "mask-freq", 0);
    let probs = [0.70, 0.20, 0.10];
    let n = 100_000usize;
    let mut counts = [0usize; 3];
    let mut sub_counts = [0usize; 3];
    for _ in 0..n {
        let mask = sample_mask(&mut rng, probs);
        mask.validate().unwrap();
        match mask.regime {
            Regime::Edit => counts[0] += 1,
            Regime::Generate => counts[1] += 1,
            Regime::Unconditional => counts[2] += 1,
        }
        if mask.regime == Regime::Edit {
            match (mask.m_t, mask.m_v) {
                (true, true) => sub_counts[0] += 1,
                (false, true) => sub_counts[1] += 1,
                (true, false) => sub_counts[2] += 1,
                (false, false) => panic!("edit mask with no conditioning sub-branch"),
            }
        }
    }
    // Pearson chi-square against the target distribution; 9.21 is the 1%
    // critical value at two degrees of freedom.
    let chi2: f64 = counts
        .iter()
        .zip(probs.iter())
        .map(|(&c, &p)| {
            let expected = p * n as f64;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    assert!(
        chi2 < 9.21,
        "regime chi-square {chi2} exceeds the 1% critical value"
    );

    let edits: usize = sub_counts.iter().sum();
    let chi2_sub: f64 = sub_counts
        .iter()
        .map(|&c| {
            let expected = edits as f64 / 3.0;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    assert!(
        chi2_sub < 9.21,
        "sub-branch chi-square {chi2_sub} exceeds the critical value"
    );
}

#[test]
fn mask_curriculum_reaches_exactly_seven_configurations() {
    let mut rng = seeded_rng(8, "mask-configs", 0);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..10_000 {
        let mask = sample_mask(&mut rng, [0.70, 0.20, 0.10]);
        seen.insert(mask.bits());
    }
    assert_eq!(
        seen.len(),
        7,
        "expected 7 distinct mask configurations, saw {seen:?}"
    );
    assert!(
        !seen.contains(&(true, false, false)),
        "edit must keep prompt or visuals"
    );
    assert!(seen.contains(&(false, false, false)));
}

#[test]
fn mask_validation_enforces_regime_rules() {
    let bad = ModeMask {
        m_a: false,
        m_t: true,
        m_v: true,
        regime: Regime::Edit,
    };
    assert!(bad.validate().is_err());
    let bad = ModeMask {
        m_a: true,
        m_t: false,
        m_v: false,
        regime: Regime::Generate,
    };
    assert!(bad.validate().is_err());
    let bad = ModeMask {
        m_a: false,
        m_t: true,
        m_v: false,
        regime: Regime::Unconditional,
    };
    assert!(bad.validate().is_err());
    assert!(ModeMask::edit(false, false).validate().is_ok());
    assert!(ModeMask::unconditional().validate().is_ok());
}

#[test]
fn static_augmentation_probability_extremes_are_exact() {
    let frames = random_state(5, 3, 40);
    let mut rng = seeded_rng(4, "static-aug", 0);
    for _ in 0..200 {
        let out = apply_static_frame_augmentation(&frames, &mut rng, 0.0);
        assert_eq!(out, frames);
    }
    for _ in 0..200 {
        let out = apply_static_frame_augmentation(&frames, &mut rng, 1.0);
        assert_eq!(out.dim(), frames.dim());
        let first = out.row(0).to_owned();
        for row in out.rows() {
            assert_eq!(row, first.view());
        }
        // The repeated row is one of the original frames.
        assert!(frames.rows().into_iter().any(|r| r == first.view()));
    }
}

#[test]
fn static_augmentation_frequency_matches_probability() {
    let frames = random_state(4, 2, 41);
    let mut rng = seeded_rng(5, "static-aug-freq", 0);
    let n = 10_000usize;
    let prob = 0.25;
    let mut hits = 0usize;
    for _ in 0..n {
        let out = apply_static_frame_augmentation(&frames, &mut rng, prob);
        if out != frames {
            hits += 1;
        }
    }
    let rate = hits as f64 / n as f64;
    let sigma = (prob * (1.0 - prob) / n as f64).sqrt();
    assert!(
        (rate - prob).abs() < 3.0 * sigma,
        "static-augmentation rate {rate} outside 3 sigma of {prob}"
    );
}

#[test]
fn condition_set_rejects_mask_without_payload() {
    let mask = ModeMask::edit(true, false);
    let err = ConditionSet::<F>::new(None, Some(0), None, mask);
    assert!(err.is_err());
    let mask = ModeMask::generate(true, false);
    let err = ConditionSet::<F>::new(None, None, None, mask);
    assert!(err.is_err());
}

#[test]
fn masked_modalities_read_as_absent() {
    let cfg = micro_config(1);
    let cond = micro_cond(&cfg, 4, 2);
    // Same payloads, fully masked off.
    let masked = ConditionSet {
        mask: ModeMask::unconditional(),
        ..cond.clone()
    };
    assert!(masked.effective_mixture().is_none());
    assert!(masked.effective_prompt().is_none());
    assert!(masked.effective_frames().is_none());
    assert!(cond.effective_mixture().is_some());
}

#[test]
fn config_validation_rejects_inconsistent_settings() {
    let mut cfg = FluxConfig::tiny(0);
    cfg.hidden = 63;
    assert!(cfg.validate().is_err());
    let mut cfg = FluxConfig::tiny(0);
    cfg.heads = 5;
    assert!(cfg.validate().is_err());
    let mut cfg = FluxConfig::tiny(0);
    cfg.dec_blocks = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = FluxConfig::tiny(0);
    cfg.mask_probs = [0.5, 0.5, 0.5];
    assert!(cfg.validate().is_err());
    let mut cfg = FluxConfig::tiny(0);
    cfg.sigma_min = 1.0;
    assert!(cfg.validate().is_err());
    assert!(FluxConfig::tiny(0).validate().is_ok());
    assert!(FluxConfig::full_scale(0).validate().is_ok());
}

#[test]
fn time_features_match_the_fourier_definition() {
    let f = time_features::<F>(0.0);
    assert_eq!(f.dim(), (1, 2 * TIME_FREQS));
    for i in 0..TIME_FREQS {
        assert_abs_diff_eq!(f[[0, 2 * i]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[[0, 2 * i + 1]], 1.0, epsilon = 1e-15);
    }
    let f = time_features::<F>(0.5);
    assert_abs_diff_eq!(f[[0, 0]], 1.0, epsilon = 1e-12); // sin(pi/2)
    assert_abs_diff_eq!(f[[0, 1]], 0.0, epsilon = 1e-12); // cos(pi/2)
    assert_abs_diff_eq!(f[[0, 2]], 0.0, epsilon = 1e-12); // sin(pi)
    assert_abs_diff_eq!(f[[0, 3]], -1.0, epsilon = 1e-12); // cos(pi)
}

/// Every valid mask configuration must produce a finite velocity field of
/// the latent shape, with no prompt row leaking into the output.
#[test]
fn forward_covers_every_mask_configuration() {
    let cfg = micro_config(3);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 5;
    let z_t = random_state(n, cfg.latent_dim, 50);
    let full = micro_cond(&cfg, n, 51);
    let masks = [
        ModeMask::edit(true, true),
        ModeMask::edit(false, true),
        ModeMask::edit(true, false),
        ModeMask::generate(true, true),
        ModeMask::generate(false, true),
        ModeMask::generate(true, false),
        ModeMask::unconditional(),
    ];
    for mask in masks {
        let cond = ConditionSet {
            mask,
            ..full.clone()
        };
        let out = model.predict_velocity(&z_t, &cond, 0.3).unwrap();
        assert_eq!(out.dim(), (n, cfg.latent_dim), "mask {mask:?}");
        assert!(out.iter().all(|v| v.is_finite()), "mask {mask:?}");
    }
}

/// Masking a modality off must be bit-identical to physically removing it.
#[test]
fn masking_equals_removal_bit_exactly() {
    let cfg = micro_config(4);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 4;
    let z_t = random_state(n, cfg.latent_dim, 60);
    let full = micro_cond(&cfg, n, 61);
    let cases: [(ModeMask, bool, bool, bool); 5] = [
        (ModeMask::unconditional(), false, false, false),
        (ModeMask::generate(true, false), false, true, false),
        (ModeMask::generate(false, true), false, false, true),
        (ModeMask::edit(false, true), true, false, true),
        (ModeMask::edit(true, false), true, true, false),
    ];
    for (mask, keep_mix, keep_prompt, keep_frames) in cases {
        let masked = ConditionSet {
            mask,
            ..full.clone()
        };
        let removed = ConditionSet {
            mixture: keep_mix.then(|| full.mixture.clone().unwrap()),
            prompt: keep_prompt.then(|| full.prompt.unwrap()),
            frames: keep_frames.then(|| full.frames.clone().unwrap()),
            mask,
        };
        let a = model.predict_velocity(&z_t, &masked, 0.45).unwrap();
        let b = model.predict_velocity(&z_t, &removed, 0.45).unwrap();
        assert_eq!(a, b, "mask {mask:?} is not bit-identical to removal");
    }
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let cfg = micro_config(5);
    let m1 = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let m2 = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let z_t = random_state(4, cfg.latent_dim, 70);
    let cond = micro_cond(&cfg, 4, 71);
    let a = m1.predict_velocity(&z_t, &cond, 0.2).unwrap();
    let b = m1.predict_velocity(&z_t, &cond, 0.2).unwrap();
    let c = m2.predict_velocity(&z_t, &cond, 0.2).unwrap();
    assert_eq!(a, b, "same model, same inputs must agree bitwise");
    assert_eq!(a, c, "same seed must rebuild identical parameters");
    let m3 = FluxFormer::<F>::new(FluxConfig {
        seed: 6,
        ..cfg.clone()
    })
    .unwrap();
    let d = m3.predict_velocity(&z_t, &cond, 0.2).unwrap();
    assert_ne!(a, d, "a different seed should change the output");
}

#[test]
fn positional_embeddings_break_permutation_symmetry() {
    let cfg = micro_config(7);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 6;
    let z_t = random_state(n, cfg.latent_dim, 80);
    let cond = ConditionSet::<F>::unconditional().unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let base = model
        .predict_velocity_diag(&mut tape, &bound, &z_t, &cond, 0.5, &ForwardDiag::default())
        .unwrap();
    let permuted = model
        .predict_velocity_diag(
            &mut tape,
            &bound,
            &z_t,
            &cond,
            0.5,
            &ForwardDiag {
                permute_positions: Some((0..n).rev().collect()),
                ..Default::default()
            },
        )
        .unwrap();
    let a = tape.value(base);
    let b = tape.value(permuted);
    let max_diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_diff > 1e-9,
        "permuting positional rows left the output unchanged (positions unused)"
    );
}

#[test]
fn every_long_skip_reaches_the_output() {
    let cfg = micro_config(8);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let z_t = random_state(5, cfg.latent_dim, 90);
    let cond = micro_cond(&cfg, 5, 91);
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let base = model
        .predict_velocity_diag(&mut tape, &bound, &z_t, &cond, 0.4, &ForwardDiag::default())
        .unwrap();
    for j in 0..cfg.dec_blocks {
        let cut = model
            .predict_velocity_diag(
                &mut tape,
                &bound,
                &z_t,
                &cond,
                0.4,
                &ForwardDiag {
                    disable_skip: Some(j),
                    ..Default::default()
                },
            )
            .unwrap();
        let a = tape.value(base);
        let b = tape.value(cut);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "skip {j} does not influence the output");
    }
}

#[test]
fn each_conditioning_modality_changes_the_output() {
    let cfg = micro_config(9);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 4;
    let z_t = random_state(n, cfg.latent_dim, 100);
    let full = micro_cond(&cfg, n, 101);
    let uncond = full.fully_masked();
    let base = model.predict_velocity(&z_t, &uncond, 0.5).unwrap();
    let masks = [
        ("mixture", ModeMask::edit(false, false)),
        ("prompt", ModeMask::generate(true, false)),
        ("frames", ModeMask::generate(false, true)),
    ];
    for (label, mask) in masks {
        let cond = ConditionSet {
            mask,
            ..full.clone()
        };
        let out = model.predict_velocity(&z_t, &cond, 0.5).unwrap();
        assert_ne!(
            out, base,
            "{label} conditioning has no effect on the output"
        );
    }
    // Different prompt labels must also produce different fields.
    let p0 = ConditionSet {
        mask: ModeMask::generate(true, false),
        ..full.clone()
    };
    let p1 = ConditionSet {
        prompt: Some(2),
        ..p0.clone()
    };
    let a = model.predict_velocity(&z_t, &p0, 0.5).unwrap();
    let b = model.predict_velocity(&z_t, &p1, 0.5).unwrap();
    assert_ne!(a, b, "prompt identity does not reach the output");
}

#[test]
fn timestep_changes_the_velocity_field() {
    // Adaptive-norm weights start at zero (identity modulation), so a fresh
    // model deliberately ignores the conditioning vector; nudge them to
    // verify the timestep path is wired through.
    let cfg = micro_config(10);
    let mut model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    perturb_all_params(&mut model, 10);
    let z_t = random_state(4, cfg.latent_dim, 110);
    let cond = ConditionSet::<F>::unconditional().unwrap();
    let a = model.predict_velocity(&z_t, &cond, 0.1).unwrap();
    let b = model.predict_velocity(&z_t, &cond, 0.9).unwrap();
    assert_ne!(a, b, "timestep embedding does not reach the output");
}

/// Adds small Gaussian noise to every parameter so zero-initialized paths
/// (adaptive-norm modulation, gate biases) carry signal and gradients.
fn perturb_all_params(model: &mut FluxFormer<F>, seed: u64) {
    let mut rng = seeded_rng(seed, "perturb-params", 0);
    let names: Vec<String> = model.params.names().to_vec();
    for name in names {
        let p = model.params.get_mut(&name);
        p.iter_mut()
            .for_each(|v| *v += 0.05 * F::std_normal(&mut rng));
    }
}

#[test]
fn every_fusion_variant_runs_and_uses_the_scene() {
    let n = 4;
    let variants = [
        FusionVariant::Cgm,
        FusionVariant::Add,
        FusionVariant::GatedResidual,
        FusionVariant::SelfAttn,
        FusionVariant::CrossAttn,
    ];
    for variant in variants {
        let mut cfg = micro_config(11);
        cfg.fusion = variant;
        let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
        let z_t = random_state(n, cfg.latent_dim, 120);
        let full = micro_cond(&cfg, n, 121);
        let with_scene = ConditionSet {
            mask: ModeMask::generate(false, true),
            ..full.clone()
        };
        let without = full.fully_masked();
        let a = model.predict_velocity(&z_t, &with_scene, 0.5).unwrap();
        let b = model.predict_velocity(&z_t, &without, 0.5).unwrap();
        assert!(a.iter().all(|v| v.is_finite()), "{variant:?}");
        assert_ne!(a, b, "{variant:?} fusion ignores the scene");
    }
}

#[test]
fn disabled_fusion_has_no_stage_parameters_and_still_runs() {
    let mut cfg = micro_config(26);
    cfg.fusion = FusionVariant::Disabled;
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    assert!(!model.params.contains("fuse0.s.w"));
    assert!(!model.params.contains("fuse0.b"));
    let n = 4;
    let z_t = random_state(n, cfg.latent_dim, 190);
    let full = micro_cond(&cfg, n, 191);
    let cond = ConditionSet { mask: ModeMask::generate(false, true), ..full };
    let out = model.predict_velocity(&z_t, &cond, 0.5).unwrap();
    assert_eq!(out.dim(), (n, cfg.latent_dim));
    assert!(out.iter().all(|v| v.is_finite()));
    // The gated default scales decoder features by sigmoid(0)=0.5 even at
    // initialization, so the two wirings disagree on the same inputs.
    let gated = FluxFormer::<F>::new(micro_config(26)).unwrap();
    let reference = gated.predict_velocity(&z_t, &cond, 0.5).unwrap();
    assert_ne!(out, reference);
}

#[test]
fn text_plus_visual_gate_uses_the_prompt() {
    let mut cfg = micro_config(12);
    cfg.gate_variant = GateVariant::TextPlusVisual;
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 4;
    let z_t = random_state(n, cfg.latent_dim, 130);
    let full = micro_cond(&cfg, n, 131);
    let p0 = ConditionSet {
        mask: ModeMask::generate(true, true),
        ..full.clone()
    };
    let p1 = ConditionSet {
        prompt: Some(2),
        ..p0.clone()
    };
    let a = model.predict_velocity(&z_t, &p0, 0.5).unwrap();
    let b = model.predict_velocity(&z_t, &p1, 0.5).unwrap();
    assert_ne!(a, b);
}

#[test]
fn alignment_variants_change_the_scene_tokens() {
    let base_cfg = micro_config(13);
    let n = 5;
    let z_t = random_state(n, base_cfg.latent_dim, 140);
    let full = micro_cond(&base_cfg, n, 141);
    let mask = ModeMask::generate(false, true);
    let cond = ConditionSet { mask, ..full };

    let aligned = FluxFormer::<F>::new(base_cfg.clone()).unwrap();
    let a = aligned.predict_velocity(&z_t, &cond, 0.5).unwrap();

    let mut cfg = base_cfg.clone();
    cfg.use_avna = false;
    let broadcast = FluxFormer::<F>::new(cfg).unwrap();
    let b = broadcast.predict_velocity(&z_t, &cond, 0.5).unwrap();
    assert_ne!(
        a, b,
        "disabling alignment should alter decoder fusion inputs"
    );

    let mut cfg = base_cfg.clone();
    cfg.align_strategy = AlignStrategy::EmbeddingSpace;
    let embed = FluxFormer::<F>::new(cfg).unwrap();
    assert!(embed.params.contains("avna.proj.w"));
    let c = embed.predict_velocity(&z_t, &cond, 0.5).unwrap();
    assert!(c.iter().all(|v| v.is_finite()));
}

#[test]
fn oversized_inputs_are_rejected() {
    let cfg = micro_config(14);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let cond = ConditionSet::<F>::unconditional().unwrap();
    let too_long = random_state(cfg.max_positions + 1, cfg.latent_dim, 150);
    assert!(model.predict_velocity(&too_long, &cond, 0.5).is_err());
    let wrong_dim = random_state(4, cfg.latent_dim + 1, 151);
    assert!(model.predict_velocity(&wrong_dim, &cond, 0.5).is_err());
    let ok = random_state(4, cfg.latent_dim, 152);
    assert!(model.predict_velocity(&ok, &cond, 1.5).is_err());
    let mut bad = ok.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(model.predict_velocity(&bad, &cond, 0.5).is_err());
}

/// Analytic gradients through the full model (conditioning encoders, gated
/// fusion, attention, long skips) against central differences.
#[test]
fn backbone_gradients_match_central_differences() {
    let cfg = micro_config(15);
    let mut model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    // Zero-initialized modulation weights would leave the conditioning
    // paths with vacuously zero gradients; perturb everything first.
    perturb_all_params(&mut model, 15);
    let n = 3;
    let cond = micro_cond(&cfg, n, 161);
    let z0 = random_state(n, cfg.latent_dim, 162);
    let z1 = random_state(n, cfg.latent_dim, 163);
    let sample = interpolate(&z0, &z1, 0.6, 1e-4).unwrap();

    let loss_for = |params: &crate::nn::ParamStore<F>| -> f64 {
        let probe = FluxFormer {
            cfg: cfg.clone(),
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let bound = probe.params.bind_frozen(&mut tape);
        let u_hat = probe
            .predict_velocity_tape(&mut tape, &bound, &sample.z_t, &cond, 0.6)
            .unwrap();
        // L2 form: the L1 loss is not differentiable at zero residuals.
        let loss = flow_loss_tape(&mut tape, u_hat, &sample, LossForm::L2);
        tape.value(loss)[[]]
    };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let u_hat = model
        .predict_velocity_tape(&mut tape, &bound, &sample.z_t, &cond, 0.6)
        .unwrap();
    let loss = flow_loss_tape(&mut tape, u_hat, &sample, LossForm::L2);
    let grads = bound.grads(&tape.backward(loss));

    // Probe a few entries in parameters covering every architectural path.
    // The null latent is structurally unused under an edit condition and is
    // checked separately below.
    let probes = [
        "prompt.table",
        "tsa.score.w1",
        "vis.in.w",
        "tok.zt.w",
        "tok.zm.w",
        "pos",
        "prompt.proj.w",
        "t.mlp1.w",
        "vsum.w",
        "vamaf.s.w",
        "enc0.attn.q.w",
        "enc0.ada1.scale.w",
        "mid.mlp.fc1.w",
        "skip0.w",
        "dec1.attn.v.w",
        "fuse0.s.w",
        "fuse1.b",
        "out.w",
    ];
    let h = 1e-5;
    for name in probes {
        let grad = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let flat_index = grad.len() / 2;
        let analytic = grad.iter().nth(flat_index).copied().unwrap();
        let mut plus = model.params.clone();
        {
            let p = plus.get_mut(name);
            *p.iter_mut().nth(flat_index).unwrap() += h;
        }
        let mut minus = model.params.clone();
        {
            let p = minus.get_mut(name);
            *p.iter_mut().nth(flat_index).unwrap() -= h;
        }
        let numeric = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        assert!(
            rel <= 1e-4,
            "{name}: analytic {analytic} vs numeric {numeric} (relative error {rel})"
        );
    }
}

/// The null latent only receives gradients when no mixture is present.
#[test]
fn null_latent_gradient_matches_central_differences() {
    let cfg = micro_config(25);
    let mut model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    perturb_all_params(&mut model, 25);
    let n = 3;
    let z0 = random_state(n, cfg.latent_dim, 180);
    let z1 = random_state(n, cfg.latent_dim, 181);
    let sample = interpolate(&z0, &z1, 0.3, 1e-4).unwrap();
    let cond = ConditionSet::<F>::unconditional().unwrap();

    let loss_for = |params: &crate::nn::ParamStore<F>| -> f64 {
        let probe = FluxFormer {
            cfg: cfg.clone(),
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let bound = probe.params.bind_frozen(&mut tape);
        let u_hat = probe
            .predict_velocity_tape(&mut tape, &bound, &sample.z_t, &cond, 0.3)
            .unwrap();
        let loss = flow_loss_tape(&mut tape, u_hat, &sample, LossForm::L2);
        tape.value(loss)[[]]
    };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let u_hat = model
        .predict_velocity_tape(&mut tape, &bound, &sample.z_t, &cond, 0.3)
        .unwrap();
    let loss = flow_loss_tape(&mut tape, u_hat, &sample, LossForm::L2);
    let grads = bound.grads(&tape.backward(loss));
    let grad = grads.get("tok.null").expect("null latent should be live");
    let h = 1e-5;
    for idx in [0usize, cfg.latent_dim - 1] {
        let analytic = grad.iter().nth(idx).copied().unwrap();
        let mut plus = model.params.clone();
        *plus.get_mut("tok.null").iter_mut().nth(idx).unwrap() += h;
        let mut minus = model.params.clone();
        *minus.get_mut("tok.null").iter_mut().nth(idx).unwrap() -= h;
        let numeric = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-4,
            "tok.null[{idx}]: analytic {analytic} vs numeric {numeric}"
        );
    }
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let mut cfg = micro_config(16);
    cfg.learning_rate = 3e-3;
    let model = FluxFormer::<f32>::new(cfg.clone()).unwrap();
    let mut state = FluxTrainState::new(model);
    let mut rng = seeded_rng(16, "overfit-batch", 0);
    let n = 4;
    let batch: Vec<FluxExample<f32>> = (0..4)
        .map(|i| {
            let tokens = Array2::from_shape_fn((n, cfg.latent_dim), |_| f32::std_normal(&mut rng));
            let mixture = Array2::from_shape_fn((n, cfg.latent_dim), |_| f32::std_normal(&mut rng));
            FluxExample {
                target: micro_latent_f32(tokens),
                mixture: Some(micro_latent_f32(mixture)),
                prompt: Some(i % cfg.cond.num_classes),
                frames: Some(Array2::from_shape_fn((3, cfg.cond.frame_dim), |_| {
                    f32::std_normal(&mut rng)
                })),
            }
        })
        .collect();
    let masks = vec![ModeMask::edit(true, true); batch.len()];
    let mut early = 0.0;
    let mut late = 0.0;
    let steps = 800;
    for step in 0..steps {
        let report = state.train_step_masked(&batch, &masks).unwrap();
        assert!(report.loss.is_finite());
        if (5..15).contains(&step) {
            early += report.loss / 10.0;
        }
        if step >= steps - 10 {
            late += report.loss / 10.0;
        }
    }
    assert!(
        late < 0.5 * early,
        "loss did not drop while overfitting a fixed batch: early {early}, late {late}"
    );
}

fn micro_latent_f32(tokens: Array2<f32>) -> LatentSequence<f32> {
    let n = tokens.nrows();
    LatentSequence {
        tokens,
        downsample_ratio: 4,
        sample_rate: 8_000,
        segment_len: 4 * n,
    }
}

#[test]
fn gradient_clipping_report_is_consistent() {
    let cfg = micro_config(17);
    let model = FluxFormer::<f32>::new(cfg.clone()).unwrap();
    let mut state = FluxTrainState::new(model);
    let mut rng = seeded_rng(17, "clip-batch", 0);
    let tokens = Array2::from_shape_fn((4, cfg.latent_dim), |_| f32::std_normal(&mut rng) * 30.0);
    let batch = vec![FluxExample::<f32> {
        target: micro_latent_f32(tokens),
        mixture: None,
        prompt: None,
        frames: None,
    }];
    let report = state
        .train_step_masked(&batch, &[ModeMask::unconditional()])
        .unwrap();
    if report.grad_norm > cfg.grad_clip {
        let expected = cfg.grad_clip / report.grad_norm;
        assert_abs_diff_eq!(report.clip_scale, expected, epsilon = 1e-9);
    } else {
        assert_abs_diff_eq!(report.clip_scale, 1.0, epsilon = 0.0);
    }
    assert_abs_diff_eq!(
        (report.grad_norm * report.clip_scale).min(report.grad_norm),
        report.grad_norm * report.clip_scale,
        epsilon = 0.0
    );
}

#[test]
fn learning_rate_halves_at_decay_marks() {
    let mut cfg = micro_config(18);
    cfg.learning_rate = 1e-4;
    cfg.lr_decay_steps = vec![10, 20];
    let model = FluxFormer::<f32>::new(cfg).unwrap();
    let state = FluxTrainState::new(model);
    assert_abs_diff_eq!(state.lr_at(0), 1e-4, epsilon = 0.0);
    assert_abs_diff_eq!(state.lr_at(9), 1e-4, epsilon = 0.0);
    assert_abs_diff_eq!(state.lr_at(10), 5e-5, epsilon = 1e-20);
    assert_abs_diff_eq!(state.lr_at(19), 5e-5, epsilon = 1e-20);
    assert_abs_diff_eq!(state.lr_at(20), 2.5e-5, epsilon = 1e-20);
    assert_abs_diff_eq!(state.lr_at(1_000), 2.5e-5, epsilon = 1e-20);
}

#[test]
fn masked_training_step_matches_payload_free_step_bitwise() {
    let cfg = micro_config(19);
    let mut rng = seeded_rng(19, "masked-vs-absent", 0);
    let n = 4;
    let tokens = Array2::from_shape_fn((n, cfg.latent_dim), |_| f32::std_normal(&mut rng));
    let mixture = Array2::from_shape_fn((n, cfg.latent_dim), |_| f32::std_normal(&mut rng));
    let frames = Array2::from_shape_fn((3, cfg.cond.frame_dim), |_| f32::std_normal(&mut rng));
    let with_payloads = FluxExample::<f32> {
        target: micro_latent_f32(tokens.clone()),
        mixture: Some(micro_latent_f32(mixture)),
        prompt: Some(0),
        frames: Some(frames),
    };
    let without = FluxExample::<f32> {
        target: micro_latent_f32(tokens),
        mixture: None,
        prompt: None,
        frames: None,
    };
    let masks = [ModeMask::unconditional()];
    let mut a = FluxTrainState::new(FluxFormer::<f32>::new(cfg.clone()).unwrap());
    let mut b = FluxTrainState::new(FluxFormer::<f32>::new(cfg).unwrap());
    let ra = a
        .train_step_masked(std::slice::from_ref(&with_payloads), &masks)
        .unwrap();
    let rb = b
        .train_step_masked(std::slice::from_ref(&without), &masks)
        .unwrap();
    assert_eq!(ra.loss, rb.loss, "masked payloads leaked into the loss");
    for (name, pa) in a.model.params.iter() {
        let pb = b.model.params.get(name);
        assert_eq!(pa, pb, "parameter {name} diverged after one step");
    }
}

#[test]
fn train_step_rejects_masks_for_missing_payloads() {
    let cfg = micro_config(20);
    let mut rng = seeded_rng(20, "missing-payload", 0);
    let tokens = Array2::from_shape_fn((4, cfg.latent_dim), |_| f32::std_normal(&mut rng));
    let bare = FluxExample::<f32> {
        target: micro_latent_f32(tokens),
        mixture: None,
        prompt: None,
        frames: None,
    };
    let mut state = FluxTrainState::new(FluxFormer::<f32>::new(cfg).unwrap());
    let err = state.train_step_masked(std::slice::from_ref(&bare), &[ModeMask::edit(false, true)]);
    assert!(err.is_err());
}

#[test]
fn curriculum_stream_is_capturable_for_resume() {
    let cfg = micro_config(21);
    let mut rng = seeded_rng(21, "resume-batch", 0);
    let tokens = Array2::from_shape_fn((4, cfg.latent_dim), |_| f32::std_normal(&mut rng));
    let example = FluxExample::<f32> {
        target: micro_latent_f32(tokens),
        mixture: None,
        prompt: None,
        frames: None,
    };
    let masks = [ModeMask::unconditional()];
    let mut state = FluxTrainState::new(FluxFormer::<f32>::new(cfg).unwrap());
    state
        .train_step_masked(std::slice::from_ref(&example), &masks)
        .unwrap();
    let snapshot = state.rng_state();
    let mut resumed = state.clone();
    resumed.rng = snapshot.restore().unwrap();
    let ra = state
        .train_step_masked(std::slice::from_ref(&example), &masks)
        .unwrap();
    let rb = resumed
        .train_step_masked(std::slice::from_ref(&example), &masks)
        .unwrap();
    assert_eq!(
        ra.loss, rb.loss,
        "restored stream must continue identically"
    );
}

#[test]
fn static_visual_flag_forces_single_frame_conditioning() {
    let mut cfg = micro_config(22);
    cfg.static_visual = true;
    cfg.static_aug_prob = 0.0; // The flag must dominate the probability.
    let mut rng = seeded_rng(22, "static-flag", 0);
    let frames = Array2::from_shape_fn((5, cfg.cond.frame_dim), |_| f32::std_normal(&mut rng));
    // The trainer applies the augmentation with probability 1 when the
    // static-visual ablation is on; replicate the decision rule here.
    let prob = if cfg.static_visual {
        1.0
    } else {
        cfg.static_aug_prob
    };
    let out = apply_static_frame_augmentation(&frames, &mut rng, prob);
    let first = out.row(0).to_owned();
    for row in out.rows() {
        assert_eq!(row, first.view());
    }
}

#[test]
fn null_latent_is_used_only_without_a_mixture() {
    // With a mixture the null latent must not influence the output; without
    // one it must.
    let cfg = micro_config(23);
    let model = FluxFormer::<F>::new(cfg.clone()).unwrap();
    let n = 4;
    let z_t = random_state(n, cfg.latent_dim, 170);
    let full = micro_cond(&cfg, n, 171);

    let mut tweaked = model.clone();
    {
        let null = tweaked.params.get_mut("tok.null");
        null.iter_mut().for_each(|v| *v += 1.0);
    }

    let edit = ConditionSet {
        mask: ModeMask::edit(false, false),
        ..full.clone()
    };
    let a = model.predict_velocity(&z_t, &edit, 0.5).unwrap();
    let b = tweaked.predict_velocity(&z_t, &edit, 0.5).unwrap();
    assert_eq!(a, b, "null latent leaked into a mixture-conditioned pass");

    let uncond = full.fully_masked();
    let c = model.predict_velocity(&z_t, &uncond, 0.5).unwrap();
    let d = tweaked.predict_velocity(&z_t, &uncond, 0.5).unwrap();
    assert_ne!(c, d, "null latent unused in an unconditional pass");
}

#[test]
fn deep_profiles_construct_with_consistent_parameter_sets() {
    let tiny = FluxFormer::<f32>::new(FluxConfig::tiny(0)).unwrap();
    for required in [
        "prompt.table",
        "tok.zt.w",
        "tok.null",
        "pos",
        "enc0.attn.q.w",
        "enc1.mlp.fc2.b",
        "mid.ada2.shift.w",
        "dec0.attn.o.w",
        "skip1.w",
        "fuse1.s.w",
        "out.w",
    ] {
        assert!(
            tiny.params.contains(required),
            "missing parameter {required}"
        );
    }
    assert!(!tiny.params.contains("avna.proj.w"));
    assert!(!tiny.params.contains("fuse0.p.w"));
    let pos = tiny.params.get("pos");
    assert_eq!(pos.shape(), &[100, 64]);
}

#[test]
fn condition_set_constructors_set_masks_from_payloads() {
    let cfg = micro_config(24);
    let mut rng = seeded_rng(24, "ctor", 0);
    let mixture = micro_latent(Array2::from_shape_fn((4, cfg.latent_dim), |_| {
        F::std_normal(&mut rng)
    }));
    let set = ConditionSet::for_edit(mixture.clone(), None, None).unwrap();
    assert_eq!(set.mask.bits(), (true, false, false));
    assert_eq!(set.mask.regime, Regime::Edit);
    let set = ConditionSet::<F>::for_generate(Some(1), None).unwrap();
    assert_eq!(set.mask.bits(), (false, true, false));
    let set = ConditionSet::<F>::for_generate(None, None).unwrap();
    assert_eq!(set.mask.regime, Regime::Unconditional);
    let frames = Array1::zeros(cfg.cond.frame_dim)
        .broadcast((2, cfg.cond.frame_dim))
        .unwrap()
        .to_owned();
    let set = ConditionSet::<F>::for_generate(None, Some(frames)).unwrap();
    assert_eq!(set.mask.bits(), (false, false, true));
}
