//! Property tests for the synthetic benchmark's structural invariants.

use mage_core::audio::Waveform;
use mage_core::synthbench::{
    build_dataset, clip_seed, clip_spec, make_mixture, render_frames, synth_source, BenchConfig,
    MixtureRule, Motion,
};
use ndarray::Array1;
use proptest::prelude::*;

fn wave(samples: Vec<f64>) -> Waveform<f64> {
    Waveform::new(Array1::from_vec(samples), 4410).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Codec mixtures follow x1 + lambda*x2 exactly (then clip to [-1, 1]).
    #[test]
    fn codec_mixture_matches_formula(
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64),
        lambda in 0.0f64..1.5,
    ) {
        let x1 = wave(pairs.iter().map(|p| p.0).collect());
        let x2 = wave(pairs.iter().map(|p| p.1).collect());
        let m = make_mixture(&x1, &x2, MixtureRule::Codec { lambda }).unwrap();
        for i in 0..m.len() {
            let expect = (x1.samples[i] + lambda * x2.samples[i]).clamp(-1.0, 1.0);
            prop_assert_eq!(m.samples[i], expect);
            prop_assert!(m.samples[i].abs() <= 1.0);
        }
    }

    /// Flow mixtures are the exact arithmetic mean (never clipped for
    /// inputs already inside [-1, 1]).
    #[test]
    fn flow_mixture_is_exact_mean(
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..64),
    ) {
        let x1 = wave(pairs.iter().map(|p| p.0).collect());
        let x2 = wave(pairs.iter().map(|p| p.1).collect());
        let m = make_mixture(&x1, &x2, MixtureRule::Flow).unwrap();
        for i in 0..m.len() {
            prop_assert_eq!(m.samples[i], 0.5 * (x1.samples[i] + x2.samples[i]));
        }
    }

    /// Same (spec, seed) renders the same samples; the frame track is also
    /// reproducible.
    #[test]
    fn synthesis_and_frames_are_deterministic(
        class in 0usize..4,
        clip in 0usize..12,
        root in 0u64..1000,
    ) {
        let cfg = BenchConfig::tiny(root);
        let spec = clip_spec(&cfg, class, clip).unwrap();
        let seed = clip_seed(&cfg, class, clip);
        let a = synth_source::<f32>(&spec, cfg.segment_samples, cfg.sample_rate, seed).unwrap();
        let b = synth_source::<f32>(&spec, cfg.segment_samples, cfg.sample_rate, seed).unwrap();
        prop_assert_eq!(a.samples, b.samples);
        let fa = render_frames::<f32>(&cfg, &spec, cfg.num_frames(), Motion::Playing, seed).unwrap();
        let fb = render_frames::<f32>(&cfg, &spec, cfg.num_frames(), Motion::Playing, seed).unwrap();
        prop_assert_eq!(fa.features, fb.features);
    }

    /// The motion channel's active frames line up with the note intervals
    /// to within one frame period, and frame timestamps are monotonically
    /// increasing inside [0, 1].
    #[test]
    fn frames_align_with_audio_events(
        class in 0usize..4,
        clip in 0usize..12,
        root in 0u64..1000,
    ) {
        let mut cfg = BenchConfig::tiny(root);
        cfg.frame_jitter_std = 0.0;
        let spec = clip_spec(&cfg, class, clip).unwrap();
        let frames = render_frames::<f64>(
            &cfg, &spec, cfg.num_frames(), Motion::Playing, clip_seed(&cfg, class, clip),
        ).unwrap();
        let d_v = frames.feature_dim();
        let frame_period = 1.0 / cfg.fps;
        for k in 0..frames.num_frames() {
            let active = frames.features[(k, d_v - 1)] > 0.5;
            let t = (k as f64 + 0.5) / cfg.fps;
            // An active frame must be within one frame period of a note
            // interval; an inactive frame must not sit inside one by more
            // than a frame period.
            let near_note = spec.note_pattern.iter().any(|n| {
                t >= n.onset_sec - frame_period && t < n.onset_sec + n.duration_sec + frame_period
            });
            let deep_inside = spec.note_pattern.iter().any(|n| {
                t >= n.onset_sec + frame_period && t < n.onset_sec + n.duration_sec - frame_period
            });
            if active {
                prop_assert!(near_note, "active frame at {}s far from any note", t);
            } else {
                prop_assert!(!deep_inside, "silent frame at {}s deep inside a note", t);
            }
        }
        for w in frames.timestamps.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        prop_assert!(*frames.timestamps.last().unwrap() <= 1.0);
        prop_assert!(frames.timestamps[0] >= 0.0);
    }
}

/// Every flow-mode training example satisfies the mixture identity
/// bit-exactly (max |mixture - 0.5*(a+b)| == 0 before clipping; sources
/// peak at 0.9 so clipping never engages).
#[test]
fn dataset_mixture_identity_holds_everywhere() {
    let mut cfg = BenchConfig::tiny(424_242);
    cfg.num_examples = 24;
    let ds = build_dataset::<f32>(&cfg).unwrap();
    for ex in &ds {
        let mut max_abs = 0.0f32;
        for i in 0..ex.mixture.len() {
            let diff = (ex.mixture.samples[i]
                - 0.5 * (ex.source_a.samples[i] + ex.source_b.samples[i]))
                .abs();
            max_abs = max_abs.max(diff);
        }
        assert_eq!(max_abs, 0.0);
    }
}
