//! Property tests for the conditioning pipeline: alignment invariants and
//! attention-weight normalization.

use mage_core::condkit::{avna_align, avna_indices, CondConfig, CondEncoder};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Source indices never decrease along the audio timeline.
    #[test]
    fn alignment_is_monotone(t_v in 1usize..64, n in 1usize..64) {
        let idx = avna_indices(t_v, n);
        prop_assert_eq!(idx.len(), n);
        for w in idx.windows(2) {
            prop_assert!(w[0] <= w[1], "indices decreased: {:?}", idx);
        }
        for &k in &idx {
            prop_assert!(k < t_v);
        }
    }

    /// When there are at least as many audio tokens as frames, every frame
    /// is used at least once.
    #[test]
    fn alignment_covers_all_frames(t_v in 1usize..48, extra in 0usize..48) {
        let n = t_v + extra;
        let idx = avna_indices(t_v, n);
        let mut seen = vec![false; t_v];
        for &k in &idx {
            seen[k] = true;
        }
        prop_assert!(seen.iter().all(|&s| s), "unused frame: {:?}", idx);
    }

    /// Aligning a sequence onto a grid of its own length is the identity.
    #[test]
    fn alignment_on_matching_grids_is_identity(t_v in 1usize..64) {
        let idx = avna_indices(t_v, t_v);
        let want: Vec<usize> = (0..t_v).collect();
        prop_assert_eq!(idx, want);
    }

    /// Attention weights are a probability distribution and the aligned
    /// tokens are exact copies of refined frames, for any frame count.
    #[test]
    fn scene_encoding_is_normalized_and_alignment_copies(
        t_v in 1usize..24,
        n in 1usize..24,
        seed in 0u64..1000,
    ) {
        let cfg = CondConfig { num_classes: 3, frame_dim: 6, cond_dim: 10, seed };
        let enc = CondEncoder::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let frames = Array2::from_shape_fn((t_v, 6), |_| rng.gen_range(-2.0..2.0));
        let scene = enc.encode_scene(&frames).unwrap();
        let sum: f64 = scene.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "weight sum {}", sum);
        let aligned = avna_align(&scene, n).unwrap();
        aligned.validate(&scene.per_frame).unwrap();
    }
}
