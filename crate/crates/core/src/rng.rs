//! Deterministic random-number plumbing.
//!
//! Every stochastic component in the crate draws from a `ChaCha8Rng` seeded
//! through [`derive_seed`], which mixes a root seed with a purpose label and
//! an index. Distinct purposes therefore get decorrelated streams while the
//! whole pipeline stays reproducible from a single root seed.
//!
//! [`RngState`] captures the full generator state (seed, stream, word
//! position) so training can resume from a checkpoint bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MageError, Result};

/// Mixes `(root, label, index)` into a 64-bit seed.
///
/// Implementation: FNV-1a over the label bytes and the little-endian root and
/// index, finished with a SplitMix64 scramble. Stable across platforms and
/// releases; changing it would silently re-seed every run, so don't.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for &b in root
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // SplitMix64 finalizer to spread low-entropy inputs over all bits.
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A `ChaCha8Rng` seeded from `(root, label, index)`.
pub fn seeded_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

/// Serializable snapshot of a `ChaCha8Rng`, sufficient to restore the
/// generator to the exact sample position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte cipher seed, hex encoded (JSON-safe).
    pub seed_hex: String,
    /// Stream id.
    pub stream: u64,
    /// 128-bit word position, hex encoded (exceeds JSON's exact-integer range).
    pub word_pos_hex: String,
}

impl RngState {
    /// Captures the current generator state.
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: hex_encode(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos_hex: format!("{:x}", rng.get_word_pos()),
        }
    }

    /// Rebuilds a generator that continues exactly where `capture` left off.
    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed_bytes = hex_decode(&self.seed_hex)?;
        if seed_bytes.len() != 32 {
            return Err(MageError::Checkpoint(format!(
                "rng seed must be 32 bytes, got {}",
                seed_bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&seed_bytes);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let word_pos = u128::from_str_radix(&self.word_pos_hex, 16)
            .map_err(|e| MageError::Checkpoint(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(MageError::Checkpoint("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| MageError::Checkpoint(format!("bad hex byte: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_seed_separates_labels_and_indices() {
        let a = derive_seed(1, "mask", 0);
        let b = derive_seed(1, "mask", 1);
        let c = derive_seed(1, "noise", 0);
        let d = derive_seed(2, "mask", 0);
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn derive_seed_is_stable() {
        // Frozen value: changing the mixing function re-seeds every pipeline.
        assert_eq!(derive_seed(42, "dataset", 7), 9038870347214805702);
    }

    #[test]
    fn rng_state_round_trip_resumes_mid_stream() {
        let mut rng = seeded_rng(9, "train", 3);
        for _ in 0..17 {
            rng.next_u64();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }
}
