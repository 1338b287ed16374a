//! Deterministic seed derivation.
//!
//! Every source of randomness in an experiment is a substream derived from
//! the root seed and a chain of labels (stage name, layer id, sample index).
//! Toggling one stage never perturbs another stage's stream, and results do
//! not depend on worker count because each unit of work derives its own
//! stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a label path.
pub fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    for label in labels {
        h = fnv1a(h, label.as_bytes());
        h = fnv1a(h, &[0xff]); // path separator
    }
    splitmix64(h)
}

/// Derives a child seed from `root`, a label path and a numeric index.
pub fn derive_seed_indexed(root: u64, labels: &[&str], index: u64) -> u64 {
    let base = derive_seed(root, labels);
    splitmix64(base ^ splitmix64(index.wrapping_add(0x9e3779b97f4a7c15)))
}

/// A seeded ChaCha stream for the given label path.
///
/// ChaCha output is stable across platforms and crate versions, which keeps
/// experiment manifests reproducible.
pub fn substream(root: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, labels))
}

/// A seeded ChaCha stream for the given label path and index (layer id,
/// sample id, tile id, ...).
pub fn substream_indexed(root: u64, labels: &[&str], index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(root, labels, index))
}
