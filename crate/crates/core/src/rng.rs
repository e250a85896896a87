//! Seed fan-out.
//!
//! Every random stream derives from one root seed: the stream seed is the
//! first eight bytes (little-endian) of `SHA-256(root_le ‖ label)`. Labels are
//! purpose strings such as `"train-scene/12"`, so rerunning any subset of the
//! work reproduces exactly the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn split_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn split_indexed(root: u64, label: &str, index: usize) -> u64 {
    split_seed(root, &format!("{label}/{index}"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    rng_from(split_seed(root, label))
}
