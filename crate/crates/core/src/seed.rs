//! Stable hashing and seed derivation.
//!
//! Every random stream in the crate is derived from a master seed plus a
//! path of stream identifiers, so a unit of work (one tree, one fold, one
//! realization) always sees the same stream regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Hash of `key` under `seed`, stable across platforms and releases.
pub fn keyed_hash(seed: u64, key: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key);
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Derive a child seed from a master seed and a stream path.
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(stream.len() * 8);
    for s in stream {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    keyed_hash(master, &bytes)
}

pub fn rng_for(master: u64, stream: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream))
}

/// Named stream tags, so unrelated components never share a stream.
pub mod stream {
    pub const TREE: u64 = 0x7472_6565;
    pub const FOLD: u64 = 0x666f_6c64;
    pub const REALIZATION: u64 = 0x7265_616c;
    pub const RESTART: u64 = 0x7273_7472;
    pub const ELM: u64 = 0x0065_6c6d;
    pub const SAMPLE: u64 = 0x736d_706c;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const SYNTH: u64 = 0x7379_6e74;
}
