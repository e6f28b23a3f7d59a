//! Named, splittable random streams.
//!
//! Every stream is a ChaCha8 generator whose 32-byte seed is the SHA-256 of a
//! global seed, a label and a list of indices. Streams with different keys are
//! independent, so work can be spread over threads without changing results.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives the stream for `(seed, label, indices)`.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> Stream {
    Stream::from_seed(stream_key(seed, label, indices))
}

pub fn stream_key(seed: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

/// Short hex tag identifying a stream, used in diagnostics.
pub fn stream_tag(seed: u64, label: &str, indices: &[u64]) -> String {
    hex::encode(&stream_key(seed, label, indices)[..8])
}
