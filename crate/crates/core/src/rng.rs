//! Named, seeded random streams.
//!
//! Every stream is a ChaCha20 generator whose 32-byte key is derived from the
//! master seed and the stream name: the name is hashed with 64-bit FNV-1a, and
//! the pair `(seed, hash)` is expanded to four words by SplitMix64. Adding draws
//! to one stream never shifts another, and a stream's output depends only on
//! `(seed, name)`.
//!
//! Conventional names: `data/...` for sample draws, `laplace/...` for noise,
//! `scenario` for fixture construction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The key bytes for stream `name` under master `seed`.
pub fn stream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut state = seed ^ fnv1a(name).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    ChaCha20Rng::from_seed(stream_key(seed, name))
}
