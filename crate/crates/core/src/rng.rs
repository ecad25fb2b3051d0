//! Counter-style random streams.
//!
//! Every stochastic stage asks for a stream keyed by `(seed, purpose, index)`.
//! The same key always yields the same stream, no matter how many other
//! streams were drawn before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default seed used when neither a flag, a config file nor the environment
/// provide one.
pub const DEFAULT_SEED: u64 = 1234;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Returns the generator for one `(seed, purpose, index)` key.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ fnv1a(purpose.as_bytes()));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
