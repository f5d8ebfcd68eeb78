//! Keyed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose key
//! is a 128-bit mix of a master seed and a small tuple of integers (a tag, a
//! replica index, lattice coordinates, ...). Streams never depend on the order
//! in which they are requested, which makes lazy environments and
//! replica-parallel experiments replayable bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for all random draws.
pub type Stream = ChaCha8Rng;

/// Domain-separation tags for [`derive_seed`] and [`stream`].
pub mod tag {
    pub const ENVIRONMENT: u64 = 0x656e_7669;
    pub const WALK: u64 = 0x7761_6c6b;
    pub const REPLICA: u64 = 0x7265_706c;
    pub const VERTEX: u64 = 0x7665_7274;
    pub const AUX: u64 = 0x6175_7821;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Two-lane sponge over 64-bit words. The lanes use different initial
/// constants so the output is a 128-bit key.
pub fn mix128(words: &[u64]) -> [u64; 2] {
    let mut a = 0x243f_6a88_85a3_08d3u64;
    let mut b = 0x1319_8a2e_0370_7344u64;
    for &w in words {
        a = splitmix64(a ^ w);
        b = splitmix64(b.rotate_left(17) ^ w.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    // Length padding so that prefixes do not collide.
    a = splitmix64(a ^ words.len() as u64);
    b = splitmix64(b ^ (words.len() as u64).rotate_left(32));
    [a, b]
}

/// A 64-bit child seed of `master` for the given path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut words = Vec::with_capacity(path.len() + 1);
    words.push(master);
    words.extend_from_slice(path);
    let [a, b] = mix128(&words);
    a ^ b.rotate_left(29)
}

/// A ChaCha stream keyed by a 128-bit key. The key fills the 256-bit ChaCha
/// key, the counter starts at zero.
pub fn stream_from_key(key: [u64; 2]) -> Stream {
    let mut seed = [0u8; 32];
    let ext = [key[0], key[1], splitmix64(key[0] ^ 0x5bd1_e995), splitmix64(key[1] ^ 0x1b87_3593)];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(ext) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stream for `(master, path...)`.
pub fn stream(master: u64, path: &[u64]) -> Stream {
    let mut words = Vec::with_capacity(path.len() + 1);
    words.push(master);
    words.extend_from_slice(path);
    stream_from_key(mix128(&words))
}
