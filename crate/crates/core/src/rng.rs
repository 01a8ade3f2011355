//! Deterministic random streams.
//!
//! Every source of randomness in this crate is a ChaCha8 stream addressed by
//! a `(seed, stream)` pair. Stage seeds are derived by hashing a label into
//! the base seed, so adding a new consumer never perturbs existing streams.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Create the stream `stream_id` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derive an independent seed for a named stage from a base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix to decorrelate from the base.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(base ^ splitmix(h))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

/// Standard normal draw (Box–Muller; consumes two uniforms per call).
pub fn normal(rng: &mut impl RngCore) -> f64 {
    let u = loop {
        let u = uniform(rng);
        if u > 0.0 {
            break u;
        }
    };
    let v = uniform(rng);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Serializable snapshot of a ChaCha8 stream position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn snapshot(rng: &ChaCha8Rng) -> RngSnapshot {
    RngSnapshot {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(snap: &RngSnapshot) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(snap.seed);
    rng.set_stream(snap.stream);
    rng.set_word_pos(snap.word_pos);
    rng
}
