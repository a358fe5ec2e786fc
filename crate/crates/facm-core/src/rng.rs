//! Deterministic random-number streams.
//!
//! Every run is driven by a single `u64` seed. Subsystems (data draws, prior
//! noise, time sampling, weight init, evaluation, ...) each derive their own
//! independent stream from that seed plus a fixed string label, so adding a
//! consumer to one subsystem never perturbs the draws seen by another.
//! Re-noising during few-step sampling uses per-(sample, step) substreams so
//! results are independent of batch layout and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates structured inputs into seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Stream for a named subsystem of a run.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(label_hash(label))))
}

/// Keyed substream, e.g. per (sample index, step index) during sampling.
pub fn substream(seed: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    let base = mix(seed ^ mix(label_hash(label)));
    ChaCha8Rng::seed_from_u64(mix(base ^ mix(a).rotate_left(17) ^ mix(b).rotate_left(43)))
}
