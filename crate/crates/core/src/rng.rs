//! Seeded random streams. Every consumer draws from its own ChaCha stream
//! derived from the master seed, so adding draws in one place never shifts
//! another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_INIT_G: u64 = 1;
pub const STREAM_INIT_F: u64 = 2;
pub const STREAM_INIT_DX: u64 = 3;
pub const STREAM_INIT_DY: u64 = 4;
pub const STREAM_EXTRACTOR: u64 = 5;
/// Per-domain shuffles use `STREAM_SHUFFLE + (domain << 32) + epoch`.
pub const STREAM_SHUFFLE: u64 = 1 << 40;
/// Image-pool decisions use `STREAM_POOL + (domain << 32) + iteration`.
pub const STREAM_POOL: u64 = 2 << 40;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal with standard deviation `std`, resampled outside two deviations.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
