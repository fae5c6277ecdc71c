//! Seeded random streams. Every stochastic draw in a run comes from one
//! `ChaCha8` generator so runs replay bit for bit.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{LatentVideo, Result};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Independent standard-normal entries in every frame.
pub fn normal_video(rng: &mut impl Rng, shape: [usize; 4]) -> Result<LatentVideo> {
    let n = shape.iter().product();
    LatentVideo::from_vec(shape, standard_normal(rng, n))
}

/// One standard-normal frame repeated across all frames.
pub fn shared_normal_video(rng: &mut impl Rng, shape: [usize; 4]) -> Result<LatentVideo> {
    let [n, c, h, w] = shape;
    let frame = standard_normal(rng, c * h * w);
    LatentVideo::broadcast_frame(&frame, n, c, h, w)
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_inclusive(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
