//! Seeded random sources. Every stochastic routine takes an explicit seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed`.
pub fn substream(seed: u64, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Uniform point on the unit sphere S^{d−1}.
pub fn unit_sphere(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d);
        let n = crate::linalg::norm(&v);
        if n > 1e-300 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point in the unit ball B^d.
pub fn unit_ball(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let dir = unit_sphere(rng, d);
    let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
    dir.into_iter().map(|x| x * r).collect()
}
