//! Deterministic RNG plumbing.
//!
//! Every random draw in the crate flows through a [`Prng`] seeded from an
//! explicit `u64`. Sub-streams are derived with [`substream`] so that
//! independent components (per task, per episode, per stage) never share or
//! reorder a stream.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(mix(seed))
}

/// Derive an independent stream from a base seed and a label path.
pub fn substream(seed: u64, labels: &[u64]) -> Prng {
    let mut z = mix(seed);
    for &l in labels {
        z = mix(z ^ l.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    Prng::seed_from_u64(z)
}

/// One standard normal draw (Box-Muller).
pub fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        return r * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

pub fn normal_f32(rng: &mut impl Rng) -> f32 {
    normal(rng) as f32
}

/// Fill a buffer with i.i.d. standard normal draws.
pub fn fill_normal_f32(rng: &mut impl Rng, out: &mut [f32]) {
    for v in out.iter_mut() {
        *v = normal_f32(rng);
    }
}
