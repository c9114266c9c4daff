use std::f64::consts::PI;

use super::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Each stream owns a disjoint window of 2^40 consecutive states on the single
/// SplitMix64 orbit, so streams `0..2^24` never overlap within 2^40 draws.
const STREAM_SHIFT: u32 = 40;

/// Seeded SplitMix64 generator.
///
/// Two streams built from the same seed but different `stream_id`s start
/// `2^40` orbit positions apart; the same `(seed, stream_id)` always replays
/// the same sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
    stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let offset = stream_id.wrapping_mul(GOLDEN_GAMMA << STREAM_SHIFT);
        Self {
            state: seed.wrapping_add(offset),
            stream_id,
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    /// One Box–Muller pair of independent standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // (0, 1]: keeps the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal();
        }
    }
}

/// I.i.d. standard normal tensor of the given shape.
pub fn gaussian_draw(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    gaussian_draw_scaled(rng, shape, 0.0, 1.0)
}

/// `mean + std * N(0, 1)`. With `std == 0` the result is `mean` exactly.
pub fn gaussian_draw_scaled(rng: &mut RngStream, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut());
    if std == 0.0 {
        return Tensor::full(shape, mean);
    }
    for v in t.data_mut() {
        *v = mean + std * *v;
    }
    t
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gaussian_draw(&mut RngStream::new(42, 3), &[4, 5]);
        let b = gaussian_draw(&mut RngStream::new(42, 3), &[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn mean_of_a_million_draws_is_small() {
        let t = gaussian_draw(&mut RngStream::new(1, 0), &[1_000_000]);
        assert!(t.mean().abs() < 0.01, "mean {}", t.mean());
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn zero_scale_returns_mean_exactly() {
        let t = gaussian_draw_scaled(&mut RngStream::new(5, 0), &[7], 0.3, 0.0);
        assert!(t.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn distinct_streams_never_share_states() {
        let mut a = RngStream::new(9, 0);
        let mut b = RngStream::new(9, 1);
        let mut seen = HashSet::with_capacity(100_000);
        for _ in 0..100_000 {
            a.next_u64();
            seen.insert(a.state());
        }
        for _ in 0..100_000 {
            b.next_u64();
            assert!(!seen.contains(&b.state()));
        }
    }
}
