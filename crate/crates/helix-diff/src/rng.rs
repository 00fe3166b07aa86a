//! Deterministic random number generation.
//!
//! The generator is fully specified so that alternate implementations can
//! reproduce the streams exactly:
//!
//! * State setup: the 64-bit seed is expanded into four 64-bit words with
//!   SplitMix64 (Steele et al.), i.e. repeated `z = (s += 0x9E3779B97F4A7C15)`
//!   followed by the two xor-shift-multiply finalization steps.
//! * Stream: xoshiro256** (Blackman & Vigna). `next_u64` returns
//!   `rotl(s1 * 5, 7) * 9` before the state transition.
//! * `next_f64` takes the top 53 bits of `next_u64` times 2^-53, giving a
//!   uniform value in [0, 1).
//! * `next_normal` is the Box–Muller transform on `u1 ∈ (0,1]`, `u2 ∈ [0,1)`:
//!   `sqrt(-2 ln u1) * (cos, sin)(2π u2)`, with the sine branch cached and
//!   returned on the following call.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output step; also used to derive independent sub-seeds.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            cached_normal: None,
        }
    }

    /// Derive an independent generator for a numbered substream (per-sample
    /// seeds during generation, fixture construction, ...).
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut sm = seed;
        let base = splitmix64(&mut sm);
        Rng::new(base ^ stream.wrapping_mul(SPLITMIX_GAMMA))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by rejection-free modulo of the high bits.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below bound must be positive");
        // 128-bit multiply-shift keeps the distribution bias below 2^-64.
        let r = self.next_u64() as u128;
        ((r * bound as u128) >> 64) as usize
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller; values come out in fixed pair order.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0,1]: flip the open side so ln() never sees zero.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_normal();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(7);
        for _ in 0..10_000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(99);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = rng.next_normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn next_below_covers_range() {
        let mut rng = Rng::new(5);
        let mut seen = [false; 8];
        for _ in 0..1000 {
            seen[rng.next_below(8)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = Rng::derive(42, 0);
        let mut b = Rng::derive(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
