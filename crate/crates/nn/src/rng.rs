//! Seeded, counter-based random streams.
//!
//! Everything random in the workspace (weight init, dropout masks, dataset
//! shuffles, synthetic signals) flows through [`SplitMix64`] so that runs
//! are reproducible bit-for-bit and independent sub-streams can be derived
//! from one root seed. The generator is the SplitMix64 finalizer over a
//! Weyl sequence (increment `0x9E3779B97F4A7C15`); sub-streams re-mix the
//! parent seed with a key list, so `derive(seed, &[a, b])` is a pure
//! function of `(seed, a, b)` and never depends on draw order elsewhere.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 mixing function (Steele, Lea & Flood's `mix64`).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Independent sub-stream: the seed re-mixed with each key in order.
    pub fn derive(seed: u64, keys: &[u64]) -> Self {
        let mut s = mix64(seed ^ GOLDEN_GAMMA);
        for &k in keys {
            s = mix64(s ^ mix64(k.wrapping_add(GOLDEN_GAMMA)));
        }
        SplitMix64::new(s)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by 128-bit multiply (no modulo bias worth
    /// caring about at these ranges; kept simple and portable).
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per pair and
    /// caches the second draw.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `[0, n)`, in draw order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }
}
