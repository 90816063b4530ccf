//! Deterministic random number generation.
//!
//! Every stochastic step in the pipeline (corpus generation, parameter init,
//! batch sampling) draws from this generator so that artifacts are
//! byte-identical given the same seed, on any platform. The state is four
//! words and can be snapshotted into checkpoints as provenance.

/// xoshiro256++ with splitmix64 seeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetRng {
    s: [u64; 4],
}

/// splitmix64 finalizer; also used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl DetRng {
    pub fn from_seed(seed: u64) -> Self {
        let mut z = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            z = z.wrapping_add(0x9E3779B97F4A7C15);
            *slot = mix64(z);
        }
        // xoshiro must not start at the all-zero state
        if s == [0, 0, 0, 0] {
            s[0] = 0x9E3779B97F4A7C15;
        }
        DetRng { s }
    }

    /// Independent stream for item `index` under a corpus-level seed.
    pub fn for_stream(seed: u64, index: u64) -> Self {
        DetRng::from_seed(mix64(seed) ^ mix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        DetRng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = n.wrapping_mul(u64::MAX / n);
        loop {
            let x = self.next_u64();
            if x < zone || zone == 0 {
                return x % n;
            }
        }
    }

    /// Gaussian via Box-Muller, one variate per call (no cached spare, so the
    /// full generator state is always `self.s`).
    pub fn gauss(&mut self, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Geometric count in {1, 2, ...} with success probability `p`, capped.
    /// Inverse transform: exactly one uniform is consumed per draw.
    pub fn geometric(&mut self, p: f64, cap: usize) -> usize {
        debug_assert!(p > 0.0 && p < 1.0);
        let u = self.next_f64();
        let k = 1.0 + ((1.0 - u).ln() / (1.0 - p).ln()).floor();
        (k as usize).clamp(1, cap)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Seeded permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
