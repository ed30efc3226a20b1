//! Deterministic counter-based random number generator.
//!
//! Training trajectories must be reproducible bit-for-bit across runs,
//! platforms and language ports, so the generator is pinned here instead
//! of relying on a platform default. The algorithm is SplitMix64
//! (Steele, Lea & Flood 2014), fully specified by:
//!
//! ```text
//! state  <- state + 0x9E3779B97F4A7C15            (wrapping add)
//! z      <- state
//! z      <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9 (wrapping mul)
//! z      <- (z XOR (z >> 27)) * 0x94D049BB133111EB (wrapping mul)
//! output <- z XOR (z >> 31)
//! ```
//!
//! Derived conversions are likewise pinned:
//! - `next_f64` = `(output >> 11) * 2^-53`, uniform on `[0, 1)`;
//! - `normal` consumes exactly two raw outputs `a, b` and returns
//!   `sqrt(-2 ln u1) * cos(2 pi u2)` with `u1 = ((a >> 11) + 1) * 2^-53`
//!   (in `(0, 1]`, so the log is finite) and `u2 = (b >> 11) * 2^-53`;
//! - `derive(stream)` builds an independent child generator without
//!   advancing the parent: `child_state = mix(state XOR mix(stream +
//!   0x9E3779B97F4A7C15))` where `mix` is the finalizer above.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded deterministic generator. Single-owner: not shared between
/// threads; derive independent child streams instead.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two raw outputs.
    pub fn normal(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, bound)` via modulo reduction. The bias is
    /// below 2^-40 for the desk-scale bounds used here and the result is
    /// deterministic, which is what matters.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below: bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// Independent child stream keyed by `stream`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(stream.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
