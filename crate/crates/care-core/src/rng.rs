//! Deterministic seeded PRNG: splitmix64 state advance, uniforms from the
//! top 53 bits, standard normals via Box-Muller on two successive draws.
//!
//! The whole stack draws randomness through this type so that runs are
//! reproducible bit-for-bit from a single seed. State is one `u64`, which
//! keeps checkpointing trivial (stored as a decimal integer).

use std::f64::consts::PI;

/// One splitmix64 output step applied to `x` without advancing any stream.
/// Used to derive independent stream seeds from (seed, label) pairs.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash. Used for token hashing and for deriving per-component
/// seed labels that are stable across variants and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededPrng {
    state: u64,
}

impl SeededPrng {
    pub fn new(seed: u64) -> Self {
        SeededPrng { state: seed }
    }

    /// Derive a child stream from this seed and a label, without advancing.
    pub fn derive(seed: u64, label: &str) -> Self {
        SeededPrng::new(mix64(seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn set_state(&mut self, state: u64) {
        self.state = state;
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller on two successive uniform draws.
    /// Always consumes exactly two draws and returns the cosine branch, so
    /// the stream state stays a single u64 (no cached spare).
    pub fn normal(&mut self) -> f64 {
        // Shift u1 into (0, 1] so the log is always defined.
        const DEN: f64 = (1u64 << 53) as f64;
        let u1 = (((self.next_u64() >> 11) + 1) as f64) / DEN;
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededPrng::new(7);
        let mut b = SeededPrng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SeededPrng::new(3);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_consumes_two_draws() {
        let mut a = SeededPrng::new(11);
        let mut b = SeededPrng::new(11);
        let _ = a.normal();
        b.next_u64();
        b.next_u64();
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn derive_differs_by_label() {
        let a = SeededPrng::derive(42, "policy");
        let b = SeededPrng::derive(42, "buffer");
        assert_ne!(a.state(), b.state());
    }

    // Golden sequence for seed 42, frozen at first implementation. Any change
    // to the generator breaks every recorded run, so this must never drift.
    #[test]
    fn golden_normal_sequence_seed_42() {
        let mut r = SeededPrng::new(42);
        let got: Vec<f64> = (0..10).map(|_| r.normal()).collect();
        let want = [
            0.4147197504315305,
            -0.8918862136277562,
            1.7295930879374015,
            0.5456204361828646,
            -1.080412954982541,
            -1.7788480910585858,
            -1.1456184297395176,
            0.26045053911027205,
            -2.1286866250695065,
            -0.8149447625920674,
        ];
        for (g, w) in got.iter().zip(want.iter()) {
            assert_eq!(g, w, "golden normal sequence drifted: {got:?}");
        }
    }
}
