//! SplitMix64 generator.
//!
//! Every stochastic step in the crate (weight init, sampling verifiers,
//! synthetic instances) draws from this generator so that a seed pins the
//! whole run. The update is the standard one: the state advances by the
//! golden-ratio increment and the output is the finalizer
//! `z ^= z >> 30, * 0xBF58476D1CE4E5B9; z ^= z >> 27, * 0x94D049BB133111EB;
//! z ^= z >> 31`.

/// Deterministic 64-bit generator with 64 bits of state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive; modulo bias is
    /// irrelevant at the sizes used here (n far below 2^32).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_sequence_for_seed_zero() {
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220A8397B1DCDAF);
        assert_eq!(rng.next_u64(), 0x6E789E6AA1B965F4);
        assert_eq!(rng.next_u64(), 0x06C45D188009454F);
        assert_eq!(rng.next_u64(), 0xF88BB8A8724C81EC);
        assert_eq!(rng.next_u64(), 0x1B39896A51A8749B);
    }

    #[test]
    fn matches_reference_sequence_for_seed_42() {
        let mut rng = SplitMix64::new(42);
        assert_eq!(rng.next_u64(), 0xBDD732262FEB6E95);
        assert_eq!(rng.next_u64(), 0x28EFE333B266F103);
        assert_eq!(rng.next_u64(), 0x47526757130F9F52);
    }

    #[test]
    fn f64_conversion_uses_top_53_bits() {
        let mut rng = SplitMix64::new(7);
        assert_eq!(rng.next_f64(), 0.3898297483912715);
        assert_eq!(rng.next_f64(), 0.01678829452815611);
        assert_eq!(rng.next_f64(), 0.9007606806068834);
        assert_eq!(rng.next_f64(), 0.5829302930280781);
    }

    #[test]
    fn uniform_is_affine_in_next_f64() {
        let mut rng = SplitMix64::new(11);
        assert_eq!(rng.uniform(-0.05, 0.05), -0.018375560707909182);
        assert_eq!(rng.uniform(-0.05, 0.05), -0.02376348482262818);
    }

    #[test]
    fn f64_stays_in_unit_interval() {
        let mut rng = SplitMix64::new(0xDEADBEEF);
        for _ in 0..10_000 {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_covers_the_range() {
        let mut rng = SplitMix64::new(3);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
