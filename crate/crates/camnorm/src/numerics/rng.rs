//! Deterministic counter-based random number generation.
//!
//! The generator is SplitMix64: the 64-bit state advances by a fixed odd
//! increment and every output is a bijective mix of the new state. Each
//! output is therefore a pure function of `(seed, call index)`, which gives
//! bit-identical sequences on every platform. The exact outputs are pinned
//! by golden-value tests below; changing the generator is a breaking change.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seeded stream of pseudo-random values.
///
/// Identical seed + identical call sequence yields an identical output
/// sequence. Child streams created with [`RngStream::derive`] do not advance
/// the parent, so derived streams are independent of processing order.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        // Multiply-shift; bias is ~n / 2^64, negligible for desk-scale n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw via Box-Muller. Consumes exactly two raw
    /// outputs per call, so interleaving with other draws stays predictable.
    pub fn next_gaussian(&mut self) -> f64 {
        let a = self.next_u64();
        let b = self.next_u64();
        // u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements drawn from `pool` (partial Fisher-Yates).
    /// Panics if `k > pool.len()`; callers check the precondition.
    pub fn sample_distinct<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        assert!(k <= pool.len());
        let mut scratch: Vec<T> = pool.to_vec();
        for i in 0..k {
            let j = i + self.index(scratch.len() - i);
            scratch.swap(i, j);
        }
        scratch.truncate(k);
        scratch
    }

    /// Child stream keyed by `tag`, independent of how far this stream has
    /// advanced at other tags. Deriving the same tag twice from the same
    /// stream state yields the same child.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream {
            state: mix(self.state ^ mix(tag.wrapping_add(GAMMA))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Golden values computed with an independent SplitMix64 implementation.
    #[test]
    fn golden_u64_sequences() {
        let mut r = RngStream::new(0);
        assert_eq!(r.next_u64(), 16294208416658607535);
        assert_eq!(r.next_u64(), 7960286522194355700);
        assert_eq!(r.next_u64(), 487617019471545679);
        assert_eq!(r.next_u64(), 17909611376780542444);

        let mut r = RngStream::new(7);
        assert_eq!(r.next_u64(), 7191089600892374487);
        assert_eq!(r.next_u64(), 309689372594955804);

        let mut r = RngStream::new(0xDEAD_BEEF);
        assert_eq!(r.next_u64(), 5395234354446855067);
        assert_eq!(r.next_u64(), 16021672434157553954);
    }

    #[test]
    fn golden_f64_sequence() {
        let mut r = RngStream::new(7);
        let expect = [
            0.3898297483912715,
            0.01678829452815611,
            0.9007606806068834,
            0.5829302930280781,
        ];
        for e in expect {
            assert_eq!(r.next_f64(), e);
        }
    }

    #[test]
    fn golden_gaussian_sequence() {
        let mut r = RngStream::new(7);
        let expect = [
            1.3649922974572282,
            -0.39652397525381783,
            0.004498526159832091,
            -0.580613055262029,
        ];
        for e in expect {
            // Trig/log may differ by an ulp across libm builds; pin loosely.
            assert!((r.next_gaussian() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_is_order_independent() {
        let r = RngStream::new(99);
        let mut c1 = r.derive(5);
        let mut c2 = r.derive(11);
        let mut c1_again = r.derive(5);
        assert_eq!(c1.next_u64(), c1_again.next_u64());
        assert_ne!(c1.next_u64(), c2.next_u64());
    }

    #[test]
    fn index_bounds_and_coverage() {
        let mut r = RngStream::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let i = r.index(7);
            assert!(i < 7);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sample_distinct_has_no_duplicates() {
        let pool: Vec<usize> = (0..20).collect();
        let mut r = RngStream::new(8);
        for _ in 0..200 {
            let mut got = r.sample_distinct(&pool, 6);
            got.sort_unstable();
            got.dedup();
            assert_eq!(got.len(), 6);
        }
    }
}
