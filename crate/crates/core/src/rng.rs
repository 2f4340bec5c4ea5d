//! Counter-based 64-bit random number generator.
//!
//! Every random decision in the crate flows through this generator so that
//! experiments are reproducible bit-for-bit across platforms and across
//! reimplementations in other languages. The construction is the splitmix64
//! counter generator: the state advances by a fixed odd constant and the
//! output is a strong 64-bit mix of the counter.
//!
//! Constants (hex):
//!   increment  0x9E3779B97F4A7C15
//!   mix mul 1  0xBF58476D1CE4E5B9
//!   mix mul 2  0x94D049BB133111EB
//!
//! Uniform doubles are taken from the top 53 bits: `(x >> 11) * 2^-53`,
//! giving values in `[0, 1)`.

const INCREMENT: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

/// Finalizing mix of splitmix64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    /// Generator seeded directly with `seed`.
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream from a root seed and a path of ids.
    ///
    /// The derivation folds each path element into the seed through the
    /// mix function, salting by position so that `[a, b]` and `[b, a]`
    /// give unrelated streams.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut s = mix64(seed);
        for (i, &id) in path.iter().enumerate() {
            let salt = (i as u64 + 1).wrapping_mul(INCREMENT);
            s = mix64(s ^ mix64(id.wrapping_add(salt)));
        }
        Rng { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(INCREMENT);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased via rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Seed of the stream `Rng::derive(seed, path)` would produce; used to hand
/// a derived stream to a component that takes a plain seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    Rng::derive(seed, path).state
}

/// Stream-id tags used when deriving per-purpose substreams.
///
/// Keeping them in one place guarantees the streams of different
/// subsystems never collide.
pub mod streams {
    pub const DATA_TEXTURE: u64 = 0x01;
    pub const ATTACK: u64 = 0x02;
    pub const TRAIN_SHUFFLE: u64 = 0x03;
    pub const TRAIN_INNER_ATTACK: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const TRIM_DENOISE: u64 = 0x06;
    pub const ORACLE_JOINT: u64 = 0x07;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_instances() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derive_order_matters() {
        let mut a = Rng::derive(7, &[1, 2]);
        let mut b = Rng::derive(7, &[2, 1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn unit_interval() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn next_below_bounds_and_coverage() {
        let mut r = Rng::new(11);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.next_below(7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn known_first_output() {
        // Reference value of splitmix64 for seed 0, fixed forever by the
        // documented constants.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
    }
}
