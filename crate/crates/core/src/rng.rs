//! Counter-based random streams.
//!
//! A stream is nothing but `(seed, counter)`: the `i`-th draw is a pure
//! function of the seed and `i`, so a stream can be checkpointed as two
//! integers and child streams derived by label never depend on how many
//! values were drawn from the parent.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a seed and a text label, used to derive child seeds.
pub fn hash64(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then finalised together with the seed.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(mix64(seed ^ GOLDEN) ^ h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn split(&self, label: &str) -> RngStream {
        RngStream::new(hash64(self.seed, label))
    }

    /// The value at an absolute position, without touching the counter.
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal with standard deviation `std`, resampled until within `±2·std`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Index drawn proportionally to nonnegative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                return i;
            }
            target -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic() {
        let parent = RngStream::new(4096);
        assert_eq!(parent.split("data"), parent.split("data"));
    }

    #[test]
    fn split_is_label_sensitive() {
        let parent = RngStream::new(4096);
        assert_ne!(parent.split("data").seed, parent.split("init").seed);
    }

    #[test]
    fn split_ignores_parent_draws() {
        let mut parent = RngStream::new(7);
        let before = parent.split("x");
        parent.uniform();
        parent.uniform();
        assert_eq!(before, parent.split("x"));
    }

    #[test]
    fn same_state_same_value() {
        let a = RngStream { seed: 11, counter: 42 };
        let mut b = a;
        let mut c = a;
        assert_eq!(b.next_u64(), c.next_u64());
        assert_eq!(a.uniform_at(42), RngStream { seed: 11, counter: 42 }.uniform());
    }

    #[test]
    fn uniform_mean_smoke() {
        let mut s = RngStream::new(4096).split("data");
        let n = 100_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn truncated_normal_is_clipped() {
        let mut s = RngStream::new(1);
        for _ in 0..10_000 {
            assert!(s.truncated_normal(0.02).abs() <= 0.04);
        }
    }
}
