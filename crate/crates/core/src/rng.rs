//! Counter-based random streams.
//!
//! Every stream is identified by a `(seed, stream)` pair of 64-bit integers.
//! Draw number `i` (starting at 0) of a stream is
//!
//! ```text
//! key    = mix64(seed ^ mix64(stream + 0x632BE59BD9B4E019))
//! out(i) = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)      (wrapping u64 arithmetic)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z ^ (z >> 31)
//! ```
//!
//! Derived variates:
//! - `uniform()`: `(out >> 11) * 2^-53`, in `[0, 1)`.
//! - `open_uniform()`: `((out >> 11) + 0.5) * 2^-53`, in `(0, 1)`.
//! - `below(n)`: `(out as u128 * n as u128) >> 64`.
//! - `normal()`: Box-Muller cosine branch, `sqrt(-2 ln u1) * cos(2 pi u2)` with
//!   `u1, u2` two consecutive `open_uniform()` draws.
//! - `gamma(a)`: Marsaglia-Tsang squeeze for `a >= 1` (one `normal()` then one
//!   `open_uniform()` per trial); for `a < 1`, `gamma(a + 1) * open_uniform()^(1/a)`.
//! - `beta(a, b)`: `x / (x + y)` with `x = gamma(a)` drawn before `y = gamma(b)`.
//! - `dirichlet(alpha, k)`: `k` sequential `gamma(alpha)` draws, normalized.
//!
//! Any implementation following these formulas reproduces the same streams.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0x632B_E59B_D9B4_E019;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains. Combined with an index via [`stream_id`].
pub mod domain {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const ROLES: u64 = 5;
    pub const CLIENT_BATCH: u64 = 6;
    pub const BANDIT: u64 = 7;
    pub const GAUSSIAN: u64 = 8;
}

/// Packs a domain and an index into one stream identifier.
pub fn stream_id(domain: u64, index: u64) -> u64 {
    (domain << 40) ^ index
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream.wrapping_add(STREAM_SALT))),
            counter: 0,
        }
    }

    pub fn for_domain(seed: u64, domain: u64, index: u64) -> Self {
        Self::new(seed, stream_id(domain, index))
    }

    /// Number of raw draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_uniform();
        let u2 = self.open_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            return g * self.open_uniform().powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.open_uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a);
        let y = self.gamma(b);
        if x + y == 0.0 {
            // both underflowed; only reachable for tiny shapes
            return a / (a + b);
        }
        x / (x + y)
    }

    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        let mut draws: Vec<f64> = (0..k).map(|_| self.gamma(alpha)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            draws.iter_mut().for_each(|p| *p /= total);
        } else {
            draws.iter_mut().for_each(|p| *p = 1.0 / k as f64);
        }
        draws
    }

    /// Fisher-Yates shuffle from the back, `j = below(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct elements of `items`, order given by a partial shuffle.
    pub fn sample_without_replacement(&mut self, items: &[usize], count: usize) -> Vec<usize> {
        let mut pool = items.to_vec();
        let count = count.min(pool.len());
        for i in 0..count {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_value() {
        // SplitMix64 seeded with 0: first output 0xE220A8397B1DCDAF.
        assert_eq!(mix64(GOLDEN), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = CounterRng::new(7, 3);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = CounterRng::new(7, 3);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = CounterRng::new(7, 4);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_ranges() {
        let mut r = CounterRng::new(1, 1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let o = r.open_uniform();
            assert!(o > 0.0 && o < 1.0);
            assert!(r.below(5) < 5);
        }
    }

    #[test]
    fn gamma_moments() {
        for &shape in &[0.1, 0.5, 1.0, 3.0, 100.0] {
            let mut r = CounterRng::new(11, 2);
            let n = 40_000;
            let xs: Vec<f64> = (0..n).map(|_| r.gamma(shape)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            // var = shape, standard error of the mean = sqrt(shape / n)
            let se = (shape / n as f64).sqrt();
            assert!((mean - shape).abs() < 5.0 * se, "shape {shape}: mean {mean}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = CounterRng::new(5, 5);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut r = CounterRng::new(3, 9);
        for &alpha in &[0.05, 1.0, 100.0] {
            let p = r.dirichlet(alpha, 12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn sampling_without_replacement_is_distinct() {
        let mut r = CounterRng::new(2, 2);
        let items: Vec<usize> = (0..50).collect();
        let mut s = r.sample_without_replacement(&items, 20);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
        assert_eq!(r.sample_without_replacement(&items[..3], 10).len(), 3);
    }
}
