//! Deterministic sampling layer.
//!
//! All randomness in the crate flows through [`StreamRng`], a ChaCha8
//! generator addressed by `(seed, stream)`. ChaCha8 is counter-based and
//! exposes 2^64 independent streams per seed, so subsystems (data synthesis,
//! model init, batch shuffling, noise, subset selection, ...) each get their
//! own stream and never have to coordinate draw counts. The variate
//! algorithms are fixed here rather than delegated: uniforms take the top 53
//! bits of a word, bounded integers use Lemire rejection, Gaussians use
//! Box-Muller, and Gamma uses Marsaglia-Tsang. Identical seeds therefore
//! reproduce identical draws on any platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per subsystem. Client-local streams additionally derive
/// their seed (see [`client_seed`]), so a stream id never has to encode the
/// client.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const EVAL_SPLIT: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const TRAIN_SHUFFLE: u64 = 6;
    pub const DP_NOISE: u64 = 7;
    pub const ROUND_SELECT: u64 = 8;
    pub const REFERENCE_SUBSET: u64 = 9;
    pub const NEIGHBOR_NOISE: u64 = 10;
    pub const BASELINE: u64 = 11;
}

/// Per-client seeds are the master seed XOR the client id. Documented so
/// traces can be replayed per client without rebuilding the whole run.
pub fn client_seed(master: u64, client: usize) -> u64 {
    master ^ client as u64
}

/// Derives an unrelated child seed from `(seed, tag)` via the SplitMix64
/// finalizer. Used where a family of seeds is needed (reference models,
/// sweep points) and plain XOR would correlate neighbours.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Lemire's widening-multiply method with
    /// rejection, so the result is exactly uniform.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if m as u64 >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// A uniform k-subset of 0..n, returned sorted. Partial Fisher-Yates.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }

    /// Standard normal via Box-Muller. The sine counterpart is discarded so
    /// the generator stays stateless between calls.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps the log finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 uses the boost
    /// Gamma(alpha) = Gamma(alpha + 1) * U^(1/alpha).
    pub fn gamma(&mut self, alpha: f64) -> f64 {
        assert!(alpha > 0.0 && alpha.is_finite(), "gamma needs alpha > 0");
        if alpha < 1.0 {
            let boost = (1.0 - self.uniform()).powf(1.0 / alpha);
            return self.gamma(alpha + 1.0) * boost;
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Symmetric Dirichlet(alpha) over k categories: normalized Gamma draws.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        assert!(k > 0, "dirichlet needs at least one category");
        loop {
            let draws: Vec<f64> = (0..k).map(|_| self.gamma(alpha)).collect();
            let sum: f64 = draws.iter().sum();
            // All-underflow is possible for tiny alpha; redraw rather than
            // return NaN.
            if sum > 0.0 && sum.is_finite() {
                return draws.into_iter().map(|g| g / sum).collect();
            }
        }
    }
}
