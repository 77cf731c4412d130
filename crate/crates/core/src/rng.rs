//! Deterministic random number generation for data sampling and init.
//!
//! Streams are keyed by a `(seed, label)` pair so every consumer of
//! randomness (weight init, training batches, evaluation banks) owns an
//! independent, reproducible sequence. The generator is splitmix64; normal
//! deviates come from the Box-Muller transform (cosine branch only, two raw
//! draws per deviate, no caching), so a stream's output is a pure function
//! of its key and draw count.
//!
//! ```
//! use iclbench::RngStream;
//!
//! let mut a = RngStream::new(42, "train");
//! let mut b = RngStream::new(42, "train");
//! assert_eq!(a.next_u64(), b.next_u64());
//!
//! let mut c = RngStream::new(42, "eval");
//! assert_ne!(a.next_u64(), c.next_u64());
//! ```

use crate::float::Float;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;
const GOLDEN: u64 = 0x9e3779b97f4a7c15;
const FORK_TAG: u64 = 0x5851f42d4c957f2d;

/// FNV-1a hash of a byte string, used to turn labels into stream keys.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer: a bijective 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A deterministic random stream keyed by `(seed, label)`.
///
/// Forks derive from the stream's key, not its current draw position, so
/// `fork("x")` yields the same child stream no matter how many values were
/// drawn from the parent first.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    state: u64,
}

impl RngStream {
    /// Creates the stream identified by `(seed, label)`.
    pub fn new(seed: u64, label: &str) -> Self {
        let key = mix(mix(seed.wrapping_add(GOLDEN)) ^ fnv1a(label.as_bytes()));
        RngStream { key, state: key }
    }

    /// Derives an independent child stream from this stream's key.
    pub fn fork(&self, label: &str) -> Self {
        let key = mix(self.key ^ FORK_TAG ^ fnv1a(label.as_bytes()));
        RngStream { key, state: key }
    }

    /// Derives an independent child stream indexed by an integer, e.g. one
    /// stream per training step.
    pub fn fork_index(&self, index: u64) -> Self {
        let key = mix(self.key ^ FORK_TAG ^ fnv1a(&index.to_le_bytes()));
        RngStream { key, state: key }
    }

    /// Next raw 64-bit value (splitmix64).
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform `f64` in `[0, 1)` with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal `f64` via Box-Muller, cosine branch.
    pub fn normal_f64(&mut self) -> f64 {
        // u1 lies in (0, 1] so the log is finite; u2 lies in [0, 1).
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard normal deviate cast to the working scalar type.
    ///
    /// The deviate is always drawn in `f64` and then narrowed, so f32 and
    /// f64 runs with the same key see the same underlying sequence.
    pub fn normal<T: Float>(&mut self) -> T {
        T::cast(self.normal_f64())
    }

    /// Fills a slice with independent standard normal deviates.
    pub fn fill_normal<T: Float>(&mut self, out: &mut [T]) {
        for slot in out.iter_mut() {
            *slot = self.normal();
        }
    }

    /// Collects `n` independent standard normal deviates.
    pub fn normal_vec<T: Float>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| self.normal()).collect()
    }
}
