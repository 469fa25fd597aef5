//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, channel, path, step)`. The seed and
//! channel form the ChaCha key, the path index selects the ChaCha stream and
//! the step index selects a fixed-width window of the keystream. A step
//! always consumes the same number of 32-bit words, so a path that is
//! advanced sequentially never has to seek and a single increment can still
//! be replayed in isolation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channels separate independent uses of one seed.
pub mod channel {
    pub const FORWARD: u64 = 0;
    pub const COUPLING_SECOND: u64 = 1;
    pub const HARVEST: u64 = 2;
    pub const POLICY: u64 = 3;
}

/// Per-path random stream.
#[derive(Clone, Debug)]
pub struct PathStream {
    rng: ChaCha8Rng,
    words_per_step: u64,
    step: u64,
    used_in_step: u64,
}

impl PathStream {
    /// `words_per_step` is the number of 32-bit words one step consumes.
    pub fn new(seed: u64, channel: u64, path: u64, words_per_step: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&channel.to_le_bytes());
        // fixed tag so the key never collapses to all zeros
        key[16..24].copy_from_slice(&0x6562_7364_652d_6c61u64.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(path);
        Self {
            rng,
            words_per_step: words_per_step.max(2),
            step: 0,
            used_in_step: 0,
        }
    }

    /// Positions the stream at the start of `step`.
    pub fn seek_step(&mut self, step: u64) {
        self.rng
            .set_word_pos(step as u128 * self.words_per_step as u128);
        self.step = step;
        self.used_in_step = 0;
    }

    /// Moves to the start of the next step. Skips any unused words so the
    /// stream position stays a pure function of the step index.
    pub fn next_step(&mut self) {
        let target = self.step + 1;
        if self.used_in_step != self.words_per_step {
            self.seek_step(target);
        } else {
            self.step = target;
            self.used_in_step = 0;
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn next_u64(&mut self) -> u64 {
        self.used_in_step += 2;
        debug_assert!(
            self.used_in_step <= self.words_per_step,
            "step window overflow"
        );
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Two independent standard normals (Box-Muller; fixed consumption).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Poisson variate by CDF inversion of a single uniform.
    pub fn poisson(&mut self, mean: f64) -> u32 {
        let u = self.uniform();
        poisson_inverse(mean, u)
    }
}

/// Inverse CDF of the Poisson law. One uniform per draw keeps the stream
/// width fixed and makes tilted intensities share common random numbers.
pub fn poisson_inverse(mean: f64, u: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut pmf = (-mean).exp();
    let mut cdf = pmf;
    while u > cdf {
        k += 1;
        pmf *= mean / k as f64;
        cdf += pmf;
        if pmf < 1e-300 && k as f64 > mean {
            break;
        }
    }
    k
}

/// Words consumed per step for `dim` Gaussian coordinates and `n_marks`
/// Poisson counters.
pub fn words_per_step(dim: usize, n_marks: usize) -> u64 {
    let pairs = dim.div_ceil(2) as u64;
    4 * pairs + 2 * n_marks as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_bit_exact() {
        let mut a = PathStream::new(7, 0, 3, words_per_step(2, 1));
        let mut seq = Vec::new();
        for _ in 0..5 {
            seq.push(a.normal_pair());
            seq.push((a.uniform(), 0.0));
            a.next_step();
        }
        let mut b = PathStream::new(7, 0, 3, words_per_step(2, 1));
        b.seek_step(3);
        assert_eq!(b.normal_pair(), seq[6]);
    }

    #[test]
    fn partial_consumption_does_not_shift_later_steps() {
        let mut a = PathStream::new(1, 0, 0, words_per_step(3, 0));
        a.uniform();
        a.next_step();
        let x = a.uniform();
        let mut b = PathStream::new(1, 0, 0, words_per_step(3, 0));
        b.seek_step(1);
        assert_eq!(x, b.uniform());
    }

    #[test]
    fn streams_differ_by_path_and_channel() {
        let mut a = PathStream::new(1, 0, 0, 4);
        let mut b = PathStream::new(1, 0, 1, 4);
        let mut c = PathStream::new(1, 1, 0, 4);
        let x = a.uniform();
        assert_ne!(x, b.uniform());
        assert_ne!(x, c.uniform());
    }

    #[test]
    fn poisson_inverse_matches_cdf() {
        assert_eq!(poisson_inverse(1.0, 0.3), 0); // e^-1 = 0.3679
        assert_eq!(poisson_inverse(1.0, 0.5), 1); // cdf(1) = 0.7358
        assert_eq!(poisson_inverse(1.0, 0.9), 2); // cdf(2) = 0.9197
        assert_eq!(poisson_inverse(0.0, 0.99), 0);
    }
}
