//! Deterministic, splittable random streams.
//!
//! A stream is addressed by `(seed, stream id)` and backed by ChaCha8, whose
//! output depends only on the key, the stream word and the block counter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// An independent child stream. Children of distinct `(stream id, key)` pairs
    /// never share a ChaCha stream word.
    pub fn derive(&self, key: u64) -> RngStream {
        let mixed = splitmix(self.stream ^ splitmix(key.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        RngStream::new(self.seed, mixed)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.uniform_range(lo, hi))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k.min(n));
        pool
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws `mu + sigma ⊙ eta` with `eta ~ N(0, 1)` from `stream`, recording `eta`
/// on the tape so gradients reach both `mu` and `sigma`.
pub fn gaussian(tape: &mut Tape, stream: &mut RngStream, mu: Var, sigma: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("gaussian: negative standard deviation"));
    }
    let eta = stream.normal_tensor(tape.shape(mu));
    tape.gaussian_reparam(mu, sigma, eta)
}

/// Tape-free variant of [`gaussian`].
pub fn gaussian_sample(stream: &mut RngStream, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape("gaussian", format!("{:?} vs {:?}", mu.shape(), sigma.shape())));
    }
    if sigma.data().iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("gaussian: negative standard deviation"));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| m + s * stream.normal())
        .collect();
    Ok(Tensor::from_raw(mu.shape().to_vec(), data))
}
