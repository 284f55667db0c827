//! Seeded random streams. Every stochastic operation takes its stream
//! explicitly so runs replay bit-for-bit from a seed.

use std::collections::VecDeque;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counter-based ChaCha8 generator.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Serializable position of a [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Source of the standard-normal and uniform draws used by sampling code.
pub trait NoiseSource {
    fn normal(&mut self, rows: usize, cols: usize) -> Result<Tensor>;
    fn uniform(&mut self, rows: usize, cols: usize) -> Result<Tensor>;
}

impl NoiseSource for Rng {
    fn normal(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let data = (0..rows * cols).map(|_| self.sample::<f64, _>(StandardNormal)).collect();
        Tensor::matrix(rows, cols, data)
    }

    fn uniform(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let data = (0..rows * cols).map(|_| self.random::<f64>()).collect();
        Tensor::matrix(rows, cols, data)
    }
}

/// Replays a fixed sequence of draws; used to freeze noise across calls.
#[derive(Clone, Debug, Default)]
pub struct FixedNoise {
    queue: VecDeque<Tensor>,
}

impl FixedNoise {
    pub fn new(draws: impl IntoIterator<Item = Tensor>) -> Self {
        Self { queue: draws.into_iter().collect() }
    }

    fn next(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.queue.pop_front().ok_or_else(|| Error::invalid("noise", "fixed noise exhausted"))?;
        if t.dims2() != (rows, cols) {
            return Err(Error::shape("fixed_noise", &[t.shape(), &[rows, cols]]));
        }
        Ok(t)
    }
}

impl NoiseSource for FixedNoise {
    fn normal(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        self.next(rows, cols)
    }

    fn uniform(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        self.next(rows, cols)
    }
}

/// Wraps a source and keeps a copy of every draw, so the same draws can be
/// replayed later through [`FixedNoise`].
pub struct Recording<'a, N: NoiseSource + ?Sized> {
    inner: &'a mut N,
    pub draws: Vec<Tensor>,
}

impl<'a, N: NoiseSource + ?Sized> Recording<'a, N> {
    pub fn new(inner: &'a mut N) -> Self {
        Self { inner, draws: vec![] }
    }

    pub fn replay(&self) -> FixedNoise {
        FixedNoise::new(self.draws.clone())
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for Recording<'_, N> {
    fn normal(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.inner.normal(rows, cols)?;
        self.draws.push(t.clone());
        Ok(t)
    }

    fn uniform(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let t = self.inner.uniform(rows, cols)?;
        self.draws.push(t.clone());
        Ok(t)
    }
}
