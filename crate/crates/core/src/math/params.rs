//! Named parameter storage shared by the encoder, recommender, and generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::tape::GradMap;

/// Model parameters keyed by name. Iteration order is the sorted name order,
/// which fixes the update order inside the optimizer and the layout of
/// checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter initialized uniformly in [-0.1, 0.1].
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-0.1..0.1));
        self.insert(name, m);
    }

    /// Insert a zero-initialized parameter (biases, gains start elsewhere).
    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    /// Insert a constant-filled parameter (layer-norm gains start at one).
    pub fn init_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Matrix::filled(rows, cols, v));
    }

    pub fn insert(&mut self, name: &str, m: Matrix) {
        self.params.insert(name.to_string(), m);
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|m| m.rows() * m.cols()).sum()
    }

    /// Sum of gradient contributions for parameters present in `grads`,
    /// treating missing entries as zero.
    pub fn grad_global_norm(&self, grads: &GradMap) -> f64 {
        let mut acc = 0.0;
        for g in grads.values() {
            acc += g.sq_sum();
        }
        acc.sqrt()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.params.values().all(|m| m.is_finite())
    }
}

/// Deterministic RNG for a named stream. Seeding by (seed, stream label)
/// keeps initialization independent of insertion order elsewhere.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
