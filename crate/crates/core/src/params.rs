//! Named parameter storage and seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of one model, in declaration order.
///
/// Names are dotted paths (`enc.0.attn.w_q`) used for the per-block audit.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace every tensor, keeping names. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return shape_err(
                "ParamStore::load",
                format!("expected {} tensors, got {}", self.tensors.len(), tensors.len()),
            );
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return shape_err(
                    "ParamStore::load",
                    format!(
                        "{}: expected {:?}, got {:?}",
                        self.names[i],
                        old.shape(),
                        new.shape()
                    ),
                );
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Scalar counts grouped by the first `depth` components of each name,
    /// in first-appearance order.
    pub fn audit(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let block = name
                .split('.')
                .take(depth)
                .collect::<Vec<_>>()
                .join(".");
            match out.iter_mut().find(|(b, _)| *b == block) {
                Some((_, n)) => *n += t.len(),
                None => out.push((block, t.len())),
            }
        }
        out
    }
}

/// Seeded parameter factory: uniform Glorot matrices, zero biases, unit gains.
pub struct Initializer<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `rows × cols` matrix, U(−a, a) with a = sqrt(6 / (rows + cols)).
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-limit..limit)))
            .collect();
        let t = Tensor::new(&[rows, cols], data).expect("consistent shape");
        self.store.push(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.store.push(name, Tensor::zeros(&[len]))
    }

    pub fn ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.store.push(name, Tensor::full(&[len], T::one()))
    }
}
