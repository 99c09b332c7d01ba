use indexmap::IndexMap;
use rand::Rng;

use super::{NumericsError, Tensor};

/// One named weight array with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter size");
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    /// View as a 2-D tensor; rank-1 arrays become row vectors.
    pub fn as_tensor(&self) -> Tensor {
        let (r, c) = matrix_dims(&self.shape);
        Tensor::from_vec(r, c, self.value.clone())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

/// Ordered collection of named parameters. Iteration follows insertion
/// order, so flattening and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Re-inserting an existing name replaces it in place.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) {
        self.params.insert(name.into(), Parameter::new(shape, value));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        let size = shape.iter().product();
        self.insert(name, shape, vec![0.0; size]);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) {
        let size = shape.iter().product();
        self.insert(name, shape, vec![v; size]);
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) {
        let size = shape.iter().product();
        let value = (0..size).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, shape, value);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Parameter, NumericsError> {
        self.get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Parameter) {
        let (k, v) = self.params.get_index(i).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut Parameter) {
        let (k, v) = self.params.get_index_mut(i).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Writes `grads` into the gradient slots, replacing or adding to the
    /// current contents.
    pub fn store_grads(&mut self, grads: &Gradients, accumulate: bool) {
        if !accumulate {
            self.zero_grads();
        }
        for (i, g) in grads.iter() {
            let (_, p) = self.by_index_mut(i);
            for (slot, v) in p.grad.iter_mut().zip(g) {
                *slot += v;
            }
        }
    }

    /// Flat view of the scalar at a global coordinate: `(param index, offset)`.
    pub fn locate(&self, mut coord: usize) -> Option<(usize, usize)> {
        for (i, p) in self.params.values().enumerate() {
            if coord < p.value.len() {
                return Some((i, coord));
            }
            coord -= p.value.len();
        }
        None
    }

    /// Global L2 norm of the gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sparse per-parameter gradients produced by one backward pass, indexed
/// by parameter position in the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn add(&mut self, index: usize, g: &[f64]) {
        match &mut self.slots[index] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (i, g) in other.iter() {
            match &mut self.slots[i] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += scale * v;
                    }
                }
                slot @ None => *slot = Some(g.iter().map(|v| scale * v).collect()),
            }
        }
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.slots.get(index).and_then(|s| s.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (i, g)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
