//! Named parameter storage and gradient accumulation.

use std::collections::HashMap;

use super::rng::uniform;
use super::{Real, Tensor};

/// Stable handle into a [`ParamStore`]; indices follow insertion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(Real),
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    /// Fans are taken from the shape: matrices use both extents, convolution
    /// kernels use `cin·kh·kw` / `cout·kh·kw`, vectors fall back to extent.
    Xavier,
    /// Uniform in `[-a, a]` with explicit half-width.
    Uniform(Real),
}

struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Insertion-ordered collection of named parameters.
///
/// Names are path-like (`fusion.layer0.cfa_x.mha.wq`) and unique; serialization
/// and optimizer traversal both follow insertion order, which keeps training
/// byte-deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl rand::Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Xavier => {
                let (fan_in, fan_out) = fans(shape);
                let a = (6.0 / (fan_in + fan_out) as Real).sqrt();
                (0..numel).map(|_| uniform(rng, -a, a)).collect()
            }
            Init::Uniform(a) => (0..numel).map(|_| uniform(rng, -a, a)).collect(),
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            value: Tensor::new(shape, data),
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix` (un)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = flag;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count, trainable parameters only.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Total scalar count restricted to a name prefix, trainable only.
    pub fn count_trainable_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Per-parameter gradient buffers, accumulated across backward passes until
/// reset. Accumulation order is the caller's call order, which the training
/// loop keeps fixed for determinism.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        GradStore {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Adds `scale`-weighted gradient into the buffer for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor, scale: Real) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (o, &v) in g.data_mut().iter_mut().zip(grad.data()) {
                    *o += scale * v;
                }
            }
            slot @ None => {
                let mut g = grad.clone();
                if scale != 1.0 {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
                *slot = Some(g);
            }
        }
    }
}
