use super::{Float, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Named parameters in insertion order, with optional gradients.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter. `decay` marks it for weight decay.
    ///
    /// Panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        self.grads.push(None);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn decays(&self, id: usize) -> bool {
        self.decay[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn grad(&self, id: usize) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    pub fn set_grad(&mut self, id: usize, g: Vec<T>) {
        assert_eq!(g.len(), self.tensors[id].len(), "gradient size for {}", self.names[id]);
        self.grads[id] = Some(g);
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Concatenate every parameter in order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for i in 0..self.len() {
            out.insert(self.names[i].clone(), self.tensors[i].cast(), self.decay[i]);
        }
        out
    }
}

pub fn normal<T: Float, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}
