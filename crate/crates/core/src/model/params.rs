use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TurboError};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters with their accumulated gradients. Insertion order is
/// stable and doubles as checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore<F = f32> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(F::c(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: vec![], values: vec![], grads: vec![], index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.grads[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Adds gradients collected from a finished [`Session`].
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<F>)>) {
        for (id, g) in grads {
            for (acc, v) in self.grads[id.0].data_mut().iter_mut().zip(g) {
                *acc = *acc + v;
            }
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| TurboError::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(TurboError::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// `(name, value, grad)` for every parameter, values mutable.
    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut()).zip(&self.grads).map(|((n, v), g)| (n, v, g))
    }
}

/// A graph plus lazily bound parameter leaves.
pub struct Session<'p, F: Real = f32> {
    pub g: Graph<F>,
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self { g: Graph::new(), params, bound: vec![None; params.len()], trainable: true }
    }

    /// Session whose parameters are bound as constants (no gradient tape work).
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self { trainable: false, ..Self::new(params) }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter that took part in the last backward pass.
    pub fn into_grads(self) -> Vec<(ParamId, Vec<F>)> {
        let g = self.g;
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| g.grad_data(v).map(|d| (ParamId(i), d.to_vec()))))
            .collect()
    }
}
