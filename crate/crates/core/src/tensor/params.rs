use std::collections::HashMap;

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

/// Named, shape-fixed model weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable view of the entries; the shape itself cannot change.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<usize> {
        if self.index.contains_key(param.name()) {
            return Err(TensorError::DuplicateParameter(param.name().to_string()));
        }
        let idx = self.params.len();
        self.index.insert(param.name().to_string(), idx);
        self.params.push(param);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] whose parameters are live leaves on a tape.
pub struct Bound<'t, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient per parameter in store order; zeros where the parameter
    /// did not influence the root.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.iter())
            .map(|(v, p)| {
                grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}
