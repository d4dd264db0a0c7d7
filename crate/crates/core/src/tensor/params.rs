use std::ops::Index;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; drives L2 regularisation and embedding handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    CnnFilter,
    Weight,
    Bias,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: ParamKind,
    trainable: bool,
}

/// Flat list of named parameter tensors owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            trainable: true,
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_values(tape, &self.values)
            .expect("store values always match their own layout")
    }

    /// Like [`bind`](Self::bind) but with substitute values of identical shapes.
    pub fn bind_values(&self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Result<Bound> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} substitute tensors for {} parameters",
                values.len(),
                self.values.len()
            )));
        }
        let mut vars = Vec::with_capacity(values.len());
        for ((entry, own), v) in self.entries.iter().zip(&self.values).zip(values) {
            own.expect_same_shape(v)?;
            vars.push(tape.leaf(v.clone(), entry.trainable));
        }
        Ok(Bound(vars))
    }

    /// Gradients gathered from `tape`, zero-filled for parameters backward never reached.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(v, var)| tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
