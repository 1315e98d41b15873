//! Named parameter storage shared between tapes.

use std::sync::Arc;

use crate::{Grads, Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered collection of model parameters.
///
/// Values are reference counted so binding them to a tape is free; updates
/// copy-on-write only while a tape still holds a reference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value: Arc::new(value), trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "set() shape mismatch for {}", self.entries[id.0].name);
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|e| e.trainable = trainable);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every parameter on `graph`; trainable ones as gradient leaves.
    pub fn bind(&self, graph: &Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    if e.trainable {
                        graph.param(Arc::clone(&e.value))
                    } else {
                        graph.constant_shared(Arc::clone(&e.value))
                    }
                })
                .collect(),
        }
    }

    /// Binds every parameter as a constant, regardless of trainability.
    pub fn bind_frozen(&self, graph: &Graph<T>) -> Bound {
        Bound { vars: self.entries.iter().map(|e| graph.constant_shared(Arc::clone(&e.value))).collect() }
    }

    /// Converts element type, e.g. to run a model in double precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: Arc::new(e.value.cast()), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Parameters registered on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of trainable parameters, in store order (`None` for frozen ones).
    pub fn collect_grads<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .zip(store.entries())
            .map(|(&v, e)| {
                if e.trainable {
                    Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(e.value.shape())))
                } else {
                    None
                }
            })
            .collect()
    }
}
