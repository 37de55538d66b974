//! Named parameter storage and the per-pass binding of parameters to tape
//! variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// How the optimizer treats an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Network weight, decayed.
    Weight,
    /// Architecture or compression logits, never decayed.
    Arch,
    /// Not trained (running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Panics on a duplicate name: names are generated by the model builder.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.entries.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", e.name, e.value.shape(), value.shape())));
        }
        e.value = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    /// Element count over entries of `kind`.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Weight initializers drawing from an explicit stream.
pub struct Init<'r> {
    pub rng: &'r mut RngState,
}

impl Init<'_> {
    /// Glorot-normal `[fan_in, fan_out]` matrix.
    pub fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(&[fan_in, fan_out], std)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.normal() * std))
    }
}

/// One forward pass: a fresh tape plus the lazily created variables for
/// every parameter it touches.
pub struct Pass<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    track: bool,
    /// Batch statistics in BatchNorm (and running-stat updates).
    pub train: bool,
    /// `(mean id, var id, batch mean, batch var)` per BatchNorm call.
    pub bn_stats: Vec<(ParamId, ParamId, Vec<T>, Vec<T>)>,
}

impl<'s, T: Scalar> Pass<'s, T> {
    /// `track` makes trainable parameters tape leaves with gradients.
    pub fn new(store: &'s ParamStore<T>, track: bool, train: bool) -> Self {
        Self { tape: Tape::new(), store, vars: vec![None; store.len()], track, train, bn_stats: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let track = self.track && self.store.kind(id) != ParamKind::Buffer;
        let v = self.tape.leaf(self.store.get(id).clone(), track);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter reached by the last backward pass.
    pub fn grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = self.tape.grad((*v)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Folds recorded batch statistics into running estimates.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    stats: &[(ParamId, ParamId, Vec<T>, Vec<T>)],
    momentum: f64,
) {
    let m = T::lit(momentum);
    for (mid, vid, mean, var) in stats {
        for (r, &b) in store.get_mut(*mid).data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(*vid).data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}
