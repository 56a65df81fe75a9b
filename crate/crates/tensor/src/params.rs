use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the zero-mean normal used for weight init.
pub const INIT_STD: f64 = 0.02;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Trainable,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters and buffers of one model, in insertion order.
///
/// Every store carries a process-unique id so that gradients recorded in a
/// [`Graph`] are only ever pulled back into the store they came from.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: fresh_uid(),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: fresh_uid(),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Copy that keeps this store's uid, so graph bindings made against the
    /// copy are absorbed by the original.
    pub fn bound_copy(&self) -> Self {
        ParamStore {
            uid: self.uid,
            entries: self.entries.clone(),
        }
    }

    fn insert(&mut self, name: String, kind: EntryKind, value: Tensor<T>) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_trainable(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Trainable, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), EntryKind::Buffer, value)
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::Contract(format!(
                "parameter `{}` has shape {:?}, refusing {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad = None);
    }

    /// Adds the gradients that `graph` holds for parameters of this store.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for binding in graph.bindings.iter().filter(|b| b.store_uid == self.uid) {
            let Some(g) = graph.grad(binding.var) else {
                continue;
            };
            let entry = &mut self.entries[binding.param.0];
            match &mut entry.grad {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b),
                None => {
                    entry.grad = Some(
                        Tensor::new(entry.value.shape().to_vec(), g.to_vec())
                            .expect("gradient shape mirrors its parameter"),
                    )
                }
            }
        }
    }

    /// Folds batch statistics recorded by training-mode batch norms into the
    /// running-statistic buffers: `running = m·running + (1 − m)·batch`.
    pub fn apply_stat_updates(&mut self, graph: &Graph<T>) {
        for u in graph.stat_updates.iter().filter(|u| u.store_uid == self.uid) {
            let m = T::from_f64(u.momentum);
            let keep = T::one() - m;
            for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                let run = self.entries[id.0].value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = m * *r + keep * b;
                }
            }
        }
    }

    /// [`accumulate_grads`](Self::accumulate_grads) followed by
    /// [`apply_stat_updates`](Self::apply_stat_updates).
    pub fn absorb(&mut self, graph: &Graph<T>) {
        self.accumulate_grads(graph);
        self.apply_stat_updates(graph);
    }

    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Same entries converted to another precision, under a new uid.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: fresh_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                    grad: e.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    /// Bitwise equality of names, kinds and values (gradients ignored).
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Samples a tensor with i.i.d. `Normal(0, std)` entries. Values are drawn in
/// `f64`, so one seed yields the same parameters at either precision.
pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
