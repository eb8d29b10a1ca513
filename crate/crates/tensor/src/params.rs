//! Named parameter storage and the per-forward binding of parameters onto a tape.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers (running statistics,
/// power-iteration vectors), both addressed by dotted names.
#[derive(Clone, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.params.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| TensorError::MissingBuffer(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(TensorError::MissingBuffer(name.to_string())),
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            self.set_buffer(&name, value)?;
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn contains_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Hash of all parameter names and bit patterns; equal stores hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.params {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Whether a forward pass updates running statistics and uses batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] onto a tape for one forward pass.
///
/// Each parameter becomes a single leaf no matter how often it is used.
/// Buffer writes are collected and applied to the store afterwards.
pub struct Binder<'t, 's, T: Real> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    updates: RefCell<BTreeMap<String, Tensor<T>>>,
}

impl<'t, 's, T: Real> Binder<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_trainable(tape, store, mode, true)
    }

    /// `trainable = false` binds every parameter as a constant.
    pub fn with_trainable(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        Self { tape, store, mode, trainable, bound: RefCell::new(BTreeMap::new()), updates: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = Arc::clone(self.store.param(name)?);
        let var = self.tape.leaf(value, self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    /// Use `var` for parameter `name` in this pass instead of the stored value.
    pub fn bind(&self, name: &str, var: Var<'t, T>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
    }

    /// Current buffer value, including writes made earlier in this pass.
    pub fn buffer(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.updates.borrow().get(name) {
            return Ok(t.clone());
        }
        self.store.buffer(name).cloned()
    }

    pub fn set_buffer(&self, name: &str, value: Tensor<T>) -> Result<()> {
        self.store.buffer(name)?;
        self.updates.borrow_mut().insert(name.to_string(), value);
        Ok(())
    }

    /// Parameters touched so far, in name order.
    pub fn bound_params(&self) -> Vec<(String, Var<'t, T>)> {
        self.bound.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn into_updates(self) -> Vec<(String, Tensor<T>)> {
        self.updates.into_inner().into_iter().collect()
    }

    /// Gradients of `loss` for every bound parameter, by name.
    pub fn gradients(&self, loss: Var<'t, T>) -> Result<Vec<(String, Tensor<T>)>> {
        let bound = self.bound_params();
        let vars: Vec<Var<'t, T>> = bound.iter().map(|(_, v)| *v).collect();
        let grads = self.tape.backward(loss, &vars)?;
        Ok(bound.into_iter().map(|(k, _)| k).zip(grads).collect())
    }
}
