//! Named parameter storage and the forward-pass context that binds stored
//! tensors onto a fresh [`Tape`].

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable tensors plus non-learnable buffers (batch-norm running stats),
/// each keyed by a unique `/`-separated path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. A path may be owned only once.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("parameter", format!("`{name}` registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.buffers.contains_key(&name) {
            return Err(Error::invalid("buffer", format!("`{name}` registered twice")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Overwrites an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParameterStore::set", &[slot.shape(), value.shape()]));
        }
        *slot = value;
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.buffers.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParameterStore::set_buffer", &[slot.shape(), value.shape()]));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in updates {
            self.set_buffer(&name, t)?;
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar count restricted to paths starting with `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    /// FNV-1a over parameter names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (k, v) in &self.params {
            k.bytes().for_each(&mut eat);
            for x in v.data() {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape, the store it reads from, and the parameter
/// bindings made so far. Each parameter is bound at most once, so every
/// use of a path shares one tape node and one gradient.
pub struct Ctx<'p> {
    pub tape: Tape,
    store: &'p ParameterStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    buffer_updates: Vec<(String, Tensor)>,
}

impl<'p> Ctx<'p> {
    /// A differentiable pass.
    pub fn new(store: &'p ParameterStore, mode: Mode) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), mode, track_grads: true, buffer_updates: vec![] }
    }

    /// A pass whose parameters are bound as constants.
    pub fn no_grad(store: &'p ParameterStore, mode: Mode) -> Self {
        Self { track_grads: false, ..Self::new(store, mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.track_grads { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store.buffer(name)
    }

    /// Queues a buffer write to be applied after the pass.
    pub fn stage_buffer(&mut self, name: &str, value: Tensor) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradient of scalar `root` for every parameter in the store. Parameters
    /// the pass never touched get zeros.
    pub fn gradients(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut g = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, value) in self.store.params() {
            let grad = match self.bound.get(name) {
                Some(&v) => g.take(v).unwrap_or_else(|| Tensor::zeros(value.shape())),
                None => Tensor::zeros(value.shape()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}
