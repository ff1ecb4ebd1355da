//! Named trainable parameters and non-trainable buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor4>,
    grad: Option<Tensor4>,
    frozen: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn value(&self) -> &Tensor4 {
        &self.value
    }
    pub(crate) fn value_arc(&self) -> Arc<Tensor4> {
        Arc::clone(&self.value)
    }
    /// Copy-on-write access; cheap once no tape holds the value.
    pub fn value_mut(&mut self) -> &mut Tensor4 {
        Arc::make_mut(&mut self.value)
    }
    pub fn grad(&self) -> Option<&Tensor4> {
        self.grad.as_ref()
    }
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor4) -> Result<()> {
        match &mut self.grad {
            Some(existing) => existing.add_assign(g),
            None => {
                self.value.expect_same_dims("accumulate_grad", g)?;
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

/// Running statistics and other state saved with a model but never trained.
#[derive(Debug)]
pub struct Buffer {
    name: String,
    value: Mutex<Tensor4>,
}

impl Buffer {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn get(&self) -> Tensor4 {
        self.value.lock().expect("buffer lock poisoned").clone()
    }
    pub fn set(&self, value: Tensor4) -> Result<()> {
        let mut guard = self.value.lock().expect("buffer lock poisoned");
        guard.expect_same_dims("Buffer::set", &value)?;
        *guard = value;
        Ok(())
    }
    pub(crate) fn with<R>(&self, f: impl FnOnce(&mut Tensor4) -> R) -> R {
        let mut guard = self.value.lock().expect("buffer lock poisoned");
        f(&mut guard)
    }
}

/// Owns every parameter and buffer of one network system.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    index: HashMap<String, ParamId>,
    buffer_index: HashMap<String, BufferId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = ParamId {
            store: self.id,
            index: self.params.len(),
        };
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad: None,
            frozen: false,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor4) -> Result<BufferId> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = BufferId(self.buffers.len());
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer {
            name,
            value: Mutex::new(value),
        });
        Ok(id)
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        assert_eq!(id.store, self.id, "parameter id from a different store");
        &self.params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        assert_eq!(id.store, self.id, "parameter id from a different store");
        &mut self.params[id.index]
    }

    pub(crate) fn by_index_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&id| self.get(id))
    }

    pub fn find_buffer(&self, name: &str) -> Option<&Buffer> {
        self.buffer_index.get(name).map(|&id| self.buffer(id))
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`;
    /// returns how many were touched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut count = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            count += 1;
        }
        count
    }

    /// SHA-256 over names, values and buffers under `prefix`, in insertion order.
    pub fn digest(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        for b in self.buffers.iter().filter(|b| b.name.starts_with(prefix)) {
            hasher.update(b.name.as_bytes());
            b.with(|t| {
                for v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            });
        }
        hasher.finalize().into()
    }

    /// Overwrites a parameter or buffer by name. Shapes must match.
    pub fn load_named(&mut self, name: &str, value: Tensor4) -> Result<()> {
        if let Some(&id) = self.index.get(name) {
            let p = &mut self.params[id.index];
            p.value.expect_same_dims("load_named", &value)?;
            p.value = Arc::new(value);
            Ok(())
        } else if let Some(&id) = self.buffer_index.get(name) {
            self.buffers[id.0].set(value)
        } else {
            Err(Error::Format(format!("no parameter or buffer named `{name}`")))
        }
    }
}
