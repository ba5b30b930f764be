use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Handle to one parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u32,
    index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Named trainable tensors of one optimization group, with gradient
/// accumulators and Adam moments.
#[derive(Debug)]
pub struct ParamStore {
    id: u32,
    names: Vec<String>,
    lookup: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first_moments: Vec<Tensor>,
    second_moments: Vec<Tensor>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones get a fresh store identity so gradients recorded against the
    /// original never leak into the copy.
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            lookup: self.lookup.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            first_moments: self.first_moments.clone(),
            second_moments: self.second_moments.clone(),
            step: self.step,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            lookup: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            first_moments: Vec::new(),
            second_moments: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let index = self.values.len();
        let zeros = Tensor::zeros(value.shape());
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), index);
        self.grads.push(zeros.clone());
        self.first_moments.push(zeros.clone());
        self.second_moments.push(zeros);
        self.values.push(value);
        Ok(ParamId {
            store: self.id,
            index,
        })
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&index| ParamId {
                store: self.id,
                index,
            })
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && id.index < self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        debug_assert!(self.owns(id));
        &self.values[id.index]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert!(self.owns(id));
        &mut self.values[id.index]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index]
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (
            &self.first_moments[id.index],
            &self.second_moments[id.index],
        )
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn set_moments(&mut self, index: usize, m: Tensor, v: Tensor) {
        self.first_moments[index] = m;
        self.second_moments[index] = v;
    }

    /// Adds every gradient in `grads` that belongs to this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.entries {
            if id.store == self.id {
                self.grads[id.index].add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn adam_parts(
        &mut self,
    ) -> (
        &mut [Tensor],
        &mut [Tensor],
        &mut [Tensor],
        &mut [Tensor],
        &mut u64,
    ) {
        (
            &mut self.values,
            &mut self.grads,
            &mut self.first_moments,
            &mut self.second_moments,
            &mut self.step,
        )
    }

    /// Values only, in registration order.
    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Copies parameter values (not optimizer state) from `other` by name.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other.get(name)?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::dim(
                    "copy_values_from",
                    format!("parameter {name}: {:?} vs {:?}", src.shape(), self.values[i].shape()),
                ));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub(crate) fn push(&mut self, id: ParamId, grad: Tensor) {
        self.entries.push((id, grad));
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, g)| g)
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.entries.retain(|(id, _)| keep(*id));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
