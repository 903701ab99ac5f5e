use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::Tensor;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Named trainable tensors owned by one model.
///
/// Every store carries a process-unique tag so that gradients collected
/// from a graph mixing several stores can be routed back to the right one.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId {
            store: self.tag,
            index: self.values.len() - 1,
        }
    }

    /// Adds a tensor initialised uniformly in `[-1/sqrt(d), 1/sqrt(d)]`, `d`
    /// being the size of the last axis.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let d = shape.last().copied().unwrap_or(1).max(1) as f64;
        let bound = 1.0 / d.sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(
            name,
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        debug_assert_eq!(id.store, self.tag, "parameter from a different store");
        &self.values[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        debug_assert_eq!(id.store, self.tag, "parameter from a different store");
        &mut self.values[id.index]
    }

    pub fn id(&self, index: usize) -> ParamId {
        ParamId {
            store: self.tag,
            index,
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| self.id(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(move |i| self.id(i))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces values by name from `(name, tensor)` pairs; every stored
    /// parameter must be present with an identical shape.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let found = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| format!("checkpoint is missing parameter {name:?}"))?;
            if found.1.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {name:?} has shape {:?}, checkpoint has {:?}",
                    self.values[i].shape(),
                    found.1.shape()
                ));
            }
            self.values[i] = found.1.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }
}
