//! Named trainable parameters.
//!
//! The store owns the live values; each training step registers them on a
//! fresh graph as leaves and writes the optimizer update back here. Insertion
//! order is stable, which makes checkpoints and optimizer state deterministic.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{HslError, Result};
use crate::tensor::Tensor;

/// Opaque handle for one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(HslError::Config(format!("duplicate parameter name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HslError::ShapeMismatch {
                op: "ParamStore::add",
                detail: format!("{name}: shape {shape:?} vs {} values", data.len()),
            });
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Uniform Xavier init for a (rows, cols) weight matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, vec![rows, cols], data)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.add(name, shape, vec![0.0; numel])
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let numel = shape.iter().product();
        self.add(name, shape, vec![1.0; numel])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].data
    }

    /// Snapshot the current value as a tensor.
    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::new(e.shape.clone(), e.data.clone()).expect("store entries are shape-consistent")
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}
