use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;

/// Optimizer routing tag carried by every parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Parameters of the ODE vector field.
    Dynamics,
    /// Everything else: embeddings, decoder, update cell.
    Other,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Dynamics => f.write_str("dynamics"),
            Group::Other => f.write_str("other"),
        }
    }
}

/// Index of an array inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl ParamEntry {
    /// `(rows, cols)` for 2-D arrays.
    pub fn matrix_shape(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Named, shaped 64-bit arrays stored in one contiguous buffer.
///
/// The flat layout lets gradients, Adam moments and checkpoints share a
/// single offset table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    data: Vec<f64>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        values: Vec<f64>,
    ) -> Result<ParamId, EngineError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(EngineError::DuplicateParam(name));
        }
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(EngineError::ShapeMismatch {
                primitive: "param",
                detail: format!("{name}: shape {shape:?} needs {len} values, got {}", values.len()),
            });
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.clone(),
            group,
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        });
        self.data.extend(values);
        self.by_name.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
    ) -> Result<ParamId, EngineError> {
        let len = shape.iter().product();
        self.add(name, group, shape, vec![0.0; len])
    }

    /// Same layout, all values zero. Used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub(crate) fn from_parts(entries: Vec<ParamEntry>, data: Vec<f64>) -> Result<Self, EngineError> {
        let mut by_name = HashMap::with_capacity(entries.len());
        let mut offset = 0;
        for (i, e) in entries.iter().enumerate() {
            if e.offset != offset || e.len != e.shape.iter().product::<usize>() {
                return Err(EngineError::Archive(format!("inconsistent layout for {}", e.name)));
            }
            offset += e.len;
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(EngineError::DuplicateParam(e.name.clone()));
            }
        }
        if offset != data.len() {
            return Err(EngineError::Archive(format!(
                "payload holds {} values, manifest declares {offset}",
                data.len()
            )));
        }
        Ok(Self { entries, by_name, data })
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_arrays(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// True when both sets have identical names, groups and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.entries == other.entries
    }

    /// Adds `scale * other` into `self`.
    pub fn axpy(&mut self, scale: f64, other: &ParameterSet) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }
}

/// A compact view over a subset of arrays, used when only a few arrays
/// receive gradient (e.g. the adjoint parameter accumulator).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSubset {
    ids: Vec<ParamId>,
    offsets: Vec<usize>,
    len: usize,
}

impl ParamSubset {
    pub fn new(params: &ParameterSet, mut ids: Vec<ParamId>) -> Self {
        ids.sort();
        ids.dedup();
        let mut offsets = Vec::with_capacity(ids.len());
        let mut len = 0;
        for id in &ids {
            offsets.push(len);
            len += params.entry(*id).len;
        }
        Self { ids, offsets, len }
    }

    /// Every array of `params`, in layout order. Compact offsets then equal flat offsets.
    pub fn all(params: &ParameterSet) -> Self {
        Self::new(params, params.ids().collect())
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Compact offset of `id`, if it belongs to the subset.
    pub fn offset_of(&self, id: ParamId) -> Option<usize> {
        self.ids.binary_search(&id).ok().map(|k| self.offsets[k])
    }

    /// Adds a compact gradient into a full-layout accumulator.
    pub fn scatter_add(&self, compact: &[f64], full: &mut ParameterSet) {
        for (k, id) in self.ids.iter().enumerate() {
            let src = &compact[self.offsets[k]..];
            for (d, s) in full.get_mut(*id).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
