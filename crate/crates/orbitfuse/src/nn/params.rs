use crate::error::{Error, Result};

/// Index of a named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Per-parameter gradient buffers, aligned with the owning `ParamSet`.
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors. The registration order is
/// the checkpoint order, so model construction must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for parameter {name}"
        );
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect()
    }

    /// Copy values from `other` into this set, matching entries by name and
    /// validating shapes. Entries missing from `other` are an error.
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for entry in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|e| e.name == entry.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks parameter {}", entry.name)))?;
            if src.shape != entry.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {}: expected shape {:?}, checkpoint has {:?}",
                    entry.name, entry.shape, src.shape
                )));
            }
            entry.data.clone_from(&src.data);
        }
        Ok(())
    }
}
