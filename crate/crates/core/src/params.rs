//! Named parameter sets and their on-disk checkpoint layout.
//!
//! A checkpoint is a directory of tensor container files plus `params.json`
//! mapping parameter names to file names. Parameters are stored as f64 so the
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Dtype, Tensor};

/// Ordered map from parameter name to tensor. Iteration order is the sorted
/// name order, which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate param {name}");
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("ParamSet", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Write a `params.json` manifest plus one container file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        for (name, tensor) in &self.entries {
            let file = format!("{name}.stns");
            write_tensor(&dir.join(&file), tensor, Dtype::F64)?;
            manifest.insert(name.clone(), file);
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("params.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("params.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Checkpoint {
            path: dir.display().to_string(),
            what: format!("cannot read params.json: {e}"),
        })?;
        let manifest: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let mut set = ParamSet::new();
        for (name, file) in manifest {
            set.insert(name, read_tensor(&dir.join(file))?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("a.weight", Tensor::new(vec![2, 2], vec![0.1, -1e-300, 3.5, 2.0]).unwrap());
        ps.insert("a.bias", Tensor::new(vec![2], vec![-0.0, 7.25]).unwrap());
        ps.save(dir.path()).unwrap();
        let back = ParamSet::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (name, t) in ps.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.dims(), t.dims());
            for (x, y) in b.data().iter().zip(t.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
