//! Named trainable tensors and their on-disk archive.
//!
//! Archives are safetensors files whose header metadata carries
//! `format = cider-params` and `version = 1`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Tensor, Var};

use crate::error::{CiderError, Result};
use crate::ops::device;

pub const PARAMS_FORMAT: &str = "cider-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, key: impl Into<String>, value: Tensor) -> Result<Var> {
        let key = key.into();
        if self.vars.contains_key(&key) {
            return Err(CiderError::contract(format!("duplicate parameter {key}")));
        }
        let var = Var::from_tensor(&value)?;
        self.vars.insert(key, var.clone());
        Ok(var)
    }

    pub fn get(&self, key: &str) -> Option<&Var> {
        self.vars.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Keys starting with `prefix`, as a new store sharing the same vars.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Keys not starting with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| !k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Plain copies of every value, for snapshot comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_vec1::<f64>()?)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().contiguous().unwrap_or_else(|_| v.as_tensor().clone())))
            .collect();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), PARAMS_FORMAT.to_string());
        meta.insert("version".to_string(), PARAMS_VERSION.to_string());
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| CiderError::contract(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    /// Overwrites every parameter in the store from the archive at `path`.
    /// Missing keys and shape changes are errors; extra keys are ignored.
    pub fn load_values(&self, path: &Path) -> Result<()> {
        let loaded = read_archive(path)?;
        for (key, var) in &self.vars {
            let value = loaded
                .get(key)
                .ok_or_else(|| CiderError::contract(format!("{} lacks parameter {key}", path.display())))?;
            if value.dims() != var.dims() {
                return Err(CiderError::contract(format!(
                    "parameter {key}: archive shape {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(value)?;
        }
        Ok(())
    }
}

pub fn read_archive(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| CiderError::contract(format!("reading {}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(PARAMS_FORMAT) {
        return Err(CiderError::contract(format!(
            "{} is not a parameter archive",
            path.display()
        )));
    }
    let version: u32 = meta
        .get("version")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    if version != PARAMS_VERSION {
        return Err(CiderError::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    Ok(candle_core::safetensors::load_buffer(&bytes, &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_exact() {
        let mut store = ParamStore::new();
        let t = Tensor::new(&[[0.1f64, -2.5e-300], [std::f64::consts::PI, 7.0]], &device()).unwrap();
        store.register("domain/x/user/layer1/mu", t.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        store.save(&path).unwrap();

        let mut other = ParamStore::new();
        other
            .register("domain/x/user/layer1/mu", t.zeros_like().unwrap())
            .unwrap();
        other.load_values(&path).unwrap();
        assert_eq!(store.snapshot().unwrap(), other.snapshot().unwrap());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut store = ParamStore::new();
        let t = Tensor::zeros(2, crate::ops::DTYPE, &device()).unwrap();
        store.register("a", t.clone()).unwrap();
        assert!(store.register("a", t).is_err());
    }
}
