use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named registry of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform matrix of shape `fan_in × fan_out`.
    pub fn init_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("sized"));
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], limit: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("sized"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Checkpoint JSON: parameter name → `{"shape": [...], "data": [...]}`.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        for (name, t) in &self.map {
            let stored = StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            };
            obj.insert(name.clone(), serde_json::to_value(stored).expect("plain data"));
        }
        Value::Object(obj)
    }

    /// Parses the checkpoint map. Keys listed in `skip` are ignored, which lets
    /// callers embed extra blocks (e.g. a model config) in the same object.
    pub fn from_json(value: &Value, skip: &[&str]) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::Format {
            path: "<checkpoint>".into(),
            pointer: "".into(),
            detail: "expected a JSON object".into(),
        })?;
        let mut store = Self::new();
        for (name, v) in obj {
            if skip.contains(&name.as_str()) {
                continue;
            }
            let stored: StoredTensor =
                serde_json::from_value(v.clone()).map_err(|e| Error::Format {
                    path: "<checkpoint>".into(),
                    pointer: format!("/{name}"),
                    detail: e.to_string(),
                })?;
            let t = Tensor::new(stored.shape, stored.data).map_err(|e| Error::Format {
                path: "<checkpoint>".into(),
                pointer: format!("/{name}"),
                detail: e.to_string(),
            })?;
            store.insert(name.clone(), t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        Self::from_json(&v, &[])
    }
}
