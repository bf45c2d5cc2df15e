//! Named parameter tensors.

use ndarray::Array2;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform init in ±sqrt(6/(fan_in+fan_out)).
    pub fn xavier<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.insert(name, Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a)))
    }

    /// Embedding table with small uniform entries.
    pub fn embedding<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> usize {
        self.insert(name, Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.1..0.1)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> usize {
        self.insert(name, Array2::from_elem((rows, cols), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.find(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.find(name).map(move |i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}
