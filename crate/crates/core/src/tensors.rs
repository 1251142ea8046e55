//! Ordered name → matrix maps used for relevance maps, priors, gates and
//! gradient-shaped bookkeeping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMap(IndexMap<String, Matrix>);

impl TensorMap {
    pub fn new() -> Self {
        Self(IndexMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.0.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Sum of every entry of every tensor, in insertion order.
    pub fn total(&self) -> f64 {
        self.0.values().map(Matrix::sum).sum()
    }

    pub fn element_count(&self) -> usize {
        self.0.values().map(Matrix::len).sum()
    }

    pub fn map(&self, f: impl Fn(&str, &Matrix) -> Matrix) -> TensorMap {
        TensorMap(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), f(k, v)))
                .collect(),
        )
    }

    /// Errors unless both maps hold the same names with the same shapes, in
    /// the same order.
    pub fn check_compatible(&self, other: &TensorMap) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Data(format!(
                "tensor maps differ in size: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.0.iter().zip(other.0.iter()) {
            if ka != kb {
                return Err(Error::Data(format!("tensor name mismatch: {ka} vs {kb}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Shape {
                    op: "tensor map",
                    left: va.shape(),
                    right: vb.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Matrix::is_finite)
    }
}

impl FromIterator<(String, Matrix)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        TensorMap(iter.into_iter().collect())
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Matrix);
    type IntoIter = indexmap::map::IntoIter<String, Matrix>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}
