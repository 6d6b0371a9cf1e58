//! Local training and global aggregation.

mod aggregate;
mod optimum;
mod task;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use aggregate::{aggregate_global, aggregate_with_predictions};
pub use optimum::{minimize_pooled, OptimumReport};
pub use task::{TaskKind, TaskModel};
pub(crate) use update::full_gd_from_gradient;
pub use update::{local_update_full_gd, local_update_sgd};

/// Flat parameter vector of a local or global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVec(pub Vec<f64>);

impl ModelVec {
    pub fn zeros(len: usize) -> Self {
        ModelVec(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelVec) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ModelVec {
        ModelVec(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self - other`
    pub fn sub(&self, other: &ModelVec) -> ModelVec {
        debug_assert_eq!(self.len(), other.len());
        ModelVec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn distance_sq(&self, other: &ModelVec) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ModelVec {
    fn from(v: Vec<f64>) -> Self {
        ModelVec(v)
    }
}

/// Training samples held by one user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        let d = Dataset { inputs, outputs };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.outputs.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} outputs",
                self.inputs.len(),
                self.outputs.len()
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let (n_in, n_out) = (self.inputs[0].len(), self.outputs[0].len());
        for (x, y) in self.inputs.iter().zip(&self.outputs) {
            if x.len() != n_in || y.len() != n_out {
                return Err(Error::Data("non-uniform sample dimensions".into()));
            }
            if !x.iter().chain(y).all(|v| v.is_finite()) {
                return Err(Error::Data("non-finite sample value".into()));
            }
        }
        Ok(())
    }

    /// Concatenation of several datasets.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut all = Dataset::default();
        for p in parts {
            all.inputs.extend(p.inputs.iter().cloned());
            all.outputs.extend(p.outputs.iter().cloned());
        }
        all
    }
}
