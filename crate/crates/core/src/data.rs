use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledData {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledData {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::InputDomain(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InputDomain(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> LabeledData {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        LabeledData {
            inputs: Matrix::from_vec(idx.len(), cols, data).expect("consistent shape"),
            labels,
            classes: self.classes,
        }
    }
}
