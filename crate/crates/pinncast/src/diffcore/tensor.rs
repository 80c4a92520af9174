use crate::{Error, Result};

use super::numel_of;

/// An n-dimensional array of f64 values in row-major order.
///
/// Carries an optional gradient buffer of identical shape, populated by
/// [`super::Tape::write_grad`] after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the extents are positive and their
    /// product matches the data length.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n = numel_of(shape);
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![0.0; numel_of(shape)], shape).expect("positive extents")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor::new(vec![value; numel_of(shape)], shape).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![value], &[1]).expect("scalar")
    }

    /// Marks the tensor as a gradient leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
