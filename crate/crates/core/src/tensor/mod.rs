//! Dense f32 tensors, the convolution/pooling kernels the autoencoder needs,
//! a tape for reverse-mode differentiation, Adam, and a finite-difference
//! gradient checker.
//!
//! Layout is NCHW row-major throughout. Kernels are plain functions over
//! [`Tensor`]; [`graph::Graph`] records which kernel produced each value so
//! gradients can be pulled back from a scalar loss.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Entries drawn independently from `uniform(lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(Error::dim(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Destructures a rank-4 shape as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected rank-4 NCHW tensor, found shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Stacks equally shaped `C×H×W` images into one `N×C×H×W` batch.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list of tensors"))?;
        let item_shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != item_shape {
                return Err(Error::dim(format!(
                    "cannot stack shapes {:?} and {:?}",
                    item_shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(item_shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&item_shape);
        Ok(Tensor { shape, data })
    }

    /// The `index`-th entry along the leading axis, with that axis removed.
    pub fn index_outer(&self, index: usize) -> Result<Tensor> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("cannot index a rank-0 tensor"))?;
        if index >= outer {
            return Err(Error::dim(format!(
                "index {index} out of range for leading extent {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_index_roundtrip() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.index_outer(1).unwrap(), b);
        assert!(s.index_outer(2).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
