//! Dense row-major tensors, the reverse-mode tape that differentiates them,
//! and the optimizers that consume the resulting gradients.

mod kernels;
pub mod optim;
mod tape;

pub use kernels::{conv_out_dim, conv_transpose_out_dim};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Storage precision of forward values.
///
/// All arithmetic is carried out in `f64`. Under [`Precision::Single`] every
/// forward result recorded on a tape is rounded to the nearest `f32`, which
/// reproduces single-precision storage of activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    #[inline]
    pub(crate) fn apply(self, data: &mut [f64]) {
        if self == Precision::Single {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision {other:?} (expected single or double)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(tensors: &[&Tensor]) -> Result<Tensor> {
        let first = tensors.first().ok_or(Error::Empty("mean of zero tensors"))?;
        let mut acc = vec![0.0; first.numel()];
        for t in tensors {
            if t.shape != first.shape {
                return Err(Error::shape("mean_of", &first.shape, &t.shape));
            }
            for (a, v) in acc.iter_mut().zip(&t.data) {
                *a += v;
            }
        }
        let inv = 1.0 / tensors.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Tensor::new(&first.shape, acc)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
        let first = tensors.first().ok_or(Error::Empty("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * tensors.len());
        for t in tensors {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![tensors.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Splits the leading axis back into individual tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        if self.shape.is_empty() || self.shape[0] == 0 {
            return Vec::new();
        }
        let inner = &self.shape[1..];
        let step: usize = inner.iter().product();
        self.data
            .chunks(step.max(1))
            .take(self.shape[0])
            .map(|c| Tensor {
                shape: inner.to_vec(),
                data: c.to_vec(),
                requires_grad: false,
                grad: None,
            })
            .collect()
    }

    /// Per-channel spatial mean of a `[d, h, w]` tensor (no tape).
    pub fn global_average_pool(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::geometry(
                "global_average_pool",
                format!("expected rank-3 [d, h, w], got {:?}", self.shape),
            ));
        }
        let d = self.shape[0];
        let hw = self.shape[1] * self.shape[2];
        let data = self
            .data
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Tensor::new(&[d], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn gap_hand_mean() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(t.global_average_pool().unwrap().data(), &[4.0]);
    }

    #[test]
    fn stack_unstack() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }

    #[test]
    fn single_precision_rounds() {
        let mut v = vec![0.1f64];
        Precision::Single.apply(&mut v);
        assert_eq!(v[0], 0.1f32 as f64);
        let mut w = vec![0.1f64];
        Precision::Double.apply(&mut w);
        assert_eq!(w[0], 0.1);
    }
}
