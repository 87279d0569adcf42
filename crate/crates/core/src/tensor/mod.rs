//! Dense f64 tensors, layer kernels with exact backward rules, a recording
//! tape for reverse-mode differentiation, and SGD.

mod checkpoint;
mod gradcheck;
pub mod ops;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointManifest};
pub use gradcheck::grad_check;
pub use ops::{ConvSpec, FocalParams};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Row-major N-dimensional array of f64 with an optional gradient buffer.
///
/// 4-D tensors follow the (batch, channels, height, width) convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "gradient of length {} does not match tensor of {} elements",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(Error::invalid(format!("expected a 4-D tensor, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the values without the gradient buffer.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }
}

/// In-place `param -= lr * grad`, then zeroes the gradient.
///
/// Every parameter must carry a gradient; none is touched otherwise.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter {i} has no gradient")));
    }
    for p in params {
        let grad = p.grad.as_mut().expect("checked above");
        for (v, g) in p.data.iter_mut().zip(grad.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        w.accumulate_grad(&[5.0, 5.0, 5.0]).unwrap();
        sgd_step([&mut w], 0.0).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(w.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sgd_single_update() {
        let mut w = Tensor::scalar(1.0);
        w.accumulate_grad(&[2.0]).unwrap();
        sgd_step([&mut w], 0.1).unwrap();
        assert!((w.item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_reduces_quadratic() {
        // f(w) = (w - 3)^2, f'(w) = 2(w - 3)
        let mut w = Tensor::scalar(0.0);
        let f = |w: f64| (w - 3.0).powi(2);
        let before = f(w.item().unwrap());
        let g = 2.0 * (w.item().unwrap() - 3.0);
        w.accumulate_grad(&[g]).unwrap();
        sgd_step([&mut w], 0.1).unwrap();
        assert!(f(w.item().unwrap()) < before);
    }

    #[test]
    fn sgd_requires_grad() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        a.accumulate_grad(&[1.0]).unwrap();
        let err = sgd_step([&mut a, &mut b], 0.1).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert_eq!(a.item().unwrap(), 1.0);
    }
}
