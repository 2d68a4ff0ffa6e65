//! Dense f64 tensors and a define-by-run reverse-mode tape.

pub mod ctns;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error};
pub use optim::AdamW;
pub use tape::{bilinear_resize, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Plain (untracked) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                kernels::gemm_acc(&self.data, &other.data, &mut out, m, k, n);
                Tensor::new([m, n], out)
            }
            _ => Err(Error::dim("matmul", &self.shape, &other.shape)),
        }
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Numerically stable softmax of a slice, written into `out`.
pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cosine similarity with each norm floored at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn plain_matmul_hand_product() {
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(b.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0], 1e-8) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0], 1e-8), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0], 1e-8) - 0.7071).abs() < 1e-4);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0], 1e-8), 0.0);
    }

    #[test]
    fn stable_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
