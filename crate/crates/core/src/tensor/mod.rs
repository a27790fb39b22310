//! Dense row-major tensors and a tape-based reverse-mode engine.
//!
//! [`Tensor`] is a plain value: a shape and a flat data buffer. Differentiation
//! happens on a [`Graph`], which records every operation applied to its
//! [`Var`] handles and replays them in reverse on [`Graph::backward`].
//! A graph is built per forward pass and thrown away afterwards; parameters
//! live outside the graph as ordinary tensors.
//!
//! Storage is `f32` by default. Every reduction (matmul inner products, sums,
//! norms, softmax denominators) accumulates in `f64`. The engine is also
//! instantiated at `f64` for finite-difference gradient checks, where `f32`
//! rounding would swamp the perturbation.

mod element;
mod graph;
mod kernels;

pub use element::Element;
pub use graph::{Graph, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Denominator floor used by every cosine similarity in the crate.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one dimension".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-sized dimension".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; numel],
        })
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Element-type conversion.
    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() needs a single-element tensor".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<F>> {
        Tensor::new(shape, self.data.clone())
    }

    /// Row `i` along the first axis.
    pub fn row(&self, i: usize) -> &[F] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

impl Tensor<f32> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Tensor::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Pseudo-normal tensor with standard deviation `scale`. Bit-identical for
    /// a fixed `(shape, seed, scale)`.
    pub fn randn(shape: impl Into<Vec<usize>>, seed: u64, scale: f32) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "randn scale must be positive and finite, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale as f64) as f32
            })
            .collect();
        Ok(Tensor { shape, data })
    }
}
