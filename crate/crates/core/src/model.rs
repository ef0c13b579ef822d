//! Shallow embedding network and the source classification head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize_in_place};
use crate::error::{Error, Result};

/// `f(x) = normalize(W x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out x d_in`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Forward pass output kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub embedding: Vec<f64>,
    pub pre_norm: f64,
}

impl EmbeddingModel {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in < 2 || d_out < 2 {
            return Err(Error::Config(format!(
                "model dimensions must be >= 2, got {d_in} -> {d_out}"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let weights = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            d_in,
            d_out,
            weights,
            bias: with_bias.then(|| vec![0.0; d_out]),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        if let Some(b) = &self.bias {
            p.extend_from_slice(b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&p[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&p[nw..]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|x| x.is_finite())
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .weights
            .chunks_exact(self.d_in)
            .map(|row| dot(row, x))
            .collect();
        if let Some(b) = &self.bias {
            out.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        let mut embedding = self.project(x);
        let pre_norm = normalize_in_place(&mut embedding)?;
        Ok(Forward {
            embedding,
            pre_norm,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.embedding)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/df` at the unit output.
    pub fn backward(&self, x: &[f64], fwd: &Forward, grad_embedding: &[f64], grad: &mut [f64]) {
        let pre = normalize_backward(&fwd.embedding, fwd.pre_norm, grad_embedding);
        let nw = self.weights.len();
        for (r, g) in pre.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &mut grad[r * self.d_in..(r + 1) * self.d_in];
            row.iter_mut().zip(x).for_each(|(acc, xi)| *acc += g * xi);
        }
        if self.bias.is_some() {
            grad[nw..]
                .iter_mut()
                .zip(&pre)
                .for_each(|(acc, g)| *acc += g);
        }
    }
}

/// Backward through `y = x / ||x||`: `(I - y y^T) g / ||x||`.
pub fn normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| (gi - yi * proj) / norm)
        .collect()
}

/// Linear `M`-way classifier over embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Self {
            classes,
            dim,
            weights: (0..classes * dim).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; classes],
        }
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, f) + b)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
    }
}
