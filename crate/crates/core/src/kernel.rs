//! ARD RBF covariance function.
//!
//! `k(x, x') = σ² exp(-½ Σ_q γ_q (x_q - x'_q)²)`, with both σ² and the
//! inverse lengthscales γ stored in log space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{rbf_gram_value, Matrix, NodeId, Tape};
use crate::error::{Error, Result};

pub const INITIAL_VARIANCE: f64 = 1.0;
pub const INITIAL_INV_LENGTHSCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_variance: f64,
    pub log_inv_lengthscales: Vec<f64>,
}

impl KernelParams {
    /// Initial values for a `q`-dimensional latent space: σ² = 1, γ_q = 0.5.
    pub fn initial(q: usize) -> Self {
        Self::new(INITIAL_VARIANCE, &vec![INITIAL_INV_LENGTHSCALE; q])
    }

    pub fn new(variance: f64, inv_lengthscales: &[f64]) -> Self {
        Self {
            log_variance: variance.ln(),
            log_inv_lengthscales: inv_lengthscales.iter().map(|g| g.ln()).collect(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.log_inv_lengthscales.len()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn inv_lengthscales(&self) -> Vec<f64> {
        self.log_inv_lengthscales.iter().map(|v| v.exp()).collect()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let q = self.latent_dim();
        if x.len() != q || y.len() != q {
            return Err(Error::shape("kernel_eval", (x.len(), q), (y.len(), q)));
        }
        let s: f64 = self
            .inv_lengthscales()
            .iter()
            .zip(x.iter().zip(y))
            .map(|(g, (a, b))| g * (a - b) * (a - b))
            .sum();
        Ok(self.variance() * (-0.5 * s).exp())
    }

    /// Plain (untaped) gram matrix between the rows of `a` and `b`.
    pub fn gram_value(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        let q = self.latent_dim();
        if a.cols() != q || b.cols() != q {
            return Err(Error::shape("gram", a.shape(), b.shape()));
        }
        Ok(rbf_gram_value(
            a,
            b,
            self.log_variance,
            &self.inv_lengthscales(),
        ))
    }
}

/// Tape handles for the kernel hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct KernelNodes {
    pub log_variance: NodeId,
    pub log_inv_lengthscales: NodeId,
}

impl KernelNodes {
    pub fn record(tape: &mut Tape, params: &KernelParams) -> Self {
        Self {
            log_variance: tape.leaf(Matrix::scalar(params.log_variance)),
            log_inv_lengthscales: tape.leaf(Matrix::row_vector(&params.log_inv_lengthscales)),
        }
    }

    /// Gram matrix node between the rows of `a` (N×Q) and `b` (M×Q).
    pub fn gram(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        tape.rbf_gram(a, b, self.log_variance, self.log_inv_lengthscales)
    }
}

/// ARD relevances γ_q and the latent dimensions ordered from most to least relevant.
#[derive(Clone, Debug, PartialEq)]
pub struct Relevances {
    pub values: Vec<f64>,
    pub order: Vec<usize>,
}

impl Relevances {
    /// The two most relevant dimensions (or one, for a 1-D latent space).
    pub fn dominant(&self, k: usize) -> Vec<usize> {
        self.order.iter().take(k).copied().collect()
    }
}

pub fn ard_relevances(params: &KernelParams) -> Relevances {
    let values = params.inv_lengthscales();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    Relevances { values, order }
}
