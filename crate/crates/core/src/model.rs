//! Trainable state of a mixed-likelihood GP-LVM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::likelihoods::{ChannelMap, LikelihoodSpec, INITIAL_GAUSSIAN_VARIANCE};
use crate::variational::{standard_normal, CovarianceMode, VariationalU, VariationalX, XFactor};

/// Every trainable quantity. Positive parameters are stored as logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub specs: Vec<LikelihoodSpec>,
    pub kernel: KernelParams,
    pub x: VariationalX,
    pub u: VariationalU,
    /// Log observation variance per column; `Some` exactly for gaussian columns.
    pub log_noise: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentInit {
    /// Means drawn from N(0, 1).
    Random,
    /// Means set to the given N×Q matrix (for example a PCA projection).
    Given(Matrix),
}

#[derive(Clone, Debug)]
pub struct InitOptions {
    pub points: usize,
    pub latent_dim: usize,
    pub inducing: usize,
    pub covariance: CovarianceMode,
    pub latent_init: LatentInit,
    pub seed: u64,
}

/// Initial state: latent means, inducing inputs and inducing means drawn
/// from N(0, 1); identity covariances; σ² = 1, γ = 0.5; gaussian noise 0.1.
pub fn init_model(specs: &[LikelihoodSpec], options: &InitOptions) -> Result<ModelState> {
    let (n, q, m) = (options.points, options.latent_dim, options.inducing);
    if q == 0 {
        return Err(Error::InvalidConfig(
            "latent dimension must be at least 1".into(),
        ));
    }
    if m == 0 {
        return Err(Error::InvalidConfig(
            "need at least one inducing point".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one data point".into()));
    }
    let channels = ChannelMap::from_specs(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let random_mean = standard_normal(n, q, &mut rng);
    let mean = match &options.latent_init {
        LatentInit::Random => random_mean,
        LatentInit::Given(x) => {
            if x.shape() != (n, q) {
                return Err(Error::shape("latent_init", (n, q), x.shape()));
            }
            x.clone()
        }
    };
    let inducing = standard_normal(m, q, &mut rng);
    let u_mean = standard_normal(m, channels.total(), &mut rng);
    Ok(ModelState {
        specs: specs.to_vec(),
        kernel: KernelParams::initial(q),
        x: VariationalX::new(mean, options.covariance),
        u: VariationalU::new(inducing, u_mean),
        log_noise: specs
            .iter()
            .map(|s| s.has_variance().then(|| INITIAL_GAUSSIAN_VARIANCE.ln()))
            .collect(),
    })
}

impl ModelState {
    pub fn points(&self) -> usize {
        self.x.points()
    }

    pub fn latent_dim(&self) -> usize {
        self.x.latent_dim()
    }

    pub fn inducing_points(&self) -> usize {
        self.u.inducing_points()
    }

    pub fn channel_map(&self) -> ChannelMap {
        ChannelMap::from_specs(&self.specs).expect("model always has at least one column")
    }

    pub fn noise_variance(&self, column: usize) -> f64 {
        self.log_noise[column].map_or(1.0, f64::exp)
    }

    /// Names of the parameter tensors, in the order of [`ModelState::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "kernel.log_variance".to_string(),
            "kernel.log_inv_lengthscales".into(),
        ];
        names.push("x.mean".into());
        match &self.x.factor {
            XFactor::Diagonal { .. } => names.push("x.log_std".into()),
            XFactor::Full { raw } => names.extend((0..raw.len()).map(|q| format!("x.factor[{q}]"))),
        }
        names.push("u.inducing".into());
        names.push("u.mean".into());
        names.extend((0..self.u.raw_factors.len()).map(|d| format!("u.factor[{d}]")));
        for (c, n) in self.log_noise.iter().enumerate() {
            if n.is_some() {
                names.push(format!("noise[{c}]"));
            }
        }
        names
    }

    /// Flat views of every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            std::slice::from_ref(&self.kernel.log_variance),
            &self.kernel.log_inv_lengthscales,
            self.x.mean.as_slice(),
        ];
        match &self.x.factor {
            XFactor::Diagonal { log_std } => out.push(log_std.as_slice()),
            XFactor::Full { raw } => out.extend(raw.iter().map(Matrix::as_slice)),
        }
        out.push(self.u.inducing.as_slice());
        out.push(self.u.mean.as_slice());
        out.extend(self.u.raw_factors.iter().map(Matrix::as_slice));
        out.extend(self.log_noise.iter().flatten().map(std::slice::from_ref));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            std::slice::from_mut(&mut self.kernel.log_variance),
            &mut self.kernel.log_inv_lengthscales,
            self.x.mean.as_mut_slice(),
        ];
        match &mut self.x.factor {
            XFactor::Diagonal { log_std } => out.push(log_std.as_mut_slice()),
            XFactor::Full { raw } => out.extend(raw.iter_mut().map(Matrix::as_mut_slice)),
        }
        out.push(self.u.inducing.as_mut_slice());
        out.push(self.u.mean.as_mut_slice());
        out.extend(self.u.raw_factors.iter_mut().map(Matrix::as_mut_slice));
        out.extend(
            self.log_noise
                .iter_mut()
                .flatten()
                .map(std::slice::from_mut),
        );
        out
    }

    /// Per tensor, whether the optimizer must leave it alone.
    pub fn frozen(&self) -> Vec<bool> {
        let mut out = vec![false; self.tensors().len() - self.log_noise.iter().flatten().count()];
        for (spec, n) in self.specs.iter().zip(&self.log_noise) {
            if n.is_some() {
                out.push(spec.freeze_variance);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// The structural invariants a valid state satisfies.
    pub fn check(&self) -> Result<()> {
        let n = self.points();
        let q = self.latent_dim();
        let m = self.inducing_points();
        if self.kernel.latent_dim() != q {
            return Err(Error::shape(
                "model.kernel",
                (1, q),
                (1, self.kernel.latent_dim()),
            ));
        }
        if self.u.inducing.cols() != q {
            return Err(Error::shape(
                "model.inducing",
                (m, q),
                self.u.inducing.shape(),
            ));
        }
        if self.u.channels() != self.channel_map().total() {
            return Err(Error::shape(
                "model.u_mean",
                (m, self.channel_map().total()),
                self.u.mean.shape(),
            ));
        }
        if self.log_noise.len() != self.specs.len()
            || self
                .specs
                .iter()
                .zip(&self.log_noise)
                .any(|(s, v)| s.has_variance() != v.is_some())
        {
            return Err(Error::InvalidConfig(
                "noise parameters do not match the columns".into(),
            ));
        }
        match &self.x.factor {
            XFactor::Diagonal { log_std } if log_std.shape() != (n, q) => {
                return Err(Error::shape("model.x_factor", (n, q), log_std.shape()));
            }
            XFactor::Full { raw } if raw.len() != q => {
                return Err(Error::shape("model.x_factor", (q, 1), (raw.len(), 1)));
            }
            _ => {}
        }
        if !self.is_finite() {
            return Err(Error::InvalidConfig(
                "model contains non-finite parameters".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients aligned with [`ModelState::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            for v in t {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Index of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.tensors
            .iter()
            .position(|t| t.iter().any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<LikelihoodSpec> {
        vec![
            LikelihoodSpec::gaussian(),
            LikelihoodSpec::bernoulli(),
            LikelihoodSpec::categorical(3, false),
        ]
    }

    fn options(covariance: CovarianceMode) -> InitOptions {
        InitOptions {
            points: 5,
            latent_dim: 2,
            inducing: 3,
            covariance,
            latent_init: LatentInit::Random,
            seed: 11,
        }
    }

    #[test]
    fn initial_values() {
        let m = init_model(&specs(), &options(CovarianceMode::Diagonal)).unwrap();
        assert_eq!(m.kernel.variance(), 1.0);
        assert!(m
            .kernel
            .inv_lengthscales()
            .iter()
            .all(|g| (g - 0.5).abs() < 1e-15));
        assert!((m.noise_variance(0) - 0.1).abs() < 1e-15);
        assert_eq!(m.log_noise[1], None);
        assert_eq!(m.u.mean.shape(), (3, 5));
        assert_eq!(m.x.marginal_variances(), Matrix::filled(5, 2, 1.0));
        assert_eq!(m.u.covariance(4), Matrix::identity(3));
        m.check().unwrap();
        assert_eq!(
            m,
            init_model(&specs(), &options(CovarianceMode::Diagonal)).unwrap()
        );
    }

    #[test]
    fn tensor_views_line_up() {
        for mode in [CovarianceMode::Diagonal, CovarianceMode::Full] {
            let mut m = init_model(&specs(), &options(mode)).unwrap();
            let names = m.tensor_names();
            assert_eq!(names.len(), m.tensors().len());
            assert_eq!(names.len(), m.frozen().len());
            let lens: Vec<usize> = m.tensors().iter().map(|t| t.len()).collect();
            for t in m.tensors_mut() {
                t.iter_mut().for_each(|v| *v += 1.0);
            }
            assert_eq!(
                m.tensors().iter().map(|t| t.len()).collect::<Vec<_>>(),
                lens
            );
            assert!((m.noise_variance(0) - 0.1 * 1f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_noise_flagged() {
        let mut s = specs();
        s[0].freeze_variance = true;
        let m = init_model(&s, &options(CovarianceMode::Diagonal)).unwrap();
        let frozen = m.frozen();
        assert!(*frozen.last().unwrap());
        assert_eq!(frozen.iter().filter(|f| **f).count(), 1);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let mut o = options(CovarianceMode::Diagonal);
        o.inducing = 0;
        assert!(init_model(&specs(), &o).is_err());
        let mut o = options(CovarianceMode::Diagonal);
        o.latent_dim = 0;
        assert!(init_model(&specs(), &o).is_err());
        let mut o = options(CovarianceMode::Diagonal);
        o.latent_init = LatentInit::Given(Matrix::zeros(2, 2));
        assert!(init_model(&specs(), &o).is_err());
    }
}
