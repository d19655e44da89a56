use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetSchema, ObservationMatrix};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::likelihoods::build_channel_map;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub points: usize,
    pub kernel: KernelParams,
    /// Observation noise of gaussian columns.
    pub noise_variance: f64,
    pub seed: u64,
}

/// Exact ancestral sampling from the generative model: `X ~ N(0, I)`, every
/// latent channel `f_d ~ GP(0, k)` evaluated jointly at all N points, then
/// `y_nd ~ Likelihood_d(h_d(f_nd))`. Returns the fully observed data and the
/// true latent inputs.
pub fn generate_synthetic(
    schema: &DatasetSchema,
    config: &SyntheticConfig,
) -> Result<(ObservationMatrix, Matrix)> {
    let n = config.points;
    let q = config.kernel.latent_dim();
    if n == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs at least one point".into(),
        ));
    }
    if q == 0 {
        return Err(Error::InvalidConfig(
            "latent dimension must be at least 1".into(),
        ));
    }
    if !(config.noise_variance >= 0.0) {
        return Err(Error::InvalidConfig(
            "noise variance must be nonnegative".into(),
        ));
    }
    let channels = build_channel_map(schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let x = Matrix::from_fn(n, q, |_, _| normal());
    let eps = Matrix::from_fn(n, channels.total(), |_, _| normal());
    let l = config.kernel.gram_value(&x, &x)?.cholesky_jittered()?;
    let f = l.matmul_unchecked(&eps);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut values = Matrix::zeros(n, schema.len());
    for r in 0..n {
        for (c, col) in schema.columns().iter().enumerate() {
            let range = channels.range(c);
            let fr = &f.row(r)[range];
            values[(r, c)] = col
                .likelihood
                .sample_observation(fr, config.noise_variance, &mut rng);
        }
    }
    Ok((ObservationMatrix::fully_observed(values), x))
}
