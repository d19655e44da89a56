//! The variational family `q(X) q(U)`, reparameterized samplers and the
//! closed-form KL penalties against the priors `p(x_q) = N(0, I)` and
//! `p(u_d) = N(0, K_zz)`.
//!
//! Covariance factors are lower triangular with the diagonal stored in log
//! space (`Tape::tri_factor`), so positivity holds by construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernel::{KernelNodes, KernelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(CovarianceMode::Diagonal),
            "full" => Ok(CovarianceMode::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown covariance mode {other:?}"
            ))),
        }
    }
}

/// Per-latent-dimension covariance of `q(X)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum XFactor {
    /// N×Q log standard deviations.
    Diagonal { log_std: Matrix },
    /// One N×N raw triangular factor per latent dimension.
    Full { raw: Vec<Matrix> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalX {
    pub mean: Matrix,
    pub factor: XFactor,
}

impl VariationalX {
    /// Given means, identity covariances.
    pub fn new(mean: Matrix, mode: CovarianceMode) -> Self {
        let (n, q) = mean.shape();
        let factor = match mode {
            CovarianceMode::Diagonal => XFactor::Diagonal {
                log_std: Matrix::zeros(n, q),
            },
            CovarianceMode::Full => XFactor::Full {
                raw: vec![Matrix::zeros(n, n); q],
            },
        };
        Self { mean, factor }
    }

    pub fn points(&self) -> usize {
        self.mean.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn mode(&self) -> CovarianceMode {
        match self.factor {
            XFactor::Diagonal { .. } => CovarianceMode::Diagonal,
            XFactor::Full { .. } => CovarianceMode::Full,
        }
    }

    /// Σ_q^X for latent dimension `q`.
    pub fn covariance(&self, q: usize) -> Matrix {
        match &self.factor {
            XFactor::Diagonal { log_std } => {
                let n = self.points();
                Matrix::from_fn(n, n, |i, j| {
                    if i == j {
                        (2.0 * log_std[(i, q)]).exp()
                    } else {
                        0.0
                    }
                })
            }
            XFactor::Full { raw } => {
                let l = triangular(&raw[q]);
                l.matmul_t(&l)
            }
        }
    }

    /// Marginal variances, N×Q.
    pub fn marginal_variances(&self) -> Matrix {
        match &self.factor {
            XFactor::Diagonal { log_std } => log_std.map(|s| (2.0 * s).exp()),
            XFactor::Full { raw } => {
                let mut out = Matrix::zeros(self.points(), self.latent_dim());
                for (q, r) in raw.iter().enumerate() {
                    let l = triangular(r);
                    for i in 0..self.points() {
                        out[(i, q)] = l.row(i).iter().map(|v| v * v).sum();
                    }
                }
                out
            }
        }
    }

    fn check(&self) -> Result<()> {
        let (n, q) = self.mean.shape();
        match &self.factor {
            XFactor::Diagonal { log_std } if log_std.shape() != (n, q) => {
                Err(Error::shape("variational_x", (n, q), log_std.shape()))
            }
            XFactor::Full { raw } if raw.len() != q || raw.iter().any(|r| r.shape() != (n, n)) => {
                Err(Error::shape("variational_x", (n, q), (raw.len(), n)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalU {
    /// Inducing inputs, M×Q.
    pub inducing: Matrix,
    /// M×D_f means, one column per function channel.
    pub mean: Matrix,
    /// One M×M raw triangular factor per channel.
    pub raw_factors: Vec<Matrix>,
}

impl VariationalU {
    /// Given inducing inputs and means, identity covariances.
    pub fn new(inducing: Matrix, mean: Matrix) -> Self {
        let m = inducing.rows();
        let raw_factors = vec![Matrix::zeros(m, m); mean.cols()];
        Self {
            inducing,
            mean,
            raw_factors,
        }
    }

    pub fn inducing_points(&self) -> usize {
        self.inducing.rows()
    }

    pub fn channels(&self) -> usize {
        self.mean.cols()
    }

    pub fn factor(&self, d: usize) -> Matrix {
        triangular(&self.raw_factors[d])
    }

    pub fn covariance(&self, d: usize) -> Matrix {
        let l = self.factor(d);
        l.matmul_t(&l)
    }

    fn check(&self) -> Result<()> {
        let m = self.inducing.rows();
        if self.mean.rows() != m {
            return Err(Error::shape(
                "variational_u",
                self.inducing.shape(),
                self.mean.shape(),
            ));
        }
        if self.raw_factors.len() != self.mean.cols()
            || self.raw_factors.iter().any(|r| r.shape() != (m, m))
        {
            return Err(Error::shape(
                "variational_u",
                (m, m),
                (self.raw_factors.len(), m),
            ));
        }
        Ok(())
    }
}

/// Lower triangle of `raw` with an exponentiated diagonal.
fn triangular(raw: &Matrix) -> Matrix {
    Matrix::from_fn(raw.rows(), raw.cols(), |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[(i, j)],
        std::cmp::Ordering::Equal => raw[(i, i)].exp(),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Standard normal draws of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    m
}

#[derive(Clone, Debug)]
pub enum XFactorNodes {
    Diagonal(NodeId),
    /// Already-triangular factor nodes, one per latent dimension.
    Full(Vec<NodeId>),
}

/// Tape handles for `q(X)`; `raw_*` are the leaves gradients are read from.
#[derive(Clone, Debug)]
pub struct XNodes {
    pub mean: NodeId,
    pub factor: XFactorNodes,
    pub raw: Vec<NodeId>,
}

impl XNodes {
    pub fn record(tape: &mut Tape, vx: &VariationalX) -> Result<Self> {
        vx.check()?;
        let mean = tape.leaf(vx.mean.clone());
        Ok(match &vx.factor {
            XFactor::Diagonal { log_std } => {
                let ls = tape.leaf(log_std.clone());
                Self {
                    mean,
                    factor: XFactorNodes::Diagonal(ls),
                    raw: vec![ls],
                }
            }
            XFactor::Full { raw } => {
                let leaves: Vec<NodeId> = raw.iter().map(|r| tape.leaf(r.clone())).collect();
                let factors = leaves
                    .iter()
                    .map(|&r| tape.tri_factor(r))
                    .collect::<Result<_>>()?;
                Self {
                    mean,
                    factor: XFactorNodes::Full(factors),
                    raw: leaves,
                }
            }
        })
    }
}

/// Tape handles for `q(U)`.
#[derive(Clone, Debug)]
pub struct UNodes {
    pub inducing: NodeId,
    pub mean: NodeId,
    pub raw: Vec<NodeId>,
    pub factors: Vec<NodeId>,
}

impl UNodes {
    pub fn record(tape: &mut Tape, vu: &VariationalU) -> Result<Self> {
        vu.check()?;
        let inducing = tape.leaf(vu.inducing.clone());
        let mean = tape.leaf(vu.mean.clone());
        let raw: Vec<NodeId> = vu
            .raw_factors
            .iter()
            .map(|r| tape.leaf(r.clone()))
            .collect();
        let factors = raw
            .iter()
            .map(|&r| tape.tri_factor(r))
            .collect::<Result<_>>()?;
        Ok(Self {
            inducing,
            mean,
            raw,
            factors,
        })
    }
}

/// `X = μ + L ε`, column by column.
pub fn sample_x(tape: &mut Tape, nodes: &XNodes, eps: &Matrix) -> Result<NodeId> {
    let shape = tape.value(nodes.mean).shape();
    if eps.shape() != shape {
        return Err(Error::shape("sample_x", shape, eps.shape()));
    }
    let e = tape.constant(eps.clone());
    let noise = match &nodes.factor {
        XFactorNodes::Diagonal(ls) => {
            let sd = tape.exp(*ls);
            tape.mul(sd, e)?
        }
        XFactorNodes::Full(factors) => {
            let mut cols = Vec::with_capacity(factors.len());
            for (q, &l) in factors.iter().enumerate() {
                let eq = tape.columns(e, q, q + 1)?;
                cols.push(tape.matmul(l, eq)?);
            }
            tape.hstack(&cols)?
        }
    };
    tape.add(nodes.mean, noise)
}

/// `U = μ^U + L_d ε_d` for every channel d.
pub fn sample_u(tape: &mut Tape, nodes: &UNodes, eps: &Matrix) -> Result<NodeId> {
    let shape = tape.value(nodes.mean).shape();
    if eps.shape() != shape {
        return Err(Error::shape("sample_u", shape, eps.shape()));
    }
    let e = tape.constant(eps.clone());
    let mut cols = Vec::with_capacity(nodes.factors.len());
    for (d, &l) in nodes.factors.iter().enumerate() {
        let ed = tape.columns(e, d, d + 1)?;
        cols.push(tape.matmul(l, ed)?);
    }
    let noise = tape.hstack(&cols)?;
    tape.add(nodes.mean, noise)
}

/// `Σ_q KL(q(x_q) ‖ N(0, I))`.
pub fn kl_q_p_x(tape: &mut Tape, nodes: &XNodes) -> Result<NodeId> {
    let (n, q) = tape.value(nodes.mean).shape();
    let mean_sq = tape.square(nodes.mean);
    let maha = tape.sum(mean_sq);
    let (trace, logdet) = match &nodes.factor {
        XFactorNodes::Diagonal(ls) => {
            let two_ls = tape.scale(*ls, 2.0);
            let var = tape.exp(two_ls);
            (tape.sum(var), tape.sum(two_ls))
        }
        XFactorNodes::Full(factors) => {
            let mut trace = tape.scalar_constant(0.0);
            let mut logdet = tape.scalar_constant(0.0);
            for &l in factors {
                let sq = tape.square(l);
                let t = tape.sum(sq);
                trace = tape.add(trace, t)?;
                let ld = tape.logdet_from_cholesky(l);
                logdet = tape.add(logdet, ld)?;
            }
            (trace, logdet)
        }
    };
    let total = tape.add(trace, maha)?;
    let total = tape.sub(total, logdet)?;
    let total = tape.offset(total, -((n * q) as f64));
    Ok(tape.scale(total, 0.5))
}

/// `Σ_d KL(q(u_d) ‖ N(0, K_zz))` given the Cholesky factor of `K_zz`.
pub fn kl_q_p_u(tape: &mut Tape, nodes: &UNodes, kzz_chol: NodeId) -> Result<NodeId> {
    let (m, channels) = tape.value(nodes.mean).shape();
    if channels == 0 {
        return Ok(tape.scalar_constant(0.0));
    }
    let stacked = tape.hstack(&nodes.factors)?;
    let a = tape.trisolve(kzz_chol, stacked)?;
    let a_sq = tape.square(a);
    let trace = tape.sum(a_sq);
    let b = tape.trisolve(kzz_chol, nodes.mean)?;
    let b_sq = tape.square(b);
    let maha = tape.sum(b_sq);
    let logdet_k = tape.logdet_from_cholesky(kzz_chol);
    let logdet_k = tape.scale(logdet_k, channels as f64);
    let mut logdet_s = tape.scalar_constant(0.0);
    for &l in &nodes.factors {
        let ld = tape.logdet_from_cholesky(l);
        logdet_s = tape.add(logdet_s, ld)?;
    }
    let total = tape.add(trace, maha)?;
    let total = tape.add(total, logdet_k)?;
    let total = tape.sub(total, logdet_s)?;
    let total = tape.offset(total, -((m * channels) as f64));
    Ok(tape.scale(total, 0.5))
}

/// Value of `Σ_q KL(q(x_q) ‖ p(x_q))`.
pub fn kl_x_value(vx: &VariationalX) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = XNodes::record(&mut tape, vx)?;
    let kl = kl_q_p_x(&mut tape, &nodes)?;
    Ok(tape.value(kl).item())
}

/// Value of `Σ_d KL(q(u_d) ‖ p(u_d))` under kernel `kernel`.
pub fn kl_u_value(vu: &VariationalU, kernel: &KernelParams) -> Result<f64> {
    let mut tape = Tape::new();
    let k = KernelNodes::record(&mut tape, kernel);
    let nodes = UNodes::record(&mut tape, vu)?;
    let kzz = k.gram(&mut tape, nodes.inducing, nodes.inducing)?;
    let l = tape.cholesky_jittered(kzz)?;
    let kl = kl_q_p_u(&mut tape, &nodes, l)?;
    Ok(tape.value(kl).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vx(n: usize, q: usize, mode: CovarianceMode, rng: &mut ChaCha8Rng) -> VariationalX {
        let mut vx = VariationalX::new(standard_normal(n, q, rng), mode);
        match &mut vx.factor {
            XFactor::Diagonal { log_std } => *log_std = standard_normal(n, q, rng).scale(0.4),
            XFactor::Full { raw } => {
                for r in raw {
                    *r = standard_normal(n, n, rng).scale(0.4);
                }
            }
        }
        vx
    }

    fn random_vu(m: usize, q: usize, d: usize, rng: &mut ChaCha8Rng) -> VariationalU {
        let mut vu = VariationalU::new(standard_normal(m, q, rng), standard_normal(m, d, rng));
        for r in &mut vu.raw_factors {
            *r = standard_normal(m, m, rng).scale(0.4);
        }
        vu
    }

    fn x_value(vx: &VariationalX, eps: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let nodes = XNodes::record(&mut tape, vx).unwrap();
        let x = sample_x(&mut tape, &nodes, eps).unwrap();
        tape.value(x).clone()
    }

    fn u_value(vu: &VariationalU, eps: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let nodes = UNodes::record(&mut tape, vu).unwrap();
        let u = sample_u(&mut tape, &nodes, eps).unwrap();
        tape.value(u).clone()
    }

    /// Log density of `N(mean, cov)` via nalgebra.
    fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &Matrix) -> f64 {
        let n = x.len();
        let c = nalgebra::DMatrix::from_fn(n, n, |i, j| cov[(i, j)]);
        let chol = nalgebra::Cholesky::new(c).unwrap();
        let r = nalgebra::DVector::from_fn(n, |i, _| x[i] - mean[i]);
        let sol = chol.solve(&r);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (r.dot(&sol) + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    fn mean_and_se(samples: &[f64]) -> (f64, f64) {
        let n = samples.len() as f64;
        let m = samples.iter().sum::<f64>() / n;
        let v = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [CovarianceMode::Diagonal, CovarianceMode::Full] {
            let vx = random_vx(4, 2, mode, &mut rng);
            assert_eq!(x_value(&vx, &Matrix::zeros(4, 2)), vx.mean);
        }
        let vu = random_vu(3, 2, 2, &mut rng);
        assert_eq!(u_value(&vu, &Matrix::zeros(3, 2)), vu.mean);
    }

    #[test]
    fn identity_factor_adds_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vu = VariationalU::new(
            standard_normal(3, 1, &mut rng),
            standard_normal(3, 2, &mut rng),
        );
        let eps = standard_normal(3, 2, &mut rng);
        assert_eq!(u_value(&vu, &eps), vu.mean.add(&eps));
    }

    #[test]
    fn vanishing_diagonal_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vx = VariationalX::new(standard_normal(3, 2, &mut rng), CovarianceMode::Diagonal);
        vx.factor = XFactor::Diagonal {
            log_std: Matrix::filled(3, 2, -800.0),
        };
        let eps = standard_normal(3, 2, &mut rng);
        assert_eq!(x_value(&vx, &eps), vx.mean);
    }

    #[test]
    fn sample_covariance_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vx = random_vx(3, 2, CovarianceMode::Full, &mut rng);
        let vu = random_vu(3, 1, 2, &mut rng);
        let draws = 100_000;
        let target_x = vx.covariance(1);
        let target_u = vu.covariance(0);
        let mut xs = Vec::with_capacity(draws);
        let mut us = Vec::with_capacity(draws);
        let lx = match &vx.factor {
            XFactor::Full { raw } => triangular(&raw[1]),
            _ => unreachable!(),
        };
        let lu = vu.factor(0);
        // A single taped draw per iteration would be slow; spot-check the
        // taped sampler against the plain factor product, then draw in bulk.
        let eps = standard_normal(3, 2, &mut rng);
        let taped = x_value(&vx, &eps);
        let plain = lx.matmul(&Matrix::column_vector(&eps.col(1))).unwrap();
        for i in 0..3 {
            assert!((taped[(i, 1)] - vx.mean[(i, 1)] - plain[(i, 0)]).abs() < 1e-12);
        }
        for _ in 0..draws {
            let e = standard_normal(3, 1, &mut rng);
            xs.push(lx.matmul(&e).unwrap());
            us.push(lu.matmul(&e).unwrap());
        }
        for (samples, target) in [(&xs, &target_x), (&us, &target_u)] {
            for i in 0..3 {
                for j in 0..3 {
                    let c =
                        samples.iter().map(|s| s[(i, 0)] * s[(j, 0)]).sum::<f64>() / draws as f64;
                    assert!(
                        (c - target[(i, j)]).abs() < 0.02,
                        "({i},{j}) {c} vs {}",
                        target[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn kl_at_prior_is_zero() {
        let vx = VariationalX::new(Matrix::zeros(4, 3), CovarianceMode::Diagonal);
        assert!(kl_x_value(&vx).unwrap().abs() < 1e-10);
        let vx = VariationalX::new(Matrix::zeros(4, 3), CovarianceMode::Full);
        assert!(kl_x_value(&vx).unwrap().abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = KernelParams::new(1.3, &[0.7, 2.0]);
        let z = standard_normal(3, 2, &mut rng);
        let kzz = kernel.gram_value(&z, &z).unwrap();
        // q(u) = p(u) exactly requires the jittered factor used by the KL.
        let mean_diag = kzz.diag().iter().sum::<f64>() / 3.0;
        let mut jittered = kzz.clone();
        for i in 0..3 {
            jittered[(i, i)] += 1e-6 * mean_diag;
        }
        let l = jittered.cholesky().unwrap();
        let mut vu = VariationalU::new(z, Matrix::zeros(3, 2));
        for r in &mut vu.raw_factors {
            *r = Matrix::from_fn(3, 3, |i, j| if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
        assert!(kl_u_value(&vu, &kernel).unwrap().abs() < 1e-10);
    }

    #[test]
    fn one_dimensional_formula() {
        let vx = VariationalX::new(Matrix::scalar(2.0), CovarianceMode::Diagonal);
        assert!((kl_x_value(&vx).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_kl_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vx = random_vx(5, 3, CovarianceMode::Diagonal, &mut rng);
        let XFactor::Diagonal { log_std } = &vx.factor else {
            unreachable!()
        };
        let mut sum = 0.0;
        for i in 0..5 {
            for q in 0..3 {
                let m = vx.mean[(i, q)];
                let s2 = (2.0 * log_std[(i, q)]).exp();
                sum += 0.5 * (s2 + m * m - 1.0 - s2.ln());
            }
        }
        assert!((kl_x_value(&vx).unwrap() - sum).abs() < 1e-10);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 200_000;
        let vx = random_vx(3, 1, CovarianceMode::Full, &mut rng);
        let cov = vx.covariance(0);
        let prior = Matrix::identity(3);
        let l = triangular(match &vx.factor {
            XFactor::Full { raw } => &raw[0],
            _ => unreachable!(),
        });
        let mean = vx.mean.col(0);
        let samples: Vec<f64> = (0..draws)
            .map(|_| {
                let e = standard_normal(3, 1, &mut rng);
                let x: Vec<f64> = l
                    .matmul(&e)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| a + b)
                    .collect();
                mvn_logpdf(&x, &mean, &cov) - mvn_logpdf(&x, &[0.0; 3], &prior)
            })
            .collect();
        let (m, se) = mean_and_se(&samples);
        let kl = kl_x_value(&vx).unwrap();
        assert!((m - kl).abs() < 3.0 * se, "mc {m} ± {se}, closed {kl}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kl_nonnegative(seed in 0u64..10_000, n in 1usize..5, m in 1usize..5, full in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if full { CovarianceMode::Full } else { CovarianceMode::Diagonal };
            let vx = random_vx(n, 2, mode, &mut rng);
            prop_assert!(kl_x_value(&vx).unwrap() >= -1e-10);
            let vu = random_vu(m, 2, 2, &mut rng);
            prop_assert!(kl_u_value(&vu, &KernelParams::new(1.0, &[0.5, 0.5])).unwrap() >= -1e-10);
        }

        #[test]
        fn antithetic_draws_average_to_mean(seed in 0u64..10_000, full in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if full { CovarianceMode::Full } else { CovarianceMode::Diagonal };
            let vx = random_vx(4, 2, mode, &mut rng);
            let eps = standard_normal(4, 2, &mut rng);
            let avg = x_value(&vx, &eps).add(&x_value(&vx, &eps.scale(-1.0))).scale(0.5);
            prop_assert!(avg.sub(&vx.mean).max_abs() < 1e-12);
            let vu = random_vu(3, 2, 3, &mut rng);
            let eps = standard_normal(3, 3, &mut rng);
            let avg = u_value(&vu, &eps).add(&u_value(&vu, &eps.scale(-1.0))).scale(0.5);
            prop_assert!(avg.sub(&vu.mean).max_abs() < 1e-12);
        }
    }
}
