//! The stochastic evidence lower bound
//! `L = E_q[log p(Y | F)] − Σ_q KL(q(x_q) ‖ p(x_q)) − Σ_d KL(q(u_d) ‖ p(u_d))`.
//!
//! `K_zz` and both KL terms live on one shared tape. Each Monte Carlo sample
//! gets its own tape that treats the Cholesky factor of `K_zz` as an input;
//! the per-sample adjoints of that factor are averaged in sample order and
//! pushed back through the shared tape. Samples are independent, so they
//! may run concurrently without changing a single bit of the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Matrix, NodeId, Tape};
use crate::data::ObservationMatrix;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, ExecMode};
use crate::kernel::KernelNodes;
use crate::likelihoods::column_log_prob;
use crate::model::{ModelGradients, ModelState};
use crate::variational::{kl_q_p_u, kl_q_p_x, sample_u, sample_x, standard_normal, UNodes, XNodes};

/// Conditional variances in `[-NEGATIVE_VARIANCE_TOLERANCE, 0)` are rounding
/// noise and clamp to zero; anything lower is a numerical failure.
pub const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-8;

/// Standard normal noise for one Monte Carlo sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    /// N×Q, for `q(X)`.
    pub x: Matrix,
    /// M×D_f, for `q(U)`.
    pub u: Matrix,
    /// N×D_f, for `p(F | U, X)`.
    pub f: Matrix,
}

impl Draws {
    pub fn zeros(model: &ModelState) -> Self {
        let (n, q, m, d) = dims(model);
        Self {
            x: Matrix::zeros(n, q),
            u: Matrix::zeros(m, d),
            f: Matrix::zeros(n, d),
        }
    }

    pub fn sample(model: &ModelState, seed: u64) -> Self {
        let (n, q, m, d) = dims(model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            x: standard_normal(n, q, &mut rng),
            u: standard_normal(m, d, &mut rng),
            f: standard_normal(n, d, &mut rng),
        }
    }
}

fn dims(model: &ModelState) -> (usize, usize, usize, usize) {
    (
        model.points(),
        model.latent_dim(),
        model.inducing_points(),
        model.u.channels(),
    )
}

/// `samples` independent draws, sample `t` seeded from `(seed, t)`.
pub fn draw_samples(model: &ModelState, samples: usize, seed: u64) -> Vec<Draws> {
    (0..samples)
        .map(|t| Draws::sample(model, derive_seed(&[seed, t as u64])))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Terms {
    #[default]
    Full,
    /// Only the two KL penalties.
    KlOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub kl_x: f64,
    pub kl_u: f64,
    pub expected_loglik: f64,
    pub samples: usize,
}

/// Leaf handles for every model tensor, in [`ModelState::tensors`] order.
struct ModelNodes {
    kernel: KernelNodes,
    x: XNodes,
    u: UNodes,
    noise: Vec<Option<NodeId>>,
}

impl ModelNodes {
    fn record(tape: &mut Tape, model: &ModelState) -> Result<Self> {
        let kernel = KernelNodes::record(tape, &model.kernel);
        let x = XNodes::record(tape, &model.x)?;
        let u = UNodes::record(tape, &model.u)?;
        let noise = model
            .log_noise
            .iter()
            .map(|v| v.map(|lv| tape.leaf(Matrix::scalar(lv))))
            .collect();
        Ok(Self {
            kernel,
            x,
            u,
            noise,
        })
    }

    fn leaves(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.kernel.log_variance,
            self.kernel.log_inv_lengthscales,
            self.x.mean,
        ];
        out.extend(&self.x.raw);
        out.push(self.u.inducing);
        out.push(self.u.mean);
        out.extend(&self.u.raw);
        out.extend(self.noise.iter().flatten());
        out
    }

    fn collect(&self, grads: &mut Gradients) -> ModelGradients {
        ModelGradients {
            tensors: self
                .leaves()
                .into_iter()
                .map(|id| grads.take(id).into_vec())
                .collect(),
        }
    }
}

/// Marginals of `p(f_d | u_d, X)` sampled with their diagonal variances:
/// mean `K_xz K_zz⁻¹ u_d`, variance `k(x_n, x_n) − k_nᵀ K_zz⁻¹ k_n`.
pub fn conditional_f(
    tape: &mut Tape,
    kernel: &KernelNodes,
    x: NodeId,
    z: NodeId,
    kzz_chol: NodeId,
    u: NodeId,
    eps_f: &Matrix,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let d = tape.value(u).cols();
    if eps_f.shape() != (n, d) {
        return Err(Error::shape("conditional_f", (n, d), eps_f.shape()));
    }
    let kzx = kernel.gram(tape, z, x)?;
    let a = tape.trisolve(kzz_chol, kzx)?;
    let b = tape.trisolve(kzz_chol, u)?;
    let at = tape.transpose(a);
    let mean = tape.matmul(at, b)?;
    let a_sq = tape.square(a);
    let explained = tape.sum_cols(a_sq);
    let explained = tape.transpose(explained);
    let neg = tape.neg(explained);
    let prior_var = tape.exp(kernel.log_variance);
    let var = tape.add_scalar(neg, prior_var)?;
    if let Some((point, &value)) = tape
        .value(var)
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < -NEGATIVE_VARIANCE_TOLERANCE)
    {
        return Err(Error::NegativeVariance { point, value });
    }
    let sd = tape.sqrt_clamped(var);
    let e = tape.constant(eps_f.clone());
    let noise = tape.scale_rows(sd, e)?;
    tape.add(mean, noise)
}

/// Records `Σ_n Σ_d log p(y_nd | f_nd)` over observed entries for one sample.
fn sample_loglik(
    tape: &mut Tape,
    model: &ModelState,
    nodes: &ModelNodes,
    obs: &ObservationMatrix,
    kzz_chol: NodeId,
    draws: &Draws,
) -> Result<NodeId> {
    let x = sample_x(tape, &nodes.x, &draws.x)?;
    let u = sample_u(tape, &nodes.u, &draws.u)?;
    let f = conditional_f(
        tape,
        &nodes.kernel,
        x,
        nodes.u.inducing,
        kzz_chol,
        u,
        &draws.f,
    )?;
    let channels = model.channel_map();
    let mut total = tape.scalar_constant(0.0);
    for (c, spec) in model.specs.iter().enumerate() {
        let range = channels.range(c);
        let block = tape.columns(f, range.start, range.end)?;
        let lp = column_log_prob(
            tape,
            spec,
            block,
            &obs.column_values(c),
            &obs.column_mask(c),
            nodes.noise[c],
        )?;
        total = tape.add(total, lp)?;
    }
    Ok(total)
}

struct SampleResult {
    loglik: f64,
    grads: Option<(ModelGradients, Matrix)>,
}

fn run_sample(
    model: &ModelState,
    obs: &ObservationMatrix,
    kzz_chol: &Matrix,
    draws: &Draws,
    with_grad: bool,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let nodes = ModelNodes::record(&mut tape, model)?;
    let l = tape.leaf(kzz_chol.clone());
    let root = sample_loglik(&mut tape, model, &nodes, obs, l, draws)?;
    let loglik = tape.value(root).item();
    let grads = if with_grad {
        let mut g = tape.backward(root)?;
        let gl = g.take(l);
        Some((nodes.collect(&mut g), gl))
    } else {
        None
    };
    Ok(SampleResult { loglik, grads })
}

fn check_inputs(
    model: &ModelState,
    obs: &ObservationMatrix,
    draws: &[Draws],
    terms: Terms,
) -> Result<()> {
    if terms == Terms::Full && draws.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one Monte Carlo sample".into(),
        ));
    }
    if obs.rows() != model.points() || obs.cols() != model.specs.len() {
        return Err(Error::shape(
            "elbo_data",
            (model.points(), model.specs.len()),
            (obs.rows(), obs.cols()),
        ));
    }
    model.check()
}

fn evaluate(
    model: &ModelState,
    obs: &ObservationMatrix,
    draws: &[Draws],
    terms: Terms,
    exec: ExecMode,
    with_grad: bool,
) -> Result<(ElboEstimate, Option<ModelGradients>)> {
    check_inputs(model, obs, draws, terms)?;
    let mut shared = Tape::new();
    let nodes = ModelNodes::record(&mut shared, model)?;
    let kzz = nodes
        .kernel
        .gram(&mut shared, nodes.u.inducing, nodes.u.inducing)?;
    let l = shared.cholesky_jittered(kzz)?;
    let kl_x = kl_q_p_x(&mut shared, &nodes.x)?;
    let kl_u = kl_q_p_u(&mut shared, &nodes.u, l)?;
    let kl = shared.add(kl_x, kl_u)?;

    let samples = match terms {
        Terms::Full => draws.len(),
        Terms::KlOnly => 0,
    };
    let lv = shared.value(l).clone();
    let results = exec.map(samples, |t| {
        run_sample(model, obs, &lv, &draws[t], with_grad)
    });

    let inv_t = if samples > 0 {
        1.0 / samples as f64
    } else {
        0.0
    };
    let mut loglik = 0.0;
    let mut grads = ModelGradients::zeros_like(model);
    let mut gl = Matrix::zeros(lv.rows(), lv.cols());
    for r in results {
        let r = r?;
        loglik += r.loglik;
        if let Some((g, g_l)) = r.grads {
            grads.add_assign(&g);
            gl.add_assign(&g_l);
        }
    }
    loglik *= inv_t;
    let estimate = ElboEstimate {
        value: loglik - shared.value(kl_x).item() - shared.value(kl_u).item(),
        kl_x: shared.value(kl_x).item(),
        kl_u: shared.value(kl_u).item(),
        expected_loglik: loglik,
        samples,
    };
    if !with_grad {
        return Ok((estimate, None));
    }
    grads.scale(inv_t);
    let mut shared_grads =
        shared.backward_seeded(&[(kl, Matrix::scalar(-1.0)), (l, gl.scale(inv_t))]);
    grads.add_assign(&nodes.collect(&mut shared_grads));
    Ok((estimate, Some(grads)))
}

/// ELBO value for the given noise draws.
pub fn elbo(
    model: &ModelState,
    obs: &ObservationMatrix,
    draws: &[Draws],
    terms: Terms,
    exec: ExecMode,
) -> Result<ElboEstimate> {
    Ok(evaluate(model, obs, draws, terms, exec, false)?.0)
}

/// ELBO value and its gradient with respect to every model tensor.
pub fn elbo_with_gradients(
    model: &ModelState,
    obs: &ObservationMatrix,
    draws: &[Draws],
    terms: Terms,
    exec: ExecMode,
) -> Result<(ElboEstimate, ModelGradients)> {
    let (e, g) = evaluate(model, obs, draws, terms, exec, true)?;
    Ok((e, g.expect("gradients requested")))
}

/// `(1/T) Σ_t Σ_{observed (n,d)} log p(y_nd | f_nd^t)`.
pub fn mc_expected_loglik(
    model: &ModelState,
    obs: &ObservationMatrix,
    draws: &[Draws],
    exec: ExecMode,
) -> Result<f64> {
    Ok(elbo(model, obs, draws, Terms::Full, exec)?.expected_loglik)
}
