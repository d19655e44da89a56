//! RMSProp on the negative ELBO, with a smoothed-trace stopping rule and
//! resumable checkpoints.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::{DatasetSchema, Holdout, ObservationMatrix, Standardization};
use crate::elbo::{draw_samples, elbo_with_gradients, ElboEstimate, Terms};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, ExecMode};
use crate::inference::{predict_entries, PredictiveConfig, PredictiveSummary};
use crate::model::{ModelGradients, ModelState};
use crate::variational::CovarianceMode;

pub use crate::model::{init_model, InitOptions, LatentInit};

pub const DEFAULT_SAMPLES: usize = 10;
pub const DEFAULT_INDUCING: usize = 50;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsProp {
    /// One update of `params` against loss gradients `grads`. Frozen tensors
    /// are skipped. Nothing is modified if any gradient is non-finite.
    pub fn step(
        &self,
        params: &mut [&mut [f64]],
        accumulators: &mut [Vec<f64>],
        grads: &[Vec<f64>],
        frozen: &[bool],
        names: &[String],
    ) -> Result<()> {
        if let Some(t) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient {
                tensor: names.get(t).cloned().unwrap_or_else(|| t.to_string()),
            });
        }
        for (t, ((p, acc), g)) in params
            .iter_mut()
            .zip(accumulators.iter_mut())
            .zip(grads)
            .enumerate()
        {
            if frozen.get(t).copied().unwrap_or(false) {
                continue;
            }
            for ((pi, ai), &gi) in p.iter_mut().zip(acc.iter_mut()).zip(g) {
                *ai = self.decay * *ai + (1.0 - self.decay) * gi * gi;
                *pi -= self.learning_rate * gi / (ai.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub samples: usize,
    pub optimizer: RmsProp,
    /// Total step budget; a resumed run continues up to this count.
    pub max_steps: u64,
    /// Moving-average length applied to the raw ELBO trace.
    pub smoothing_window: usize,
    /// Steps over which the smoothed ELBO must improve.
    pub patience: usize,
    /// Relative improvement below which training stops.
    pub rel_tol: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
    #[serde(skip)]
    pub terms: Terms,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            optimizer: RmsProp::default(),
            max_steps: 20_000,
            smoothing_window: 100,
            patience: 500,
            rel_tol: 1e-4,
            seed: 0,
            exec: ExecMode::default(),
            terms: Terms::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be at least 1".into()));
        }
        if self.smoothing_window == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "smoothing window and patience must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.decay) || !(o.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad optimizer settings {o:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub accumulators: Vec<Vec<f64>>,
    /// Last `smoothing_window` raw ELBO values.
    pub recent: VecDeque<f64>,
    /// Last `patience + 1` smoothed values.
    pub smoothed: VecDeque<f64>,
    pub seed: u64,
    pub rejected_steps: u64,
    pub converged: bool,
}

impl TrainState {
    pub fn new(model: &ModelState, seed: u64) -> Self {
        Self {
            step: 0,
            accumulators: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            recent: VecDeque::new(),
            smoothed: VecDeque::new(),
            seed,
            rejected_steps: 0,
            converged: false,
        }
    }

    /// Records one ELBO value; returns the smoothed value once the window is full.
    fn observe(&mut self, value: f64, config: &TrainConfig) -> Option<f64> {
        self.recent.push_back(value);
        if self.recent.len() > config.smoothing_window {
            self.recent.pop_front();
        }
        if self.recent.len() < config.smoothing_window {
            return None;
        }
        let s = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.smoothed.push_back(s);
        if self.smoothed.len() > config.patience + 1 {
            self.smoothed.pop_front();
        }
        Some(s)
    }

    fn has_converged(&self, config: &TrainConfig) -> bool {
        if self.smoothed.len() < config.patience + 1 {
            return false;
        }
        let old = self.smoothed[0];
        let new = self.smoothed[config.patience];
        new - old < config.rel_tol * old.abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    pub elbo: f64,
    pub kl_x: f64,
    pub kl_u: f64,
    pub expected_loglik: f64,
    /// Moving average, once the window has filled.
    pub smoothed: Option<f64>,
}

impl TraceEntry {
    fn new(step: u64, e: &ElboEstimate, smoothed: Option<f64>) -> Self {
        Self {
            step,
            elbo: e.value,
            kl_x: e.kl_x,
            kl_u: e.kl_u,
            expected_loglik: e.expected_loglik,
            smoothed,
        }
    }
}

/// Runs RMSProp from `state` until convergence or `config.max_steps`.
/// Each step draws fresh noise seeded by `(seed, step)`, so a resumed run
/// replays exactly what an uninterrupted one would have done.
pub fn train(
    model: &mut ModelState,
    state: &mut TrainState,
    obs: &ObservationMatrix,
    config: &TrainConfig,
    mut observer: impl FnMut(&TraceEntry),
) -> Result<Vec<TraceEntry>> {
    config.validate()?;
    model.check()?;
    if state.accumulators.len() != model.tensors().len() {
        return Err(Error::InvalidConfig(
            "training state does not match the model".into(),
        ));
    }
    let names = model.tensor_names();
    let frozen = model.frozen();
    let mut trace = Vec::new();
    while state.step < config.max_steps && !state.converged {
        let step = state.step;
        let draws = draw_samples(model, config.samples, derive_seed(&[state.seed, step]));
        let (estimate, mut grads) =
            elbo_with_gradients(model, obs, &draws, config.terms, config.exec)?;
        state.step += 1;
        if !estimate.value.is_finite() || !grads.is_finite() {
            let tensor = grads
                .first_non_finite()
                .map_or("elbo".to_string(), |t| names[t].clone());
            log::warn!("step {step}: non-finite gradient in {tensor}; step skipped");
            state.rejected_steps += 1;
            continue;
        }
        grads.scale(-1.0);
        let mut params = model.tensors_mut();
        config.optimizer.step(
            &mut params,
            &mut state.accumulators,
            &grads.tensors,
            &frozen,
            &names,
        )?;
        debug_assert!(model.is_finite());
        let smoothed = state.observe(estimate.value, config);
        let entry = TraceEntry::new(step, &estimate, smoothed);
        observer(&entry);
        trace.push(entry);
        if state.has_converged(config) {
            log::info!("converged at step {}", state.step);
            state.converged = true;
        }
    }
    if !model.is_finite() {
        return Err(Error::InvalidConfig(
            "training produced non-finite parameters".into(),
        ));
    }
    Ok(trace)
}

/// Loss gradients of one step, exposed for diagnostics and tests.
pub fn loss_gradients(
    model: &ModelState,
    obs: &ObservationMatrix,
    config: &TrainConfig,
    step: u64,
) -> Result<(ElboEstimate, ModelGradients)> {
    let draws = draw_samples(model, config.samples, derive_seed(&[config.seed, step]));
    let (e, mut g) = elbo_with_gradients(model, obs, &draws, config.terms, config.exec)?;
    g.scale(-1.0);
    Ok((e, g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    #[default]
    Random,
    /// Latent means from a PCA of the standardized, one-hot encoded data
    /// (missing entries filled with column means).
    Pca,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMethod::Random),
            "pca" => Ok(InitMethod::Pca),
            other => Err(Error::InvalidConfig(format!(
                "unknown init method {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub latent_dim: usize,
    pub inducing: usize,
    pub covariance: CovarianceMode,
    pub init: InitMethod,
    pub train: TrainConfig,
}

/// A trained model together with what is needed to use it.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceEntry>,
}

fn pca_init(schema: &DatasetSchema, standardized: &ObservationMatrix, q: usize) -> Result<Matrix> {
    let dense = crate::metrics::encode_filled(standardized, schema)?;
    if q > dense.cols() {
        return Err(Error::InvalidConfig(format!(
            "PCA initialization needs latent dim <= {} encoded columns",
            dense.cols()
        )));
    }
    let pca = crate::metrics::pca_baseline(&dense, q)?;
    // Unit-variance scores match the N(0, 1) prior.
    let p = pca.projection;
    Ok(Matrix::from_fn(p.rows(), q, |i, j| {
        p[(i, j)] / pca.eigenvalues[j].max(1e-12).sqrt()
    }))
}

/// Standardizes `data` (original units, holdout entries already masked),
/// initializes a model and trains it.
pub fn fit(
    schema: &DatasetSchema,
    data: &ObservationMatrix,
    options: &FitOptions,
) -> Result<Fitted> {
    fit_observed(schema, data, options, |_| {})
}

pub fn fit_observed(
    schema: &DatasetSchema,
    data: &ObservationMatrix,
    options: &FitOptions,
    observer: impl FnMut(&TraceEntry),
) -> Result<Fitted> {
    data.validate(schema)?;
    options.train.validate()?;
    let (standardized, standardization) = crate::data::standardize(data, schema);
    let latent_init = match options.init {
        InitMethod::Random => LatentInit::Random,
        InitMethod::Pca => LatentInit::Given(pca_init(schema, &standardized, options.latent_dim)?),
    };
    let specs: Vec<_> = schema
        .columns()
        .iter()
        .map(|c| c.likelihood.clone())
        .collect();
    let mut model = init_model(
        &specs,
        &InitOptions {
            points: data.rows(),
            latent_dim: options.latent_dim,
            inducing: options.inducing,
            covariance: options.covariance,
            latent_init,
            seed: options.train.seed,
        },
    )?;
    let mut state = TrainState::new(&model, options.train.seed);
    let trace = train(
        &mut model,
        &mut state,
        &standardized,
        &options.train,
        observer,
    )?;
    Ok(Fitted {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            schema: schema.clone(),
            standardization,
            data: data.clone(),
            config: options.train.clone(),
            model,
            state,
        },
        trace,
    })
}

impl Checkpoint {
    /// Continues training up to `config.max_steps` total steps.
    pub fn resume(
        &mut self,
        config: &TrainConfig,
        observer: impl FnMut(&TraceEntry),
    ) -> Result<Vec<TraceEntry>> {
        let standardized = self.standardization.apply(&self.data);
        let trace = train(
            &mut self.model,
            &mut self.state,
            &standardized,
            config,
            observer,
        )?;
        self.config = config.clone();
        Ok(trace)
    }

    /// Scores held-out entries given in original units.
    pub fn predict(
        &self,
        holdout: &Holdout,
        config: &PredictiveConfig,
    ) -> Result<PredictiveSummary> {
        predict_entries(
            &self.model,
            &self.standardization,
            &self.data,
            &holdout.entries,
            config,
        )
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Everything needed to resume training or to evaluate a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub crate_version: String,
    pub schema: DatasetSchema,
    pub standardization: Standardization,
    /// Training data in original units, holdout entries masked.
    pub data: ObservationMatrix,
    pub config: TrainConfig,
    pub model: ModelState,
    pub state: TrainState,
}

impl Checkpoint {
    /// Writes `# `-prefixed `header_comment` lines followed by one JSON document.
    pub fn write_to<W: std::io::Write>(&self, mut out: W, header_comment: &[String]) -> Result<()> {
        for line in header_comment {
            writeln!(out, "# {line}")?;
        }
        serde_json::to_writer(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    pub fn save(&self, path: &Path, header_comment: &[String]) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, header_comment)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let body: String = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let cp: Checkpoint = serde_json::from_str(&body)?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                cp.format
            )));
        }
        cp.model.check()?;
        Ok(cp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DatasetSchema, SyntheticConfig};
    use crate::kernel::KernelParams;

    fn setup(schema: &str, n: usize, q: usize, m: usize) -> (ModelState, ObservationMatrix) {
        let schema = DatasetSchema::parse(schema).unwrap();
        let (obs, _) = generate_synthetic(
            &schema,
            &SyntheticConfig {
                points: n,
                kernel: KernelParams::initial(1),
                noise_variance: 0.05,
                seed: 3,
            },
        )
        .unwrap();
        let (obs, _) = crate::data::standardize(&obs, &schema);
        let specs: Vec<_> = schema
            .columns()
            .iter()
            .map(|c| c.likelihood.clone())
            .collect();
        let model = init_model(
            &specs,
            &InitOptions {
                points: n,
                latent_dim: q,
                inducing: m,
                covariance: CovarianceMode::Diagonal,
                latent_init: LatentInit::Random,
                seed: 4,
            },
        )
        .unwrap();
        (model, obs)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let opt = RmsProp::default();
        let mut p = vec![1.5, -2.0];
        let mut acc = vec![vec![0.0, 0.0]];
        opt.step(
            &mut [&mut p[..]],
            &mut acc,
            &[vec![0.0, 0.0]],
            &[false],
            &[],
        )
        .unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn hand_computed_three_steps() {
        let opt = RmsProp {
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-8,
        };
        let grads = [0.5, -1.0, 2.0];
        let mut p = [1.0];
        let mut acc = vec![vec![0.0]];
        for g in grads {
            opt.step(&mut [&mut p[..]], &mut acc, &[vec![g]], &[false], &[])
                .unwrap();
        }
        // acc: 0.025, 0.1225, 0.51025
        let a1: f64 = 0.1 * 0.25;
        let a2: f64 = 0.9 * a1 + 0.1 * 1.0;
        let a3: f64 = 0.9 * a2 + 0.1 * 4.0;
        let expected = 1.0 - 0.01 * 0.5 / (a1.sqrt() + 1e-8) + 0.01 * 1.0 / (a2.sqrt() + 1e-8)
            - 0.01 * 2.0 / (a3.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((acc[0][0] - 0.51025).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let opt = RmsProp::default();
        let mut p = [0.0];
        let mut acc = vec![vec![0.0]];
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[0];
            opt.step(&mut [&mut p[..]], &mut acc, &[vec![3.0]], &[false], &[])
                .unwrap();
            last = before - p[0];
        }
        assert!((last - opt.learning_rate).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let opt = RmsProp::default();
        let mut p = vec![0.0];
        let mut acc = vec![vec![0.0]];
        let err = opt
            .step(
                &mut [&mut p[..]],
                &mut acc,
                &[vec![f64::NAN]],
                &[false],
                &["w".into()],
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor } if tensor == "w"));
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn frozen_tensor_untouched() {
        let opt = RmsProp::default();
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        let mut acc = vec![vec![0.0], vec![0.0]];
        opt.step(
            &mut [&mut a[..], &mut b[..]],
            &mut acc,
            &[vec![1.0], vec![1.0]],
            &[true, false],
            &[],
        )
        .unwrap();
        assert_eq!(a, vec![1.0]);
        assert!(b[0] < 1.0);
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (model, obs) = setup("g:gaussian\n", 10, 1, 4);
        let mut trained = model.clone();
        let mut state = TrainState::new(&model, 1);
        let cfg = TrainConfig {
            max_steps: 0,
            ..TrainConfig::default()
        };
        let trace = train(&mut trained, &mut state, &obs, &cfg, |_| {}).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trained, model);
    }

    #[test]
    fn seeded_runs_are_identical_and_resumable() {
        let (model, obs) = setup("g:gaussian\nb:bernoulli\n", 12, 2, 4);
        let cfg = TrainConfig {
            max_steps: 30,
            samples: 3,
            smoothing_window: 5,
            patience: 10,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = |steps: u64, m: &mut ModelState, s: &mut TrainState| {
            let c = TrainConfig {
                max_steps: steps,
                ..cfg.clone()
            };
            train(m, s, &obs, &c, |_| {}).unwrap()
        };
        let (mut m1, mut s1) = (model.clone(), TrainState::new(&model, 9));
        let t1 = run(30, &mut m1, &mut s1);
        let (mut m2, mut s2) = (model.clone(), TrainState::new(&model, 9));
        let t2 = run(30, &mut m2, &mut s2);
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);

        let (mut m3, mut s3) = (model.clone(), TrainState::new(&model, 9));
        let mut t3 = run(12, &mut m3, &mut s3);
        let json = serde_json::to_string(&(&m3, &s3)).unwrap();
        let (mut m4, mut s4): (ModelState, TrainState) = serde_json::from_str(&json).unwrap();
        t3.extend(run(30, &mut m4, &mut s4));
        assert_eq!(t3, t1);
        assert_eq!(m4, m1);
        assert_eq!(s4, s1);
    }

    #[test]
    fn smoothed_elbo_improves() {
        let (mut model, obs) = setup("g:gaussian\n", 20, 1, 5);
        let mut state = TrainState::new(&model, 2);
        let cfg = TrainConfig {
            max_steps: 2000,
            seed: 2,
            rel_tol: f64::NEG_INFINITY,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &mut state, &obs, &cfg, |_| {}).unwrap();
        assert_eq!(trace.len(), 2000);
        let at = |s: usize| trace[s - 1].smoothed.unwrap();
        assert!(at(2000) > at(100), "{} vs {}", at(2000), at(100));
        model.check().unwrap();
    }

    #[test]
    fn kl_only_training_reaches_prior() {
        let (mut model, obs) = setup("g:gaussian\n", 3, 1, 2);
        let mut state = TrainState::new(&model, 5);
        let cfg = TrainConfig {
            max_steps: 5000,
            seed: 5,
            rel_tol: f64::NEG_INFINITY,
            terms: Terms::KlOnly,
            optimizer: RmsProp {
                learning_rate: 1e-2,
                ..RmsProp::default()
            },
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &mut state, &obs, &cfg, |_| {}).unwrap();
        let last = trace.last().unwrap();
        assert!(
            last.kl_x < 1e-3 && last.kl_u < 1e-3,
            "kl_x {} kl_u {}",
            last.kl_x,
            last.kl_u
        );
    }

    #[test]
    fn convergence_rule_stops_flat_trace() {
        let cfg = TrainConfig {
            smoothing_window: 3,
            patience: 4,
            ..TrainConfig::default()
        };
        let (model, _) = setup("g:gaussian\n", 2, 1, 1);
        let mut s = TrainState::new(&model, 0);
        let mut stopped_at = None;
        for i in 0..50 {
            let v = if i < 20 { -100.0 + i as f64 } else { -80.0 };
            s.observe(v, &cfg);
            if s.has_converged(&cfg) {
                stopped_at = Some(i);
                break;
            }
        }
        assert!(stopped_at.unwrap() >= 20);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, obs) = setup("g:gaussian\n", 5, 1, 2);
        let schema = DatasetSchema::parse("g:gaussian\n").unwrap();
        let cp = Checkpoint {
            format: CHECKPOINT_FORMAT,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            schema,
            standardization: Standardization::identity(1),
            data: obs,
            config: TrainConfig::default(),
            state: TrainState::new(&model, 0),
            model,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        cp.save(&p, &["version 0".into()]).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("# version 0\n{"));
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.model, cp.model);
        assert_eq!(back.data, cp.data);
        assert_eq!(back.state, cp.state);
    }
    fn fit_fixture() -> (DatasetSchema, ObservationMatrix) {
        let schema =
            DatasetSchema::parse("a:gaussian\nb:gaussian\nc:categorical:3\nd:bernoulli\n").unwrap();
        let (obs, _) = generate_synthetic(
            &schema,
            &SyntheticConfig {
                points: 12,
                kernel: KernelParams::initial(2),
                noise_variance: 0.1,
                seed: 8,
            },
        )
        .unwrap();
        (schema, obs)
    }

    fn fit_options(init: InitMethod, max_steps: u64) -> FitOptions {
        FitOptions {
            latent_dim: 2,
            inducing: 4,
            covariance: CovarianceMode::Diagonal,
            init,
            train: TrainConfig {
                samples: 2,
                max_steps,
                seed: 5,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn pca_init_has_unit_variance_scores() {
        let (schema, obs) = fit_fixture();
        let f = fit(&schema, &obs, &fit_options(InitMethod::Pca, 0)).unwrap();
        let mu = &f.checkpoint.model.x.mean;
        for q in 0..2 {
            let col: Vec<f64> = (0..mu.rows()).map(|i| mu[(i, q)]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10, "{var}");
        }
        let mut too_wide = fit_options(InitMethod::Pca, 0);
        too_wide.latent_dim = 7;
        assert!(matches!(
            fit(&schema, &obs, &too_wide),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn split_fit_matches_uninterrupted() {
        let (schema, obs) = fit_fixture();
        let whole = fit(&schema, &obs, &fit_options(InitMethod::Random, 30)).unwrap();
        let mut part = fit(&schema, &obs, &fit_options(InitMethod::Random, 12)).unwrap();
        let text = {
            let mut buf = Vec::new();
            part.checkpoint.write_to(&mut buf, &[]).unwrap();
            String::from_utf8(buf).unwrap()
        };
        part.checkpoint = Checkpoint::parse(&text).unwrap();
        let rest = part
            .checkpoint
            .resume(&whole.checkpoint.config, |_| {})
            .unwrap();
        assert_eq!(rest.len(), 18);
        assert_eq!(part.checkpoint.model, whole.checkpoint.model);
        assert_eq!(part.checkpoint.state, whole.checkpoint.state);

        let before = part.checkpoint.clone();
        assert!(part
            .checkpoint
            .resume(&whole.checkpoint.config, |_| {})
            .unwrap()
            .is_empty());
        assert_eq!(part.checkpoint, before);
    }
}
