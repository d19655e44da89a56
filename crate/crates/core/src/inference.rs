//! Post-training use of a model: exporting latent embeddings, scoring
//! held-out entries under the posterior predictive, and imputation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, sigmoid, Matrix};
use crate::data::{HeldOutEntry, ObservationMatrix, Standardization};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, ExecMode};
use crate::kernel::ard_relevances;
use crate::likelihoods::LikelihoodKind;
use crate::model::ModelState;
use crate::variational::standard_normal;

/// Smallest predictive probability (or density) reported; keeps perplexity
/// finite on catastrophic misses.
pub const PROBABILITY_FLOOR: f64 = 1e-300;
pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub means: Matrix,
    pub variances: Matrix,
    pub relevances: Vec<f64>,
    /// Latent dimensions by decreasing relevance, at most two.
    pub dominant: Vec<usize>,
}

pub fn export_latents(model: &ModelState) -> LatentEmbedding {
    let rel = ard_relevances(&model.kernel);
    LatentEmbedding {
        means: model.x.mean.clone(),
        variances: model.x.marginal_variances(),
        dominant: rel.dominant(2),
        relevances: rel.values,
    }
}

impl LatentEmbedding {
    /// Means restricted to the dominant dimensions.
    pub fn dominant_means(&self) -> Matrix {
        crate::metrics::select_columns(&self.means, &self.dominant)
    }

    /// `point,mu_1..mu_Q,var_1..var_Q`.
    pub fn write_csv<W: Write>(&self, mut out: W, header_comment: &[String]) -> Result<()> {
        for line in header_comment {
            writeln!(out, "# {line}")?;
        }
        let q = self.means.cols();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["point".to_string()];
        header.extend((1..=q).map(|i| format!("mu_{i}")));
        header.extend((1..=q).map(|i| format!("var_{i}")));
        w.write_record(&header)?;
        for n in 0..self.means.rows() {
            let mut rec = vec![n.to_string()];
            rec.extend(self.means.row(n).iter().map(|v| format!("{v}")));
            rec.extend(self.variances.row(n).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `dim,gamma,rank`.
    pub fn write_ard_csv<W: Write>(&self, mut out: W, header_comment: &[String]) -> Result<()> {
        for line in header_comment {
            writeln!(out, "# {line}")?;
        }
        let g = &self.relevances;
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dim", "gamma", "rank"])?;
        for (q, v) in g.iter().enumerate() {
            let rank = order
                .iter()
                .position(|&o| o == q)
                .expect("every dim ranked");
            w.write_record([(q + 1).to_string(), format!("{v}"), (rank + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictiveMode {
    /// Average over draws of X, U and F from the variational posterior.
    #[default]
    Mc,
    /// X and U fixed at their means; only F is sampled.
    Mean,
}

impl std::str::FromStr for PredictiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(PredictiveMode::Mc),
            "mean" | "mean-plug-in" => Ok(PredictiveMode::Mean),
            other => Err(Error::InvalidConfig(format!(
                "unknown predictive mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveConfig {
    pub mode: PredictiveMode,
    pub samples: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            mode: PredictiveMode::Mc,
            samples: DEFAULT_PREDICTIVE_SAMPLES,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryPrediction {
    pub row: usize,
    pub column: usize,
    pub truth: f64,
    /// Point prediction in original units.
    pub prediction: f64,
    /// Natural-log predictive probability (density for gaussian columns, in
    /// original units).
    pub log_prob: f64,
    pub floored: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub entries: Vec<EntryPrediction>,
}

impl PredictiveSummary {
    pub fn total_log_prob(&self) -> f64 {
        self.entries.iter().map(|e| e.log_prob).sum()
    }

    pub fn floored(&self) -> usize {
        self.entries.iter().filter(|e| e.floored).count()
    }

    /// Negative mean base-2 log predictive probability; 0 for no entries.
    pub fn log_perplexity(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        -self.total_log_prob() / self.entries.len() as f64 / std::f64::consts::LN_2
    }

    /// Fraction of entries whose point prediction equals the truth.
    pub fn accuracy(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries
            .iter()
            .filter(|e| e.prediction == e.truth)
            .count() as f64
            / self.entries.len() as f64
    }

    /// `row,column,name,truth,prediction,log_prob`.
    pub fn write_csv<W: Write>(
        &self,
        mut out: W,
        names: &[String],
        header_comment: &[String],
    ) -> Result<()> {
        for line in header_comment {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "column", "name", "truth", "prediction", "log_prob"])?;
        for e in &self.entries {
            w.write_record([
                e.row.to_string(),
                e.column.to_string(),
                names.get(e.column).cloned().unwrap_or_default(),
                format!("{}", e.truth),
                format!("{}", e.prediction),
                format!("{}", e.log_prob),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws of the latent functions at a set of rows, `samples` × (rows × D_f).
fn function_draws(
    model: &ModelState,
    rows: &[usize],
    config: &PredictiveConfig,
) -> Result<Vec<Matrix>> {
    if config.samples == 0 {
        return Err(Error::InvalidConfig(
            "predictive samples must be at least 1".into(),
        ));
    }
    model.check()?;
    let z = &model.u.inducing;
    let l = model.kernel.gram_value(z, z)?.cholesky_jittered()?;
    let q = model.latent_dim();
    let d = model.u.channels();
    let m = model.inducing_points();
    let mean_x = Matrix::from_fn(rows.len(), q, |i, j| model.x.mean[(rows[i], j)]);
    let var_x = model.x.marginal_variances();
    let sd_x = Matrix::from_fn(rows.len(), q, |i, j| var_x[(rows[i], j)].sqrt());
    let factors: Vec<Matrix> = (0..d).map(|c| model.u.factor(c)).collect();
    let prior_var = model.kernel.variance();
    let draws = config.exec.map(config.samples, |s| -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, s as u64]));
        let ex = standard_normal(rows.len(), q, &mut rng);
        let eu = standard_normal(m, d, &mut rng);
        let ef = standard_normal(rows.len(), d, &mut rng);
        let (x, u) = match config.mode {
            PredictiveMode::Mc => {
                let x = mean_x.add(&sd_x.hadamard(&ex));
                let mut u = model.u.mean.clone();
                for (c, f) in factors.iter().enumerate() {
                    let col = f.matmul_unchecked(&Matrix::column_vector(&eu.col(c)));
                    for i in 0..m {
                        u[(i, c)] += col[(i, 0)];
                    }
                }
                (x, u)
            }
            PredictiveMode::Mean => (mean_x.clone(), model.u.mean.clone()),
        };
        let kzx = model.kernel.gram_value(z, &x)?;
        let a = l.solve_lower(&kzx)?;
        let b = l.solve_lower(&u)?;
        let mut f = a.t_matmul(&b);
        for i in 0..rows.len() {
            let explained: f64 = (0..m).map(|k| a[(k, i)] * a[(k, i)]).sum();
            let v = prior_var - explained;
            if v < -crate::elbo::NEGATIVE_VARIANCE_TOLERANCE {
                return Err(Error::NegativeVariance {
                    point: rows[i],
                    value: v,
                });
            }
            let sd = v.max(0.0).sqrt();
            for c in 0..d {
                f[(i, c)] += sd * ef[(i, c)];
            }
        }
        Ok(f)
    });
    draws.into_iter().collect()
}

fn check_entries(
    model: &ModelState,
    training: &ObservationMatrix,
    entries: &[HeldOutEntry],
) -> Result<()> {
    if training.rows() != model.points() || training.cols() != model.specs.len() {
        return Err(Error::shape(
            "predictive_data",
            (model.points(), model.specs.len()),
            (training.rows(), training.cols()),
        ));
    }
    for e in entries {
        if e.row >= training.rows()
            || e.column >= training.cols()
            || training.is_observed(e.row, e.column)
        {
            return Err(Error::EntryNotHeldOut {
                row: e.row,
                column: e.column,
            });
        }
        model.specs[e.column].validate(e.value)?;
    }
    Ok(())
}

/// Scores held-out entries (true values in original units) and produces
/// point predictions for them.
pub fn predict_entries(
    model: &ModelState,
    standardization: &Standardization,
    training: &ObservationMatrix,
    entries: &[HeldOutEntry],
    config: &PredictiveConfig,
) -> Result<PredictiveSummary> {
    check_entries(model, training, entries)?;
    if entries.is_empty() {
        return Ok(PredictiveSummary::default());
    }
    let mut row_index = BTreeMap::new();
    for e in entries {
        let next = row_index.len();
        row_index.entry(e.row).or_insert(next);
    }
    let mut rows = vec![0; row_index.len()];
    for (&r, &i) in &row_index {
        rows[i] = r;
    }
    let draws = function_draws(model, &rows, config)?;
    let channels = model.channel_map();
    let s = draws.len() as f64;
    let out = entries
        .iter()
        .map(|e| {
            let i = row_index[&e.row];
            let spec = &model.specs[e.column];
            let range = channels.range(e.column);
            let variance = model.noise_variance(e.column);
            let y = standardization.forward(e.column, e.value);
            let logs: Vec<f64> = draws
                .iter()
                .map(|f| spec.log_prob_value(y, &f.row(i)[range.clone()], variance))
                .collect();
            let raw = log_sum_exp(&logs) - s.ln() + standardization.log_jacobian(e.column);
            let floor = PROBABILITY_FLOOR.ln();
            let floored = !(raw >= floor);
            let prediction = point_prediction(model, standardization, e.column, &draws, i);
            EntryPrediction {
                row: e.row,
                column: e.column,
                truth: e.value,
                prediction,
                log_prob: if floored { floor } else { raw },
                floored,
            }
        })
        .collect();
    Ok(PredictiveSummary { entries: out })
}

fn point_prediction(
    model: &ModelState,
    st: &Standardization,
    column: usize,
    draws: &[Matrix],
    row: usize,
) -> f64 {
    let spec = &model.specs[column];
    let range = model.channel_map().range(column);
    let s = draws.len() as f64;
    match spec.kind {
        LikelihoodKind::Gaussian => {
            let mean = draws.iter().map(|f| f[(row, range.start)]).sum::<f64>() / s;
            st.inverse(column, mean)
        }
        LikelihoodKind::Bernoulli => {
            let p = draws
                .iter()
                .map(|f| sigmoid(f[(row, range.start)]))
                .sum::<f64>()
                / s;
            if p > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        LikelihoodKind::Categorical { .. } => {
            let probs = mean_probabilities(model, column, draws, row);
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            best as f64
        }
        LikelihoodKind::Poisson => {
            let rate = draws
                .iter()
                .map(|f| f[(row, range.start)].exp())
                .sum::<f64>()
                / s;
            rate.round()
        }
    }
}

fn mean_probabilities(model: &ModelState, column: usize, draws: &[Matrix], row: usize) -> Vec<f64> {
    let spec = &model.specs[column];
    let range = model.channel_map().range(column);
    let mut acc: Vec<f64> = Vec::new();
    for f in draws {
        let p = spec.probabilities(&f.row(row)[range.clone()]);
        if acc.is_empty() {
            acc = vec![0.0; p.len()];
        }
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let s = draws.len() as f64;
    acc.iter().map(|a| a / s).collect()
}

/// Predictive class (or success) probabilities of a discrete column at one
/// point, averaged over posterior draws.
pub fn predictive_probabilities(
    model: &ModelState,
    row: usize,
    column: usize,
    config: &PredictiveConfig,
) -> Result<Vec<f64>> {
    if row >= model.points() || column >= model.specs.len() {
        return Err(Error::shape(
            "predictive_probabilities",
            (model.points(), model.specs.len()),
            (row, column),
        ));
    }
    let draws = function_draws(model, &[row], config)?;
    Ok(mean_probabilities(model, column, &draws, 0))
}

/// Point predictions for held-out entries: predictive mean for gaussian
/// columns, the most probable value for binary and categorical columns and
/// the rounded predictive mean for counts.
pub fn impute(
    model: &ModelState,
    standardization: &Standardization,
    training: &ObservationMatrix,
    entries: &[HeldOutEntry],
    config: &PredictiveConfig,
) -> Result<Vec<f64>> {
    Ok(
        predict_entries(model, standardization, training, entries, config)?
            .entries
            .into_iter()
            .map(|e| e.prediction)
            .collect(),
    )
}

/// `−(1/|entries|) Σ log₂ p(y | Y_train)`.
pub fn log_perplexity(
    model: &ModelState,
    standardization: &Standardization,
    training: &ObservationMatrix,
    entries: &[HeldOutEntry],
    config: &PredictiveConfig,
) -> Result<f64> {
    Ok(predict_entries(model, standardization, training, entries, config)?.log_perplexity())
}
