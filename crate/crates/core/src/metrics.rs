//! Nearest-neighbour evaluation of latent embeddings and a PCA baseline.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::{DatasetSchema, ObservationMatrix};
use crate::error::{Error, Result};
use crate::likelihoods::LikelihoodKind;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of every point's nearest other point; ties go to the lowest index.
pub fn nearest_neighbors(points: &Matrix) -> Result<Vec<usize>> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "nearest neighbours need at least 2 points, got {n}"
        )));
    }
    let first = points.row(0);
    if (1..n).all(|i| points.row(i) == first) {
        return Err(Error::DegenerateInput("all points are identical".into()));
    }
    Ok((0..n)
        .map(|i| {
            let pi = points.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let d = squared_distance(pi, points.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

/// Number of points whose nearest neighbour carries a different label.
pub fn one_nn_error<L: PartialEq>(points: &Matrix, labels: &[L]) -> Result<usize> {
    if labels.len() != points.rows() {
        return Err(Error::shape(
            "one_nn_error",
            points.shape(),
            (labels.len(), 1),
        ));
    }
    let nn = nearest_neighbors(points)?;
    Ok(nn
        .iter()
        .enumerate()
        .filter(|&(i, &j)| labels[i] != labels[j])
        .count())
}

/// Root mean squared error of predicting each target by its nearest neighbour's.
pub fn one_nn_rmse(points: &Matrix, targets: &[f64]) -> Result<f64> {
    if targets.len() != points.rows() {
        return Err(Error::shape(
            "one_nn_rmse",
            points.shape(),
            (targets.len(), 1),
        ));
    }
    let nn = nearest_neighbors(points)?;
    let sse: f64 = nn
        .iter()
        .enumerate()
        .map(|(i, &j)| (targets[i] - targets[j]).powi(2))
        .sum();
    Ok((sse / targets.len() as f64).sqrt())
}

/// Columns `dims` of `points`.
pub fn select_columns(points: &Matrix, dims: &[usize]) -> Matrix {
    Matrix::from_fn(points.rows(), dims.len(), |i, j| points[(i, dims[j])])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// N×k scores.
    pub projection: Matrix,
    /// D×k orthonormal principal directions.
    pub components: Matrix,
    /// Top-k covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues of all D directions, descending.
    pub all_eigenvalues: Vec<f64>,
}

/// Projects centred `data` (N×D) onto its top `k` principal directions.
pub fn pca_baseline(data: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = data.shape();
    if k == 0 || k > d {
        return Err(Error::InvalidConfig(format!(
            "cannot take {k} components of {d} columns"
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateInput("PCA needs at least 2 points".into()));
    }
    let means: Vec<f64> = (0..d)
        .map(|j| data.col(j).iter().sum::<f64>() / n as f64)
        .collect();
    let centred = Matrix::from_fn(n, d, |i, j| data[(i, j)] - means[j]);
    let cov = centred.t_matmul(&centred).scale(1.0 / (n - 1) as f64);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[(i, j)]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let components = Matrix::from_fn(d, k, |i, j| {
        let v = eig.eigenvectors.column(order[j]);
        // Deterministic sign: largest-magnitude loading positive.
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        v[i] * pivot.signum()
    });
    let projection = centred.matmul(&components)?;
    let all_eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(Pca {
        projection,
        components,
        eigenvalues: all_eigenvalues[..k].to_vec(),
        all_eigenvalues,
    })
}

/// Dense real encoding of complete observations: categoricals one-hot,
/// every other column as is.
pub fn one_hot_encode(obs: &ObservationMatrix, schema: &DatasetSchema) -> Result<Matrix> {
    if !obs.is_fully_observed() {
        return Err(Error::DegenerateInput(
            "one-hot encoding needs complete data".into(),
        ));
    }
    let widths: Vec<usize> = schema
        .columns()
        .iter()
        .map(|c| match c.likelihood.kind {
            LikelihoodKind::Categorical { classes } => classes,
            _ => 1,
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut out = Matrix::zeros(obs.rows(), total);
    for r in 0..obs.rows() {
        let mut at = 0;
        for (c, &w) in widths.iter().enumerate() {
            let v = obs.get(r, c).expect("complete");
            if w == 1
                && !matches!(
                    schema.column(c).likelihood.kind,
                    LikelihoodKind::Categorical { .. }
                )
            {
                out[(r, at)] = v;
            } else {
                out[(r, at + v as usize)] = 1.0;
            }
            at += w;
        }
    }
    Ok(out)
}

/// One-hot encoding where each unobserved entry is replaced by the mean of
/// the observed values of its encoded columns.
pub fn encode_filled(obs: &ObservationMatrix, schema: &DatasetSchema) -> Result<Matrix> {
    let (wide_schema, _) = schema.all_gaussian();
    let wide = obs.all_gaussian(schema);
    let mut out = wide.values().clone();
    for c in 0..wide_schema.len() {
        let observed: Vec<f64> = (0..wide.rows()).filter_map(|r| wide.get(r, c)).collect();
        if observed.is_empty() {
            return Err(Error::DegenerateInput(format!(
                "column {:?} has no observed values",
                wide_schema.column(c).name
            )));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for r in 0..wide.rows() {
            if !wide.is_observed(r, c) {
                out[(r, c)] = mean;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    /// Which dimensions, labels and holdout the value refers to.
    pub protocol: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, value: f64, protocol: &str, seed: u64) {
        self.entries.push(MetricEntry {
            metric: metric.into(),
            value,
            protocol: protocol.into(),
            seed,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric)
            .map(|e| e.value)
    }

    pub fn write_csv<W: std::io::Write>(
        &self,
        mut out: W,
        header_comment: &[String],
    ) -> Result<()> {
        for line in header_comment {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value", "protocol", "seed"])?;
        for e in &self.entries {
            w.write_record([
                e.metric.clone(),
                format!("{}", e.value),
                e.protocol.clone(),
                e.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self, header_comment: &[String]) -> String {
        let mut s = String::new();
        for line in header_comment {
            let _ = writeln!(s, "# {line}");
        }
        let width = self
            .entries
            .iter()
            .map(|e| e.metric.len())
            .max()
            .unwrap_or(0);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<width$}  {:>14}  ({}, seed {})",
                e.metric,
                fmt_value(e.value),
                e.protocol,
                e.seed
            );
        }
        s
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.6}")
    }
}
