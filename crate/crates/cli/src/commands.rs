use std::io::Write;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use mlgplvm::autodiff::Matrix;
use mlgplvm::data::{
    apply_holdout, generate_synthetic, load_csv, make_holdout, read_holdout, write_csv,
    write_holdout_to, CsvOptions, DatasetSchema, Holdout, HoldoutPlan, ObservationMatrix,
    SyntheticConfig,
};
use mlgplvm::inference::{export_latents, LatentEmbedding, PredictiveSummary};
use mlgplvm::kernel::KernelParams;
use mlgplvm::likelihoods::LikelihoodKind;
use mlgplvm::metrics::{encode_filled, one_nn_error, one_nn_rmse, pca_baseline, MetricsReport};
use mlgplvm::trainer::{fit_observed, Checkpoint, FitOptions, TraceEntry};

use crate::config::RunConfig;
use crate::output::Outputs;

/// A dimension counts as active when its inverse lengthscale is at least
/// this fraction of the largest one.
const ACTIVE_FRACTION: f64 = 0.1;

fn load_schema(cfg: &RunConfig) -> Result<DatasetSchema> {
    let path = cfg.require(&cfg.schema, "schema")?;
    let schema =
        DatasetSchema::load(path).with_context(|| format!("loading schema {}", path.display()))?;
    if !cfg.constrain_categorical {
        return Ok(schema);
    }
    let mut cols = schema.columns().to_vec();
    for c in &mut cols {
        if matches!(c.likelihood.kind, LikelihoodKind::Categorical { .. }) {
            c.likelihood.constrained_first_channel = true;
        }
    }
    Ok(DatasetSchema::new(
        cols,
        schema.label().map(str::to_string),
    )?)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.require(&cfg.checkpoint, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_trace(out: &mut Vec<u8>, trace: &[TraceEntry], header: &[String]) -> mlgplvm::Result<()> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "step,elbo,kl_x,kl_u,expected_loglik,smoothed")?;
    for t in trace {
        let smoothed = t.smoothed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{smoothed}",
            t.step, t.elbo, t.kl_x, t.kl_u, t.expected_loglik
        )?;
    }
    Ok(())
}

/// `point,x,y,label`: the two most relevant latent dimensions, for plotting.
fn write_plot(
    out: &mut Vec<u8>,
    emb: &LatentEmbedding,
    labels: Option<&[String]>,
    header: &[String],
) -> mlgplvm::Result<()> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    let pts = emb.dominant_means();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["point", "x", "y", "label"])?;
    for i in 0..pts.rows() {
        let coord = |j: usize| {
            if j < pts.cols() {
                pts[(i, j)].to_string()
            } else {
                String::new()
            }
        };
        let label = labels.map(|l| l[i].clone()).unwrap_or_default();
        w.write_record([i.to_string(), coord(0), coord(1), label])?;
    }
    w.flush()?;
    Ok(())
}

fn add_latents(
    out: &mut Outputs,
    emb: &LatentEmbedding,
    labels: Option<&[String]>,
    header: &[String],
) -> Result<()> {
    out.add_with("latents.csv", |w| emb.write_csv(w, header))?;
    out.add_with("ard.csv", |w| emb.write_ard_csv(w, header))?;
    out.add_with("plot.csv", |w| write_plot(w, emb, labels, header))
}

fn training_data(cfg: &RunConfig, schema: &DatasetSchema) -> Result<(ObservationMatrix, Holdout)> {
    let path = cfg.require(&cfg.data, "data")?;
    let obs = load_csv(path, schema, &CsvOptions::default())
        .with_context(|| format!("loading {}", path.display()))?;
    match (&cfg.holdout_file, &cfg.holdout) {
        (Some(_), Some(_)) => bail!("give either --holdout or --holdout-file, not both"),
        (Some(file), None) => {
            let holdout = read_holdout(file)
                .with_context(|| format!("reading holdout {}", file.display()))?;
            Ok((apply_holdout(&obs, &holdout)?, holdout))
        }
        (None, Some(plan)) => Ok(make_holdout(&obs, &HoldoutPlan::parse(plan)?, cfg.seed)?),
        (None, None) => Ok((
            obs,
            Holdout {
                entries: Vec::new(),
            },
        )),
    }
}

fn progress(every: u64) -> impl FnMut(&TraceEntry) {
    move |t: &TraceEntry| {
        if every > 0 && (t.step + 1).is_multiple_of(every) {
            match t.smoothed {
                Some(s) => info!("step {}: elbo {:.4} (smoothed {s:.4})", t.step + 1, t.elbo),
                None => info!("step {}: elbo {:.4}", t.step + 1, t.elbo),
            }
        }
    }
}

/// Trains a new model, or continues the one in `--checkpoint`.
///
/// Outputs: `checkpoint.json`, `trace.csv`, `latents.csv`, `ard.csv`,
/// `plot.csv`, and for new runs `schema.txt` and `holdout.csv` (in the
/// model's column layout). With `--all-gaussian`, `holdout_source.csv`
/// keeps the holdout in the input layout for reuse.
pub fn train(cfg: &RunConfig) -> Result<Outputs> {
    let header = cfg.header("train")?;
    let mut out = Outputs::new();
    if cfg.checkpoint.is_some() {
        let mut cp = load_checkpoint(cfg)?;
        let mut train_cfg = cfg.train_config()?;
        train_cfg.seed = cp.config.seed;
        info!(
            "resuming at step {} of {}",
            cp.state.step, train_cfg.max_steps
        );
        let trace = cp.resume(&train_cfg, progress(cfg.log_every))?;
        finish_training(&mut out, &cp, &trace, &header)?;
        return Ok(out);
    }

    let schema = load_schema(cfg)?;
    let (train_obs, holdout) = training_data(cfg, &schema)?;
    let (model_schema, model_obs, model_holdout) = if cfg.all_gaussian {
        out.add_with("holdout_source.csv", |w| {
            write_holdout_to(w, &holdout, &schema, &header)
        })?;
        (
            schema.all_gaussian().0,
            train_obs.all_gaussian(&schema),
            holdout.all_gaussian(&schema),
        )
    } else {
        (schema.clone(), train_obs, holdout)
    };
    let options = FitOptions {
        latent_dim: cfg.latent_dim,
        inducing: cfg.inducing,
        covariance: cfg.covariance_mode()?,
        init: cfg.init_method()?,
        train: cfg.train_config()?,
    };
    info!(
        "training on {} points x {} columns, {} held out",
        model_obs.rows(),
        model_obs.cols(),
        model_holdout.len()
    );
    let fitted = fit_observed(&model_schema, &model_obs, &options, progress(cfg.log_every))?;
    let mut schema_text = header
        .iter()
        .map(|l| format!("# {l}\n"))
        .collect::<String>();
    schema_text.push_str(&model_schema.to_text());
    out.add("schema.txt", schema_text.into_bytes());
    out.add_with("holdout.csv", |w| {
        write_holdout_to(w, &model_holdout, &model_schema, &header)
    })?;
    finish_training(&mut out, &fitted.checkpoint, &fitted.trace, &header)?;
    Ok(out)
}

fn finish_training(
    out: &mut Outputs,
    cp: &Checkpoint,
    trace: &[TraceEntry],
    header: &[String],
) -> Result<()> {
    if cp.state.rejected_steps > 0 {
        warn!(
            "{} steps were skipped for non-finite gradients",
            cp.state.rejected_steps
        );
    }
    info!(
        "stopped at step {}{}",
        cp.state.step,
        if cp.state.converged {
            " (converged)"
        } else {
            ""
        }
    );
    out.add_with("checkpoint.json", |w| cp.write_to(w, header))?;
    out.add_with("trace.csv", |w| write_trace(w, trace, header))?;
    add_latents(out, &export_latents(&cp.model), cp.data.labels(), header)
}

fn numeric_labels(labels: &[String]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("label {l:?} of point {i} is not numeric"))
        })
        .collect()
}

/// Outputs: `metrics.csv`, `metrics.txt`, `plot.csv`.
pub fn eval(cfg: &RunConfig) -> Result<Outputs> {
    let header = cfg.header("eval")?;
    let cp = load_checkpoint(cfg)?;
    let emb = export_latents(&cp.model);
    let labels = cp.data.labels();
    let seed = cp.config.seed;

    let mut requested: Vec<String> = Vec::new();
    for m in &cfg.metrics {
        if m == "auto" {
            if labels.is_some() {
                requested.extend(["1nn-error", "pca-1nn-error"].map(String::from));
            }
            requested.push("active-dims".into());
        } else {
            requested.push(m.clone());
        }
    }
    requested.dedup();

    let latent = emb.dominant_means();
    let mut pca: Option<Matrix> = None;
    let mut pca_points = || -> Result<Matrix> {
        if let Some(p) = &pca {
            return Ok(p.clone());
        }
        let encoded = encode_filled(&cp.standardization.apply(&cp.data), &cp.schema)?;
        let p = pca_baseline(&encoded, 2.min(encoded.cols()))?.projection;
        pca = Some(p.clone());
        Ok(p)
    };
    let mut report = MetricsReport::default();
    for metric in &requested {
        match metric.as_str() {
            "1nn-error" | "pca-1nn-error" => {
                let labels = labels.ok_or(mlgplvm::Error::MissingLabelColumn)?;
                let (points, protocol) = if metric == "1nn-error" {
                    (latent.clone(), "latent-dominant-2")
                } else {
                    (pca_points()?, "pca-2")
                };
                report.push(
                    &metric.replace('-', "_"),
                    one_nn_error(&points, labels)? as f64,
                    protocol,
                    seed,
                );
            }
            "1nn-rmse" | "pca-1nn-rmse" => {
                let targets = numeric_labels(labels.ok_or(mlgplvm::Error::MissingLabelColumn)?)?;
                let (points, protocol) = if metric == "1nn-rmse" {
                    (latent.clone(), "latent-dominant-2")
                } else {
                    (pca_points()?, "pca-2")
                };
                report.push(
                    &metric.replace('-', "_"),
                    one_nn_rmse(&points, &targets)?,
                    protocol,
                    seed,
                );
            }
            "active-dims" => {
                let max = emb.relevances.iter().cloned().fold(0.0, f64::max);
                let active = emb
                    .relevances
                    .iter()
                    .filter(|&&g| g >= ACTIVE_FRACTION * max)
                    .count();
                report.push("active_dims", active as f64, "gamma>=0.1*max", seed);
            }
            other => bail!("unknown metric {other:?}"),
        }
    }
    if let Some(s) = cp.state.smoothed.back() {
        report.push("smoothed_elbo", *s, "training", seed);
    }
    report.push("steps", cp.state.step as f64, "training", seed);

    let mut out = Outputs::new();
    out.add_with("metrics.csv", |w| report.write_csv(w, &header))?;
    out.add("metrics.txt", report.to_text(&header).into_bytes());
    out.add_with("plot.csv", |w| write_plot(w, &emb, labels, &header))?;
    Ok(out)
}

fn summarize(summary: &PredictiveSummary, schema: &DatasetSchema, seed: u64) -> MetricsReport {
    let mut report = MetricsReport::default();
    let protocol = "holdout";
    report.push("entries", summary.entries.len() as f64, protocol, seed);
    report.push(
        "test_log_likelihood",
        summary.total_log_prob(),
        protocol,
        seed,
    );
    report.push(
        "log_perplexity_bits",
        summary.log_perplexity(),
        protocol,
        seed,
    );
    let discrete: Vec<_> = summary
        .entries
        .iter()
        .filter(|e| {
            matches!(
                schema.column(e.column).likelihood.kind,
                LikelihoodKind::Bernoulli | LikelihoodKind::Categorical { .. }
            )
        })
        .collect();
    if !discrete.is_empty() {
        let hits = discrete.iter().filter(|e| e.prediction == e.truth).count();
        report.push(
            "discrete_accuracy",
            hits as f64 / discrete.len() as f64,
            protocol,
            seed,
        );
    }
    let continuous: Vec<_> = summary
        .entries
        .iter()
        .filter(|e| {
            matches!(
                schema.column(e.column).likelihood.kind,
                LikelihoodKind::Gaussian | LikelihoodKind::Poisson
            )
        })
        .collect();
    if !continuous.is_empty() {
        let mse = continuous
            .iter()
            .map(|e| (e.prediction - e.truth).powi(2))
            .sum::<f64>()
            / continuous.len() as f64;
        report.push("continuous_rmse", mse.sqrt(), protocol, seed);
    }
    report.push("floored", summary.floored() as f64, protocol, seed);
    report
}

/// Outputs: `predictions.csv`, `impute_summary.csv`, `impute_summary.txt`.
pub fn impute(cfg: &RunConfig) -> Result<Outputs> {
    let header = cfg.header("impute")?;
    let cp = load_checkpoint(cfg)?;
    let path = cfg.require(&cfg.holdout_file, "holdout-file")?;
    let holdout =
        read_holdout(path).with_context(|| format!("reading holdout {}", path.display()))?;
    if let Some(e) = holdout.entries.iter().find(|e| e.column >= cp.schema.len()) {
        bail!(
            "holdout column {} does not exist in the checkpoint's {}-column schema",
            e.column,
            cp.schema.len()
        );
    }
    let summary = cp.predict(&holdout, &cfg.predictive_config()?)?;
    let report = summarize(&summary, &cp.schema, cfg.seed);
    info!(
        "{} entries: test log-likelihood {:.4}, log perplexity {:.4} bits",
        summary.entries.len(),
        summary.total_log_prob(),
        summary.log_perplexity()
    );
    let names: Vec<String> = cp.schema.columns().iter().map(|c| c.name.clone()).collect();
    let mut out = Outputs::new();
    out.add_with("predictions.csv", |w| summary.write_csv(w, &names, &header))?;
    out.add_with("impute_summary.csv", |w| report.write_csv(w, &header))?;
    out.add("impute_summary.txt", report.to_text(&header).into_bytes());
    Ok(out)
}

/// Outputs: `synthetic.csv`, `latents_true.csv`.
pub fn synth(cfg: &RunConfig) -> Result<Outputs> {
    let header = cfg.header("synth")?;
    let schema = load_schema(cfg)?;
    let (obs, x) = generate_synthetic(
        &schema,
        &SyntheticConfig {
            points: cfg.points,
            kernel: KernelParams::initial(cfg.latent_dim),
            noise_variance: cfg.noise_variance,
            seed: cfg.seed,
        },
    )?;
    let mut out = Outputs::new();
    out.add_with("synthetic.csv", |w| write_csv(w, &obs, &schema, &header))?;
    out.add_with("latents_true.csv", |w| {
        for line in &header {
            writeln!(w, "# {line}")?;
        }
        let mut row = vec!["point".to_string()];
        row.extend((1..=x.cols()).map(|q| format!("x_{q}")));
        writeln!(w, "{}", row.join(","))?;
        for i in 0..x.rows() {
            let mut row = vec![i.to_string()];
            row.extend(x.row(i).iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Outputs: `latents.csv`, `ard.csv`, `plot.csv`.
pub fn export(cfg: &RunConfig) -> Result<Outputs> {
    let header = cfg.header("export-latents")?;
    let cp = load_checkpoint(cfg)?;
    let mut out = Outputs::new();
    add_latents(
        &mut out,
        &export_latents(&cp.model),
        cp.data.labels(),
        &header,
    )?;
    Ok(out)
}
