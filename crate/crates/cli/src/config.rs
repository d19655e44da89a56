//! Run configuration: a flat TOML file overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mlgplvm::exec::ExecMode;
use mlgplvm::inference::{PredictiveConfig, PredictiveMode, DEFAULT_PREDICTIVE_SAMPLES};
use mlgplvm::trainer::{
    InitMethod, RmsProp, TrainConfig, DEFAULT_INDUCING, DEFAULT_LEARNING_RATE, DEFAULT_SAMPLES,
};
use mlgplvm::variational::CovarianceMode;

pub const OUTPUT_DIR_ENV: &str = "MLGPLVM_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "mlgplvm-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub holdout: Option<String>,
    pub holdout_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub latent_dim: usize,
    pub inducing: usize,
    pub samples: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub covariance: String,
    pub init: String,
    pub constrain_categorical: bool,
    pub all_gaussian: bool,
    pub predictive_mode: String,
    pub predictive_samples: usize,
    pub metrics: Vec<String>,
    pub points: usize,
    pub noise_variance: f64,
    pub exec: String,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: None,
            data: None,
            checkpoint: None,
            holdout: None,
            holdout_file: None,
            output_dir: None,
            latent_dim: 10,
            inducing: DEFAULT_INDUCING,
            samples: DEFAULT_SAMPLES,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: TrainConfig::default().max_steps,
            seed: 0,
            covariance: "diag".into(),
            init: "random".into(),
            constrain_categorical: false,
            all_gaussian: false,
            predictive_mode: "mc".into(),
            predictive_samples: DEFAULT_PREDICTIVE_SAMPLES,
            metrics: vec!["auto".into()],
            points: 0,
            noise_variance: 0.1,
            exec: "parallel".into(),
            log_every: 500,
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the matching
/// config-file key.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// TOML file with any of the keys below (snake_case)
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Schema file, one `name:kind[:flags]` per line
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Dataset CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Holdout plan, e.g. `points=0.2,attrs=2` or `per_class=9,attr_frac=0.2`
    #[arg(long)]
    pub holdout: Option<String>,
    /// Holdout sidecar written by an earlier `train`
    #[arg(long)]
    pub holdout_file: Option<PathBuf>,
    /// Defaults to $MLGPLVM_OUTPUT_DIR, then ./mlgplvm-out
    #[arg(long, short = 'o')]
    pub output_dir: Option<PathBuf>,
    /// Latent dimensionality Q
    #[arg(long, short = 'q')]
    pub latent_dim: Option<usize>,
    /// Inducing points M
    #[arg(long, short = 'm')]
    pub inducing: Option<usize>,
    /// Monte Carlo samples T per step
    #[arg(long, short = 't')]
    pub samples: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Total step budget
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, short = 's')]
    pub seed: Option<u64>,
    /// `diag` or `full`
    #[arg(long)]
    pub covariance: Option<String>,
    /// Latent mean initialization: `random` or `pca`
    #[arg(long)]
    pub init: Option<String>,
    /// Fix the first softmax input of every categorical column to zero
    #[arg(long)]
    pub constrain_categorical: Option<bool>,
    /// Replace every likelihood by a gaussian (categoricals one-hot)
    #[arg(long)]
    pub all_gaussian: Option<bool>,
    /// `mc` or `mean`
    #[arg(long)]
    pub predictive_mode: Option<String>,
    #[arg(long)]
    pub predictive_samples: Option<usize>,
    /// Comma-separated: auto, 1nn-error, 1nn-rmse, pca-1nn-error, pca-1nn-rmse, active-dims
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Number of synthetic points
    #[arg(long, short = 'n')]
    pub points: Option<usize>,
    /// Gaussian noise variance for synthetic data
    #[arg(long)]
    pub noise_variance: Option<f64>,
    /// `parallel` or `sequential`; results are identical
    #[arg(long)]
    pub exec: Option<String>,
    /// Log the ELBO every this many steps (0 disables)
    #[arg(long)]
    pub log_every: Option<u64>,
}

macro_rules! override_fields {
    ($cfg:ident, $args:ident; opt: $($o:ident),*; val: $($v:ident),*) => {
        $(if let Some(x) = &$args.$o { $cfg.$o = Some(x.clone()); })*
        $(if let Some(x) = &$args.$v { $cfg.$v = x.clone(); })*
    };
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut cfg: RunConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                cfg.rebase(path.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => RunConfig::default(),
        };
        override_fields!(cfg, args;
            opt: schema, data, checkpoint, holdout, holdout_file, output_dir;
            val: latent_dim, inducing, samples, learning_rate, max_steps, seed, covariance, init,
                 constrain_categorical, all_gaussian, predictive_mode, predictive_samples, metrics,
                 points, noise_variance, exec, log_every);
        Ok(cfg)
    }

    /// Paths in a config file are relative to the file.
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.schema,
            &mut self.data,
            &mut self.checkpoint,
            &mut self.holdout_file,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| {
                std::env::var_os(OUTPUT_DIR_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        match field {
            Some(p) => Ok(p),
            None => bail!(
                "--{name} is required (or `{}` in the config file)",
                name.replace('-', "_")
            ),
        }
    }

    pub fn exec_mode(&self) -> Result<ExecMode> {
        self.exec.parse().map_err(Into::into)
    }

    pub fn covariance_mode(&self) -> Result<CovarianceMode> {
        self.covariance.parse().map_err(Into::into)
    }

    pub fn init_method(&self) -> Result<InitMethod> {
        self.init.parse().map_err(Into::into)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            samples: self.samples,
            optimizer: RmsProp {
                learning_rate: self.learning_rate,
                ..RmsProp::default()
            },
            max_steps: self.max_steps,
            seed: self.seed,
            exec: self.exec_mode()?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn predictive_config(&self) -> Result<PredictiveConfig> {
        let mode: PredictiveMode = self.predictive_mode.parse()?;
        if self.predictive_samples == 0 {
            bail!("predictive samples must be at least 1");
        }
        Ok(PredictiveConfig {
            mode,
            samples: self.predictive_samples,
            seed: self.seed,
            exec: self.exec_mode()?,
        })
    }

    /// Digest of everything that can change a command's outputs: the
    /// resolved settings and the contents of every input file. Output
    /// location and execution mode are excluded.
    pub fn hash(&self, command: &str) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        let map = value
            .as_object_mut()
            .expect("struct serializes to an object");
        map.remove("output_dir");
        map.remove("exec");
        map.remove("log_every");
        for key in ["schema", "data", "checkpoint", "holdout_file"] {
            if let Some(serde_json::Value::String(path)) = map.get(key) {
                let bytes = std::fs::read(path).with_context(|| format!("reading {path}"))?;
                map.insert(
                    key.into(),
                    serde_json::Value::String(hex::encode(Sha256::digest(&bytes))),
                );
            }
        }
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(serde_json::to_string(&value)?.as_bytes());
        Ok(hex::encode(&h.finalize()[..8]))
    }

    /// Comment lines placed at the top of every output file.
    pub fn header(&self, command: &str) -> Result<Vec<String>> {
        Ok(vec![
            format!("mlgplvm {}", env!("CARGO_PKG_VERSION")),
            format!("command {command}"),
            format!("seed {}", self.seed),
            format!("config {}", self.hash(command)?),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> RunArgs {
        RunArgs::default()
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let cfg = RunConfig::resolve(&args()).unwrap();
        assert_eq!(cfg.inducing, 50);
        assert_eq!(cfg.samples, 10);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.latent_dim, 10);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 4\nlatent_dim = 3\nschema = \"s.txt\"\nmetrics = [\"1nn-error\"]\n",
        )
        .unwrap();
        let mut a = args();
        a.config = Some(path);
        a.seed = Some(9);
        let cfg = RunConfig::resolve(&a).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.latent_dim, 3);
        assert_eq!(cfg.metrics, vec!["1nn-error".to_string()]);
        assert_eq!(cfg.schema, Some(dir.path().join("s.txt")));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sed = 4\n").unwrap();
        let mut a = args();
        a.config = Some(path);
        assert!(RunConfig::resolve(&a).is_err());
    }

    #[test]
    fn hash_tracks_settings_and_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let schema = dir.path().join("schema.txt");
        std::fs::write(&schema, "a:gaussian\n").unwrap();
        let mut cfg = RunConfig {
            schema: Some(schema.clone()),
            ..RunConfig::default()
        };
        let h0 = cfg.hash("train").unwrap();
        assert_eq!(h0.len(), 16);
        assert_ne!(h0, cfg.hash("synth").unwrap());

        cfg.output_dir = Some(dir.path().join("elsewhere"));
        cfg.exec = "sequential".into();
        assert_eq!(cfg.hash("train").unwrap(), h0);

        cfg.seed = 1;
        assert_ne!(cfg.hash("train").unwrap(), h0);
        cfg.seed = 0;
        std::fs::write(&schema, "a:bernoulli\n").unwrap();
        assert_ne!(cfg.hash("train").unwrap(), h0);
    }

    #[test]
    fn header_lines() {
        let h = RunConfig::default().header("synth").unwrap();
        assert_eq!(h[0], format!("mlgplvm {}", env!("CARGO_PKG_VERSION")));
        assert_eq!(h[2], "seed 0");
        assert!(h[3].starts_with("config "));
    }

    #[test]
    fn bad_modes_rejected() {
        let cfg = RunConfig {
            covariance: "banded".into(),
            init: "zeros".into(),
            predictive_mode: "median".into(),
            exec: "gpu".into(),
            ..RunConfig::default()
        };
        assert!(cfg.covariance_mode().is_err());
        assert!(cfg.init_method().is_err());
        assert!(cfg.predictive_config().is_err());
        assert!(cfg.exec_mode().is_err());
    }
}
