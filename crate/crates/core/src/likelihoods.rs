//! Per-column observation models with canonical inverse links.
//!
//! | kind          | link            | channels            |
//! |---------------|-----------------|---------------------|
//! | `gaussian`    | identity, σ_d²  | 1                   |
//! | `bernoulli`   | logistic        | 1                   |
//! | `categorical` | softmax         | K, or K−1 if constrained |
//! | `poisson`     | exp             | 1                   |

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::autodiff::{log_sigmoid, log_sum_exp, sigmoid, Matrix, NodeId, Tape};
use crate::data::DatasetSchema;
use crate::error::{Error, Result};

pub const INITIAL_GAUSSIAN_VARIANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LikelihoodKind {
    Gaussian,
    Bernoulli,
    Categorical { classes: usize },
    Poisson,
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LikelihoodKind::Gaussian => write!(f, "gaussian"),
            LikelihoodKind::Bernoulli => write!(f, "bernoulli"),
            LikelihoodKind::Categorical { classes } => write!(f, "categorical:{classes}"),
            LikelihoodKind::Poisson => write!(f, "poisson"),
        }
    }
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let kind = match head {
            "gaussian" => LikelihoodKind::Gaussian,
            "bernoulli" => LikelihoodKind::Bernoulli,
            "poisson" => LikelihoodKind::Poisson,
            "categorical" => {
                let k = parts
                    .next()
                    .and_then(|k| k.trim().parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("categorical needs a class count: {s:?}"))
                    })?;
                if k < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "categorical needs K >= 2, got {k}"
                    )));
                }
                return Ok(LikelihoodKind::Categorical { classes: k });
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown likelihood {other:?}"
                )))
            }
        };
        if parts.next().is_some() {
            return Err(Error::InvalidConfig(format!("unexpected suffix in {s:?}")));
        }
        Ok(kind)
    }
}

/// Observation model of one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    pub kind: LikelihoodKind,
    /// Categorical only: fix the first softmax input to zero, using K−1 channels.
    pub constrained_first_channel: bool,
    /// Gaussian only: keep σ_d² at its initial value.
    pub freeze_variance: bool,
}

impl LikelihoodSpec {
    pub fn new(kind: LikelihoodKind) -> Self {
        Self {
            kind,
            constrained_first_channel: false,
            freeze_variance: false,
        }
    }

    pub fn gaussian() -> Self {
        Self::new(LikelihoodKind::Gaussian)
    }

    pub fn bernoulli() -> Self {
        Self::new(LikelihoodKind::Bernoulli)
    }

    pub fn poisson() -> Self {
        Self::new(LikelihoodKind::Poisson)
    }

    pub fn categorical(classes: usize, constrained: bool) -> Self {
        Self {
            kind: LikelihoodKind::Categorical { classes },
            constrained_first_channel: constrained,
            freeze_variance: false,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            LikelihoodKind::Categorical { classes } if self.constrained_first_channel => {
                classes - 1
            }
            LikelihoodKind::Categorical { classes } => classes,
            _ => 1,
        }
    }

    pub fn has_variance(&self) -> bool {
        self.kind == LikelihoodKind::Gaussian
    }

    /// Checks that `y` lies in the support of the likelihood.
    pub fn validate(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            LikelihoodKind::Gaussian => y.is_finite(),
            LikelihoodKind::Bernoulli => y == 0.0 || y == 1.0,
            LikelihoodKind::Categorical { classes } => {
                y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes
            }
            LikelihoodKind::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedValue {
                likelihood: self.kind.to_string(),
                value: y,
            })
        }
    }

    /// Softmax logits with the constrained zero prepended when configured.
    fn full_logits(&self, f: &[f64]) -> Vec<f64> {
        if self.constrained_first_channel {
            std::iter::once(0.0).chain(f.iter().copied()).collect()
        } else {
            f.to_vec()
        }
    }

    /// Class probabilities (categorical and bernoulli only).
    pub fn probabilities(&self, f: &[f64]) -> Vec<f64> {
        match self.kind {
            LikelihoodKind::Bernoulli => {
                let p = sigmoid(f[0]);
                vec![1.0 - p, p]
            }
            LikelihoodKind::Categorical { .. } => {
                let logits = self.full_logits(f);
                let lse = log_sum_exp(&logits);
                logits.iter().map(|v| (v - lse).exp()).collect()
            }
            _ => Vec::new(),
        }
    }

    /// `log p(y | f)` without a tape. `variance` is only read for gaussian columns.
    pub fn log_prob_value(&self, y: f64, f: &[f64], variance: f64) -> f64 {
        match self.kind {
            LikelihoodKind::Gaussian => {
                let r = y - f[0];
                -0.5 * (2.0 * PI * variance).ln() - r * r / (2.0 * variance)
            }
            LikelihoodKind::Bernoulli => {
                if y == 1.0 {
                    log_sigmoid(f[0])
                } else {
                    log_sigmoid(-f[0])
                }
            }
            LikelihoodKind::Categorical { .. } => {
                let logits = self.full_logits(f);
                logits[y as usize] - log_sum_exp(&logits)
            }
            LikelihoodKind::Poisson => y * f[0] - f[0].exp() - ln_gamma(y + 1.0),
        }
    }

    /// Draws `y ~ Likelihood(h(f))`.
    pub fn sample_observation<R: Rng + ?Sized>(
        &self,
        f: &[f64],
        variance: f64,
        rng: &mut R,
    ) -> f64 {
        match self.kind {
            LikelihoodKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                f[0] + variance.sqrt() * z
            }
            LikelihoodKind::Bernoulli => {
                if rng.random::<f64>() < sigmoid(f[0]) {
                    1.0
                } else {
                    0.0
                }
            }
            LikelihoodKind::Categorical { .. } => {
                let probs = self.probabilities(f);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as f64;
                    }
                }
                (probs.len() - 1) as f64
            }
            LikelihoodKind::Poisson => {
                let rate = f[0].exp();
                if rate <= 0.0 {
                    return 0.0;
                }
                match Poisson::new(rate) {
                    Ok(d) => d.sample(rng),
                    Err(_) => 0.0,
                }
            }
        }
    }
}

/// Contiguous latent-function channel range of every observed column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    ranges: Vec<Range<usize>>,
    total: usize,
}

impl ChannelMap {
    pub fn from_specs<'a>(specs: impl IntoIterator<Item = &'a LikelihoodSpec>) -> Result<Self> {
        let mut ranges = Vec::new();
        let mut total = 0;
        for s in specs {
            let c = s.channels();
            ranges.push(total..total + c);
            total += c;
        }
        if ranges.is_empty() {
            return Err(Error::EmptySchema);
        }
        Ok(Self { ranges, total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn columns(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, column: usize) -> Range<usize> {
        self.ranges[column].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }
}

pub fn build_channel_map(schema: &DatasetSchema) -> Result<ChannelMap> {
    ChannelMap::from_specs(schema.columns().iter().map(|c| &c.likelihood))
}

/// Summed log-probability of one column's observed entries.
///
/// `block` holds the column's channels for all N points (N × channels).
/// Entries with `mask[n] == false` contribute nothing. `log_variance` must
/// be a 1×1 node for gaussian columns and is ignored otherwise.
pub fn column_log_prob(
    tape: &mut Tape,
    spec: &LikelihoodSpec,
    block: NodeId,
    y: &[f64],
    mask: &[bool],
    log_variance: Option<NodeId>,
) -> Result<NodeId> {
    let (n, width) = tape.value(block).shape();
    if width != spec.channels() || y.len() != n || mask.len() != n {
        return Err(Error::shape(
            "column_log_prob",
            (n, width),
            (y.len(), spec.channels()),
        ));
    }
    for (v, &m) in y.iter().zip(mask) {
        if m {
            spec.validate(*v)?;
        }
    }
    let observed = mask.iter().filter(|m| **m).count();
    if observed == 0 {
        return Ok(tape.scalar_constant(0.0));
    }
    let masked =
        |f: &dyn Fn(f64) -> f64| Matrix::from_fn(n, 1, |i, _| if mask[i] { f(y[i]) } else { 0.0 });
    match spec.kind {
        LikelihoodKind::Gaussian => {
            let lv = log_variance.ok_or_else(|| {
                Error::InvalidConfig("gaussian column without variance parameter".into())
            })?;
            let target = tape.constant(masked(&|v| v));
            let weights = tape.constant(masked(&|_| 1.0));
            let resid = tape.sub(target, block)?;
            let sq = tape.square(resid);
            let wsq = tape.mul(sq, weights)?;
            let sse = tape.sum(wsq);
            let neg_lv = tape.neg(lv);
            let precision = tape.exp(neg_lv);
            let scaled = tape.mul(sse, precision)?;
            let quad = tape.scale(scaled, -0.5);
            let norm = tape.scale(lv, -0.5 * observed as f64);
            let norm = tape.offset(norm, -0.5 * observed as f64 * (2.0 * PI).ln());
            tape.add(quad, norm)
        }
        LikelihoodKind::Bernoulli => {
            let pos = tape.constant(masked(&|v| v));
            let neg = tape.constant(masked(&|v| 1.0 - v));
            let ls_pos = tape.log_sigmoid(block);
            let flipped = tape.neg(block);
            let ls_neg = tape.log_sigmoid(flipped);
            let a = tape.mul(ls_pos, pos)?;
            let b = tape.mul(ls_neg, neg)?;
            let total = tape.add(a, b)?;
            Ok(tape.sum(total))
        }
        LikelihoodKind::Categorical { classes } => {
            let logits = if spec.constrained_first_channel {
                let zero = tape.constant(Matrix::zeros(n, 1));
                tape.hstack(&[zero, block])?
            } else {
                block
            };
            let onehot = Matrix::from_fn(n, classes, |i, k| {
                if mask[i] && y[i] as usize == k {
                    1.0
                } else {
                    0.0
                }
            });
            let onehot = tape.constant(onehot);
            let ls = tape.log_softmax_rows(logits);
            let picked = tape.mul(ls, onehot)?;
            Ok(tape.sum(picked))
        }
        LikelihoodKind::Poisson => {
            let counts = tape.constant(masked(&|v| v));
            let weights = tape.constant(masked(&|_| 1.0));
            let yf = tape.mul(block, counts)?;
            let rate = tape.exp(block);
            let wrate = tape.mul(rate, weights)?;
            let shifted = tape.constant(Matrix::from_fn(n, 1, |i, _| y[i].max(0.0) + 1.0));
            let lg = tape.lgamma(shifted);
            let wlg = tape.mul(lg, weights)?;
            let d = tape.sub(yf, wrate)?;
            let d = tape.sub(d, wlg)?;
            Ok(tape.sum(d))
        }
    }
}

/// Single-observation `log p(y | f)` on a tape; `f` is a 1 × channels node.
pub fn log_prob(
    tape: &mut Tape,
    spec: &LikelihoodSpec,
    y: f64,
    f: NodeId,
    log_variance: Option<NodeId>,
) -> Result<NodeId> {
    column_log_prob(tape, spec, f, &[y], &[true], log_variance)
}
