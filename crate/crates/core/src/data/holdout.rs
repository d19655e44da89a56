use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSchema, ObservationMatrix};
use crate::error::{Error, Result};
use crate::likelihoods::LikelihoodKind;

/// How entries are selected for holding out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HoldoutPlan {
    /// A fraction of points, each losing a fixed number of observed attributes.
    PointsAttributes {
        point_fraction: f64,
        attributes: usize,
    },
    /// A fixed number of points per label class, each losing a fraction of
    /// its observed attributes.
    PerClass {
        per_class: usize,
        entry_fraction: f64,
    },
}

impl HoldoutPlan {
    /// Parses `points=0.2,attrs=2` or `per_class=9,attr_frac=0.2`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("holdout spec item {part:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::InvalidConfig(format!("holdout spec missing {k}")))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("holdout {k}: {e}")))
        };
        if kv.contains_key("points") {
            Ok(HoldoutPlan::PointsAttributes {
                point_fraction: num("points")?,
                attributes: num("attrs")? as usize,
            })
        } else if kv.contains_key("per_class") {
            Ok(HoldoutPlan::PerClass {
                per_class: num("per_class")? as usize,
                entry_fraction: num("attr_frac")?,
            })
        } else {
            Err(Error::InvalidConfig(format!(
                "unrecognized holdout spec {s:?}"
            )))
        }
    }

    pub fn describe(&self) -> String {
        match self {
            HoldoutPlan::PointsAttributes {
                point_fraction,
                attributes,
            } => format!("points={point_fraction},attrs={attributes}"),
            HoldoutPlan::PerClass {
                per_class,
                entry_fraction,
            } => format!("per_class={per_class},attr_frac={entry_fraction}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutEntry {
    pub row: usize,
    pub column: usize,
    pub value: f64,
}

/// Entries removed from the training copy, with their true values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub entries: Vec<HeldOutEntry>,
}

impl Holdout {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.entries.iter().map(|e| e.row).collect();
        rows.dedup();
        rows
    }

    /// The same entries in the layout of [`DatasetSchema::all_gaussian`]:
    /// a held-out categorical becomes one entry per indicator column.
    pub fn all_gaussian(&self, schema: &DatasetSchema) -> Holdout {
        let (_, map) = schema.all_gaussian();
        let mut entries = Vec::new();
        for e in &self.entries {
            let range = map[e.column].clone();
            if range.len() == 1
                && !matches!(
                    schema.column(e.column).likelihood.kind,
                    LikelihoodKind::Categorical { .. }
                )
            {
                entries.push(HeldOutEntry {
                    column: range.start,
                    ..e.clone()
                });
            } else {
                for (k, j) in range.enumerate() {
                    entries.push(HeldOutEntry {
                        row: e.row,
                        column: j,
                        value: if e.value as usize == k { 1.0 } else { 0.0 },
                    });
                }
            }
        }
        Holdout { entries }
    }
}

fn observed_columns(obs: &ObservationMatrix, row: usize) -> Vec<usize> {
    (0..obs.cols())
        .filter(|&c| obs.is_observed(row, c))
        .collect()
}

fn take_entries(
    obs: &ObservationMatrix,
    row: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<HeldOutEntry>,
) {
    let cols = observed_columns(obs, row);
    let mut picked: Vec<usize> = sample(rng, cols.len(), count.min(cols.len()))
        .into_iter()
        .map(|i| cols[i])
        .collect();
    picked.sort_unstable();
    for c in picked {
        out.push(HeldOutEntry {
            row,
            column: c,
            value: obs.get(row, c).expect("observed"),
        });
    }
}

/// Masks randomly chosen observed entries. Deterministic given `seed`;
/// entries already missing are never selected.
pub fn make_holdout(
    obs: &ObservationMatrix,
    plan: &HoldoutPlan,
    seed: u64,
) -> Result<(ObservationMatrix, Holdout)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    match *plan {
        HoldoutPlan::PointsAttributes {
            point_fraction,
            attributes,
        } => {
            if !(0.0..=1.0).contains(&point_fraction) {
                return Err(Error::InvalidConfig(format!(
                    "point fraction {point_fraction} outside [0, 1]"
                )));
            }
            if attributes > obs.cols() {
                return Err(Error::InvalidConfig(format!(
                    "cannot hold out {attributes} of {} attributes",
                    obs.cols()
                )));
            }
            let eligible: Vec<usize> = (0..obs.rows())
                .filter(|&r| observed_columns(obs, r).len() >= attributes.max(1))
                .collect();
            let count = ((point_fraction * obs.rows() as f64).round() as usize).min(eligible.len());
            let mut rows: Vec<usize> = sample(&mut rng, eligible.len(), count)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            rows.sort_unstable();
            for r in rows {
                take_entries(obs, r, attributes, &mut rng, &mut entries);
            }
        }
        HoldoutPlan::PerClass {
            per_class,
            entry_fraction,
        } => {
            if !(0.0..=1.0).contains(&entry_fraction) {
                return Err(Error::InvalidConfig(format!(
                    "entry fraction {entry_fraction} outside [0, 1]"
                )));
            }
            let labels = obs.labels().ok_or(Error::MissingLabelColumn)?;
            let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (r, l) in labels.iter().enumerate() {
                classes.entry(l.as_str()).or_default().push(r);
            }
            let mut rows = Vec::new();
            for (class, members) in &classes {
                if per_class > members.len() {
                    return Err(Error::InvalidConfig(format!(
                        "class {class:?} has {} points, {per_class} requested",
                        members.len()
                    )));
                }
                rows.extend(
                    sample(&mut rng, members.len(), per_class)
                        .into_iter()
                        .map(|i| members[i]),
                );
            }
            rows.sort_unstable();
            for r in rows {
                let n_obs = observed_columns(obs, r).len();
                let count = (entry_fraction * n_obs as f64).round() as usize;
                take_entries(obs, r, count, &mut rng, &mut entries);
            }
        }
    }
    let mut train = obs.clone();
    for e in &entries {
        train.set_missing(e.row, e.column);
    }
    Ok((train, Holdout { entries }))
}

/// Sidecar listing of held-out `(row, column)` pairs with their true values.
pub fn write_holdout_to<W: std::io::Write>(
    mut out: W,
    holdout: &Holdout,
    schema: &DatasetSchema,
    header_comment: &[String],
) -> Result<()> {
    for line in header_comment {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "column", "name", "value"])?;
    for e in &holdout.entries {
        w.write_record([
            e.row.to_string(),
            e.column.to_string(),
            schema.column(e.column).name.clone(),
            format!("{}", e.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_holdout(
    path: &Path,
    holdout: &Holdout,
    schema: &DatasetSchema,
    header_comment: &[String],
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_holdout_to(file, holdout, schema, header_comment)
}

/// Masks the entries of a previously written holdout. Each entry must be
/// observed in `obs` with the recorded value.
pub fn apply_holdout(obs: &ObservationMatrix, holdout: &Holdout) -> Result<ObservationMatrix> {
    let mut train = obs.clone();
    for e in &holdout.entries {
        if e.row >= obs.rows() || e.column >= obs.cols() {
            return Err(Error::SchemaMismatch(format!(
                "holdout entry ({}, {}) outside a {}x{} dataset",
                e.row,
                e.column,
                obs.rows(),
                obs.cols()
            )));
        }
        match obs.get(e.row, e.column) {
            Some(v) if v == e.value => train.set_missing(e.row, e.column),
            Some(v) => {
                return Err(Error::SchemaMismatch(format!(
                    "holdout entry ({}, {}) records {} but the data has {v}",
                    e.row, e.column, e.value
                )))
            }
            None => {
                return Err(Error::SchemaMismatch(format!(
                    "holdout entry ({}, {}) is already missing in the data",
                    e.row, e.column
                )))
            }
        }
    }
    Ok(train)
}

pub fn read_holdout(path: &Path) -> Result<Holdout> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize, name: &str| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Parse {
                row: i + 1,
                column: name.into(),
                message: "missing field".into(),
            })
        };
        let parse_err = |name: &str, e: String| Error::Parse {
            row: i + 1,
            column: name.into(),
            message: e,
        };
        entries.push(HeldOutEntry {
            row: field(0, "row")?
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("row", e.to_string()))?,
            column: field(1, "column")?
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("column", e.to_string()))?,
            value: field(3, "value")?
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err("value", e.to_string()))?,
        });
    }
    Ok(Holdout { entries })
}
