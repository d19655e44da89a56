use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::{LikelihoodKind, LikelihoodSpec};

/// One feature column of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub likelihood: LikelihoodSpec,
    /// Gaussian columns are standardized unless this is cleared (`nostd` flag).
    pub standardize: bool,
    /// Optional categorical level names; index k is class k.
    pub levels: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn new(name: &str, likelihood: LikelihoodSpec) -> Self {
        Self {
            name: name.to_string(),
            standardize: likelihood.kind == LikelihoodKind::Gaussian,
            likelihood,
            levels: None,
        }
    }

    fn to_line(&self) -> String {
        let mut line = format!("{}:{}", self.name, self.likelihood.kind);
        let mut flags = Vec::new();
        if self.likelihood.freeze_variance {
            flags.push("freeze".to_string());
        }
        if self.likelihood.constrained_first_channel {
            flags.push("constrained".to_string());
        }
        if self.likelihood.kind == LikelihoodKind::Gaussian && !self.standardize {
            flags.push("nostd".to_string());
        }
        if let Some(levels) = &self.levels {
            flags.push(format!("levels={}", levels.join("|")));
        }
        if !flags.is_empty() {
            let _ = write!(line, ":{}", flags.join(","));
        }
        line
    }
}

/// Ordered column declarations plus an optional evaluation-only label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    columns: Vec<ColumnSpec>,
    label: Option<String>,
}

impl DatasetSchema {
    pub fn new(columns: Vec<ColumnSpec>, label: Option<String>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptySchema);
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.name.is_empty() || !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate or empty column name {:?}",
                    c.name
                )));
            }
            if let (Some(levels), LikelihoodKind::Categorical { classes }) =
                (&c.levels, c.likelihood.kind)
            {
                if levels.len() != classes {
                    return Err(Error::SchemaMismatch(format!(
                        "column {:?} declares {} levels for {} classes",
                        c.name,
                        levels.len(),
                        classes
                    )));
                }
            }
        }
        if let Some(l) = &label {
            if seen.contains(l.as_str()) {
                return Err(Error::SchemaMismatch(format!(
                    "label {l:?} is also a feature column"
                )));
            }
        }
        Ok(Self { columns, label })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &ColumnSpec {
        &self.columns[i]
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn without_label(&self) -> Self {
        Self {
            columns: self.columns.clone(),
            label: None,
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Parses `name:kind[:flags]` lines. `#` starts a comment.
    ///
    /// Kinds: `gaussian`, `bernoulli`, `categorical:K`, `poisson`, `label`.
    /// Flags (comma or colon separated): `freeze`, `constrained`, `nostd`,
    /// `levels=a|b|c`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        let mut label = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                row: lineno + 1,
                column: "schema".into(),
                message: format!("{msg}: {line:?}"),
            };
            let parts: Vec<&str> = line.split(':').map(str::trim).collect();
            if parts.len() < 2 || parts[0].is_empty() {
                return Err(bad("expected name:kind"));
            }
            let name = parts[0];
            if parts[1] == "label" {
                if label.replace(name.to_string()).is_some() {
                    return Err(bad("more than one label column"));
                }
                continue;
            }
            let (kind_str, flag_parts) = if parts[1] == "categorical" {
                if parts.len() < 3 {
                    return Err(bad("categorical needs a class count"));
                }
                (format!("categorical:{}", parts[2]), &parts[3..])
            } else {
                (parts[1].to_string(), &parts[2..])
            };
            let kind: LikelihoodKind = kind_str.parse().map_err(|e: Error| bad(&e.to_string()))?;
            let mut col = ColumnSpec::new(name, LikelihoodSpec::new(kind));
            for flag in flag_parts.iter().flat_map(|p| p.split(',')).map(str::trim) {
                match flag {
                    "" => {}
                    "freeze" if kind == LikelihoodKind::Gaussian => {
                        col.likelihood.freeze_variance = true
                    }
                    "nostd" if kind == LikelihoodKind::Gaussian => col.standardize = false,
                    "constrained" if matches!(kind, LikelihoodKind::Categorical { .. }) => {
                        col.likelihood.constrained_first_channel = true
                    }
                    f if f.starts_with("levels=")
                        && matches!(kind, LikelihoodKind::Categorical { .. }) =>
                    {
                        col.levels = Some(
                            f["levels=".len()..]
                                .split('|')
                                .map(str::to_string)
                                .collect(),
                        );
                    }
                    other => return Err(bad(&format!("unknown flag {other:?} for {kind}"))),
                }
            }
            columns.push(col);
        }
        Self::new(columns, label)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push_str(&c.to_line());
            out.push('\n');
        }
        if let Some(l) = &self.label {
            let _ = writeln!(out, "{l}:label");
        }
        out
    }

    /// Same columns with every likelihood widened to a Gaussian: bernoulli
    /// and poisson become one gaussian column, a K-class categorical becomes
    /// K one-hot gaussian columns named `name=k`. Returns the new schema and,
    /// per original column, the range of new columns it maps to.
    pub fn all_gaussian(&self) -> (DatasetSchema, Vec<std::ops::Range<usize>>) {
        let mut cols = Vec::new();
        let mut map = Vec::new();
        for c in &self.columns {
            let start = cols.len();
            match c.likelihood.kind {
                LikelihoodKind::Gaussian => cols.push(c.clone()),
                LikelihoodKind::Poisson => {
                    cols.push(ColumnSpec::new(&c.name, LikelihoodSpec::gaussian()))
                }
                LikelihoodKind::Bernoulli => {
                    let mut g = ColumnSpec::new(&c.name, LikelihoodSpec::gaussian());
                    g.standardize = false;
                    cols.push(g);
                }
                LikelihoodKind::Categorical { classes } => {
                    for k in 0..classes {
                        let mut g =
                            ColumnSpec::new(&format!("{}={k}", c.name), LikelihoodSpec::gaussian());
                        g.standardize = false;
                        cols.push(g);
                    }
                }
            }
            map.push(start..cols.len());
        }
        let schema =
            DatasetSchema::new(cols, self.label.clone()).expect("derived names are unique");
        (schema, map)
    }
}
