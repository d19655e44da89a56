//! Dataset schema, delimited-text ingestion, preprocessing, holdout masks
//! and synthetic data drawn from the generative model.

mod holdout;
mod schema;
mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use holdout::{
    apply_holdout, make_holdout, read_holdout, write_holdout, write_holdout_to, HeldOutEntry,
    Holdout, HoldoutPlan,
};
pub use schema::{ColumnSpec, DatasetSchema};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::likelihoods::LikelihoodKind;

pub const DEFAULT_MISSING_TOKENS: [&str; 3] = ["", "?", "NA"];

/// Encoded observations (categoricals as class indices) with an observed mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationMatrix {
    values: Matrix,
    mask: Vec<bool>,
    labels: Option<Vec<String>>,
}

impl ObservationMatrix {
    /// Builds a matrix; masked-out values are stored as 0.
    pub fn new(mut values: Matrix, mask: Vec<bool>, labels: Option<Vec<String>>) -> Result<Self> {
        if mask.len() != values.len() {
            return Err(Error::shape(
                "observations",
                values.shape(),
                (mask.len(), 1),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != values.rows() {
                return Err(Error::shape("labels", values.shape(), (l.len(), 1)));
            }
        }
        for (v, m) in values.as_mut_slice().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            mask,
            labels,
        })
    }

    pub fn fully_observed(values: Matrix) -> Self {
        let mask = vec![true; values.len()];
        Self {
            values,
            mask,
            labels: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.is_observed(row, col).then(|| self.values[(row, col)])
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cols() + col]
    }

    pub fn set_missing(&mut self, row: usize, col: usize) {
        let c = self.cols();
        self.mask[row * c + col] = false;
        self.values[(row, col)] = 0.0;
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.mask[row * c + col] = true;
        self.values[(row, col)] = value;
    }

    pub fn column_values(&self, col: usize) -> Vec<f64> {
        self.values.col(col)
    }

    pub fn column_mask(&self, col: usize) -> Vec<bool> {
        (0..self.rows()).map(|r| self.is_observed(r, col)).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<String>>) -> Self {
        self.labels = labels;
        self
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.cols();
        let values = Matrix::from_fn(rows.len(), c, |i, j| self.values[(rows[i], j)]);
        let mask = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| (r, j)))
            .map(|(r, j)| self.is_observed(r, j))
            .collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r].clone()).collect());
        Self {
            values,
            mask,
            labels,
        }
    }

    /// Checks every observed value against its column's likelihood support.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        if schema.len() != self.cols() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns in data, {} in schema",
                self.cols(),
                schema.len()
            )));
        }
        for r in 0..self.rows() {
            for (c, col) in schema.columns().iter().enumerate() {
                if let Some(v) = self.get(r, c) {
                    col.likelihood.validate(v)?;
                }
            }
        }
        Ok(())
    }

    /// Re-encodes data for [`DatasetSchema::all_gaussian`]: categoricals
    /// become one-hot indicator columns, other values are copied.
    pub fn all_gaussian(&self, schema: &DatasetSchema) -> Self {
        let (wide, map) = schema.all_gaussian();
        let n = self.rows();
        let mut values = Matrix::zeros(n, wide.len());
        let mut mask = vec![false; n * wide.len()];
        for r in 0..n {
            for (c, col) in schema.columns().iter().enumerate() {
                let Some(v) = self.get(r, c) else { continue };
                let range = map[c].clone();
                match col.likelihood.kind {
                    LikelihoodKind::Categorical { .. } => {
                        for (k, j) in range.enumerate() {
                            values[(r, j)] = if v as usize == k { 1.0 } else { 0.0 };
                            mask[r * wide.len() + j] = true;
                        }
                    }
                    _ => {
                        values[(r, range.start)] = v;
                        mask[r * wide.len() + range.start] = true;
                    }
                }
            }
        }
        Self {
            values,
            mask,
            labels: self.labels.clone(),
        }
    }
}

/// Delimited-text reader settings.
#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub missing_tokens: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            missing_tokens: DEFAULT_MISSING_TOKENS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

fn parse_cell(col: &ColumnSpec, raw: &str, row: usize) -> Result<f64> {
    let err = |message: String| Error::Parse {
        row,
        column: col.name.clone(),
        message,
    };
    let value = match (&col.levels, col.likelihood.kind) {
        (Some(levels), LikelihoodKind::Categorical { .. }) => {
            levels
                .iter()
                .position(|l| l == raw)
                .ok_or_else(|| err(format!("unknown level {raw:?}")))? as f64
        }
        _ => raw
            .parse::<f64>()
            .map_err(|e| err(format!("{raw:?}: {e}")))?,
    };
    col.likelihood
        .validate(value)
        .map_err(|e| err(e.to_string()))?;
    Ok(value)
}

/// Reads a CSV with a header row. Lines starting with `#` are comments.
pub fn load_csv(
    path: &Path,
    schema: &DatasetSchema,
    options: &CsvOptions,
) -> Result<ObservationMatrix> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, options)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &DatasetSchema,
    options: &CsvOptions,
) -> Result<ObservationMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let mut feature_pos = Vec::with_capacity(schema.len());
    for c in schema.columns() {
        let pos = index
            .get(c.name.as_str())
            .ok_or_else(|| Error::SchemaMismatch(format!("column {:?} not in header", c.name)))?;
        feature_pos.push(*pos);
    }
    let label_pos =
        match schema.label() {
            Some(l) => Some(*index.get(l).ok_or_else(|| {
                Error::SchemaMismatch(format!("label column {l:?} not in header"))
            })?),
            None => None,
        };
    let expected = schema.len() + usize::from(label_pos.is_some());
    if headers.len() != expected {
        let unknown: Vec<&String> = headers
            .iter()
            .filter(|h| schema.position(h).is_none() && schema.label() != Some(h.as_str()))
            .collect();
        return Err(Error::SchemaMismatch(format!(
            "unexpected header columns {unknown:?}"
        )));
    }

    let mut data = Vec::new();
    let mut mask = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, got {}", headers.len(), rec.len()),
            });
        }
        for (c, col) in schema.columns().iter().enumerate() {
            let raw = &rec[feature_pos[c]];
            if options.missing_tokens.iter().any(|t| t == raw) {
                data.push(0.0);
                mask.push(false);
            } else {
                data.push(parse_cell(col, raw, row)?);
                mask.push(true);
            }
        }
        if let Some(p) = label_pos {
            labels.push(rec[p].to_string());
        }
    }
    let n = data.len() / schema.len();
    ObservationMatrix::new(
        Matrix::from_vec(n, schema.len(), data),
        mask,
        label_pos.map(|_| labels),
    )
}

/// Writes observations as CSV; missing entries become empty cells.
/// `header_comment` lines are emitted first, each prefixed with `# `.
pub fn write_csv<W: std::io::Write>(
    mut writer: W,
    obs: &ObservationMatrix,
    schema: &DatasetSchema,
    header_comment: &[String],
) -> Result<()> {
    for line in header_comment {
        writeln!(writer, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    let write_labels = schema.label().is_some() && obs.labels().is_some();
    if write_labels {
        header.push(schema.label().unwrap_or_default());
    }
    w.write_record(&header)?;
    for r in 0..obs.rows() {
        let mut rec: Vec<String> = schema
            .columns()
            .iter()
            .enumerate()
            .map(|(c, col)| match obs.get(r, c) {
                None => String::new(),
                Some(v) => match &col.levels {
                    Some(levels) => levels[v as usize].clone(),
                    None => format!("{v}"),
                },
            })
            .collect();
        if write_labels {
            rec.push(obs.labels().expect("checked")[r].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(
    path: &Path,
    obs: &ObservationMatrix,
    schema: &DatasetSchema,
    header_comment: &[String],
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(file, obs, schema, header_comment)
}

/// Per-column affine transform applied to gaussian columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// `(mean, scale)` for transformed columns, `None` elsewhere.
    pub columns: Vec<Option<(f64, f64)>>,
}

impl Standardization {
    pub fn identity(cols: usize) -> Self {
        Self {
            columns: vec![None; cols],
        }
    }

    pub fn forward(&self, col: usize, v: f64) -> f64 {
        match self.columns[col] {
            Some((m, s)) => (v - m) / s,
            None => v,
        }
    }

    pub fn inverse(&self, col: usize, v: f64) -> f64 {
        match self.columns[col] {
            Some((m, s)) => v * s + m,
            None => v,
        }
    }

    /// Log-density correction from standardized to original units.
    pub fn log_jacobian(&self, col: usize) -> f64 {
        match self.columns[col] {
            Some((_, s)) => -s.ln(),
            None => 0.0,
        }
    }

    pub fn apply(&self, obs: &ObservationMatrix) -> ObservationMatrix {
        let mut out = obs.clone();
        for r in 0..obs.rows() {
            for c in 0..obs.cols() {
                if let Some(v) = obs.get(r, c) {
                    out.values[(r, c)] = self.forward(c, v);
                }
            }
        }
        out
    }

    pub fn invert(&self, obs: &ObservationMatrix) -> ObservationMatrix {
        let mut out = obs.clone();
        for r in 0..obs.rows() {
            for c in 0..obs.cols() {
                if let Some(v) = obs.get(r, c) {
                    out.values[(r, c)] = self.inverse(c, v);
                }
            }
        }
        out
    }
}

/// Shifts and scales every gaussian column flagged for standardization to
/// zero mean and unit variance over its observed entries.
pub fn standardize(
    obs: &ObservationMatrix,
    schema: &DatasetSchema,
) -> (ObservationMatrix, Standardization) {
    let mut columns = vec![None; obs.cols()];
    for (c, col) in schema.columns().iter().enumerate() {
        if col.likelihood.kind != LikelihoodKind::Gaussian || !col.standardize {
            continue;
        }
        let vals: Vec<f64> = (0..obs.rows()).filter_map(|r| obs.get(r, c)).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 {
            var.sqrt()
        } else {
            log::warn!("column {:?} has zero variance; using scale 1", col.name);
            1.0
        };
        columns[c] = Some((mean, scale));
    }
    let st = Standardization { columns };
    (st.apply(obs), st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema3() -> DatasetSchema {
        DatasetSchema::parse("a:gaussian\nb:gaussian\nc:bernoulli\n").unwrap()
    }

    #[test]
    fn missing_markers_become_mask() {
        let csv = "a,b,c\n1,?,0\n";
        let obs = read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()).unwrap();
        assert_eq!(obs.column_mask(0), vec![true]);
        assert_eq!(obs.column_mask(1), vec![false]);
        assert_eq!(obs.column_mask(2), vec![true]);
        let csv = "c,b,a\n1,NA,\n";
        let obs = read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()).unwrap();
        assert_eq!(obs.get(0, 2), Some(1.0));
        assert_eq!(obs.observed_count(), 1);
    }

    #[test]
    fn parse_errors_carry_coordinates() {
        let csv = "a,b,c\n1,2,0\n1,x,1\n";
        match read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        let csv = "a,b,c\n1,2,3\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()),
            Err(Error::Parse { row: 1, .. })
        ));
        let csv = "a,b\n1,2\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()),
            Err(Error::SchemaMismatch(_))
        ));
        let csv = "a,b,c,d\n1,2,0,4\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema3(), &CsvOptions::default()),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn levels_labels_and_delimiters() {
        let schema =
            DatasetSchema::parse("sex:categorical:3:levels=M|F|I\nlen:gaussian\nrings:label\n")
                .unwrap();
        let csv = "sex;len;rings\nM;0.45;15\nI;0.3;7\n";
        let opts = CsvOptions {
            delimiter: b';',
            ..CsvOptions::default()
        };
        let obs = read_csv(csv.as_bytes(), &schema, &opts).unwrap();
        assert_eq!(obs.get(1, 0), Some(2.0));
        assert_eq!(obs.labels().unwrap(), ["15", "7"]);
    }

    #[test]
    fn standardize_arithmetic() {
        let schema = DatasetSchema::parse("a:gaussian\nc:bernoulli\n").unwrap();
        let obs = ObservationMatrix::fully_observed(Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![2.0, 0.0],
            vec![3.0, 1.0],
        ]));
        let (s, st) = standardize(&obs, &schema);
        let col = s.column_values(0);
        for (v, e) in col.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert!((v - e).abs() < 1e-12);
        }
        assert_eq!(s.column_values(1), vec![1.0, 0.0, 1.0]);
        let (again, _) = standardize(&s, &schema);
        assert!(again.values().sub(s.values()).max_abs() < 1e-12);
        let back = st.invert(&s);
        assert!(back.values().sub(obs.values()).max_abs() < 1e-12);
    }

    #[test]
    fn zero_variance_uses_unit_scale() {
        let schema = DatasetSchema::parse("a:gaussian\n").unwrap();
        let obs = ObservationMatrix::fully_observed(Matrix::from_rows(&[vec![2.0], vec![2.0]]));
        let (s, st) = standardize(&obs, &schema);
        assert_eq!(st.columns[0], Some((2.0, 1.0)));
        assert_eq!(s.column_values(0), vec![0.0, 0.0]);
    }

    #[test]
    fn all_gaussian_one_hot() {
        let schema = DatasetSchema::parse("x:gaussian\nc:categorical:3\n").unwrap();
        let mut obs =
            ObservationMatrix::fully_observed(Matrix::from_rows(&[vec![0.5, 2.0], vec![1.5, 0.0]]));
        obs.set_missing(1, 1);
        let wide = obs.all_gaussian(&schema);
        assert_eq!(wide.cols(), 4);
        assert_eq!(
            (0..4).map(|c| wide.get(0, c)).collect::<Vec<_>>(),
            vec![Some(0.5), Some(0.0), Some(0.0), Some(1.0)]
        );
        assert_eq!(
            (1..4).map(|c| wide.get(1, c)).collect::<Vec<_>>(),
            vec![None, None, None]
        );
    }

    fn arb_obs() -> impl Strategy<Value = ObservationMatrix> {
        (1usize..8).prop_flat_map(|n| {
            let cells = prop::collection::vec(
                (
                    -1e6..1e6f64,
                    0u8..2,
                    0u8..3,
                    0u32..50,
                    prop::bool::weighted(0.8),
                ),
                n * 4,
            );
            cells.prop_map(move |cells| {
                let mut data = Vec::new();
                let mut mask = Vec::new();
                for (i, (g, b, c, p, m)) in cells.iter().enumerate() {
                    let v = match i % 4 {
                        0 => *g,
                        1 => *b as f64,
                        2 => *c as f64,
                        _ => *p as f64,
                    };
                    data.push(v);
                    mask.push(*m);
                }
                ObservationMatrix::new(Matrix::from_vec(n, 4, data), mask, None).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(obs in arb_obs()) {
            let schema = DatasetSchema::parse("g:gaussian\nb:bernoulli\nc:categorical:3\np:poisson\n").unwrap();
            let mut buf = Vec::new();
            write_csv(&mut buf, &obs, &schema, &["seed=1".to_string()]).unwrap();
            let back = read_csv(buf.as_slice(), &schema, &CsvOptions::default()).unwrap();
            prop_assert_eq!(back, obs);
        }

        #[test]
        fn standardize_inverse_identity(vals in prop::collection::vec(-1e3..1e3f64, 2..20)) {
            let schema = DatasetSchema::parse("a:gaussian\n").unwrap();
            let obs = ObservationMatrix::fully_observed(Matrix::column_vector(&vals));
            let (s, st) = standardize(&obs, &schema);
            let back = st.invert(&s);
            for (a, b) in back.column_values(0).iter().zip(&vals) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
