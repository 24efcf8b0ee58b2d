//! Dataset schema, CSV ingestion, and descriptive statistics.
//!
//! A [`Dataset`] couples a declared [`Schema`] with column-typed storage:
//! a numeric covariate matrix (categorical columns integer-coded), one
//! treatment label per row, and one or more outcome columns. Datasets are
//! immutable after load and safe to share across threads.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance};

/// Standardized differences above this value are conventionally flagged
/// as `large`.
pub const LARGE_STD_DIFF: f64 = 20.0;

/// Statistical type of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    /// Integer-coded with a natural ordering (e.g. education levels).
    OrderedCategorical { categories: u32 },
    /// Integer-coded without ordering (e.g. sectors); codes are dense and
    /// 0-based.
    UnorderedCategorical { categories: u32 },
}

impl ColumnKind {
    pub fn categories(&self) -> Option<u32> {
        match self {
            ColumnKind::Continuous => None,
            ColumnKind::OrderedCategorical { categories }
            | ColumnKind::UnorderedCategorical { categories } => Some(*categories),
        }
    }
}

/// Role a column plays in the pipeline. Covariate roles may be combined on
/// one column; `Treatment`, `Outcome` and `Id` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Confounder used for selection correction (part of X).
    Confounder,
    /// Heterogeneity variable Z for group effects.
    Heterogeneity,
    /// Balancing variable W for BGATEs.
    Balancing,
    /// Policy variable V available to policy trees.
    Policy,
    /// Treatment label D.
    Treatment,
    /// Outcome Y.
    Outcome,
    /// Row identifier.
    Id,
}

impl Role {
    fn is_exclusive(self) -> bool {
        matches!(self, Role::Treatment | Role::Outcome | Role::Id)
    }

    /// Covariate roles end up in the feature matrix.
    pub fn is_covariate(self) -> bool {
        matches!(
            self,
            Role::Confounder | Role::Heterogeneity | Role::Balancing | Role::Policy
        )
    }
}

/// Declared name, kind, and role set of one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub roles: BTreeSet<Role>,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind, roles: &[Role]) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind,
            roles: roles.iter().copied().collect(),
        }
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

/// Validated list of [`ColumnSpec`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ColumnSpec>", into = "Vec<ColumnSpec>")]
pub struct Schema {
    columns: Vec<ColumnSpec>,
}

impl TryFrom<Vec<ColumnSpec>> for Schema {
    type Error = Error;
    fn try_from(columns: Vec<ColumnSpec>) -> Result<Self> {
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<ColumnSpec> {
    fn from(s: Schema) -> Vec<ColumnSpec> {
        s.columns
    }
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for col in &columns {
            if !seen.insert(col.name.clone()) {
                return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
            }
            if col.roles.is_empty() {
                return Err(Error::Schema(format!("column `{}` has no role", col.name)));
            }
            for role in &col.roles {
                if role.is_exclusive() && col.roles.len() > 1 {
                    return Err(Error::Schema(format!(
                        "column `{}`: role {:?} cannot be combined with other roles",
                        col.name, role
                    )));
                }
            }
        }
        let treatments: Vec<_> = columns
            .iter()
            .filter(|c| c.has_role(Role::Treatment))
            .collect();
        if treatments.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one treatment column, found {}",
                treatments.len()
            )));
        }
        if treatments[0].kind.categories().is_none() {
            return Err(Error::Schema(
                "treatment column must be categorical with a declared arm count".into(),
            ));
        }
        if !columns.iter().any(|c| c.has_role(Role::Outcome)) {
            return Err(Error::Schema("at least one outcome column required".into()));
        }
        if columns.iter().filter(|c| c.has_role(Role::Id)).count() > 1 {
            return Err(Error::Schema("at most one id column allowed".into()));
        }
        Ok(Schema { columns })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)?;
        Ok(schema)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.columns)?)?;
        Ok(())
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Number of treatment arms K declared on the treatment column.
    pub fn n_treatments(&self) -> u32 {
        self.treatment_column().kind.categories().unwrap()
    }

    pub fn treatment_column(&self) -> &ColumnSpec {
        self.columns
            .iter()
            .find(|c| c.has_role(Role::Treatment))
            .expect("validated schema has a treatment column")
    }

    pub fn covariate_columns(&self) -> Vec<&ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| c.roles.iter().any(|r| r.is_covariate()))
            .collect()
    }

    pub fn outcome_columns(&self) -> Vec<&ColumnSpec> {
        self.columns
            .iter()
            .filter(|c| c.has_role(Role::Outcome))
            .collect()
    }

    pub fn id_column(&self) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.has_role(Role::Id))
    }
}

/// Feature type as seen by tree learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Ordered { categories: u32 },
    Unordered { categories: u32 },
}

impl From<ColumnKind> for FeatureKind {
    fn from(kind: ColumnKind) -> Self {
        match kind {
            ColumnKind::Continuous => FeatureKind::Continuous,
            ColumnKind::OrderedCategorical { categories } => FeatureKind::Ordered { categories },
            ColumnKind::UnorderedCategorical { categories } => {
                FeatureKind::Unordered { categories }
            }
        }
    }
}

/// Dense row-major feature matrix handed to forests and policy trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
    kinds: Vec<FeatureKind>,
    names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(n: usize, values: Vec<f64>, kinds: Vec<FeatureKind>, names: Vec<String>) -> Self {
        let p = kinds.len();
        assert_eq!(values.len(), n * p, "feature matrix shape mismatch");
        assert_eq!(names.len(), p);
        FeatureMatrix {
            n,
            p,
            values,
            kinds,
            names,
        }
    }

    /// Continuous matrix without names, mostly for tests and synthetic data.
    pub fn continuous(n: usize, p: usize, values: Vec<f64>) -> Self {
        FeatureMatrix::new(
            n,
            values,
            vec![FeatureKind::Continuous; p],
            (0..p).map(|j| format!("x{j}")).collect(),
        )
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.p + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.p..(row + 1) * self.p]
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Copies the selected rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.p);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        FeatureMatrix::new(rows.len(), values, self.kinds.clone(), self.names.clone())
    }
}

/// Immutable dataset: schema plus column-typed storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Schema,
    n: usize,
    /// Covariate matrix, n x p row-major, columns in schema order.
    covariates: Vec<f64>,
    treatment: Vec<u32>,
    /// Outcome matrix, n x m row-major.
    outcomes: Vec<f64>,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn from_parts(
        schema: Schema,
        covariates: Vec<f64>,
        treatment: Vec<u32>,
        outcomes: Vec<f64>,
        ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        let n = treatment.len();
        let p = schema.covariate_columns().len();
        let m = schema.outcome_columns().len();
        if covariates.len() != n * p {
            return Err(Error::Schema(format!(
                "covariate matrix has {} values, expected {}",
                covariates.len(),
                n * p
            )));
        }
        if outcomes.len() != n * m {
            return Err(Error::Schema(format!(
                "outcome matrix has {} values, expected {}",
                outcomes.len(),
                n * m
            )));
        }
        let k = schema.n_treatments();
        for (row, &d) in treatment.iter().enumerate() {
            if d >= k {
                return Err(Error::Cell {
                    row,
                    column: schema.treatment_column().name.clone(),
                    message: format!("treatment label {d} outside 0..{k}"),
                });
            }
        }
        for (idx, &y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::Cell {
                    row: idx / m.max(1),
                    column: "outcome".into(),
                    message: "non-finite outcome".into(),
                });
            }
        }
        let ids = ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n {
            return Err(Error::Schema("id vector length mismatch".into()));
        }
        Ok(Dataset {
            schema,
            n,
            covariates,
            treatment,
            outcomes,
            ids,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_treatments(&self) -> u32 {
        self.schema.n_treatments()
    }

    pub fn treatment(&self) -> &[u32] {
        &self.treatment
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn n_outcomes(&self) -> usize {
        self.schema.outcome_columns().len()
    }

    /// One outcome column as an owned vector.
    pub fn outcome_column(&self, idx: usize) -> Vec<f64> {
        let m = self.n_outcomes();
        assert!(idx < m, "outcome index {idx} out of range");
        (0..self.n).map(|r| self.outcomes[r * m + idx]).collect()
    }

    pub fn outcome_names(&self) -> Vec<String> {
        self.schema
            .outcome_columns()
            .iter()
            .map(|c| c.name.clone())
            .collect()
    }

    /// Index of a covariate column by name.
    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.schema
            .covariate_columns()
            .iter()
            .position(|c| c.name == name)
    }

    /// One covariate column as an owned vector.
    pub fn covariate_column(&self, idx: usize) -> Vec<f64> {
        let p = self.schema.covariate_columns().len();
        assert!(idx < p, "covariate index {idx} out of range");
        (0..self.n).map(|r| self.covariates[r * p + idx]).collect()
    }

    /// Feature matrix over all covariate columns.
    pub fn features(&self) -> FeatureMatrix {
        let cols: Vec<usize> = (0..self.schema.covariate_columns().len()).collect();
        self.features_of(&cols)
    }

    /// Feature matrix over covariate columns carrying `role`.
    pub fn features_for_role(&self, role: Role) -> FeatureMatrix {
        let cols: Vec<usize> = self
            .schema
            .covariate_columns()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.has_role(role))
            .map(|(i, _)| i)
            .collect();
        self.features_of(&cols)
    }

    /// Feature matrix over the given covariate column indices.
    pub fn features_of(&self, cols: &[usize]) -> FeatureMatrix {
        let specs = self.schema.covariate_columns();
        let p = cols.len();
        let mut values = Vec::with_capacity(self.n * p);
        let full_p = specs.len();
        for r in 0..self.n {
            for &c in cols {
                values.push(self.covariates[r * full_p + c]);
            }
        }
        let kinds = cols.iter().map(|&c| specs[c].kind.into()).collect();
        let names = cols.iter().map(|&c| specs[c].name.clone()).collect();
        FeatureMatrix::new(self.n, values, kinds, names)
    }

    /// New dataset containing only the selected rows.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let p = self.schema.covariate_columns().len();
        let m = self.n_outcomes();
        let mut covariates = Vec::with_capacity(rows.len() * p);
        let mut outcomes = Vec::with_capacity(rows.len() * m);
        let mut treatment = Vec::with_capacity(rows.len());
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            covariates.extend_from_slice(&self.covariates[r * p..(r + 1) * p]);
            outcomes.extend_from_slice(&self.outcomes[r * m..(r + 1) * m]);
            treatment.push(self.treatment[r]);
            ids.push(self.ids[r]);
        }
        Dataset {
            schema: self.schema.clone(),
            n: rows.len(),
            covariates,
            treatment,
            outcomes,
            ids,
        }
    }

    /// Row indices with treatment label `d`.
    pub fn rows_with_treatment(&self, d: u32) -> Vec<usize> {
        (0..self.n).filter(|&r| self.treatment[r] == d).collect()
    }

    /// Writes the dataset back to CSV with columns in schema order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let names: Vec<&str> = self.schema.columns().iter().map(|c| c.name.as_str()).collect();
        writer.write_record(&names)?;
        let cov_specs = self.schema.covariate_columns();
        let p = cov_specs.len();
        let m = self.n_outcomes();
        for r in 0..self.n {
            let mut record: Vec<String> = Vec::with_capacity(names.len());
            let mut cov_idx = 0usize;
            let mut out_idx = 0usize;
            for col in self.schema.columns() {
                if col.has_role(Role::Treatment) {
                    record.push(self.treatment[r].to_string());
                } else if col.has_role(Role::Outcome) {
                    record.push(fmt_cell(self.outcomes[r * m + out_idx], col.kind));
                    out_idx += 1;
                } else if col.has_role(Role::Id) {
                    record.push(self.ids[r].to_string());
                } else {
                    record.push(fmt_cell(self.covariates[r * p + cov_idx], col.kind));
                    cov_idx += 1;
                }
            }
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn fmt_cell(v: f64, kind: ColumnKind) -> String {
    match kind {
        // Shortest round-trip formatting keeps continuous values bit-exact.
        ColumnKind::Continuous => format!("{v}"),
        _ => format!("{}", v as i64),
    }
}

/// Loads a CSV file against a declared schema.
///
/// The header must contain every schema column (extra file columns are
/// ignored). Cells must be non-missing and parse under the declared kind;
/// violations are reported with their row and column.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns().len());
    for col in schema.columns() {
        let pos = headers
            .iter()
            .position(|h| h == col.name)
            .ok_or_else(|| Error::Schema(format!("missing column `{}` in header", col.name)))?;
        positions.push(pos);
    }

    let k = schema.n_treatments();
    let cov_count = schema.covariate_columns().len();
    let out_count = schema.outcome_columns().len();
    let mut covariates = Vec::new();
    let mut treatment = Vec::new();
    let mut outcomes = Vec::new();
    let mut ids: Vec<u64> = Vec::new();
    let has_id = schema.id_column().is_some();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let mut row_cov = Vec::with_capacity(cov_count);
        let mut row_out = Vec::with_capacity(out_count);
        for (col, &pos) in schema.columns().iter().zip(&positions) {
            let raw = record.get(pos).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(Error::Cell {
                    row: row_idx,
                    column: col.name.clone(),
                    message: "missing value (missing data is not supported; pre-code sentinels)"
                        .into(),
                });
            }
            if col.has_role(Role::Treatment) {
                let label: u32 = raw.parse().map_err(|_| Error::Cell {
                    row: row_idx,
                    column: col.name.clone(),
                    message: format!("unparseable treatment label `{raw}`"),
                })?;
                if label >= k {
                    return Err(Error::Cell {
                        row: row_idx,
                        column: col.name.clone(),
                        message: format!("treatment label {label} outside valid range 0..{k}"),
                    });
                }
                treatment.push(label);
            } else if col.has_role(Role::Id) {
                let id: u64 = raw.parse().map_err(|_| Error::Cell {
                    row: row_idx,
                    column: col.name.clone(),
                    message: format!("unparseable id `{raw}`"),
                })?;
                ids.push(id);
            } else {
                let value = parse_numeric(raw, col, row_idx)?;
                if col.has_role(Role::Outcome) {
                    row_out.push(value);
                } else {
                    row_cov.push(value);
                }
            }
        }
        covariates.extend_from_slice(&row_cov);
        outcomes.extend_from_slice(&row_out);
    }

    Dataset::from_parts(
        schema.clone(),
        covariates,
        treatment,
        outcomes,
        if has_id { Some(ids) } else { None },
    )
}

fn parse_numeric(raw: &str, col: &ColumnSpec, row: usize) -> Result<f64> {
    let value: f64 = raw.parse().map_err(|_| Error::Cell {
        row,
        column: col.name.clone(),
        message: format!("unparseable cell `{raw}`"),
    })?;
    if !value.is_finite() {
        return Err(Error::Cell {
            row,
            column: col.name.clone(),
            message: "non-finite value".into(),
        });
    }
    if let Some(categories) = col.kind.categories() {
        if value.fract() != 0.0 || value < 0.0 || value >= categories as f64 {
            return Err(Error::Cell {
                row,
                column: col.name.clone(),
                message: format!("categorical code `{raw}` outside declared set 0..{categories}"),
            });
        }
    }
    Ok(value)
}

/// Standardized difference between two samples, in percentage points:
/// `|mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2) * 100` with unbiased
/// sample variances.
pub fn standardized_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument {
            name: "samples",
            message: "both samples need at least two elements".into(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let pooled = 0.5 * (sample_variance(a) + sample_variance(b));
    if pooled == 0.0 {
        return if ma == mb {
            Ok(0.0)
        } else {
            Err(Error::DegenerateVariance)
        };
    }
    Ok((ma - mb).abs() / pooled.sqrt() * 100.0)
}

/// One covariate-by-group entry of a [`DescriptiveReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptiveRow {
    pub covariate: String,
    pub group: u32,
    pub mean: f64,
    /// Standardized difference versus the control group; `None` when
    /// degenerate (both variances zero with differing means).
    pub std_diff: Option<f64>,
    /// True when the difference exceeds the conventional threshold of 20.
    pub large: bool,
}

/// Covariate means and standardized differences per treatment group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptiveReport {
    pub control: u32,
    pub rows: Vec<DescriptiveRow>,
    pub group_sizes: Vec<(u32, usize)>,
    pub warnings: Vec<String>,
}

impl fmt::Display for DescriptiveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "covariate,group,mean,std_diff,large")?;
        for row in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                row.covariate,
                row.group,
                row.mean,
                row.std_diff.map(|d| d.to_string()).unwrap_or_default(),
                row.large
            )?;
        }
        Ok(())
    }
}

/// Covariate means per treatment group with standardized differences
/// against `control`.
///
/// Groups without observations are omitted and recorded as warnings.
pub fn describe_by_treatment(data: &Dataset, control: u32) -> Result<DescriptiveReport> {
    let k = data.n_treatments();
    if control >= k {
        return Err(Error::InvalidArgument {
            name: "control",
            message: format!("label {control} outside 0..{k}"),
        });
    }
    let control_rows = data.rows_with_treatment(control);
    if control_rows.is_empty() {
        return Err(Error::InvalidArgument {
            name: "control",
            message: format!("control group {control} is empty"),
        });
    }

    let cov_specs = data.schema().covariate_columns();
    let p = cov_specs.len();
    let names: Vec<String> = cov_specs.iter().map(|c| c.name.clone()).collect();

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut group_sizes = Vec::new();
    for d in 0..k {
        let members = data.rows_with_treatment(d);
        if members.is_empty() {
            warnings.push(format!("treatment group {d} is empty and was omitted"));
            continue;
        }
        group_sizes.push((d, members.len()));
        for j in 0..p {
            let values: Vec<f64> = members.iter().map(|&r| data.covariate_value(r, j)).collect();
            let control_values: Vec<f64> =
                control_rows.iter().map(|&r| data.covariate_value(r, j)).collect();
            let std_diff = if d == control {
                Some(0.0)
            } else {
                match standardized_difference(&values, &control_values) {
                    Ok(delta) => Some(delta),
                    Err(Error::DegenerateVariance) => {
                        warnings.push(format!(
                            "degenerate variance for `{}` in group {d}",
                            names[j]
                        ));
                        None
                    }
                    Err(e) => return Err(e),
                }
            };
            rows.push(DescriptiveRow {
                covariate: names[j].clone(),
                group: d,
                mean: mean(&values),
                large: std_diff.map(|v| v > LARGE_STD_DIFF).unwrap_or(false),
                std_diff,
            });
        }
    }
    Ok(DescriptiveReport {
        control,
        rows,
        group_sizes,
        warnings,
    })
}

impl Dataset {
    #[inline]
    pub fn covariate_value(&self, row: usize, col: usize) -> f64 {
        let p = self.schema.covariate_columns().len();
        self.covariates[row * p + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_schema(k: u32) -> Schema {
        Schema::new(vec![
            ColumnSpec::new("id", ColumnKind::Continuous, &[Role::Id]),
            ColumnSpec::new("x1", ColumnKind::Continuous, &[Role::Confounder, Role::Policy]),
            ColumnSpec::new(
                "sector",
                ColumnKind::UnorderedCategorical { categories: 3 },
                &[Role::Confounder, Role::Heterogeneity],
            ),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: k },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap()
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_row_file() {
        let f = write_temp("id,x1,sector,d,y\n1,0.5,0,0,1.0\n2,-0.25,1,1,2.0\n3,1.5,2,0,3.0\n4,0.0,1,1,4.0\n");
        let data = load_csv(f.path(), &demo_schema(2)).unwrap();
        assert_eq!(data.n_rows(), 4);
        assert_eq!(data.treatment(), &[0, 1, 0, 1]);
        assert_eq!(data.ids(), &[1, 2, 3, 4]);
        assert_eq!(data.outcome_column(0), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_out_of_range_treatment_naming_row() {
        let f = write_temp("id,x1,sector,d,y\n1,0.5,0,0,1.0\n2,-0.25,1,5,2.0\n");
        let err = load_csv(f.path(), &demo_schema(5)).unwrap_err();
        match err {
            Error::Cell { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "d");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let f = write_temp("id,x1,sector,d,y\n");
        let data = load_csv(f.path(), &demo_schema(2)).unwrap();
        assert_eq!(data.n_rows(), 0);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let f = write_temp("id,x1,d,y\n1,0.5,0,1.0\n");
        let err = load_csv(f.path(), &demo_schema(2)).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err:?}");
    }

    #[test]
    fn missing_value_rejected() {
        let f = write_temp("id,x1,sector,d,y\n1,,0,0,1.0\n");
        let err = load_csv(f.path(), &demo_schema(2)).unwrap_err();
        assert!(matches!(err, Error::Cell { .. }), "{err:?}");
    }

    #[test]
    fn categorical_code_outside_set_rejected() {
        let f = write_temp("id,x1,sector,d,y\n1,0.5,7,0,1.0\n");
        let err = load_csv(f.path(), &demo_schema(2)).unwrap_err();
        match err {
            Error::Cell { column, .. } => assert_eq!(column, "sector"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn std_diff_matches_hand_computation() {
        // a = {0,2}, b = {1,3}: means 1 and 2, variances 2 and 2,
        // delta = 1 / sqrt(2) * 100 = 70.7106...
        let delta = standardized_difference(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((delta - 100.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((delta - 70.71).abs() < 0.01);
    }

    #[test]
    fn std_diff_identical_groups_zero() {
        let delta = standardized_difference(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn std_diff_degenerate_variance_signalled() {
        let err = standardized_difference(&[1.0, 1.0], &[2.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance));
        // Equal means with zero variances is fine.
        let delta = standardized_difference(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(delta, 0.0);
    }

    #[test]
    fn large_flag_follows_threshold() {
        // delta = 25 should flag as large per the > 20 convention.
        let a = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let sd = sample_variance(&a).sqrt();
        let shift = 0.25 * sd; // delta = 25 exactly with equal variances
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let delta = standardized_difference(&a, &b).unwrap();
        assert!((delta - 25.0).abs() < 1e-9);
        assert!(delta > LARGE_STD_DIFF);
    }

    #[test]
    fn describe_reports_group_deltas() {
        let schema = Schema::new(vec![
            ColumnSpec::new("x1", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: 2 },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap();
        // group 1 has x1 = {0,2}, control group 0 has x1 = {1,3}.
        let data = Dataset::from_parts(
            schema,
            vec![1.0, 3.0, 0.0, 2.0],
            vec![0, 0, 1, 1],
            vec![0.0; 4],
            None,
        )
        .unwrap();
        let report = describe_by_treatment(&data, 0).unwrap();
        let treated_row = report
            .rows
            .iter()
            .find(|r| r.group == 1 && r.covariate == "x1")
            .unwrap();
        assert!((treated_row.std_diff.unwrap() - 70.7106781186).abs() < 1e-6);
        assert!(treated_row.large);
        let control_row = report
            .rows
            .iter()
            .find(|r| r.group == 0 && r.covariate == "x1")
            .unwrap();
        assert_eq!(control_row.std_diff, Some(0.0));
    }

    #[test]
    fn describe_identical_groups_all_zero() {
        let schema = Schema::new(vec![
            ColumnSpec::new("x1", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: 2 },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap();
        let data = Dataset::from_parts(
            schema,
            vec![1.0, 2.0, 1.0, 2.0],
            vec![0, 0, 1, 1],
            vec![0.0; 4],
            None,
        )
        .unwrap();
        let report = describe_by_treatment(&data, 0).unwrap();
        assert!(report.rows.iter().all(|r| r.std_diff == Some(0.0)));
    }

    #[test]
    fn describe_shape_for_five_arms() {
        let schema = Schema::new(vec![
            ColumnSpec::new("x1", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new("x2", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: 5 },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap();
        let n_per = 4;
        let mut cov = Vec::new();
        let mut d = Vec::new();
        for arm in 0..5u32 {
            for i in 0..n_per {
                cov.push(arm as f64 + i as f64);
                cov.push(i as f64);
                d.push(arm);
            }
        }
        let data =
            Dataset::from_parts(schema, cov, d, vec![0.0; 5 * n_per], None).unwrap();
        let report = describe_by_treatment(&data, 0).unwrap();
        // (K-1) * p non-control delta entries, all populated.
        let non_control: Vec<_> = report.rows.iter().filter(|r| r.group != 0).collect();
        assert_eq!(non_control.len(), 4 * 2);
        assert!(non_control.iter().all(|r| r.std_diff.is_some()));
    }

    #[test]
    fn empty_group_omitted_with_warning() {
        let schema = Schema::new(vec![
            ColumnSpec::new("x1", ColumnKind::Continuous, &[Role::Confounder]),
            ColumnSpec::new(
                "d",
                ColumnKind::UnorderedCategorical { categories: 3 },
                &[Role::Treatment],
            ),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap();
        let data = Dataset::from_parts(
            schema,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0, 0, 1, 1],
            vec![0.0; 4],
            None,
        )
        .unwrap();
        let report = describe_by_treatment(&data, 0).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("2")));
        assert!(report.rows.iter().all(|r| r.group != 2));
    }

    #[test]
    fn exclusive_roles_enforced() {
        let err = Schema::new(vec![
            ColumnSpec::new("d", ColumnKind::UnorderedCategorical { categories: 2 }, &[
                Role::Treatment,
                Role::Confounder,
            ]),
            ColumnSpec::new("y", ColumnKind::Continuous, &[Role::Outcome]),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let f = write_temp(
            "id,x1,sector,d,y\n1,0.123456789012345,0,0,1.5\n2,-2.718281828459045,2,1,2.25\n",
        );
        let schema = demo_schema(2);
        let data = load_csv(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        data.write_csv(out.path()).unwrap();
        let reloaded = load_csv(out.path(), &schema).unwrap();
        assert_eq!(data, reloaded);
    }

    proptest! {
        #[test]
        fn std_diff_symmetric_and_shift_scale_invariant(
            a in proptest::collection::vec(-50.0..50.0f64, 2..12),
            b in proptest::collection::vec(-50.0..50.0f64, 2..12),
            shift in -100.0..100.0f64,
            scale in 0.1..10.0f64,
        ) {
            let d_ab = standardized_difference(&a, &b);
            let d_ba = standardized_difference(&b, &a);
            match (d_ab, d_ba) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                    let a2: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
                    let b2: Vec<f64> = b.iter().map(|v| v * scale + shift).collect();
                    let d2 = standardized_difference(&a2, &b2).unwrap();
                    prop_assert!((x - d2).abs() <= 1e-6 * x.abs().max(1.0));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "symmetry of error behaviour violated"),
            }
        }
    }
}
