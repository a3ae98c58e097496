//! Conjoint data ingestion: attribute schema, dummy coding, profile-pair
//! differencing and covariate standardization.
//!
//! A [`ConjointDataset`] is immutable once built. Rows belonging to one
//! respondent are stored contiguously, and every row carries the
//! difference `encode(profile 1) - encode(profile 2)` with the outcome
//! `y = 1` when profile 1 was chosen.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("attribute `{attribute}` has no level named `{level}`")]
    UnknownLevel { attribute: String, level: String },
    #[error("respondent `{0}` has no row in the covariates file")]
    MissingCovariates(String),
    #[error("respondent `{respondent}`, task `{task}`: {message}")]
    BadTask {
        respondent: String,
        task: String,
        message: String,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    Empty(String),
}

type Result<T> = std::result::Result<T, DataError>;

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttributeKind {
    /// Dummy coded against `reference`; contributes `levels.len() - 1` columns.
    Categorical {
        levels: Vec<String>,
        reference: usize,
    },
    /// Passed through unscaled as a single column.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
}

impl Attribute {
    pub fn categorical(name: &str, levels: &[&str], reference: usize) -> Self {
        Attribute {
            name: name.to_string(),
            kind: AttributeKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
                reference,
            },
        }
    }

    pub fn continuous(name: &str) -> Self {
        Attribute {
            name: name.to_string(),
            kind: AttributeKind::Continuous,
        }
    }
}

/// One encoded design column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub attribute: usize,
    /// Level index for dummy columns, `None` for continuous attributes.
    pub level: Option<usize>,
    pub name: String,
}

/// Ordered attributes and the encoded column layout they induce.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    columns: Vec<Column>,
    /// Column range of each attribute.
    spans: Vec<Range<usize>>,
}

/// A single profile's value for one attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Level(usize),
    Value(f64),
}

#[derive(Deserialize)]
struct SchemaFile {
    #[serde(rename = "attribute")]
    attributes: Vec<RawAttribute>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawReference {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct RawAttribute {
    name: String,
    #[serde(default)]
    levels: Vec<String>,
    reference: Option<RawReference>,
    #[serde(default)]
    continuous: bool,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(DataError::Schema("no attributes declared".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut columns = Vec::new();
        let mut spans = Vec::with_capacity(attributes.len());
        for (a, attr) in attributes.iter().enumerate() {
            if !seen.insert(attr.name.as_str()) {
                return Err(DataError::Schema(format!(
                    "duplicate attribute `{}`",
                    attr.name
                )));
            }
            let start = columns.len();
            match &attr.kind {
                AttributeKind::Categorical { levels, reference } => {
                    if levels.len() < 2 {
                        return Err(DataError::Schema(format!(
                            "attribute `{}` needs at least two levels",
                            attr.name
                        )));
                    }
                    if *reference >= levels.len() {
                        return Err(DataError::Schema(format!(
                            "attribute `{}`: reference index {} out of range",
                            attr.name, reference
                        )));
                    }
                    let mut names = std::collections::HashSet::new();
                    for l in levels {
                        if !names.insert(l.as_str()) {
                            return Err(DataError::Schema(format!(
                                "attribute `{}`: duplicate level `{l}`",
                                attr.name
                            )));
                        }
                    }
                    for (l, level) in levels.iter().enumerate() {
                        if l != *reference {
                            columns.push(Column {
                                attribute: a,
                                level: Some(l),
                                name: format!("{}:{}", attr.name, level),
                            });
                        }
                    }
                }
                AttributeKind::Continuous => columns.push(Column {
                    attribute: a,
                    level: None,
                    name: attr.name.clone(),
                }),
            }
            spans.push(start..columns.len());
        }
        Ok(AttributeSchema {
            attributes,
            columns,
            spans,
        })
    }

    /// Parse a TOML (default) or JSON (`.json` extension) schema file.
    ///
    /// ```toml
    /// [[attribute]]
    /// name = "gender"
    /// levels = ["male", "female"]
    /// reference = "male"      # name or index; defaults to the first level
    ///
    /// [[attribute]]
    /// name = "tax_rate"
    /// continuous = true
    /// ```
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let file: SchemaFile = if json {
            serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?
        };
        let attributes = file
            .attributes
            .into_iter()
            .map(|raw| {
                if raw.continuous {
                    if !raw.levels.is_empty() {
                        return Err(DataError::Schema(format!(
                            "continuous attribute `{}` cannot declare levels",
                            raw.name
                        )));
                    }
                    return Ok(Attribute {
                        name: raw.name,
                        kind: AttributeKind::Continuous,
                    });
                }
                let reference = match raw.reference {
                    None => 0,
                    Some(RawReference::Index(i)) => i,
                    Some(RawReference::Name(n)) => {
                        raw.levels.iter().position(|l| *l == n).ok_or_else(|| {
                            DataError::UnknownLevel {
                                attribute: raw.name.clone(),
                                level: n.clone(),
                            }
                        })?
                    }
                };
                Ok(Attribute {
                    name: raw.name,
                    kind: AttributeKind::Categorical {
                        levels: raw.levels,
                        reference,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(attributes)
    }

    /// TOML text accepted by [`parse`](Self::parse).
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for a in &self.attributes {
            out.push_str(&format!("[[attribute]]\nname = {:?}\n", a.name));
            match &a.kind {
                AttributeKind::Categorical { levels, reference } => {
                    let quoted: Vec<String> = levels.iter().map(|l| format!("{l:?}")).collect();
                    out.push_str(&format!(
                        "levels = [{}]\nreference = {:?}\n\n",
                        quoted.join(", "),
                        levels[*reference]
                    ));
                }
                AttributeKind::Continuous => out.push_str("continuous = true\n\n"),
            }
        }
        out
    }

    /// Schema of `attributes` binary attributes named `a0, a1, ...` with levels `(0, 1)`.
    pub fn binary(attributes: usize) -> Self {
        Self::with_levels(&vec![2; attributes])
    }

    /// Categorical attributes `a0, a1, ...` with the given level counts, reference level 0.
    pub fn with_levels(level_counts: &[usize]) -> Self {
        let attrs = level_counts
            .iter()
            .enumerate()
            .map(|(a, &n)| Attribute {
                name: format!("a{a}"),
                kind: AttributeKind::Categorical {
                    levels: (0..n).map(|l| format!("l{l}")).collect(),
                    reference: 0,
                },
            })
            .collect();
        Self::new(attrs).expect("generated schema is valid")
    }

    /// Encoded width `p`.
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Columns belonging to attribute `a`.
    pub fn span(&self, a: usize) -> Range<usize> {
        self.spans[a].clone()
    }

    /// Attribute index of every encoded column.
    pub fn column_groups(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.attribute).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn level_index(&self, attribute: usize, level: &str) -> Result<usize> {
        let attr = &self.attributes[attribute];
        match &attr.kind {
            AttributeKind::Categorical { levels, .. } => levels
                .iter()
                .position(|l| l == level)
                .ok_or_else(|| DataError::UnknownLevel {
                    attribute: attr.name.clone(),
                    level: level.to_string(),
                }),
            AttributeKind::Continuous => Err(DataError::Schema(format!(
                "attribute `{}` is continuous",
                attr.name
            ))),
        }
    }

    /// Parse one raw cell into a selection for attribute `a`.
    pub fn parse_cell(&self, a: usize, cell: &str) -> Result<Selection> {
        match &self.attributes[a].kind {
            AttributeKind::Categorical { .. } => {
                self.level_index(a, cell.trim()).map(Selection::Level)
            }
            AttributeKind::Continuous => cell
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Selection::Value)
                .ok_or_else(|| {
                    DataError::Schema(format!(
                        "attribute `{}` expects a finite number, got `{cell}`",
                        self.attributes[a].name
                    ))
                }),
        }
    }

    /// Dummy-code one profile.
    pub fn encode_profile(&self, selection: &[Selection]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.width()];
        self.encode_into(selection, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, selection: &[Selection], out: &mut [f64]) -> Result<()> {
        if selection.len() != self.attributes.len() || out.len() != self.width() {
            return Err(DataError::Dimension(format!(
                "profile has {} attributes, schema has {}",
                selection.len(),
                self.attributes.len()
            )));
        }
        out.fill(0.0);
        for (a, (attr, sel)) in self.attributes.iter().zip(selection).enumerate() {
            let span = self.span(a);
            match (&attr.kind, *sel) {
                (AttributeKind::Categorical { levels, reference }, Selection::Level(l)) => {
                    if l >= levels.len() {
                        return Err(DataError::UnknownLevel {
                            attribute: attr.name.clone(),
                            level: l.to_string(),
                        });
                    }
                    if l != *reference {
                        let offset = if l < *reference { l } else { l - 1 };
                        out[span.start + offset] = 1.0;
                    }
                }
                (AttributeKind::Continuous, Selection::Value(v)) if v.is_finite() => {
                    out[span.start] = v;
                }
                _ => {
                    return Err(DataError::Schema(format!(
                        "invalid selection {sel:?} for attribute `{}`",
                        attr.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`encode_profile`](Self::encode_profile).
    pub fn decode_profile(&self, x: &[f64]) -> Result<Vec<Selection>> {
        if x.len() != self.width() {
            return Err(DataError::Dimension(format!(
                "encoded profile has width {}, schema has {}",
                x.len(),
                self.width()
            )));
        }
        self.attributes
            .iter()
            .enumerate()
            .map(|(a, attr)| {
                let block = &x[self.span(a)];
                match &attr.kind {
                    AttributeKind::Continuous => Ok(Selection::Value(block[0])),
                    AttributeKind::Categorical { reference, .. } => {
                        let hot: Vec<usize> = block
                            .iter()
                            .enumerate()
                            .filter(|(_, v)| **v != 0.0)
                            .map(|(i, _)| i)
                            .collect();
                        match hot.as_slice() {
                            [] => Ok(Selection::Level(*reference)),
                            [i] if block[*i] == 1.0 => {
                                Ok(Selection::Level(if *i < *reference { *i } else { *i + 1 }))
                            }
                            _ => Err(DataError::Schema(format!(
                                "block for `{}` is not a valid dummy coding",
                                attr.name
                            ))),
                        }
                    }
                }
            })
            .collect()
    }

    /// Build a profile from a JSON object `{ "attribute": "level" | number }`.
    /// Attributes left out take their reference level (or 0 for continuous).
    pub fn profile_from_json(&self, value: &serde_json::Value) -> Result<Vec<Selection>> {
        let obj = value
            .as_object()
            .ok_or_else(|| DataError::Schema("profile must be a JSON object".into()))?;
        for key in obj.keys() {
            if self.attribute_index(key).is_none() {
                return Err(DataError::Schema(format!(
                    "unknown attribute `{key}` in profile"
                )));
            }
        }
        self.attributes
            .iter()
            .enumerate()
            .map(|(a, attr)| match (obj.get(&attr.name), &attr.kind) {
                (None, AttributeKind::Categorical { reference, .. }) => {
                    Ok(Selection::Level(*reference))
                }
                (None, AttributeKind::Continuous) => Ok(Selection::Value(0.0)),
                (Some(serde_json::Value::String(s)), _) => self.parse_cell(a, s),
                (Some(serde_json::Value::Number(n)), AttributeKind::Continuous) => {
                    Ok(Selection::Value(n.as_f64().unwrap_or(f64::NAN)))
                }
                (Some(v), _) => Err(DataError::Schema(format!(
                    "attribute `{}`: unsupported value {v}",
                    attr.name
                ))),
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Raw (unstandardized) respondent covariates, one row per respondent.
#[derive(Clone, Debug)]
pub struct Covariates {
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

/// One forced-choice task with both profiles already encoded.
#[derive(Clone, Debug)]
pub struct TaskRecord {
    pub respondent: usize,
    pub task_id: String,
    pub profile1: Vec<f64>,
    pub profile2: Vec<f64>,
    /// 1 when profile 1 was chosen.
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub p_z: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "respondents M={} rows N={} attribute columns p={} covariates p_Z={}",
            self.m, self.n, self.p, self.p_z
        )
    }
}

#[derive(Clone, Debug)]
pub struct ConjointDataset {
    schema: AttributeSchema,
    respondent_ids: Vec<String>,
    /// `row_offsets[i]..row_offsets[i + 1]` are respondent `i`'s rows.
    row_offsets: Vec<usize>,
    respondent_of: Vec<usize>,
    task_ids: Vec<String>,
    delta_x: Array2<f64>,
    y: Vec<f64>,
    z: Array2<f64>,
    covariate_names: Vec<String>,
    z_mean: Vec<f64>,
    z_sd: Vec<f64>,
    dropped_covariates: Vec<String>,
    design_var: Vec<f64>,
    /// `2N x p`: row `2r` is profile 1 of row `r`, row `2r + 1` profile 2.
    profiles: Option<Array2<f64>>,
}

/// Standardize columns to zero mean and unit (population) SD.
/// Returns the standardized matrix, kept column indices, means and SDs.
pub fn standardize(values: ArrayView2<f64>) -> (Array2<f64>, Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = values.nrows();
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for (j, col) in values.axis_iter(Axis(1)).enumerate() {
        let m = if n == 0 { 0.0 } else { col.sum() / n as f64 };
        let var = if n == 0 {
            0.0
        } else {
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64
        };
        let sd = var.sqrt();
        if sd > 1e-12 * m.abs().max(1.0) {
            kept.push(j);
            means.push(m);
            sds.push(sd);
        }
    }
    let mut out = Array2::zeros((n, kept.len()));
    for (c, &j) in kept.iter().enumerate() {
        for i in 0..n {
            out[[i, c]] = (values[[i, j]] - means[c]) / sds[c];
        }
    }
    (out, kept, means, sds)
}

fn population_variance(col: ArrayView1<f64>) -> f64 {
    let n = col.len();
    if n == 0 {
        return 0.0;
    }
    let m = col.sum() / n as f64;
    col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64
}

impl ConjointDataset {
    /// Assemble a dataset from encoded tasks. Rows are reordered (stably) so
    /// that each respondent's tasks are contiguous.
    pub fn from_tasks(
        schema: AttributeSchema,
        respondent_ids: Vec<String>,
        covariates: Covariates,
        mut tasks: Vec<TaskRecord>,
    ) -> Result<Self> {
        let p = schema.width();
        for t in &tasks {
            if t.profile1.len() != p || t.profile2.len() != p {
                return Err(DataError::Dimension(format!(
                    "task `{}` has profile width {}/{}, schema width {p}",
                    t.task_id,
                    t.profile1.len(),
                    t.profile2.len()
                )));
            }
        }
        tasks.sort_by_key(|t| t.respondent);
        let n = tasks.len();
        let mut profiles = Array2::zeros((2 * n, p));
        let mut delta = Array2::zeros((n, p));
        for (r, t) in tasks.iter().enumerate() {
            for k in 0..p {
                profiles[[2 * r, k]] = t.profile1[k];
                profiles[[2 * r + 1, k]] = t.profile2[k];
                delta[[r, k]] = t.profile1[k] - t.profile2[k];
            }
        }
        let design_var: Vec<f64> = profiles
            .axis_iter(Axis(1))
            .map(population_variance)
            .collect();
        let respondent_of = tasks.iter().map(|t| t.respondent).collect();
        let task_ids = tasks.iter().map(|t| t.task_id.clone()).collect();
        let y = tasks.iter().map(|t| t.y).collect();
        Self::assemble(
            schema,
            respondent_ids,
            covariates,
            respondent_of,
            task_ids,
            delta,
            y,
            design_var,
            Some(profiles),
        )
    }

    /// Assemble a dataset from already-differenced rows. The design variance
    /// of each column is taken as `Var(ΔX_k) / 2`, which equals the
    /// single-profile variance when the two profiles are drawn independently.
    #[allow(clippy::too_many_arguments)]
    pub fn from_differences(
        schema: AttributeSchema,
        respondent_ids: Vec<String>,
        covariates: Covariates,
        respondent_of: Vec<usize>,
        task_ids: Vec<String>,
        delta_x: Array2<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = delta_x.nrows();
        if respondent_of.len() != n || task_ids.len() != n || y.len() != n {
            return Err(DataError::Dimension("row vectors disagree on N".into()));
        }
        if delta_x.ncols() != schema.width() {
            return Err(DataError::Dimension(format!(
                "ΔX has {} columns, schema width {}",
                delta_x.ncols(),
                schema.width()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| respondent_of[r]);
        let delta = delta_x.select(Axis(0), &order);
        let respondent_of: Vec<usize> = order.iter().map(|&r| respondent_of[r]).collect();
        let task_ids: Vec<String> = order.iter().map(|&r| task_ids[r].clone()).collect();
        let y: Vec<f64> = order.iter().map(|&r| y[r]).collect();
        let design_var = delta
            .axis_iter(Axis(1))
            .map(|c| population_variance(c) / 2.0)
            .collect();
        Self::assemble(
            schema,
            respondent_ids,
            covariates,
            respondent_of,
            task_ids,
            delta,
            y,
            design_var,
            None,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        schema: AttributeSchema,
        respondent_ids: Vec<String>,
        covariates: Covariates,
        respondent_of: Vec<usize>,
        task_ids: Vec<String>,
        delta_x: Array2<f64>,
        y: Vec<f64>,
        design_var: Vec<f64>,
        profiles: Option<Array2<f64>>,
    ) -> Result<Self> {
        let m = respondent_ids.len();
        if m == 0 {
            return Err(DataError::Empty("no respondents".into()));
        }
        if covariates.values.nrows() != m || covariates.values.ncols() != covariates.names.len() {
            return Err(DataError::Dimension(format!(
                "covariate matrix is {}x{}, expected {m} rows and {} columns",
                covariates.values.nrows(),
                covariates.values.ncols(),
                covariates.names.len()
            )));
        }
        if let Some(bad) = covariates.values.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Schema(format!(
                "non-finite covariate value {bad}"
            )));
        }
        if let Some(&r) = respondent_of.iter().find(|&&r| r >= m) {
            return Err(DataError::Dimension(format!(
                "respondent index {r} out of range (M={m})"
            )));
        }
        if let Some(v) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Schema(format!("outcome {v} outside [0, 1]")));
        }
        let mut row_offsets = vec![0usize; m + 1];
        for &r in &respondent_of {
            row_offsets[r + 1] += 1;
        }
        for i in 0..m {
            row_offsets[i + 1] += row_offsets[i];
        }
        let (z, kept, z_mean, z_sd) = standardize(covariates.values.view());
        let dropped: Vec<String> = covariates
            .names
            .iter()
            .enumerate()
            .filter(|(j, _)| !kept.contains(j))
            .map(|(_, n)| n.clone())
            .collect();
        for name in &dropped {
            log::warn!("dropping constant covariate `{name}`");
        }
        let covariate_names = kept.iter().map(|&j| covariates.names[j].clone()).collect();
        for (k, v) in design_var.iter().enumerate() {
            if *v <= 0.0 {
                log::warn!("design column `{}` never varies", schema.columns()[k].name);
            }
        }
        Ok(ConjointDataset {
            schema,
            respondent_ids,
            row_offsets,
            respondent_of,
            task_ids,
            delta_x,
            y,
            z,
            covariate_names,
            z_mean,
            z_sd,
            dropped_covariates: dropped,
            design_var,
            profiles,
        })
    }

    /// Same design and covariates with replaced outcomes.
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n_rows() {
            return Err(DataError::Dimension("outcome vector length".into()));
        }
        if let Some(v) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Schema(format!("outcome {v} outside [0, 1]")));
        }
        Ok(ConjointDataset { y, ..self.clone() })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    /// `M`.
    pub fn n_respondents(&self) -> usize {
        self.respondent_ids.len()
    }

    /// `N = Σ T_i`.
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// `p`.
    pub fn width(&self) -> usize {
        self.schema.width()
    }

    /// `p_Z` after dropping constant columns.
    pub fn n_covariates(&self) -> usize {
        self.z.ncols()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            m: self.n_respondents(),
            n: self.n_rows(),
            p: self.width(),
            p_z: self.n_covariates(),
        }
    }

    pub fn respondent_ids(&self) -> &[String] {
        &self.respondent_ids
    }

    pub fn rows_of(&self, respondent: usize) -> Range<usize> {
        self.row_offsets[respondent]..self.row_offsets[respondent + 1]
    }

    pub fn task_counts(&self) -> Vec<usize> {
        self.row_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn respondent_of(&self) -> &[usize] {
        &self.respondent_of
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    /// `N x p` profile-pair differences.
    pub fn delta_x(&self) -> ArrayView2<'_, f64> {
        self.delta_x.view()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// `M x p_Z` standardized covariates.
    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn dropped_covariates(&self) -> &[String] {
        &self.dropped_covariates
    }

    pub fn covariate_means(&self) -> &[f64] {
        &self.z_mean
    }

    pub fn covariate_sds(&self) -> &[f64] {
        &self.z_sd
    }

    /// Raw-scale value of retained covariate `j` for respondent `i`.
    pub fn raw_covariate(&self, i: usize, j: usize) -> f64 {
        self.z[[i, j]] * self.z_sd[j] + self.z_mean[j]
    }

    /// Map a raw-scale covariate vector onto the standardized scale the
    /// networks were trained on.
    pub fn standardize_covariates(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.z_mean.len() {
            return Err(DataError::Dimension(format!(
                "expected {} covariates, got {}",
                self.z_mean.len(),
                raw.len()
            )));
        }
        Ok(raw
            .iter()
            .zip(self.z_mean.iter().zip(&self.z_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Empirical single-profile variance `Var(X_k)` per column.
    pub fn design_var(&self) -> &[f64] {
        &self.design_var
    }

    /// Encoded single profiles (`2N x p`), when loaded from long format.
    pub fn profiles(&self) -> Option<ArrayView2<'_, f64>> {
        self.profiles.as_ref().map(|p| p.view())
    }

    /// Write the data back out in the long format read by [`load_dataset`],
    /// with raw-scale covariates.
    pub fn write_long(&self, profiles_path: &Path, covariates_path: &Path) -> Result<()> {
        let profiles = self.profiles.as_ref().ok_or_else(|| {
            DataError::Schema("pre-differenced data has no single profiles".into())
        })?;
        let csv_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Csv {
                path: path.clone(),
                source,
            }
        };
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io {
                path: path.clone(),
                source,
            }
        };
        let mut w = csv::Writer::from_path(profiles_path).map_err(csv_err(profiles_path))?;
        let mut header = vec![
            "respondent_id".to_string(),
            "task_id".into(),
            "alternative".into(),
            "chosen".into(),
        ];
        header.extend(self.schema.attributes.iter().map(|a| a.name.clone()));
        w.write_record(&header).map_err(csv_err(profiles_path))?;
        for r in 0..self.n_rows() {
            for alt in 0..2 {
                let x = profiles.row(2 * r + alt).to_vec();
                let chosen = if (alt == 0) == (self.y[r] == 1.0) {
                    "1"
                } else {
                    "0"
                };
                let mut rec = vec![
                    self.respondent_ids[self.respondent_of[r]].clone(),
                    self.task_ids[r].clone(),
                    (alt + 1).to_string(),
                    chosen.to_string(),
                ];
                for (attr, sel) in self
                    .schema
                    .attributes
                    .iter()
                    .zip(self.schema.decode_profile(&x)?)
                {
                    rec.push(match (&attr.kind, sel) {
                        (AttributeKind::Categorical { levels, .. }, Selection::Level(l)) => {
                            levels[l].clone()
                        }
                        (_, Selection::Value(v)) => v.to_string(),
                        (_, Selection::Level(l)) => l.to_string(),
                    });
                }
                w.write_record(&rec).map_err(csv_err(profiles_path))?;
            }
        }
        w.flush().map_err(io_err(profiles_path))?;

        let mut w = csv::Writer::from_path(covariates_path).map_err(csv_err(covariates_path))?;
        let mut header = vec!["respondent_id".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header).map_err(csv_err(covariates_path))?;
        for (i, id) in self.respondent_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..self.n_covariates()).map(|j| self.raw_covariate(i, j).to_string()));
            w.write_record(&rec).map_err(csv_err(covariates_path))?;
        }
        w.flush().map_err(io_err(covariates_path))
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

fn open_csv(path: &Path) -> Result<(csv::Reader<std::fs::File>, csv::StringRecord)> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    Ok((rdr, headers))
}

fn column(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn parse_number(path: &Path, rec: &csv::StringRecord, idx: usize, what: &str) -> Result<f64> {
    let cell = rec.get(idx).unwrap_or("");
    cell.parse::<f64>().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line: rec.position().map_or(0, |p| p.line()),
        message: format!("{what}: `{cell}` is not a number"),
    })
}

/// Read a covariates CSV: `respondent_id` plus numeric columns.
pub fn read_covariates(path: &Path) -> Result<(Vec<String>, HashMap<String, Vec<f64>>)> {
    let (mut rdr, headers) = open_csv(path)?;
    let id_col = column(path, &headers, "respondent_id")?;
    let names: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut rows = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let vals = names
            .iter()
            .map(|(i, name)| parse_number(path, &rec, *i, name))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(id.clone(), vals).is_some() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: rec.position().map_or(0, |p| p.line()),
                message: format!("duplicate respondent `{id}`"),
            });
        }
    }
    Ok((names.into_iter().map(|(_, n)| n).collect(), rows))
}

fn covariates_for(
    ids: &[String],
    names: Vec<String>,
    rows: &HashMap<String, Vec<f64>>,
) -> Result<Covariates> {
    let mut values = Array2::zeros((ids.len(), names.len()));
    for (i, id) in ids.iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| DataError::MissingCovariates(id.clone()))?;
        for (j, v) in row.iter().enumerate() {
            values[[i, j]] = *v;
        }
    }
    Ok(Covariates { names, values })
}

struct PendingTask {
    respondent: usize,
    task_id: String,
    alternatives: Vec<(i64, Vec<f64>, f64)>,
}

/// Load long-format profiles (one row per respondent, task and alternative)
/// together with the respondent covariates file.
pub fn load_dataset(
    profiles_path: &Path,
    covariates_path: &Path,
    schema: &AttributeSchema,
) -> Result<ConjointDataset> {
    let (mut rdr, headers) = open_csv(profiles_path)?;
    let id_col = column(profiles_path, &headers, "respondent_id")?;
    let task_col = column(profiles_path, &headers, "task_id")?;
    let alt_col = column(profiles_path, &headers, "alternative")?;
    let chosen_col = column(profiles_path, &headers, "chosen")?;
    let attr_cols = schema
        .attributes()
        .iter()
        .map(|a| column(profiles_path, &headers, &a.name))
        .collect::<Result<Vec<_>>>()?;

    let mut respondent_ids: Vec<String> = Vec::new();
    let mut respondent_index: HashMap<String, usize> = HashMap::new();
    let mut tasks: Vec<PendingTask> = Vec::new();
    let mut task_index: HashMap<(usize, String), usize> = HashMap::new();
    let mut selection = vec![Selection::Level(0); attr_cols.len()];

    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: profiles_path.to_path_buf(),
            source,
        })?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let task = rec.get(task_col).unwrap_or("").to_string();
        let alt = parse_number(profiles_path, &rec, alt_col, "alternative")?;
        let chosen = parse_number(profiles_path, &rec, chosen_col, "chosen")?;
        let bad = |message: String| DataError::BadTask {
            respondent: id.clone(),
            task: task.clone(),
            message,
        };
        if alt != 1.0 && alt != 2.0 {
            return Err(bad(format!("alternative must be 1 or 2, got {alt}")));
        }
        if chosen != 0.0 && chosen != 1.0 {
            return Err(bad(format!("chosen must be 0 or 1, got {chosen}")));
        }
        for (a, &c) in attr_cols.iter().enumerate() {
            selection[a] = schema.parse_cell(a, rec.get(c).unwrap_or(""))?;
        }
        let encoded = schema.encode_profile(&selection)?;
        let r = *respondent_index.entry(id.clone()).or_insert_with(|| {
            respondent_ids.push(id.clone());
            respondent_ids.len() - 1
        });
        let t = *task_index.entry((r, task.clone())).or_insert_with(|| {
            tasks.push(PendingTask {
                respondent: r,
                task_id: task.clone(),
                alternatives: Vec::with_capacity(2),
            });
            tasks.len() - 1
        });
        tasks[t].alternatives.push((alt as i64, encoded, chosen));
    }
    if tasks.is_empty() {
        return Err(DataError::Empty(format!(
            "{} has no data rows",
            profiles_path.display()
        )));
    }

    let records = tasks
        .into_iter()
        .map(|mut t| {
            let bad = |message: String| DataError::BadTask {
                respondent: respondent_ids[t.respondent].clone(),
                task: t.task_id.clone(),
                message,
            };
            if t.alternatives.len() != 2 {
                return Err(bad(format!(
                    "expected 2 alternatives, found {}",
                    t.alternatives.len()
                )));
            }
            t.alternatives.sort_by_key(|a| a.0);
            if t.alternatives[0].0 != 1 || t.alternatives[1].0 != 2 {
                return Err(bad("alternatives must be numbered 1 and 2".into()));
            }
            let n_chosen = t.alternatives.iter().filter(|a| a.2 == 1.0).count();
            if n_chosen != 1 {
                return Err(bad(format!(
                    "expected exactly one chosen alternative, found {n_chosen}"
                )));
            }
            let second = t.alternatives.pop().expect("two alternatives");
            let first = t.alternatives.pop().expect("two alternatives");
            Ok(TaskRecord {
                respondent: t.respondent,
                task_id: t.task_id,
                y: first.2,
                profile1: first.1,
                profile2: second.1,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (names, rows) = read_covariates(covariates_path)?;
    let covariates = covariates_for(&respondent_ids, names, &rows)?;
    ConjointDataset::from_tasks(schema.clone(), respondent_ids, covariates, records)
}

/// Load pre-differenced rows: `respondent_id`, `task_id`, `chosen` and one
/// column per encoded design column (named as in
/// [`AttributeSchema::column_names`]).
pub fn load_differenced(
    path: &Path,
    covariates_path: &Path,
    schema: &AttributeSchema,
) -> Result<ConjointDataset> {
    let (mut rdr, headers) = open_csv(path)?;
    let id_col = column(path, &headers, "respondent_id")?;
    let task_col = column(path, &headers, "task_id")?;
    let chosen_col = column(path, &headers, "chosen")?;
    let cols = schema
        .column_names()
        .iter()
        .map(|c| column(path, &headers, c))
        .collect::<Result<Vec<_>>>()?;
    let mut respondent_ids = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let (mut respondent_of, mut task_ids, mut y, mut flat) = (vec![], vec![], vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let r = *index.entry(id.clone()).or_insert_with(|| {
            respondent_ids.push(id.clone());
            respondent_ids.len() - 1
        });
        let chosen = parse_number(path, &rec, chosen_col, "chosen")?;
        if chosen != 0.0 && chosen != 1.0 {
            return Err(DataError::BadTask {
                respondent: id,
                task: rec.get(task_col).unwrap_or("").to_string(),
                message: format!("chosen must be 0 or 1, got {chosen}"),
            });
        }
        respondent_of.push(r);
        task_ids.push(rec.get(task_col).unwrap_or("").to_string());
        y.push(chosen);
        for (&c, name) in cols.iter().zip(schema.column_names()) {
            flat.push(parse_number(path, &rec, c, &name)?);
        }
    }
    if y.is_empty() {
        return Err(DataError::Empty(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let delta = Array2::from_shape_vec((y.len(), cols.len()), flat)
        .map_err(|e| DataError::Dimension(e.to_string()))?;
    let (names, rows) = read_covariates(covariates_path)?;
    let covariates = covariates_for(&respondent_ids, names, &rows)?;
    ConjointDataset::from_differences(
        schema.clone(),
        respondent_ids,
        covariates,
        respondent_of,
        task_ids,
        delta,
        y,
    )
}

// ---------------------------------------------------------------------------
// Randomization diagnostic
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RandomizationEntry {
    pub column: String,
    pub covariate: String,
    pub abs_correlation: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RandomizationReport {
    pub threshold: f64,
    pub entries: Vec<RandomizationEntry>,
}

impl RandomizationReport {
    pub fn flagged(&self) -> impl Iterator<Item = &RandomizationEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

pub const DEFAULT_RANDOMIZATION_THRESHOLD: f64 = 0.05;

/// `|corr(ΔX_k, Z_j)|` over rows for every design column and covariate.
/// Randomized designs should show no association; large values point at a
/// broken randomization or a data-merge error.
pub fn randomization_check(ds: &ConjointDataset, threshold: f64) -> RandomizationReport {
    let dx = ds.delta_x();
    let z = ds.z();
    let mut entries = Vec::with_capacity(ds.width() * ds.n_covariates());
    let names = ds.schema().column_names();
    for (k, col_name) in names.iter().enumerate() {
        let x: Vec<f64> = dx.column(k).to_vec();
        for (j, cov) in ds.covariate_names().iter().enumerate() {
            let zc: Vec<f64> = ds.respondent_of().iter().map(|&r| z[[r, j]]).collect();
            let c = crate::stats::correlation(&x, &zc).abs();
            entries.push(RandomizationEntry {
                column: col_name.clone(),
                covariate: cov.clone(),
                abs_correlation: c,
                flagged: c > threshold,
            });
        }
    }
    RandomizationReport { threshold, entries }
}
