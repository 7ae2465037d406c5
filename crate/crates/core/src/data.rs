//! Panel and mediation datasets, CSV ingestion, and validation.
//!
//! The on-disk panel format is long CSV: one row per unit-period, a header
//! row, comma delimited. Units keep first-appearance order and periods are
//! sorted by ascending time value. Mediation data is one row per unit.
//!
//! Wide column labels used by formulas and regressor specs:
//! treatment `D` at period `t` (1-based) is `D{t}`, time-varying confounder
//! `X` at period `t` is `X_{t}`, baseline covariates keep their own name.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariableKind {
    Binary,
    Continuous,
}

impl VariableKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(VariableKind::Binary),
            "continuous" => Ok(VariableKind::Continuous),
            other => Err(Error::Schema(format!(
                "unknown variable kind `{other}` (expected binary or continuous)"
            ))),
        }
    }
}

impl fmt::Display for VariableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableKind::Binary => f.write_str("binary"),
            VariableKind::Continuous => f.write_str("continuous"),
        }
    }
}

/// Column roles for a long-format panel CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSchema {
    pub id: String,
    pub time: String,
    pub treatment: String,
    pub treatment_kind: VariableKind,
    pub outcome: String,
    pub confounders: Vec<String>,
    pub baseline: Vec<String>,
    pub base_weight: Option<String>,
    /// Extra numeric per-(unit, period) columns carried along, e.g. known
    /// assignment densities.
    pub auxiliary: Vec<String>,
}

/// Column roles for a one-row-per-unit mediation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MediationSchema {
    pub id: Option<String>,
    pub treatment: String,
    pub treatment_kind: VariableKind,
    pub mediator: String,
    pub mediator_kind: VariableKind,
    pub outcome: String,
    pub pre: Vec<String>,
    pub post: Vec<String>,
    pub base_weight: Option<String>,
}

/// Owned components of a [`PanelDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct PanelParts {
    pub unit_ids: Vec<String>,
    pub times: Vec<f64>,
    pub baseline_names: Vec<String>,
    /// n × p
    pub baseline: DMatrix<f64>,
    pub confounder_names: Vec<String>,
    /// One n × J matrix per period.
    pub confounders: Vec<DMatrix<f64>>,
    pub treatment_name: String,
    pub treatment_kind: VariableKind,
    /// n × T
    pub treatments: DMatrix<f64>,
    pub outcome_name: String,
    pub outcome: DVector<f64>,
    pub base_weights: DVector<f64>,
    /// Named n × T matrices.
    pub auxiliary: Vec<(String, DMatrix<f64>)>,
}

/// Units × periods with baseline covariates, time-varying confounders,
/// a treatment, an end-of-study outcome and base weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    parts: PanelParts,
}

impl PanelDataset {
    /// Checks shapes only; semantic invariants are reported by [`Validate`].
    pub fn from_parts(parts: PanelParts) -> Result<Self> {
        let n = parts.unit_ids.len();
        let t = parts.times.len();
        let j = parts.confounder_names.len();
        let p = parts.baseline_names.len();
        let dim = |what: &str| Err(Error::Dimension(what.to_string()));
        if parts.baseline.shape() != (n, p) {
            return dim("baseline matrix must be n × p");
        }
        if parts.confounders.len() != t {
            return dim("one confounder matrix per period required");
        }
        if parts.confounders.iter().any(|m| m.shape() != (n, j)) {
            return dim("confounder matrices must be n × J");
        }
        if parts.treatments.shape() != (n, t) {
            return dim("treatment matrix must be n × T");
        }
        if parts.outcome.len() != n || parts.base_weights.len() != n {
            return dim("outcome and base weights must have length n");
        }
        if parts.auxiliary.iter().any(|(_, m)| m.shape() != (n, t)) {
            return dim("auxiliary matrices must be n × T");
        }
        Ok(Self { parts })
    }

    pub fn into_parts(self) -> PanelParts {
        self.parts
    }

    pub fn parts(&self) -> &PanelParts {
        &self.parts
    }

    pub fn n(&self) -> usize {
        self.parts.unit_ids.len()
    }

    pub fn periods(&self) -> usize {
        self.parts.times.len()
    }

    pub fn n_confounders(&self) -> usize {
        self.parts.confounder_names.len()
    }

    pub fn n_baseline(&self) -> usize {
        self.parts.baseline_names.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.parts.unit_ids
    }

    pub fn times(&self) -> &[f64] {
        &self.parts.times
    }

    pub fn baseline(&self) -> &DMatrix<f64> {
        &self.parts.baseline
    }

    pub fn baseline_names(&self) -> &[String] {
        &self.parts.baseline_names
    }

    pub fn confounder_names(&self) -> &[String] {
        &self.parts.confounder_names
    }

    /// Confounders X_t at 0-based period `t`, n × J.
    pub fn confounders(&self, t: usize) -> &DMatrix<f64> {
        &self.parts.confounders[t]
    }

    /// Confounder history X̄_t: periods `0..=t`.
    pub fn confounder_history(&self, t: usize) -> &[DMatrix<f64>] {
        &self.parts.confounders[..=t]
    }

    pub fn treatments(&self) -> &DMatrix<f64> {
        &self.parts.treatments
    }

    /// Treatment D_t at 0-based period `t`.
    pub fn treatment(&self, t: usize) -> DVector<f64> {
        self.parts.treatments.column(t).into_owned()
    }

    /// Treatment history D̄_t: n × (t + 1) columns for 0-based period `t`.
    pub fn treatment_history(&self, t: usize) -> DMatrix<f64> {
        self.parts.treatments.columns(0, t + 1).into_owned()
    }

    pub fn treatment_name(&self) -> &str {
        &self.parts.treatment_name
    }

    pub fn treatment_kind(&self) -> VariableKind {
        self.parts.treatment_kind
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.parts.outcome
    }

    pub fn outcome_name(&self) -> &str {
        &self.parts.outcome_name
    }

    pub fn base_weights(&self) -> &DVector<f64> {
        &self.parts.base_weights
    }

    pub fn auxiliary(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.parts
            .auxiliary
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    /// Wide label of the treatment at 0-based period `t`.
    pub fn treatment_label(&self, t: usize) -> String {
        format!("{}{}", self.parts.treatment_name, t + 1)
    }

    /// Wide label of confounder `j` at 0-based period `t`.
    pub fn confounder_label(&self, j: usize, t: usize) -> String {
        format!("{}_{}", self.parts.confounder_names[j], t + 1)
    }

    /// Column lookup by wide label (outcome, treatments, confounders,
    /// baseline covariates).
    pub fn column_by_name(&self, name: &str) -> Option<DVector<f64>> {
        if name == self.parts.outcome_name {
            return Some(self.parts.outcome.clone());
        }
        if let Some(j) = self.parts.baseline_names.iter().position(|b| b == name) {
            return Some(self.parts.baseline.column(j).into_owned());
        }
        if let Some(t) = (0..self.periods()).find(|&t| self.treatment_label(t) == name) {
            return Some(self.treatment(t));
        }
        for t in 0..self.periods() {
            for j in 0..self.n_confounders() {
                if self.confounder_label(j, t) == name {
                    return Some(self.parts.confounders[t].column(j).into_owned());
                }
            }
        }
        None
    }

    /// Replace the treatment by the indicator `D_t > cutoff`.
    pub fn dichotomize_treatment(&self, cutoff: f64) -> PanelDataset {
        let mut parts = self.parts.clone();
        parts.treatments = parts.treatments.map(|d| if d > cutoff { 1.0 } else { 0.0 });
        parts.treatment_kind = VariableKind::Binary;
        PanelDataset { parts }
    }

    /// Schema matching the columns produced by [`write_panel_csv`].
    pub fn long_schema(&self) -> PanelSchema {
        PanelSchema {
            id: "id".into(),
            time: "time".into(),
            treatment: self.parts.treatment_name.clone(),
            treatment_kind: self.parts.treatment_kind,
            outcome: self.parts.outcome_name.clone(),
            confounders: self.parts.confounder_names.clone(),
            baseline: self.parts.baseline_names.clone(),
            base_weight: Some("base_weight".into()),
            auxiliary: self.parts.auxiliary.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Owned components of a [`MediationDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct MediationParts {
    pub unit_ids: Vec<String>,
    pub treatment_name: String,
    pub treatment_kind: VariableKind,
    pub treatment: DVector<f64>,
    pub mediator_name: String,
    pub mediator_kind: VariableKind,
    pub mediator: DVector<f64>,
    pub pre_names: Vec<String>,
    /// n × p
    pub pre: DMatrix<f64>,
    pub post_names: Vec<String>,
    /// n × q
    pub post: DMatrix<f64>,
    pub outcome_name: String,
    pub outcome: DVector<f64>,
    pub base_weights: DVector<f64>,
}

/// Point-in-time treatment D, mediator M, pre-treatment covariates C,
/// post-treatment confounders Z and outcome Y.
#[derive(Debug, Clone, PartialEq)]
pub struct MediationDataset {
    parts: MediationParts,
}

impl MediationDataset {
    pub fn from_parts(parts: MediationParts) -> Result<Self> {
        let n = parts.unit_ids.len();
        let ok = parts.treatment.len() == n
            && parts.mediator.len() == n
            && parts.outcome.len() == n
            && parts.base_weights.len() == n
            && parts.pre.shape() == (n, parts.pre_names.len())
            && parts.post.shape() == (n, parts.post_names.len());
        if !ok {
            return Err(Error::Dimension(
                "mediation columns must all have n rows".into(),
            ));
        }
        Ok(Self { parts })
    }

    pub fn into_parts(self) -> MediationParts {
        self.parts
    }

    pub fn parts(&self) -> &MediationParts {
        &self.parts
    }

    pub fn n(&self) -> usize {
        self.parts.unit_ids.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.parts.unit_ids
    }

    pub fn treatment(&self) -> &DVector<f64> {
        &self.parts.treatment
    }

    pub fn treatment_name(&self) -> &str {
        &self.parts.treatment_name
    }

    pub fn treatment_kind(&self) -> VariableKind {
        self.parts.treatment_kind
    }

    pub fn mediator(&self) -> &DVector<f64> {
        &self.parts.mediator
    }

    pub fn mediator_name(&self) -> &str {
        &self.parts.mediator_name
    }

    pub fn mediator_kind(&self) -> VariableKind {
        self.parts.mediator_kind
    }

    pub fn pre(&self) -> &DMatrix<f64> {
        &self.parts.pre
    }

    pub fn pre_names(&self) -> &[String] {
        &self.parts.pre_names
    }

    pub fn post(&self) -> &DMatrix<f64> {
        &self.parts.post
    }

    pub fn post_names(&self) -> &[String] {
        &self.parts.post_names
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.parts.outcome
    }

    pub fn outcome_name(&self) -> &str {
        &self.parts.outcome_name
    }

    pub fn base_weights(&self) -> &DVector<f64> {
        &self.parts.base_weights
    }

    pub fn column_by_name(&self, name: &str) -> Option<DVector<f64>> {
        let p = &self.parts;
        if name == p.outcome_name {
            Some(p.outcome.clone())
        } else if name == p.treatment_name {
            Some(p.treatment.clone())
        } else if name == p.mediator_name {
            Some(p.mediator.clone())
        } else if let Some(j) = p.pre_names.iter().position(|c| c == name) {
            Some(p.pre.column(j).into_owned())
        } else {
            p.post_names
                .iter()
                .position(|c| c == name)
                .map(|j| p.post.column(j).into_owned())
        }
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub severity: Severity,
    /// Row/column locator, e.g. `unit 3` or `column X_2`.
    pub locator: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn from_issues(issues: Vec<Issue>) -> Self {
        let ok = !issues.iter().any(|i| i.severity == Severity::Error);
        Self { ok, issues }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    /// `Err` carrying the first error issue when the report is not ok.
    pub fn into_result(self) -> Result<()> {
        match self.errors().next() {
            None => Ok(()),
            Some(issue) => Err(Error::InvalidData(format!(
                "{}: {}",
                issue.locator, issue.message
            ))),
        }
    }
}

pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

struct IssueSink(Vec<Issue>);

impl IssueSink {
    fn error(&mut self, locator: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Error,
            locator: locator.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, locator: impl Into<String>, message: impl Into<String>) {
        self.0.push(Issue {
            severity: Severity::Warning,
            locator: locator.into(),
            message: message.into(),
        });
    }

    fn check_column<'a>(
        &mut self,
        label: &str,
        values: impl Iterator<Item = &'a f64> + Clone,
        ids: &[String],
        kind: Option<VariableKind>,
    ) {
        for (i, v) in values.clone().enumerate() {
            if !v.is_finite() {
                self.error(format!("unit {}", ids[i]), format!("{label} is not finite"));
            } else if kind == Some(VariableKind::Binary) && *v != 0.0 && *v != 1.0 {
                self.error(
                    format!("unit {}", ids[i]),
                    format!("{label} is declared binary but holds {v}"),
                );
            }
        }
        let mut it = values.filter(|v| v.is_finite());
        if let Some(first) = it.next() {
            if it.all(|v| v == first) && ids.len() > 1 {
                self.warn(
                    format!("column {label}"),
                    "constant column makes its balancing constraints degenerate",
                );
            }
        }
    }

    fn check_weights(&mut self, w: &DVector<f64>, ids: &[String]) {
        for (i, v) in w.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                self.error(
                    format!("unit {}", ids[i]),
                    format!("base weight must be strictly positive, got {v}"),
                );
            }
        }
    }
}

impl Validate for PanelDataset {
    fn validate(&self) -> ValidationReport {
        let mut sink = IssueSink(Vec::new());
        let ids = self.unit_ids();
        if self.n() < 2 {
            sink.error("dataset", format!("need at least 2 units, found {}", self.n()));
        }
        if self.periods() < 1 {
            sink.error("dataset", "need at least 1 period");
        }
        for t in 0..self.periods() {
            sink.check_column(
                &self.treatment_label(t),
                self.parts.treatments.column(t).iter(),
                ids,
                Some(self.treatment_kind()),
            );
            for j in 0..self.n_confounders() {
                sink.check_column(
                    &self.confounder_label(j, t),
                    self.parts.confounders[t].column(j).iter(),
                    ids,
                    None,
                );
            }
        }
        for (j, name) in self.baseline_names().iter().enumerate() {
            sink.check_column(name, self.parts.baseline.column(j).iter(), ids, None);
        }
        for (i, y) in self.outcome().iter().enumerate() {
            if !y.is_finite() {
                sink.error(format!("unit {}", ids[i]), "outcome is not finite");
            }
        }
        sink.check_weights(self.base_weights(), ids);
        ValidationReport::from_issues(sink.0)
    }
}

impl Validate for MediationDataset {
    fn validate(&self) -> ValidationReport {
        let mut sink = IssueSink(Vec::new());
        let ids = self.unit_ids();
        let p = &self.parts;
        if self.n() < 2 {
            sink.error("dataset", format!("need at least 2 units, found {}", self.n()));
        }
        sink.check_column(&p.treatment_name, p.treatment.iter(), ids, Some(p.treatment_kind));
        sink.check_column(&p.mediator_name, p.mediator.iter(), ids, Some(p.mediator_kind));
        for (j, name) in p.pre_names.iter().enumerate() {
            sink.check_column(name, p.pre.column(j).iter(), ids, None);
        }
        for (j, name) in p.post_names.iter().enumerate() {
            sink.check_column(name, p.post.column(j).iter(), ids, None);
        }
        for (i, y) in p.outcome.iter().enumerate() {
            if !y.is_finite() {
                sink.error(format!("unit {}", ids[i]), "outcome is not finite");
            }
        }
        sink.check_weights(&p.base_weights, ids);
        ValidationReport::from_issues(sink.0)
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::Empty("no header row".into()));
        }
        let rows = rdr.records().collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("no data rows".into()));
        }
        Ok(Self { headers, rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    }

    fn indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.index(n)).collect()
    }

    fn number(&self, row: usize, col: usize) -> Result<f64> {
        let raw = self.rows[row].get(col).unwrap_or("");
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::NonNumeric {
                column: self.headers[col].clone(),
                row: row + 1,
                value: raw.to_string(),
            }),
        }
    }

    fn text(&self, row: usize, col: usize) -> String {
        self.rows[row].get(col).unwrap_or("").to_string()
    }
}

fn check_kind(column: &str, row: usize, value: f64, kind: VariableKind) -> Result<()> {
    if kind == VariableKind::Binary && value != 0.0 && value != 1.0 {
        return Err(Error::KindViolation {
            column: column.to_string(),
            row: row + 1,
            value,
        });
    }
    Ok(())
}

/// Load a long-format panel CSV.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset> {
    let table = Table::read(path.as_ref())?;
    panel_from_table(&table, schema)
}

/// Same as [`load_panel_csv`] but from any reader.
pub fn read_panel_csv<R: Read>(reader: R, schema: &PanelSchema) -> Result<PanelDataset> {
    panel_from_table(&Table::from_reader(reader)?, schema)
}

fn panel_from_table(table: &Table, schema: &PanelSchema) -> Result<PanelDataset> {
    let id_col = table.index(&schema.id)?;
    let time_col = table.index(&schema.time)?;
    let treat_col = table.index(&schema.treatment)?;
    let outcome_col = table.index(&schema.outcome)?;
    let conf_cols = table.indices(&schema.confounders)?;
    let base_cols = table.indices(&schema.baseline)?;
    let aux_cols = table.indices(&schema.auxiliary)?;
    let weight_col = schema
        .base_weight
        .as_ref()
        .map(|w| table.index(w))
        .transpose()?;

    let mut unit_ids: Vec<String> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    // per unit: time bits -> data row
    let mut cells: Vec<HashMap<u64, usize>> = Vec::new();
    let mut times: Vec<f64> = Vec::new();

    for row in 0..table.rows.len() {
        let id = table.text(row, id_col);
        let time = table.number(row, time_col)?;
        let time = if time == 0.0 { 0.0 } else { time };
        let u = *unit_index.entry(id.clone()).or_insert_with(|| {
            unit_ids.push(id.clone());
            cells.push(HashMap::new());
            unit_ids.len() - 1
        });
        if cells[u].insert(time.to_bits(), row).is_some() {
            return Err(Error::DuplicateKey { unit: id, time });
        }
        times.push(time);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();

    for (u, map) in cells.iter().enumerate() {
        if map.len() != times.len() {
            let missing = times
                .iter()
                .copied()
                .filter(|t| !map.contains_key(&t.to_bits()))
                .collect();
            return Err(Error::IncompletePanel {
                unit: unit_ids[u].clone(),
                missing,
            });
        }
    }

    let n = unit_ids.len();
    let t_count = times.len();
    let row_at = |u: usize, t: usize| cells[u][&times[t].to_bits()];

    let mut treatments = DMatrix::zeros(n, t_count);
    let mut confounders = vec![DMatrix::zeros(n, conf_cols.len()); t_count];
    let mut auxiliary: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, t_count); aux_cols.len()];
    let mut baseline = DMatrix::zeros(n, base_cols.len());
    let mut outcome = DVector::zeros(n);
    let mut base_weights = DVector::from_element(n, 1.0);

    for u in 0..n {
        for t in 0..t_count {
            let row = row_at(u, t);
            let d = table.number(row, treat_col)?;
            check_kind(&schema.treatment, row, d, schema.treatment_kind)?;
            treatments[(u, t)] = d;
            for (j, &c) in conf_cols.iter().enumerate() {
                confounders[t][(u, j)] = table.number(row, c)?;
            }
            for (a, &c) in aux_cols.iter().enumerate() {
                auxiliary[a][(u, t)] = table.number(row, c)?;
            }
        }
        // Time-invariant columns must agree across a unit's rows.
        let first = row_at(u, 0);
        for (j, &c) in base_cols.iter().enumerate() {
            let v = table.number(first, c)?;
            for t in 1..t_count {
                if table.number(row_at(u, t), c)? != v {
                    return Err(Error::InvalidData(format!(
                        "baseline column {} varies within unit {}",
                        schema.baseline[j], unit_ids[u]
                    )));
                }
            }
            baseline[(u, j)] = v;
        }
        if let Some(c) = weight_col {
            let v = table.number(first, c)?;
            for t in 1..t_count {
                if table.number(row_at(u, t), c)? != v {
                    return Err(Error::InvalidData(format!(
                        "base weight varies within unit {}",
                        unit_ids[u]
                    )));
                }
            }
            base_weights[u] = v;
        }
        // End-of-study outcome is read from the final period.
        outcome[u] = table.number(row_at(u, t_count - 1), outcome_col)?;
    }

    PanelDataset::from_parts(PanelParts {
        unit_ids,
        times,
        baseline_names: schema.baseline.clone(),
        baseline,
        confounder_names: schema.confounders.clone(),
        confounders,
        treatment_name: schema.treatment.clone(),
        treatment_kind: schema.treatment_kind,
        treatments,
        outcome_name: schema.outcome.clone(),
        outcome,
        base_weights,
        auxiliary: schema.auxiliary.iter().cloned().zip(auxiliary).collect(),
    })
}

/// Write a panel as long CSV using the column names of
/// [`PanelDataset::long_schema`]. Numbers use the shortest representation
/// that parses back to the same `f64`.
pub fn write_panel_csv<W: Write>(data: &PanelDataset, writer: W) -> Result<()> {
    let schema = data.long_schema();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.id.clone(),
        schema.time.clone(),
        schema.treatment.clone(),
        schema.outcome.clone(),
    ];
    header.extend(schema.confounders.iter().cloned());
    header.extend(schema.baseline.iter().cloned());
    header.push("base_weight".into());
    header.extend(schema.auxiliary.iter().cloned());
    w.write_record(&header)?;
    for u in 0..data.n() {
        for t in 0..data.periods() {
            let mut rec = vec![
                data.unit_ids()[u].clone(),
                data.times()[t].to_string(),
                data.treatments()[(u, t)].to_string(),
                data.outcome()[u].to_string(),
            ];
            rec.extend((0..data.n_confounders()).map(|j| data.confounders(t)[(u, j)].to_string()));
            rec.extend((0..data.n_baseline()).map(|j| data.baseline()[(u, j)].to_string()));
            rec.push(data.base_weights()[u].to_string());
            rec.extend(data.parts.auxiliary.iter().map(|(_, m)| m[(u, t)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<panel writer>", e))?;
    Ok(())
}

pub fn load_mediation_csv(
    path: impl AsRef<Path>,
    schema: &MediationSchema,
) -> Result<MediationDataset> {
    let table = Table::read(path.as_ref())?;
    mediation_from_table(&table, schema)
}

pub fn read_mediation_csv<R: Read>(reader: R, schema: &MediationSchema) -> Result<MediationDataset> {
    mediation_from_table(&Table::from_reader(reader)?, schema)
}

fn mediation_from_table(table: &Table, schema: &MediationSchema) -> Result<MediationDataset> {
    let id_col = schema.id.as_ref().map(|c| table.index(c)).transpose()?;
    let d_col = table.index(&schema.treatment)?;
    let m_col = table.index(&schema.mediator)?;
    let y_col = table.index(&schema.outcome)?;
    let pre_cols = table.indices(&schema.pre)?;
    let post_cols = table.indices(&schema.post)?;
    let w_col = schema
        .base_weight
        .as_ref()
        .map(|c| table.index(c))
        .transpose()?;

    let n = table.rows.len();
    let mut unit_ids = Vec::with_capacity(n);
    let mut seen = HashMap::new();
    let mut treatment = DVector::zeros(n);
    let mut mediator = DVector::zeros(n);
    let mut outcome = DVector::zeros(n);
    let mut base_weights = DVector::from_element(n, 1.0);
    let mut pre = DMatrix::zeros(n, pre_cols.len());
    let mut post = DMatrix::zeros(n, post_cols.len());

    for row in 0..n {
        let id = match id_col {
            Some(c) => table.text(row, c),
            None => (row + 1).to_string(),
        };
        if seen.insert(id.clone(), row).is_some() {
            return Err(Error::InvalidData(format!("duplicate unit id {id}")));
        }
        unit_ids.push(id);
        treatment[row] = table.number(row, d_col)?;
        check_kind(&schema.treatment, row, treatment[row], schema.treatment_kind)?;
        mediator[row] = table.number(row, m_col)?;
        check_kind(&schema.mediator, row, mediator[row], schema.mediator_kind)?;
        outcome[row] = table.number(row, y_col)?;
        for (j, &c) in pre_cols.iter().enumerate() {
            pre[(row, j)] = table.number(row, c)?;
        }
        for (j, &c) in post_cols.iter().enumerate() {
            post[(row, j)] = table.number(row, c)?;
        }
        if let Some(c) = w_col {
            base_weights[row] = table.number(row, c)?;
        }
    }

    MediationDataset::from_parts(MediationParts {
        unit_ids,
        treatment_name: schema.treatment.clone(),
        treatment_kind: schema.treatment_kind,
        treatment,
        mediator_name: schema.mediator.clone(),
        mediator_kind: schema.mediator_kind,
        mediator,
        pre_names: schema.pre.clone(),
        pre,
        post_names: schema.post.clone(),
        post,
        outcome_name: schema.outcome.clone(),
        outcome,
        base_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> PanelSchema {
        PanelSchema {
            id: "id".into(),
            time: "time".into(),
            treatment: "D".into(),
            treatment_kind: VariableKind::Binary,
            outcome: "Y".into(),
            confounders: vec!["X".into()],
            baseline: vec![],
            base_weight: None,
            auxiliary: vec![],
        }
    }

    #[test]
    fn single_unit_three_periods() {
        let csv = "id,time,D,Y,X\n1,1,0,5,0.1\n1,2,1,5,0.2\n1,3,0,5,0.3\n";
        let d = read_panel_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n(), 1);
        assert_eq!(d.periods(), 3);
        assert_eq!(d.confounders(1)[(0, 0)], 0.2);
        // n = 1 loads but fails validation
        assert!(!d.validate().ok);
    }

    #[test]
    fn periods_sorted_and_units_in_first_appearance_order() {
        let csv = "id,time,D,Y,X\nb,3,0,1,3\na,1,1,2,1\nb,1,0,1,1\na,3,1,2,3\n";
        let d = read_panel_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.unit_ids(), &["b".to_string(), "a".to_string()]);
        assert_eq!(d.times(), &[1.0, 3.0]);
        assert_eq!(d.treatments()[(1, 0)], 1.0);
    }

    #[test]
    fn duplicate_unit_time_is_rejected() {
        let csv = "id,time,D,Y,X\n7,1,0,1,0\n7,2,0,1,0\n7,2,1,1,0\n";
        match read_panel_csv(csv.as_bytes(), &schema()) {
            Err(Error::DuplicateKey { unit, time }) => {
                assert_eq!(unit, "7");
                assert_eq!(time, 2.0);
            }
            other => panic!("expected duplicate key, got {other:?}"),
        }
    }

    #[test]
    fn incomplete_panel_is_rejected() {
        let csv = "id,time,D,Y,X\n1,1,0,1,0\n1,2,0,1,0\n1,3,0,1,0\n2,1,1,1,0\n2,3,1,1,0\n";
        match read_panel_csv(csv.as_bytes(), &schema()) {
            Err(Error::IncompletePanel { unit, missing }) => {
                assert_eq!(unit, "2");
                assert_eq!(missing, vec![2.0]);
            }
            other => panic!("expected incomplete panel, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let csv = "id,time,D,Y,X\n1,1,0,1,abc\n";
        assert!(matches!(
            read_panel_csv(csv.as_bytes(), &schema()),
            Err(Error::NonNumeric { ref column, row: 1, .. }) if column == "X"
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_panel_csv("/nonexistent/panel.csv", &schema()),
            Err(Error::Io { .. })
        ));
    }

    fn med_schema() -> MediationSchema {
        MediationSchema {
            id: None,
            treatment: "D".into(),
            treatment_kind: VariableKind::Binary,
            mediator: "M".into(),
            mediator_kind: VariableKind::Binary,
            outcome: "Y".into(),
            pre: vec!["C".into()],
            post: vec!["Z".into()],
            base_weight: None,
        }
    }

    #[test]
    fn mediation_rows() {
        let csv = "D,M,Y,C,Z\n0,0,1,1,2\n1,0,2,2,3\n0,1,3,3,1\n1,1,4,1,0\n";
        let d = read_mediation_csv(csv.as_bytes(), &med_schema()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.unit_ids()[3], "4");
        assert!(d.validate().ok);
    }

    #[test]
    fn mediation_kind_violation() {
        let csv = "D,M,Y,C,Z\n0,0.5,1,1,2\n1,0,2,2,3\n";
        assert!(matches!(
            read_mediation_csv(csv.as_bytes(), &med_schema()),
            Err(Error::KindViolation { ref column, .. }) if column == "M"
        ));
    }

    #[test]
    fn mediation_empty_file() {
        assert!(read_mediation_csv("".as_bytes(), &med_schema()).is_err());
        assert!(matches!(
            read_mediation_csv("D,M,Y,C,Z\n".as_bytes(), &med_schema()),
            Err(Error::Empty(_))
        ));
    }

    fn toy_panel(weights: Vec<f64>, x: Vec<f64>) -> PanelDataset {
        let n = weights.len();
        PanelDataset::from_parts(PanelParts {
            unit_ids: (1..=n).map(|i| i.to_string()).collect(),
            times: vec![1.0],
            baseline_names: vec![],
            baseline: DMatrix::zeros(n, 0),
            confounder_names: vec!["X".into()],
            confounders: vec![DMatrix::from_column_slice(n, 1, &x)],
            treatment_name: "D".into(),
            treatment_kind: VariableKind::Binary,
            treatments: DMatrix::from_fn(n, 1, |i, _| (i % 2) as f64),
            outcome_name: "Y".into(),
            outcome: DVector::from_fn(n, |i, _| i as f64),
            base_weights: DVector::from_vec(weights),
            auxiliary: vec![],
        })
        .unwrap()
    }

    #[test]
    fn validate_well_formed() {
        let d = toy_panel(vec![1.0; 4], vec![0.1, 0.5, -0.2, 0.3]);
        let r = d.validate();
        assert!(r.ok);
        assert!(r.issues.is_empty());
    }

    #[test]
    fn validate_zero_base_weight_cites_unit() {
        let d = toy_panel(vec![1.0, 1.0, 0.0, 1.0], vec![0.1, 0.5, -0.2, 0.3]);
        let r = d.validate();
        assert!(!r.ok);
        let issue = r.errors().next().unwrap();
        assert_eq!(issue.locator, "unit 3");
    }

    #[test]
    fn validate_constant_confounder_warns() {
        let d = toy_panel(vec![1.0; 4], vec![2.0; 4]);
        let r = d.validate();
        assert!(r.ok);
        assert!(r
            .issues
            .iter()
            .any(|i| i.severity == Severity::Warning && i.locator == "column X_1"));
    }

    #[test]
    fn dichotomize_uses_strict_cutoff() {
        let mut parts = toy_panel(vec![1.0; 4], vec![0.0, 1.0, 2.0, 3.0]).into_parts();
        parts.treatment_kind = VariableKind::Continuous;
        parts.treatments = DMatrix::from_column_slice(4, 1, &[0.05, 0.1, 0.11, 0.9]);
        let d = PanelDataset::from_parts(parts).unwrap().dichotomize_treatment(0.1);
        assert_eq!(d.treatment(0).as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(d.treatment_kind(), VariableKind::Binary);
    }
}
