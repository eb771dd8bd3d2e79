//! Student-level panel: schema, validation and per-cohort standardization.
//!
//! The on-disk layout is a header-first CSV:
//!
//! ```text
//! student_id,school_id,cohort,ses_raw,outcome,
//! score_reading_g2_mid,...,score_reading_g5_end,
//! score_math_g2_mid,...,score_math_g5_end[,extra numeric columns...]
//! ```
//!
//! Empty fields are missing values. Columns after the fixed schema are kept
//! as numeric student characteristics (used by the score-change diagnostics).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A numeric column with explicit missing values.
pub type Column = Vec<Option<f64>>;

pub const STUDENT_ID: &str = "student_id";
pub const SCHOOL_ID: &str = "school_id";
pub const COHORT: &str = "cohort";
pub const SES_RAW: &str = "ses_raw";
pub const SES: &str = "ses";
pub const OUTCOME: &str = "outcome";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Reading,
    Math,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Reading, Domain::Math];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Reading => "reading",
            Domain::Math => "math",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Mid,
    End,
}

/// One biannual test administration (grade 2..=5, mid or end of year).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestSlot {
    pub grade: u8,
    pub term: Term,
}

impl TestSlot {
    /// Chronological order, oldest first. The last slot is the current test.
    pub const ALL: [TestSlot; 8] = [
        TestSlot { grade: 2, term: Term::Mid },
        TestSlot { grade: 2, term: Term::End },
        TestSlot { grade: 3, term: Term::Mid },
        TestSlot { grade: 3, term: Term::End },
        TestSlot { grade: 4, term: Term::Mid },
        TestSlot { grade: 4, term: Term::End },
        TestSlot { grade: 5, term: Term::Mid },
        TestSlot { grade: 5, term: Term::End },
    ];

    /// Largest lag available in the schema.
    pub const MAX_LAG: usize = 7;

    pub const CURRENT: TestSlot = TestSlot { grade: 5, term: Term::End };

    /// Position in [`TestSlot::ALL`].
    pub fn index(self) -> usize {
        (self.grade as usize - 2) * 2 + usize::from(self.term == Term::End)
    }

    /// Number of half-year periods before the current test (grade-5 end = 0).
    pub fn lag(self) -> usize {
        Self::MAX_LAG - self.index()
    }

    pub fn from_lag(lag: usize) -> Option<TestSlot> {
        (lag <= Self::MAX_LAG).then(|| Self::ALL[Self::MAX_LAG - lag])
    }

    /// `g5_end`, `g3_mid`, ...
    pub fn label(self) -> String {
        let term = match self.term {
            Term::Mid => "mid",
            Term::End => "end",
        };
        format!("g{}_{}", self.grade, term)
    }

    pub fn score_header(self, domain: Domain) -> String {
        format!("score_{}_{}", domain.name(), self.label())
    }

    /// Name of the cross-domain average column.
    pub fn avg_column(self) -> String {
        format!("avg_{}", self.label())
    }
}

impl fmt::Display for TestSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Name of the average-score column `lag` periods before the current test.
pub fn score_column(lag: usize) -> String {
    TestSlot::from_lag(lag)
        .map(TestSlot::avg_column)
        .unwrap_or_else(|| format!("avg_lag{lag}"))
}

/// The full fixed header, in schema order.
pub fn schema_headers() -> Vec<String> {
    let mut headers: Vec<String> = [STUDENT_ID, SCHOOL_ID, COHORT, SES_RAW, OUTCOME]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for domain in Domain::ALL {
        for slot in TestSlot::ALL {
            headers.push(slot.score_header(domain));
        }
    }
    headers
}

/// How score columns are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Domain scores standardized within cohort (sample SD); the average is
    /// left unscaled.
    CohortStandardized,
    /// Scores kept on the scale of a generating model (synthetic panels).
    Model,
}

/// Unvalidated CSV contents: headers plus string cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            rows.push(record?.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.headers)?;
        for row in &self.rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Names of the columns entering one regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub cluster: String,
}

impl VariableSpec {
    pub fn new(outcome: impl Into<String>, regressors: &[&str], cluster: impl Into<String>) -> Self {
        Self {
            outcome: outcome.into(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            cluster: cluster.into(),
        }
    }

    /// Outcome first, then regressors.
    pub fn columns(&self) -> Vec<&str> {
        std::iter::once(self.outcome.as_str())
            .chain(self.regressors.iter().map(String::as_str))
            .collect()
    }

    pub fn validate(&self, data: &PanelDataset) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.columns() {
            if !seen.insert(name) {
                return Err(Error::DuplicateColumn(name.to_string()));
            }
            data.column(name)?;
        }
        data.cluster_ids(&self.cluster)?;
        Ok(())
    }
}

/// Validated student-level table. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    student_id: Vec<String>,
    school_id: Vec<String>,
    cohort: Vec<String>,
    school_index: Vec<usize>,
    n_schools: usize,
    cohort_index: Vec<usize>,
    n_cohorts: usize,
    columns: BTreeMap<String, Column>,
    characteristics: Vec<String>,
    scale: ScoreScale,
}

/// Inputs for building a panel whose scores are already on a model scale.
#[derive(Debug, Clone, Default)]
pub struct ModelScaleParts {
    pub student_id: Vec<String>,
    pub school_id: Vec<String>,
    pub cohort: Vec<String>,
    pub ses: Vec<f64>,
    pub ses_raw: Vec<f64>,
    pub outcome: Vec<f64>,
    /// Indexed by lag: `scores[0]` is the current test.
    pub scores: Vec<Column>,
    pub characteristics: Vec<(String, Column)>,
}

impl PanelDataset {
    /// Builds a panel from model-scale columns without re-standardizing.
    /// Domain columns are set equal to the supplied score so the average
    /// invariant holds exactly.
    pub fn from_model_scale(parts: ModelScaleParts) -> Result<Self> {
        let n = parts.student_id.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let lens = [
            parts.school_id.len(),
            parts.cohort.len(),
            parts.ses.len(),
            parts.ses_raw.len(),
            parts.outcome.len(),
        ];
        if lens.iter().any(|&l| l != n) || parts.scores.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch("model-scale columns differ in length".into()));
        }
        if parts.scores.len() > TestSlot::MAX_LAG + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} score periods exceed the {} test slots",
                parts.scores.len(),
                TestSlot::MAX_LAG + 1
            )));
        }
        let mut columns = BTreeMap::new();
        columns.insert(SES.to_string(), parts.ses.into_iter().map(Some).collect());
        columns.insert(SES_RAW.to_string(), parts.ses_raw.into_iter().map(Some).collect());
        columns.insert(OUTCOME.to_string(), parts.outcome.into_iter().map(Some).collect());
        for lag in 0..=TestSlot::MAX_LAG {
            let slot = TestSlot::from_lag(lag).expect("lag in range");
            let col = parts.scores.get(lag).cloned().unwrap_or_else(|| vec![None; n]);
            for domain in Domain::ALL {
                columns.insert(slot.score_header(domain), col.clone());
            }
            columns.insert(slot.avg_column(), col);
        }
        let mut characteristics = Vec::new();
        for (name, col) in parts.characteristics {
            if col.len() != n {
                return Err(Error::DimensionMismatch(format!("characteristic `{name}`")));
            }
            if columns.contains_key(&name) {
                return Err(Error::DuplicateColumn(name));
            }
            characteristics.push(name.clone());
            columns.insert(name, col);
        }
        let (school_index, n_schools) = dense_index(&parts.school_id);
        let (cohort_index, n_cohorts) = dense_index(&parts.cohort);
        Ok(Self {
            student_id: parts.student_id,
            school_id: parts.school_id,
            cohort: parts.cohort,
            school_index,
            n_schools,
            cohort_index,
            n_cohorts,
            columns,
            characteristics,
            scale: ScoreScale::Model,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.student_id.len()
    }

    pub fn scale(&self) -> ScoreScale {
        self.scale
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_id
    }

    pub fn school_ids(&self) -> &[String] {
        &self.school_id
    }

    pub fn cohorts(&self) -> &[String] {
        &self.cohort
    }

    /// Names of the extra numeric characteristics, in file order.
    pub fn characteristics(&self) -> &[String] {
        &self.characteristics
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Average score `lag` periods before the current test.
    pub fn score(&self, lag: usize) -> Result<&Column> {
        self.column(&score_column(lag))
    }

    /// Dense cluster ids (0..n) for a categorical column.
    pub fn cluster_ids(&self, name: &str) -> Result<(&[usize], usize)> {
        match name {
            SCHOOL_ID => Ok((&self.school_index, self.n_schools)),
            COHORT => Ok((&self.cohort_index, self.n_cohorts)),
            other => Err(Error::UnknownColumn(other.to_string())),
        }
    }

    /// Lags (1..=7) whose average-score column has at least one value.
    pub fn available_lags(&self) -> Vec<usize> {
        (1..=TestSlot::MAX_LAG)
            .filter(|&lag| {
                self.score(lag)
                    .map(|c| c.iter().any(Option::is_some))
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Row indices where every named column is present.
    pub fn complete_rows(&self, names: &[&str]) -> Result<Vec<usize>> {
        let cols = names
            .iter()
            .map(|n| self.column(n))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.n_rows())
            .filter(|&i| cols.iter().all(|c| c[i].is_some()))
            .collect())
    }
}

pub(crate) fn format_cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn dense_index(labels: &[String]) -> (Vec<usize>, usize) {
    let mut map: HashMap<&str, usize> = HashMap::new();
    let index = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.as_str()).or_insert(next)
        })
        .collect();
    (index, map.len())
}

fn parse_number(row: usize, header: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::InvalidRow {
            row,
            message: format!("`{header}` is not a finite number: `{cell}`"),
        }),
    }
}

/// Sample-SD z-scores over the present values; missing stays missing.
///
/// With fewer than two values, or zero spread, values are only centered.
pub fn standardize(values: &[Option<f64>]) -> Column {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return values.to_vec();
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let sd = if present.len() > 1 {
        (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let scale = if sd > 0.0 { sd } else { 1.0 };
    values.iter().map(|v| v.map(|x| (x - mean) / scale)).collect()
}

/// Standardizes `values` separately within each group.
fn standardize_within(values: &[Option<f64>], groups: &[Vec<usize>]) -> Column {
    let mut out = vec![None; values.len()];
    for rows in groups {
        let sub: Column = rows.iter().map(|&i| values[i]).collect();
        for (&i, z) in rows.iter().zip(standardize(&sub)) {
            out[i] = z;
        }
    }
    out
}

/// Validates a raw table against the panel schema and standardizes SES and
/// the domain scores within each cohort.
pub fn validate_dataset(raw: &RawTable) -> Result<PanelDataset> {
    let mut position = HashMap::new();
    for (i, h) in raw.headers.iter().enumerate() {
        if position.insert(h.as_str(), i).is_some() {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let schema = schema_headers();
    for h in &schema {
        if !position.contains_key(h.as_str()) {
            return Err(Error::MissingColumn(h.clone()));
        }
    }
    if raw.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schema_set: HashSet<&str> = schema.iter().map(String::as_str).collect();
    let extras: Vec<&String> = raw
        .headers
        .iter()
        .filter(|h| !schema_set.contains(h.as_str()))
        .collect();
    for e in &extras {
        if e.as_str() == SES || e.starts_with("avg_") {
            return Err(Error::DuplicateColumn((*e).clone()));
        }
    }

    let n = raw.rows.len();
    let mut student_id = Vec::with_capacity(n);
    let mut school_id = Vec::with_capacity(n);
    let mut cohort = Vec::with_capacity(n);
    let mut ses_raw = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut raw_scores: BTreeMap<String, Column> =
        schema[5..].iter().map(|h| (h.clone(), Vec::with_capacity(n))).collect();
    let mut extra_cols: Vec<Column> = vec![Vec::with_capacity(n); extras.len()];

    for (r, row) in raw.rows.iter().enumerate() {
        // 1-based data row for diagnostics
        let row_no = r + 1;
        if row.len() != raw.headers.len() {
            return Err(Error::InvalidRow {
                row: row_no,
                message: format!("expected {} fields, found {}", raw.headers.len(), row.len()),
            });
        }
        let cell = |name: &str| row[position[name]].as_str();
        for key in [SCHOOL_ID, COHORT] {
            if cell(key).is_empty() {
                return Err(Error::InvalidRow { row: row_no, message: format!("missing `{key}`") });
            }
        }
        student_id.push(cell(STUDENT_ID).to_string());
        school_id.push(cell(SCHOOL_ID).to_string());
        cohort.push(cell(COHORT).to_string());
        let ses = parse_number(row_no, SES_RAW, cell(SES_RAW))?.ok_or_else(|| Error::InvalidRow {
            row: row_no,
            message: format!("missing `{SES_RAW}`"),
        })?;
        ses_raw.push(ses);
        let y_cell = cell(OUTCOME);
        match y_cell.parse::<f64>() {
            Ok(v) if v == 0.0 || v == 1.0 => outcome.push(v),
            _ if y_cell.is_empty() => {
                return Err(Error::InvalidRow { row: row_no, message: format!("missing `{OUTCOME}`") })
            }
            _ => return Err(Error::NonBinaryOutcome { row: row_no, value: y_cell.to_string() }),
        }
        for h in &schema[5..] {
            let v = parse_number(row_no, h, cell(h))?;
            raw_scores.get_mut(h).expect("schema column").push(v);
        }
        for (col, h) in extra_cols.iter_mut().zip(&extras) {
            col.push(parse_number(row_no, h, cell(h))?);
        }
    }

    let (cohort_index, n_cohorts) = dense_index(&cohort);
    let mut groups = vec![Vec::new(); n_cohorts];
    for (i, &c) in cohort_index.iter().enumerate() {
        groups[c].push(i);
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::SingletonCohort(cohort[g[0]].clone()));
    }

    let mut columns = BTreeMap::new();
    let ses_col: Column = ses_raw.iter().copied().map(Some).collect();
    columns.insert(SES.to_string(), standardize_within(&ses_col, &groups));
    columns.insert(SES_RAW.to_string(), ses_col);
    columns.insert(OUTCOME.to_string(), outcome.into_iter().map(Some).collect());
    for slot in TestSlot::ALL {
        let mut domain_z = Vec::new();
        for domain in Domain::ALL {
            let h = slot.score_header(domain);
            let z = standardize_within(&raw_scores[&h], &groups);
            domain_z.push(z.clone());
            columns.insert(h, z);
        }
        let avg: Column = domain_z[0]
            .iter()
            .zip(&domain_z[1])
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some((a + b) / 2.0),
                _ => None,
            })
            .collect();
        columns.insert(slot.avg_column(), avg);
    }
    let mut characteristics = Vec::new();
    for (h, col) in extras.into_iter().zip(extra_cols) {
        characteristics.push(h.clone());
        columns.insert(h.clone(), col);
    }

    let (school_index, n_schools) = dense_index(&school_id);
    Ok(PanelDataset {
        student_id,
        school_id,
        cohort,
        school_index,
        n_schools,
        cohort_index,
        n_cohorts,
        columns,
        characteristics,
        scale: ScoreScale::CohortStandardized,
    })
}

/// Reads and validates a panel CSV.
pub fn read_dataset<R: Read>(reader: R) -> Result<PanelDataset> {
    validate_dataset(&RawTable::read_csv(reader)?)
}
