//! Raw clinical events and their binary feature encoding.
//!
//! Labs become two indicator columns per test (`lab_low`, `lab_high`),
//! medications and procedures become presence indicators, and non-sensitive
//! diagnoses become comorbidity indicators. Sensitive diagnoses never reach
//! the matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    Lab,
    Medication,
    Procedure,
    Diagnosis,
}

impl EventCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            EventCategory::Lab => "lab",
            EventCategory::Medication => "medication",
            EventCategory::Procedure => "procedure",
            EventCategory::Diagnosis => "diagnosis",
        }
    }
}

impl FromStr for EventCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lab" => Ok(EventCategory::Lab),
            "medication" => Ok(EventCategory::Medication),
            "procedure" => Ok(EventCategory::Procedure),
            "diagnosis" => Ok(EventCategory::Diagnosis),
            other => Err(format!("unknown event category {other:?}")),
        }
    }
}

/// One raw clinical event. Numeric fields are only carried by labs.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub category: EventCategory,
    pub code: String,
    pub value: Option<f64>,
    pub ref_low: Option<f64>,
    pub ref_high: Option<f64>,
}

impl EventRecord {
    pub fn new(patient_id: impl Into<String>, category: EventCategory, code: impl Into<String>) -> Self {
        EventRecord {
            patient_id: patient_id.into(),
            category,
            code: code.into(),
            value: None,
            ref_low: None,
            ref_high: None,
        }
    }

    pub fn lab(
        patient_id: impl Into<String>,
        code: impl Into<String>,
        value: f64,
        ref_low: Option<f64>,
        ref_high: Option<f64>,
    ) -> Self {
        EventRecord {
            patient_id: patient_id.into(),
            category: EventCategory::Lab,
            code: code.into(),
            value: Some(value),
            ref_low,
            ref_high,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.patient_id.is_empty() {
            return Err("empty patient id".into());
        }
        if self.code.is_empty() {
            return Err("empty code".into());
        }
        let numeric = [self.value, self.ref_low, self.ref_high];
        if self.category != EventCategory::Lab {
            if numeric.iter().any(Option::is_some) {
                return Err(format!("{} event carries lab values", self.category.as_str()));
            }
            return Ok(());
        }
        if self.value.is_none() {
            return Err("lab event without value".into());
        }
        if numeric.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite lab value or range".into());
        }
        if let (Some(lo), Some(hi)) = (self.ref_low, self.ref_high) {
            if lo > hi {
                return Err(format!("reference range [{lo}, {hi}] is inverted"));
            }
        }
        Ok(())
    }
}

/// Feature column category. Declaration order is the canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    LabLow,
    LabHigh,
    Medication,
    Procedure,
    Comorbidity,
}

/// Reporting group: `lab_low` and `lab_high` both count as lab.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Lab,
    Medication,
    Procedure,
    Comorbidity,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::Lab,
        FeatureGroup::Medication,
        FeatureGroup::Procedure,
        FeatureGroup::Comorbidity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureGroup::Lab => "lab",
            FeatureGroup::Medication => "medication",
            FeatureGroup::Procedure => "procedure",
            FeatureGroup::Comorbidity => "comorbidity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 5] = [
        FeatureCategory::LabLow,
        FeatureCategory::LabHigh,
        FeatureCategory::Medication,
        FeatureCategory::Procedure,
        FeatureCategory::Comorbidity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::LabLow => "lab_low",
            FeatureCategory::LabHigh => "lab_high",
            FeatureCategory::Medication => "medication",
            FeatureCategory::Procedure => "procedure",
            FeatureCategory::Comorbidity => "comorbidity",
        }
    }

    /// Name prefix used in top-feature listings.
    pub fn display_prefix(self) -> &'static str {
        match self {
            FeatureCategory::LabLow => "Lab_low_",
            FeatureCategory::LabHigh => "Lab_high_",
            FeatureCategory::Medication => "Med_",
            FeatureCategory::Procedure => "Procedure_",
            FeatureCategory::Comorbidity => "Comor_",
        }
    }

    pub fn group(self) -> FeatureGroup {
        match self {
            FeatureCategory::LabLow | FeatureCategory::LabHigh => FeatureGroup::Lab,
            FeatureCategory::Medication => FeatureGroup::Medication,
            FeatureCategory::Procedure => FeatureGroup::Procedure,
            FeatureCategory::Comorbidity => FeatureGroup::Comorbidity,
        }
    }
}

impl FromStr for FeatureCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FeatureCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown feature category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId {
    pub category: FeatureCategory,
    pub code: String,
}

impl FeatureId {
    pub fn new(category: FeatureCategory, code: impl Into<String>) -> Self {
        FeatureId {
            category,
            code: code.into(),
        }
    }

    /// `Med_alprazolam`, `Lab_high_BUN`, ...
    pub fn prefixed_name(&self) -> String {
        format!("{}{}", self.category.display_prefix(), self.code)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.category.as_str(), self.code)
    }
}

/// Sparse binary patients x features matrix, stored row-compressed.
///
/// Every column holds at least one 1; all-zero columns are dropped when the
/// matrix is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    patient_ids: Vec<String>,
    features: Vec<FeatureId>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl FeatureMatrix {
    /// Build from (patient index, feature index) cells. Duplicate cells collapse.
    pub fn from_cells<I>(patient_ids: Vec<String>, features: Vec<FeatureId>, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let n_rows = patient_ids.len();
        let n_cols = features.len();
        {
            let unique: BTreeSet<&FeatureId> = features.iter().collect();
            if unique.len() != n_cols {
                return Err(Error::InvalidRecord("duplicate feature id in dictionary".into()));
            }
        }
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n_rows];
        for (r, c) in cells {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidRecord(format!(
                    "cell ({r}, {c}) outside {n_rows}x{n_cols} matrix"
                )));
            }
            rows[r].push(c as u32);
        }
        let mut present = vec![false; n_cols];
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            for &c in row.iter() {
                present[c as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; n_cols];
        let mut kept = Vec::with_capacity(n_cols);
        for (old, feature) in features.into_iter().enumerate() {
            if present[old] {
                remap[old] = kept.len() as u32;
                kept.push(feature);
            }
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for row in rows {
            cols.extend(row.into_iter().map(|c| remap[c as usize]));
            row_ptr.push(cols.len());
        }
        Ok(FeatureMatrix {
            patient_ids,
            features: kept,
            row_ptr,
            cols,
        })
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn features(&self) -> &[FeatureId] {
        &self.features
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Column indices set to 1 in `row`, ascending.
    pub fn row(&self, row: usize) -> &[u32] {
        &self.cols[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.row(row).binary_search(&(col as u32)).is_ok()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_patients()).flat_map(move |r| self.row(r).iter().map(move |&c| (r, c as usize)))
    }

    pub fn feature_index(&self, id: &FeatureId) -> Option<usize> {
        self.features.iter().position(|f| f == id)
    }

    /// Count of 1s per column over the given rows.
    pub fn column_counts(&self, rows: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_features()];
        for r in rows {
            for &c in self.row(r) {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    /// Sub-matrix over `rows` (in the given order) and `columns`; columns left
    /// all-zero by the row selection are dropped.
    pub fn select(&self, rows: &[usize], columns: &[usize]) -> Result<FeatureMatrix> {
        let mut remap = vec![usize::MAX; self.n_features()];
        for (new, &old) in columns.iter().enumerate() {
            remap[old] = new;
        }
        let ids = rows.iter().map(|&r| self.patient_ids[r].clone()).collect();
        let features = columns.iter().map(|&c| self.features[c].clone()).collect();
        let cells = rows.iter().enumerate().flat_map(|(new_r, &r)| {
            let remap = &remap;
            self.row(r)
                .iter()
                .filter(|&&c| remap[c as usize] != usize::MAX)
                .map(move |&c| (new_r, remap[c as usize]))
        });
        FeatureMatrix::from_cells(ids, features, cells)
    }
}

/// Delimiter and column names of an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventFormat {
    pub delimiter: char,
    pub patient_id: String,
    pub category: String,
    pub code: String,
    pub value: String,
    pub ref_low: String,
    pub ref_high: String,
}

impl Default for EventFormat {
    fn default() -> Self {
        EventFormat {
            delimiter: ',',
            patient_id: "patient_id".into(),
            category: "category".into(),
            code: "code".into(),
            value: "value".into(),
            ref_low: "ref_low".into(),
            ref_high: "ref_high".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<EventRecord>,
    pub skipped: usize,
}

fn schema(path: &Path, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Read a delimited event log. Malformed rows are skipped and counted;
/// an unknown category token is a schema error.
pub fn ingest_events(path: &Path, format: &EventFormat) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if file.metadata().map_err(|e| Error::io(path, e))?.len() == 0 {
        return Ok(Ingested::default());
    }
    if !format.delimiter.is_ascii() {
        return Err(schema(path, "delimiter must be a single ASCII character"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| schema(path, format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Ok(Ingested::default());
    }
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(path, format!("missing column {name:?}")))
    };
    let idx = [
        column(&format.patient_id)?,
        column(&format.category)?,
        column(&format.code)?,
        column(&format.value)?,
        column(&format.ref_low)?,
        column(&format.ref_high)?,
    ];

    let mut out = Ingested::default();
    for (line, row) in reader.records().enumerate() {
        let row = match row {
            Ok(row) => row,
            Err(e) if e.is_io_error() => return Err(schema(path, e.to_string())),
            Err(e) => {
                log::warn!("{}: skipping unparseable row {}: {e}", path.display(), line + 2);
                out.skipped += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(idx[i]);
        let Some(category_token) = field(1) else {
            log::warn!("{}: skipping short row {}", path.display(), line + 2);
            out.skipped += 1;
            continue;
        };
        let category: EventCategory = category_token
            .parse()
            .map_err(|m: String| schema(path, format!("row {}: {m}", line + 2)))?;
        match parse_row(category, field(0), field(2), field(3), field(4), field(5)) {
            Ok(record) => out.records.push(record),
            Err(reason) => {
                log::warn!("{}: skipping row {}: {reason}", path.display(), line + 2);
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

fn parse_row(
    category: EventCategory,
    patient: Option<&str>,
    code: Option<&str>,
    value: Option<&str>,
    ref_low: Option<&str>,
    ref_high: Option<&str>,
) -> std::result::Result<EventRecord, String> {
    fn number(field: Option<&str>) -> std::result::Result<Option<f64>, String> {
        match field.map(str::trim) {
            None | Some("") => Ok(None),
            Some(s) => s.parse::<f64>().map(Some).map_err(|_| format!("bad number {s:?}")),
        }
    }
    let record = EventRecord {
        patient_id: patient.unwrap_or_default().to_string(),
        category,
        code: code.unwrap_or_default().to_string(),
        value: number(value)?,
        ref_low: number(ref_low)?,
        ref_high: number(ref_high)?,
    };
    record.validate()?;
    Ok(record)
}

/// Does `code` fall under any of the sensitive diagnosis prefixes?
pub fn is_sensitive(code: &str, sensitive_prefixes: &[String]) -> bool {
    sensitive_prefixes
        .iter()
        .any(|p| !p.is_empty() && code.starts_with(p.as_str()))
}

/// Binary-encode events into a feature matrix.
///
/// Patients are ordered by id and features canonically (category, then code),
/// so the result does not depend on record order or duplication.
pub fn encode(records: &[EventRecord], sensitive_prefixes: &[String]) -> Result<FeatureMatrix> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut per_patient: BTreeMap<&str, BTreeSet<FeatureId>> = BTreeMap::new();
    for record in records {
        record.validate().map_err(Error::InvalidRecord)?;
        let entry = per_patient.entry(record.patient_id.as_str()).or_default();
        for feature in record_features(record, sensitive_prefixes) {
            entry.insert(feature);
        }
    }
    let dictionary: BTreeSet<&FeatureId> = per_patient.values().flatten().collect();
    let features: Vec<FeatureId> = dictionary.into_iter().cloned().collect();
    let index: HashMap<&FeatureId, usize> = features.iter().enumerate().map(|(i, f)| (f, i)).collect();
    let cells: Vec<(usize, usize)> = per_patient
        .values()
        .enumerate()
        .flat_map(|(r, set)| set.iter().map(move |f| (r, f)))
        .map(|(r, f)| (r, index[f]))
        .collect();
    let patient_ids = per_patient.keys().map(|p| p.to_string()).collect();
    FeatureMatrix::from_cells(patient_ids, features, cells)
}

fn record_features(record: &EventRecord, sensitive: &[String]) -> Vec<FeatureId> {
    let code = record.code.clone();
    match record.category {
        EventCategory::Medication => vec![FeatureId::new(FeatureCategory::Medication, code)],
        EventCategory::Procedure => vec![FeatureId::new(FeatureCategory::Procedure, code)],
        EventCategory::Diagnosis if is_sensitive(&code, sensitive) => vec![],
        EventCategory::Diagnosis => vec![FeatureId::new(FeatureCategory::Comorbidity, code)],
        EventCategory::Lab => {
            let (Some(value), Some(lo), Some(hi)) = (record.value, record.ref_low, record.ref_high) else {
                return vec![];
            };
            let mut out = Vec::new();
            if value < lo {
                out.push(FeatureId::new(FeatureCategory::LabLow, code.clone()));
            }
            if value > hi {
                out.push(FeatureId::new(FeatureCategory::LabHigh, code));
            }
            out
        }
    }
}

/// Per-category feature counts. `lab` counts distinct lab codes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub medication: usize,
    pub procedure: usize,
    pub lab: usize,
    pub comorbidity: usize,
    pub columns: usize,
}

pub fn feature_census(matrix: &FeatureMatrix) -> Census {
    let mut census = Census {
        columns: matrix.n_features(),
        ..Census::default()
    };
    let mut labs = BTreeSet::new();
    for f in matrix.features() {
        match f.category {
            FeatureCategory::LabLow | FeatureCategory::LabHigh => {
                labs.insert(f.code.as_str());
            }
            FeatureCategory::Medication => census.medication += 1,
            FeatureCategory::Procedure => census.procedure += 1,
            FeatureCategory::Comorbidity => census.comorbidity += 1,
        }
    }
    census.lab = labs.len();
    census
}

/// File names of a serialized matrix inside its directory.
pub struct MatrixFiles {
    pub features: PathBuf,
    pub cells: PathBuf,
    pub patients: PathBuf,
}

impl MatrixFiles {
    pub fn in_dir(dir: &Path) -> Self {
        MatrixFiles {
            features: dir.join("features.csv"),
            cells: dir.join("cells.csv"),
            patients: dir.join("patients.txt"),
        }
    }
}

/// Serialize as a feature dictionary, a sparse triplet file and a patient
/// list. `preamble` (if non-empty) is written first as a `#` comment line.
pub fn write_matrix(matrix: &FeatureMatrix, files: &MatrixFiles, preamble: &str) -> Result<()> {
    let mut features = csv_writer(&files.features, preamble)?;
    write_csv(&files.features, &mut features, ["index", "category", "code"])?;
    for (i, f) in matrix.features().iter().enumerate() {
        write_csv(
            &files.features,
            &mut features,
            [&i.to_string(), f.category.as_str(), &f.code],
        )?;
    }
    features.flush().map_err(|e| Error::io(&files.features, e))?;

    let mut cells = csv_writer(&files.cells, preamble)?;
    write_csv(&files.cells, &mut cells, ["patient_index", "feature_index"])?;
    for (r, c) in matrix.cells() {
        write_csv(&files.cells, &mut cells, [r.to_string(), c.to_string()])?;
    }
    cells.flush().map_err(|e| Error::io(&files.cells, e))?;

    let mut patients = String::new();
    if !preamble.is_empty() {
        patients.push_str(&format!("# {preamble}\n"));
    }
    for id in matrix.patient_ids() {
        patients.push_str(id);
        patients.push('\n');
    }
    std::fs::write(&files.patients, patients).map_err(|e| Error::io(&files.patients, e))
}

fn csv_writer(path: &Path, preamble: &str) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    if !preamble.is_empty() {
        writeln!(file, "# {preamble}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

fn write_csv<I, T>(path: &Path, w: &mut csv::Writer<File>, row: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_matrix(files: &MatrixFiles) -> Result<FeatureMatrix> {
    let mut features = Vec::new();
    for row in csv_rows(&files.features)? {
        if row.len() < 3 {
            return Err(schema(&files.features, "expected index,category,code"));
        }
        let index: usize = row[0]
            .parse()
            .map_err(|_| schema(&files.features, format!("bad index {:?}", row[0])))?;
        if index != features.len() {
            return Err(schema(&files.features, "feature indices must be 0..n in order"));
        }
        let category = row[1].parse().map_err(|m: String| schema(&files.features, m))?;
        features.push(FeatureId::new(category, row[2].clone()));
    }
    let text = std::fs::read_to_string(&files.patients).map_err(|e| Error::io(&files.patients, e))?;
    let patients: Vec<String> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(str::to_string)
        .collect();
    let mut cells = Vec::new();
    for row in csv_rows(&files.cells)? {
        let parse = |s: &String| {
            s.parse::<usize>()
                .map_err(|_| schema(&files.cells, format!("bad index {s:?}")))
        };
        if row.len() < 2 {
            return Err(schema(&files.cells, "expected patient_index,feature_index"));
        }
        cells.push((parse(&row[0])?, parse(&row[1])?));
    }
    FeatureMatrix::from_cells(patients, features, cells)
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(BufReader::new(file));
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| schema(path, e.to_string()))
        })
        .collect()
}
