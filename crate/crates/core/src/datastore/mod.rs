//! Node-local datasets: CSV tables, markdown guidance, and the index of
//! values that must not leave the node.

mod clinic;
mod guidance;
mod insurer;
mod protected;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

pub use clinic::{ClinicStore, ClinicalObservation, PatientRecord, SymptomClass, load_clinic_store, load_patients};
pub use guidance::{GuidanceDoc, load_guidance, parse_guidance};
pub use insurer::{
    CoverageRule, EnrollmentRow, EnrollmentStatus, EnrollmentTemplate, InsurerStore, generate_enrollment,
    load_enrollment_template, load_insurer_store,
};
pub use protected::{MatchMode, ProtectRule, ProtectedValue, ProtectedValueIndex, protected_values};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatastoreError {
    #[error("{file}: cannot read: {reason}")]
    Io { file: String, reason: String },
    #[error("{file}: missing `{missing}`")]
    Schema { file: String, missing: String },
    #[error("{file}:{line}: {reason}")]
    Row { file: String, line: u64, reason: String },
    #[error("{file}: duplicate key `{key}` at line {line}")]
    Duplicate { file: String, line: u64, key: String },
    #[error("observation for `{0}` has no patient record")]
    Integrity(String),
    #[error("protection config: {0}")]
    Config(String),
}

/// Dataset file locations for one node. Any subset may be present.
#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub observations: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub enrollment: Option<PathBuf>,
    pub coverage_rules: Option<PathBuf>,
    pub guidance_dir: Option<PathBuf>,
}

impl DatasetPaths {
    pub(crate) fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.observations,
            &mut self.patients,
            &mut self.enrollment,
            &mut self.coverage_rules,
            &mut self.guidance_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Everything a node has loaded. Stores are immutable once built.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub clinic: Option<ClinicStore>,
    pub insurer: Option<InsurerStore>,
    pub guidance: Option<Vec<GuidanceDoc>>,
}

impl Datasets {
    pub fn load(paths: &DatasetPaths) -> Result<Self, DatastoreError> {
        let clinic = match (&paths.observations, &paths.patients) {
            (Some(o), Some(p)) => Some(load_clinic_store(o, p)?),
            (None, None) => None,
            (Some(_), None) => {
                return Err(DatastoreError::Config(
                    "observations configured without patients".into(),
                ));
            }
            (None, Some(_)) => {
                return Err(DatastoreError::Config(
                    "patients configured without observations".into(),
                ));
            }
        };
        let insurer = match (&paths.enrollment, &paths.coverage_rules) {
            (Some(e), Some(r)) => Some(load_insurer_store(e, r)?),
            (None, None) => None,
            _ => {
                return Err(DatastoreError::Config(
                    "enrollment and coverage_rules must be configured together".into(),
                ));
            }
        };
        let guidance = paths.guidance_dir.as_deref().map(load_guidance).transpose()?;
        Ok(Self {
            clinic,
            insurer,
            guidance,
        })
    }

    /// Cell values of `dataset.column` in row order, or `None` when the node
    /// has no such table or the table has no such column.
    pub fn column(&self, dataset: &str, column: &str) -> Option<Vec<String>> {
        match dataset {
            "observations" => self.clinic.as_ref()?.observation_column(column),
            "patients" => self.clinic.as_ref()?.patient_column(column),
            "enrollment" => self.insurer.as_ref()?.enrollment_column(column),
            "coverage_rules" => self.insurer.as_ref()?.rule_column(column),
            _ => None,
        }
    }
}

/// Header-checked CSV reader shared by the table loaders.
pub(crate) struct Table {
    pub file: String,
    columns: HashMap<String, usize>,
    reader: csv::Reader<std::fs::File>,
}

pub(crate) struct Row {
    pub line: u64,
    record: csv::StringRecord,
}

impl Row {
    pub fn get<'a>(&'a self, table: &Table, column: &str) -> &'a str {
        // Columns are checked by `Table::open`.
        self.record.get(table.columns[column]).unwrap_or("")
    }
}

impl Table {
    pub fn open(path: &Path, required: &[&str]) -> Result<Self, DatastoreError> {
        let file = path.display().to_string();
        let handle = std::fs::File::open(path).map_err(|e| DatastoreError::Io {
            file: file.clone(),
            reason: e.to_string(),
        })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(handle);
        let headers = reader.headers().map_err(|e| DatastoreError::Row {
            file: file.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_owned(), i))
            .collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(DatastoreError::Schema {
                    file,
                    missing: (*col).to_owned(),
                });
            }
        }
        Ok(Self { file, columns, reader })
    }

    pub fn rows(&mut self) -> Result<Vec<Row>, DatastoreError> {
        let mut out = Vec::new();
        for rec in self.reader.records() {
            let record = rec.map_err(|e| DatastoreError::Row {
                file: self.file.clone(),
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            out.push(Row { line, record });
        }
        Ok(out)
    }

    pub fn row_error(&self, line: u64, reason: impl Into<String>) -> DatastoreError {
        DatastoreError::Row {
            file: self.file.clone(),
            line,
            reason: reason.into(),
        }
    }
}

/// Serialises rows with the dialect the loaders accept.
pub(crate) fn write_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

pub(crate) fn split_list(cell: &str) -> Vec<String> {
    cell.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}
