use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{DatastoreError, Table, split_list, write_csv};
use crate::pseudonym::{CanonicalId, normalize_id};

const OBSERVATION_COLUMNS: [&str; 5] = [
    "patient_id",
    "symptom_class",
    "duration_weeks",
    "functional_limitation",
    "prior_conservative_tx",
];
const PATIENT_COLUMNS: [&str; 4] = ["patient_id", "full_name", "dob", "notes"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymptomClass {
    Mild,
    Moderate,
    Severe,
}

impl SymptomClass {
    pub const ALL: [SymptomClass; 3] = [Self::Mild, Self::Moderate, Self::Severe];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
        }
    }
}

impl fmt::Display for SymptomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SymptomClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(format!("unknown symptom class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalObservation {
    pub patient_id: CanonicalId,
    pub symptom_class: SymptomClass,
    pub duration_weeks: u32,
    pub functional_limitation: String,
    pub prior_conservative_tx: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: CanonicalId,
    pub full_name: String,
    pub dob: String,
    pub notes: String,
}

/// The clinic's two tables, indexed by canonical patient id.
#[derive(Debug, Clone, Default)]
pub struct ClinicStore {
    observations: Vec<ClinicalObservation>,
    patients: Vec<PatientRecord>,
    by_id: HashMap<CanonicalId, usize>,
}

impl ClinicStore {
    pub fn observations(&self) -> &[ClinicalObservation] {
        &self.observations
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn lookup_observation(&self, id: &CanonicalId) -> Option<&ClinicalObservation> {
        self.by_id.get(id).map(|&i| &self.observations[i])
    }

    pub fn observations_csv(&self) -> String {
        write_csv(
            &OBSERVATION_COLUMNS,
            self.observations.iter().map(|o| {
                vec![
                    o.patient_id.to_string(),
                    o.symptom_class.to_string(),
                    o.duration_weeks.to_string(),
                    o.functional_limitation.clone(),
                    o.prior_conservative_tx.join(";"),
                ]
            }),
        )
    }

    pub fn patients_csv(&self) -> String {
        write_csv(
            &PATIENT_COLUMNS,
            self.patients.iter().map(|p| {
                vec![
                    p.patient_id.to_string(),
                    p.full_name.clone(),
                    p.dob.clone(),
                    p.notes.clone(),
                ]
            }),
        )
    }

    pub(crate) fn observation_column(&self, column: &str) -> Option<Vec<String>> {
        let pick: fn(&ClinicalObservation) -> String = match column {
            "patient_id" => |o| o.patient_id.to_string(),
            "symptom_class" => |o| o.symptom_class.to_string(),
            "duration_weeks" => |o| o.duration_weeks.to_string(),
            "functional_limitation" => |o| o.functional_limitation.clone(),
            "prior_conservative_tx" => |o| o.prior_conservative_tx.join(";"),
            _ => return None,
        };
        Some(self.observations.iter().map(pick).collect())
    }

    pub(crate) fn patient_column(&self, column: &str) -> Option<Vec<String>> {
        let pick: fn(&PatientRecord) -> String = match column {
            "patient_id" => |p| p.patient_id.to_string(),
            "full_name" => |p| p.full_name.clone(),
            "dob" => |p| p.dob.clone(),
            "notes" => |p| p.notes.clone(),
            _ => return None,
        };
        Some(self.patients.iter().map(pick).collect())
    }

    /// Builds a store from already-parsed rows, enforcing key uniqueness and
    /// that every observation has a patient record.
    pub fn from_rows(
        observations: Vec<ClinicalObservation>,
        patients: Vec<PatientRecord>,
    ) -> Result<Self, DatastoreError> {
        let mut by_id = HashMap::new();
        for (i, o) in observations.iter().enumerate() {
            if by_id.insert(o.patient_id.clone(), i).is_some() {
                return Err(DatastoreError::Duplicate {
                    file: "observations".into(),
                    line: i as u64 + 2,
                    key: o.patient_id.to_string(),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, p) in patients.iter().enumerate() {
            if seen.insert(p.patient_id.clone(), i).is_some() {
                return Err(DatastoreError::Duplicate {
                    file: "patients".into(),
                    line: i as u64 + 2,
                    key: p.patient_id.to_string(),
                });
            }
        }
        if let Some(orphan) = observations.iter().find(|o| !seen.contains_key(&o.patient_id)) {
            return Err(DatastoreError::Integrity(orphan.patient_id.to_string()));
        }
        Ok(Self {
            observations,
            patients,
            by_id,
        })
    }
}

pub fn load_clinic_store(observations_path: &Path, patients_path: &Path) -> Result<ClinicStore, DatastoreError> {
    let mut table = Table::open(observations_path, &OBSERVATION_COLUMNS)?;
    let mut observations = Vec::new();
    for row in table.rows()? {
        let patient_id =
            normalize_id(row.get(&table, "patient_id")).map_err(|_| table.row_error(row.line, "empty patient_id"))?;
        let symptom_class = row
            .get(&table, "symptom_class")
            .parse()
            .map_err(|e: String| table.row_error(row.line, e))?;
        let duration_weeks = row
            .get(&table, "duration_weeks")
            .trim()
            .parse()
            .map_err(|_| table.row_error(row.line, "duration_weeks is not a non-negative integer"))?;
        observations.push(ClinicalObservation {
            patient_id,
            symptom_class,
            duration_weeks,
            functional_limitation: row.get(&table, "functional_limitation").to_owned(),
            prior_conservative_tx: split_list(row.get(&table, "prior_conservative_tx")),
        });
    }

    let patients = load_patients(patients_path)?;
    ClinicStore::from_rows(observations, patients)
}

/// Reads the patients file on its own, in file order.
pub fn load_patients(path: &Path) -> Result<Vec<PatientRecord>, DatastoreError> {
    let mut table = Table::open(path, &PATIENT_COLUMNS)?;
    let mut patients = Vec::new();
    for row in table.rows()? {
        let patient_id =
            normalize_id(row.get(&table, "patient_id")).map_err(|_| table.row_error(row.line, "empty patient_id"))?;
        let dob = row.get(&table, "dob").trim();
        if !is_iso_date(dob) {
            return Err(table.row_error(row.line, "dob is not an ISO-8601 date"));
        }
        patients.push(PatientRecord {
            patient_id,
            full_name: row.get(&table, "full_name").to_owned(),
            dob: dob.to_owned(),
            notes: row.get(&table, "notes").to_owned(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (i, p) in patients.iter().enumerate() {
        if !seen.insert(p.patient_id.clone()) {
            return Err(DatastoreError::Duplicate {
                file: path.display().to_string(),
                line: i as u64 + 2,
                key: p.patient_id.to_string(),
            });
        }
    }
    Ok(patients)
}

/// `YYYY-MM-DD` with a plausible month and day.
fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: std::ops::Range<usize>| -> Option<u32> {
        b[r].iter().try_fold(0u32, |acc, &c| {
            c.is_ascii_digit().then(|| acc * 10 + u32::from(c - b'0'))
        })
    };
    matches!(
        (digits(0..4), digits(5..7), digits(8..10)),
        (Some(_), Some(1..=12), Some(1..=31))
    )
}
