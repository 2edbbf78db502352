use std::collections::BTreeSet;

use serde::Deserialize;

use super::{Datasets, DatastoreError};

/// One `[[protect]]` block of a node config.
#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ProtectRule {
    pub dataset: String,
    pub columns: Vec<String>,
    /// Columns matched case-insensitively (human names).
    #[serde(default)]
    pub case_insensitive: Vec<String>,
    /// Destination nodes for which these columns may be sent.
    #[serde(default)]
    pub allow_to: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatchMode {
    Exact,
    CaseInsensitive,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProtectedValue {
    pub value: String,
    /// `dataset.column`
    pub column: String,
    pub mode: MatchMode,
    pub allow_to: BTreeSet<String>,
}

impl ProtectedValue {
    pub fn allowed_on(&self, to: &str) -> bool {
        self.allow_to.contains(to)
    }

    /// Whether this value occurs in `body` under its match mode.
    pub fn occurs_in(&self, body: &str) -> bool {
        match self.mode {
            MatchMode::Exact => body.contains(&self.value),
            MatchMode::CaseInsensitive => body.to_lowercase().contains(&self.value.to_lowercase()),
        }
    }
}

/// Values that must not appear in messages leaving the node, except on
/// explicitly allowed edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProtectedValueIndex {
    entries: BTreeSet<ProtectedValue>,
}

impl ProtectedValueIndex {
    pub fn iter(&self) -> impl Iterator<Item = &ProtectedValue> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, value: &str) -> bool {
        self.entries.iter().any(|e| e.value == value)
    }

    pub fn insert(&mut self, value: ProtectedValue) {
        if !value.value.is_empty() {
            self.entries.insert(value);
        }
    }
}

/// Builds the index from a node's protection rules. Empty cells are skipped
/// since the empty string occurs in every body.
pub fn protected_values(rules: &[ProtectRule], data: &Datasets) -> Result<ProtectedValueIndex, DatastoreError> {
    let mut index = ProtectedValueIndex::default();
    for rule in rules {
        if let Some(c) = rule.case_insensitive.iter().find(|c| !rule.columns.contains(c)) {
            return Err(DatastoreError::Config(format!(
                "case_insensitive column `{c}` is not listed in columns of `{}`",
                rule.dataset
            )));
        }
        for column in &rule.columns {
            let cells = data
                .column(&rule.dataset, column)
                .ok_or_else(|| DatastoreError::Config(format!("unknown column `{}.{column}`", rule.dataset)))?;
            let mode = if rule.case_insensitive.contains(column) {
                MatchMode::CaseInsensitive
            } else {
                MatchMode::Exact
            };
            for cell in cells {
                index.insert(ProtectedValue {
                    value: cell,
                    column: format!("{}.{column}", rule.dataset),
                    mode,
                    allow_to: rule.allow_to.iter().cloned().collect(),
                });
            }
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::test_support::fixtures;
    use crate::datastore::{
        ClinicStore, ClinicalObservation, DatasetPaths, PatientRecord, SymptomClass, load_clinic_store,
    };
    use crate::pseudonym::normalize_id;
    use proptest::prelude::*;

    fn rule(dataset: &str, cols: &[&str]) -> ProtectRule {
        ProtectRule {
            dataset: dataset.into(),
            columns: cols.iter().map(|c| c.to_string()).collect(),
            case_insensitive: vec![],
            allow_to: vec![],
        }
    }

    fn clinic_defaults() -> Vec<ProtectRule> {
        let mut patients = rule("patients", &["patient_id", "full_name", "dob", "notes"]);
        patients.case_insensitive = vec!["full_name".into()];
        vec![patients, rule("observations", &["patient_id"])]
    }

    fn fixture_data() -> Datasets {
        let f = fixtures();
        Datasets::load(&DatasetPaths {
            observations: Some(f.join("clinic/clinical_observations.csv")),
            patients: Some(f.join("clinic/patients.csv")),
            enrollment: Some(f.join("insurer/enrollment_template.csv")),
            coverage_rules: Some(f.join("insurer/coverage_rules.csv")),
            guidance_dir: None,
        })
        .unwrap()
    }

    #[test]
    fn clinic_defaults_cover_identity() {
        let idx = protected_values(&clinic_defaults(), &fixture_data()).unwrap();
        assert!(idx.contains("Marina Kovacs"));
        assert!(idx.contains("1968-08-12"));
        assert!(idx.contains("CLN-0001"));
        assert!(idx.contains("Right knee pain, gradual onset"));
        // patient_id appears in two tables; both sources are kept.
        assert_eq!(idx.iter().filter(|v| v.value == "CLN-0001").count(), 2);
        let name = idx.iter().find(|v| v.value == "Marina Kovacs").unwrap();
        assert_eq!(name.mode, MatchMode::CaseInsensitive);
        assert!(name.occurs_in("patient MARINA KOVACS"));
    }

    #[test]
    fn insurer_defaults() {
        let mut tokens = rule("enrollment", &["subject_token", "plan_id"]);
        tokens.allow_to = vec!["clinic".into()];
        let idx = protected_values(&[rule("enrollment", &["insurance_number"]), tokens], &fixture_data()).unwrap();
        assert!(idx.contains("INS-441122"));
        assert!(idx.contains("08528e90b4b32ee32f2a92a2cb33e1c1e2f382e98ab9e78e65d6d361456f0a97"));
        let tok = idx.iter().find(|v| v.column == "enrollment.subject_token").unwrap();
        assert!(tok.allowed_on("clinic"));
        assert!(!tok.allowed_on("specialist"));
    }

    #[test]
    fn unknown_column_is_config_error() {
        let err = protected_values(&[rule("patients", &["ssn"])], &fixture_data()).unwrap_err();
        assert!(matches!(err, DatastoreError::Config(m) if m.contains("patients.ssn")));
        assert!(protected_values(&[rule("guidance", &["x"])], &fixture_data()).is_err());
    }

    #[test]
    fn empty_store_gives_empty_index() {
        let data = Datasets {
            clinic: Some(ClinicStore::default()),
            ..Default::default()
        };
        assert!(protected_values(&clinic_defaults(), &data).unwrap().is_empty());
    }

    fn observation(id: &str) -> ClinicalObservation {
        ClinicalObservation {
            patient_id: normalize_id(id).unwrap(),
            symptom_class: SymptomClass::Mild,
            duration_weeks: 1,
            functional_limitation: "x".into(),
            prior_conservative_tx: vec![],
        }
    }

    proptest! {
        #[test]
        fn adding_a_row_never_removes_entries(
            name in "[A-Z][a-z]{2,8} [A-Z][a-z]{2,8}",
            dob in "19[5-9][0-9]-0[1-9]-1[0-9]",
            notes in "[a-zA-Z ,]{0,20}",
        ) {
            let f = fixtures().join("clinic");
            let base = load_clinic_store(&f.join("clinical_observations.csv"), &f.join("patients.csv")).unwrap();
            let before = protected_values(&clinic_defaults(), &Datasets { clinic: Some(base.clone()), ..Default::default() }).unwrap();

            let mut obs = base.observations().to_vec();
            let mut pats = base.patients().to_vec();
            obs.push(observation("CLN-7777"));
            pats.push(PatientRecord { patient_id: normalize_id("CLN-7777").unwrap(), full_name: name, dob, notes });
            let grown = ClinicStore::from_rows(obs, pats).unwrap();
            let after = protected_values(&clinic_defaults(), &Datasets { clinic: Some(grown), ..Default::default() }).unwrap();

            for v in before.iter() {
                prop_assert!(after.iter().any(|w| w == v));
            }
            prop_assert!(after.len() >= before.len());
        }
    }
}
