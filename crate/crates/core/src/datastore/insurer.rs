use std::collections::HashMap;
use std::path::Path;

use super::{DatastoreError, Table, split_list, write_csv};
use crate::pseudonym::{CanonicalId, CaseToken, SecretKey, derive_token};

const ENROLLMENT_COLUMNS: [&str; 4] = ["subject_token", "insurance_number", "plan_id", "status"];
const RULE_COLUMNS: [&str; 4] = ["plan_id", "treatment_code", "covered", "prerequisites"];

/// Null marker used in the prerequisites column.
const NO_PREREQUISITES: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollmentStatus {
    Active,
    Inactive,
}

impl EnrollmentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Active => "active",
            Self::Inactive => "inactive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentRow {
    pub subject_token: CaseToken,
    pub insurance_number: String,
    pub plan_id: String,
    pub status: EnrollmentStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageRule {
    pub plan_id: String,
    pub treatment_code: String,
    pub covered: bool,
    pub prerequisites: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct InsurerStore {
    enrollment: Vec<EnrollmentRow>,
    rules: Vec<CoverageRule>,
    by_token: HashMap<CaseToken, usize>,
    by_rule: HashMap<(String, String), usize>,
}

impl InsurerStore {
    pub fn enrollment(&self) -> &[EnrollmentRow] {
        &self.enrollment
    }

    pub fn rules(&self) -> &[CoverageRule] {
        &self.rules
    }

    /// Exact, case-sensitive match on the token text.
    pub fn match_enrollment(&self, token: &str) -> Option<&EnrollmentRow> {
        let token = CaseToken::parse(token).ok()?;
        self.by_token.get(&token).map(|&i| &self.enrollment[i])
    }

    /// `None` means the plan has no rule for the treatment, i.e. not covered.
    pub fn coverage_rule(&self, plan_id: &str, treatment_code: &str) -> Option<&CoverageRule> {
        self.by_rule
            .get(&(plan_id.to_owned(), treatment_code.to_owned()))
            .map(|&i| &self.rules[i])
    }

    pub fn enrollment_csv(&self) -> String {
        write_csv(
            &ENROLLMENT_COLUMNS,
            self.enrollment.iter().map(|r| {
                vec![
                    r.subject_token.to_string(),
                    r.insurance_number.clone(),
                    r.plan_id.clone(),
                    r.status.as_str().to_owned(),
                ]
            }),
        )
    }

    pub fn rules_csv(&self) -> String {
        write_csv(
            &RULE_COLUMNS,
            self.rules.iter().map(|r| {
                vec![
                    r.plan_id.clone(),
                    r.treatment_code.clone(),
                    if r.covered { "yes" } else { "no" }.to_owned(),
                    render_prerequisites(&r.prerequisites),
                ]
            }),
        )
    }

    pub(crate) fn enrollment_column(&self, column: &str) -> Option<Vec<String>> {
        let pick: fn(&EnrollmentRow) -> String = match column {
            "subject_token" => |r| r.subject_token.to_string(),
            "insurance_number" => |r| r.insurance_number.clone(),
            "plan_id" => |r| r.plan_id.clone(),
            "status" => |r| r.status.as_str().to_owned(),
            _ => return None,
        };
        Some(self.enrollment.iter().map(pick).collect())
    }

    pub(crate) fn rule_column(&self, column: &str) -> Option<Vec<String>> {
        let pick: fn(&CoverageRule) -> String = match column {
            "plan_id" => |r| r.plan_id.clone(),
            "treatment_code" => |r| r.treatment_code.clone(),
            "covered" => |r| if r.covered { "yes" } else { "no" }.to_owned(),
            "prerequisites" => |r| render_prerequisites(&r.prerequisites),
            _ => return None,
        };
        Some(self.rules.iter().map(pick).collect())
    }

    pub fn from_rows(enrollment: Vec<EnrollmentRow>, rules: Vec<CoverageRule>) -> Result<Self, DatastoreError> {
        let mut by_token = HashMap::new();
        for (i, r) in enrollment.iter().enumerate() {
            if by_token.insert(r.subject_token.clone(), i).is_some() {
                return Err(DatastoreError::Duplicate {
                    file: "enrollment".into(),
                    line: i as u64 + 2,
                    key: r.subject_token.to_string(),
                });
            }
        }
        let mut by_rule = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            if by_rule
                .insert((r.plan_id.clone(), r.treatment_code.clone()), i)
                .is_some()
            {
                return Err(DatastoreError::Duplicate {
                    file: "coverage_rules".into(),
                    line: i as u64 + 2,
                    key: format!("{}/{}", r.plan_id, r.treatment_code),
                });
            }
        }
        Ok(Self {
            enrollment,
            rules,
            by_token,
            by_rule,
        })
    }
}

fn render_prerequisites(list: &[String]) -> String {
    if list.is_empty() {
        NO_PREREQUISITES.to_owned()
    } else {
        list.join(";")
    }
}

fn parse_status(table: &Table, row: &super::Row) -> Result<EnrollmentStatus, DatastoreError> {
    match row.get(table, "status").trim() {
        "active" => Ok(EnrollmentStatus::Active),
        "inactive" => Ok(EnrollmentStatus::Inactive),
        other => Err(table.row_error(row.line, format!("unknown status `{other}`"))),
    }
}

/// An enrolment row without its token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentTemplate {
    pub insurance_number: String,
    pub plan_id: String,
    pub status: EnrollmentStatus,
}

/// Reads `(insurance_number, plan_id, status)` triples in file order. Any
/// other columns, including a stale `subject_token`, are ignored.
pub fn load_enrollment_template(path: &Path) -> Result<Vec<EnrollmentTemplate>, DatastoreError> {
    let mut table = Table::open(path, &ENROLLMENT_COLUMNS[1..])?;
    let mut out = Vec::new();
    for row in table.rows()? {
        out.push(EnrollmentTemplate {
            insurance_number: row.get(&table, "insurance_number").trim().to_owned(),
            plan_id: row.get(&table, "plan_id").trim().to_owned(),
            status: parse_status(&table, &row)?,
        });
    }
    Ok(out)
}

/// Builds enrolment CSV text pairing the k-th patient with the k-th
/// template triple.
pub fn generate_enrollment(
    key: &SecretKey,
    patient_ids: &[CanonicalId],
    template: &[EnrollmentTemplate],
) -> Result<String, DatastoreError> {
    if patient_ids.len() != template.len() {
        return Err(DatastoreError::Integrity(format!(
            "{} patients but {} enrolment template rows",
            patient_ids.len(),
            template.len()
        )));
    }
    let rows = patient_ids
        .iter()
        .zip(template)
        .map(|(id, t)| EnrollmentRow {
            subject_token: derive_token(key, id),
            insurance_number: t.insurance_number.clone(),
            plan_id: t.plan_id.clone(),
            status: t.status,
        })
        .collect();
    Ok(InsurerStore::from_rows(rows, Vec::new())?.enrollment_csv())
}

pub fn load_insurer_store(enrollment_path: &Path, rules_path: &Path) -> Result<InsurerStore, DatastoreError> {
    let mut table = Table::open(enrollment_path, &ENROLLMENT_COLUMNS)?;
    let mut enrollment = Vec::new();
    for row in table.rows()? {
        let subject_token = CaseToken::parse(row.get(&table, "subject_token").trim())
            .map_err(|e| table.row_error(row.line, e.to_string()))?;
        let status = parse_status(&table, &row)?;
        enrollment.push(EnrollmentRow {
            subject_token,
            insurance_number: row.get(&table, "insurance_number").trim().to_owned(),
            plan_id: row.get(&table, "plan_id").trim().to_owned(),
            status,
        });
    }

    let mut table = Table::open(rules_path, &RULE_COLUMNS)?;
    let mut rules = Vec::new();
    for row in table.rows()? {
        let covered = match row.get(&table, "covered").trim() {
            "yes" => true,
            "no" => false,
            other => return Err(table.row_error(row.line, format!("covered must be yes/no, got `{other}`"))),
        };
        let prereq = row.get(&table, "prerequisites").trim();
        let prerequisites = if prereq == NO_PREREQUISITES {
            Vec::new()
        } else {
            split_list(prereq)
        };
        rules.push(CoverageRule {
            plan_id: row.get(&table, "plan_id").trim().to_owned(),
            treatment_code: row.get(&table, "treatment_code").trim().to_owned(),
            covered,
            prerequisites,
        });
    }
    InsurerStore::from_rows(enrollment, rules)
}
