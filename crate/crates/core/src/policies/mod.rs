//! Built-in deterministic policies and the decision tables they share.

mod clinic;
mod insurer;
mod specialist;
pub mod templates;

use std::sync::{Arc, LazyLock};

use regex::Regex;

pub use clinic::{ClinicPolicy, DEFAULT_ID_PATTERN};
pub use insurer::{InsurerPolicy, compose_verdict};
pub use specialist::{SpecialistPolicy, recommend};
pub use templates::{
    Appropriateness, Coverage, CoverageInquiry, CoverageVerdict, Recommendation, SpecialistConsult, VerdictFields,
};

use crate::datastore::{ClinicalObservation, CoverageRule, SymptomClass};
use crate::runtime::Policy;

pub const HYALURONIC_INJECTION: &str = "knee_hyaluronic_injection";
pub const CONSERVATIVE_MANAGEMENT: &str = "conservative_management";
pub const PHYSIOTHERAPY_COURSE: &str = "physiotherapy_course";

/// Looks up a built-in policy by the name used in node configs.
pub fn builtin(name: &str) -> Option<Arc<dyn Policy>> {
    match name {
        "clinic" => Some(Arc::new(ClinicPolicy)),
        "insurer" => Some(Arc::new(InsurerPolicy)),
        "specialist" => Some(Arc::new(SpecialistPolicy)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepFamily {
    Analgesia,
    Physiotherapy,
    Other,
}

/// Splits a step code like `NSAID_2_weeks` into its family and duration.
pub fn parse_step(code: &str) -> Option<(StepFamily, u32)> {
    static RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^([a-z]+)(?:_[a-z]+)*_(\d+)_weeks?$").unwrap());
    let caps = RE.captures(code)?;
    let head = caps[1].to_ascii_lowercase();
    let weeks = caps[2].parse().ok()?;
    let family = if head.starts_with("physio") {
        StepFamily::Physiotherapy
    } else if ["nsaid", "acetaminophen", "paracetamol", "analgesi"]
        .iter()
        .any(|p| head.starts_with(p))
    {
        StepFamily::Analgesia
    } else {
        StepFamily::Other
    };
    Some((family, weeks))
}

/// Longest documented duration for a step family.
pub fn weeks_of(steps: &[String], family: StepFamily) -> u32 {
    steps
        .iter()
        .filter_map(|s| parse_step(s))
        .filter(|(f, _)| *f == family)
        .map(|(_, w)| w)
        .max()
        .unwrap_or(0)
}

/// Default proposed treatment when the request does not name one.
pub fn infer_treatment(obs: &ClinicalObservation) -> &'static str {
    let analgesia = weeks_of(&obs.prior_conservative_tx, StepFamily::Analgesia);
    let physio = weeks_of(&obs.prior_conservative_tx, StepFamily::Physiotherapy);
    let escalate = match obs.symptom_class {
        SymptomClass::Severe => analgesia >= 2 && physio >= 4,
        SymptomClass::Moderate => physio >= 6,
        SymptomClass::Mild => false,
    };
    if escalate {
        HYALURONIC_INJECTION
    } else {
        CONSERVATIVE_MANAGEMENT
    }
}

/// Checks a rule's prerequisites against the documented steps and returns
/// the ones still outstanding. Unknown prerequisites are never satisfied.
pub fn prerequisites_satisfied(rule: &CoverageRule, inquiry: &CoverageInquiry) -> (bool, Vec<String>) {
    let outstanding: Vec<String> = rule
        .prerequisites
        .iter()
        .filter(|p| !prerequisite_met(p, &inquiry.prior_tx))
        .cloned()
        .collect();
    (outstanding.is_empty(), outstanding)
}

fn prerequisite_met(prereq: &str, steps: &[String]) -> bool {
    match prereq {
        "physiotherapy_6_weeks" => weeks_of(steps, StepFamily::Physiotherapy) >= 6,
        "failed_simple_analgesia" => weeks_of(steps, StepFamily::Analgesia) >= 2,
        _ => false,
    }
}

/// `conservative_management` → `Conservative management`.
pub(crate) fn treatment_title(code: &str) -> String {
    let words = templates::code_to_words(code);
    let mut chars = words.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => words,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::load_clinic_store;
    use crate::datastore::test_support::fixtures;
    use crate::pseudonym::normalize_id;

    #[test]
    fn step_codes() {
        assert_eq!(parse_step("NSAID_2_weeks"), Some((StepFamily::Analgesia, 2)));
        assert_eq!(parse_step("acetaminophen_2_weeks"), Some((StepFamily::Analgesia, 2)));
        assert_eq!(parse_step("physio_6_weeks"), Some((StepFamily::Physiotherapy, 6)));
        assert_eq!(parse_step("home_exercises"), None);
    }

    #[test]
    fn inferred_treatments_for_fixture_patients() {
        let dir = fixtures().join("clinic");
        let clinic = load_clinic_store(&dir.join("clinical_observations.csv"), &dir.join("patients.csv")).unwrap();
        let expect = [
            ("CLN-0001", CONSERVATIVE_MANAGEMENT),
            ("CLN-0002", CONSERVATIVE_MANAGEMENT),
            ("CLN-0003", HYALURONIC_INJECTION),
            ("CLN-0004", CONSERVATIVE_MANAGEMENT),
            ("CLN-0005", HYALURONIC_INJECTION),
        ];
        for (id, t) in expect {
            let obs = clinic.lookup_observation(&normalize_id(id).unwrap()).unwrap();
            assert_eq!(infer_treatment(obs), t, "{id}");
        }
    }

    #[test]
    fn titles() {
        assert_eq!(treatment_title("conservative_management"), "Conservative management");
        assert_eq!(treatment_title(""), "");
    }

    #[test]
    fn unknown_policy() {
        assert!(builtin("clinic").is_some());
        assert!(builtin("oracle").is_none());
    }
}
