//! Labelled-line message templates carried inside relay bodies.
//!
//! Codes such as `NSAID_2_weeks` or `conservative_management` are written
//! with spaces in place of underscores and read back the same way, so a code
//! must not contain spaces, doubled underscores, or leading/trailing
//! underscores for a render/parse round trip to be exact.

use std::fmt;

use crate::datastore::SymptomClass;
use crate::pseudonym::CaseToken;
use crate::runtime::PolicyError;

pub const INQUIRY_HEADER: &str = "Coverage inquiry for patient_token=";
pub const CONSULT_HEADER: &str = "Specialist consult request";
const INQUIRY_CLOSING: &str = "Please advise coverage and any prerequisites.";
const CONSULT_CLOSING: &str = "Please advise clinical appropriateness.";
const PRESENTATION: &str = "Presentation: ";
const LIMITATION: &str = "Functional limitation: ";
const PRIOR: &str = "Prior conservative management: ";
const PROPOSED: &str = "Proposed treatment: ";
const NO_PRIOR: &str = "none";

/// Clinic → insurer. There is no field for a patient id, name, or date of
/// birth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageInquiry {
    pub patient_token: CaseToken,
    pub symptom_class: SymptomClass,
    pub duration_weeks: u32,
    pub functional_limitation: String,
    pub prior_tx: Vec<String>,
    pub proposed_treatment: String,
}

/// Insurer → specialist. Has no token field at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialistConsult {
    pub symptom_class: SymptomClass,
    pub duration_weeks: u32,
    pub functional_limitation: String,
    pub prior_tx: Vec<String>,
    pub proposed_treatment: String,
}

impl From<&CoverageInquiry> for SpecialistConsult {
    fn from(inq: &CoverageInquiry) -> Self {
        Self {
            symptom_class: inq.symptom_class,
            duration_weeks: inq.duration_weeks,
            functional_limitation: inq.functional_limitation.clone(),
            prior_tx: inq.prior_tx.clone(),
            proposed_treatment: inq.proposed_treatment.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Appropriateness {
    AppropriateNow,
    AppropriateAfterSteps,
    NotCurrentlyAppropriate,
}

impl Appropriateness {
    pub const ALL: [Appropriateness; 3] = [
        Self::AppropriateNow,
        Self::AppropriateAfterSteps,
        Self::NotCurrentlyAppropriate,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::AppropriateNow => "Appropriate now",
            Self::AppropriateAfterSteps => "Appropriate after steps",
            Self::NotCurrentlyAppropriate => "Not currently appropriate",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.label().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Appropriateness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recommendation {
    pub verdict: Appropriateness,
    pub reasoning: String,
    pub next_steps: Option<String>,
    pub source_doc: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coverage {
    Covered,
    CoveredWithPrerequisites,
    NotCovered,
}

impl Coverage {
    pub const ALL: [Coverage; 3] = [Self::Covered, Self::CoveredWithPrerequisites, Self::NotCovered];

    pub fn label(self) -> &'static str {
        match self {
            Self::Covered => "Covered",
            Self::CoveredWithPrerequisites => "Covered with prerequisites",
            Self::NotCovered => "Not covered",
        }
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The insurer's combined answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageVerdict {
    pub coverage: Coverage,
    pub prerequisites_outstanding: Vec<String>,
    pub appropriateness: Recommendation,
    pub summary: String,
    pub next_steps: String,
}

/// The four labelled fields as they appear on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictFields {
    pub coverage: Coverage,
    pub appropriateness: Appropriateness,
    pub summary: String,
    pub next_steps: String,
}

pub fn code_to_words(code: &str) -> String {
    code.replace('_', " ")
}

pub fn words_to_code(words: &str) -> String {
    words.trim().replace(' ', "_")
}

fn render_presentation(class: SymptomClass, weeks: u32) -> String {
    format!("{PRESENTATION}{class} knee pain for {weeks} weeks.")
}

fn render_prior(steps: &[String]) -> String {
    if steps.is_empty() {
        format!("{PRIOR}{NO_PRIOR}.")
    } else {
        let words: Vec<String> = steps.iter().map(|s| code_to_words(s)).collect();
        format!("{PRIOR}{}.", words.join("; "))
    }
}

fn render_case_lines(
    out: &mut Vec<String>,
    class: SymptomClass,
    weeks: u32,
    limitation: &str,
    prior: &[String],
    treatment: &str,
) {
    out.push(render_presentation(class, weeks));
    out.push(format!("{LIMITATION}{limitation}"));
    out.push(render_prior(prior));
    out.push(format!("{PROPOSED}{}.", code_to_words(treatment)));
}

pub fn render_inquiry(inq: &CoverageInquiry) -> String {
    let mut lines = vec![format!("{INQUIRY_HEADER}{}", inq.patient_token)];
    render_case_lines(
        &mut lines,
        inq.symptom_class,
        inq.duration_weeks,
        &inq.functional_limitation,
        &inq.prior_tx,
        &inq.proposed_treatment,
    );
    lines.push(INQUIRY_CLOSING.into());
    lines.join("\n")
}

pub fn render_consult(c: &SpecialistConsult) -> String {
    let mut lines = vec![CONSULT_HEADER.to_owned()];
    render_case_lines(
        &mut lines,
        c.symptom_class,
        c.duration_weeks,
        &c.functional_limitation,
        &c.prior_tx,
        &c.proposed_treatment,
    );
    lines.push(CONSULT_CLOSING.into());
    lines.join("\n")
}

/// Finds the first line starting with `label` and returns the remainder.
fn field<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix(label.trim_end()).map(str::trim))
}

fn parse_err(name: &str) -> PolicyError {
    PolicyError::Parse(name.to_owned())
}

struct CaseFields {
    symptom_class: SymptomClass,
    duration_weeks: u32,
    functional_limitation: String,
    prior_tx: Vec<String>,
    proposed_treatment: String,
}

fn parse_case(text: &str) -> Result<CaseFields, PolicyError> {
    let presentation = field(text, PRESENTATION).ok_or_else(|| parse_err("presentation"))?;
    let rest = presentation.strip_suffix('.').unwrap_or(presentation);
    let (class, rest) = rest
        .split_once(" knee pain for ")
        .ok_or_else(|| parse_err("presentation"))?;
    let symptom_class: SymptomClass = class.parse().map_err(|_| parse_err("symptom_class"))?;
    let weeks = rest
        .strip_suffix(" weeks")
        .or_else(|| rest.strip_suffix(" week"))
        .ok_or_else(|| parse_err("duration_weeks"))?;
    let duration_weeks = weeks.trim().parse().map_err(|_| parse_err("duration_weeks"))?;

    let functional_limitation = field(text, LIMITATION)
        .filter(|l| !l.is_empty())
        .ok_or_else(|| parse_err("functional_limitation"))?
        .to_owned();

    let prior = field(text, PRIOR).ok_or_else(|| parse_err("prior_tx"))?;
    let prior = prior.strip_suffix('.').unwrap_or(prior).trim();
    let prior_tx = if prior.eq_ignore_ascii_case(NO_PRIOR) || prior.is_empty() {
        Vec::new()
    } else {
        prior.split(';').map(words_to_code).filter(|s| !s.is_empty()).collect()
    };

    let proposed = field(text, PROPOSED).ok_or_else(|| parse_err("proposed_treatment"))?;
    let proposed_treatment = words_to_code(proposed.strip_suffix('.').unwrap_or(proposed));
    if proposed_treatment.is_empty() {
        return Err(parse_err("proposed_treatment"));
    }
    Ok(CaseFields {
        symptom_class,
        duration_weeks,
        functional_limitation,
        prior_tx,
        proposed_treatment,
    })
}

pub fn parse_inquiry(text: &str) -> Result<CoverageInquiry, PolicyError> {
    let token = field(text, INQUIRY_HEADER).ok_or_else(|| parse_err("patient_token"))?;
    let patient_token = CaseToken::parse(token).map_err(|_| parse_err("patient_token"))?;
    let c = parse_case(text)?;
    Ok(CoverageInquiry {
        patient_token,
        symptom_class: c.symptom_class,
        duration_weeks: c.duration_weeks,
        functional_limitation: c.functional_limitation,
        prior_tx: c.prior_tx,
        proposed_treatment: c.proposed_treatment,
    })
}

pub fn parse_consult(text: &str) -> Result<SpecialistConsult, PolicyError> {
    if !text.lines().any(|l| l.trim() == CONSULT_HEADER) {
        return Err(parse_err("consult header"));
    }
    let c = parse_case(text)?;
    Ok(SpecialistConsult {
        symptom_class: c.symptom_class,
        duration_weeks: c.duration_weeks,
        functional_limitation: c.functional_limitation,
        prior_tx: c.prior_tx,
        proposed_treatment: c.proposed_treatment,
    })
}

pub fn render_recommendation(r: &Recommendation) -> String {
    let mut lines = vec![
        format!("Recommendation: {}.", r.verdict.label()),
        format!("Reasoning: {}", r.reasoning),
    ];
    if let Some(n) = &r.next_steps {
        lines.push(format!("Next steps: {n}"));
    }
    lines.push(format!("(ref: {})", r.source_doc));
    lines.join("\n")
}

pub fn parse_recommendation(text: &str) -> Result<Recommendation, PolicyError> {
    let verdict = field(text, "Recommendation:").ok_or_else(|| parse_err("recommendation"))?;
    let verdict = Appropriateness::from_label(verdict.strip_suffix('.').unwrap_or(verdict))
        .ok_or_else(|| parse_err("recommendation"))?;
    let reasoning = field(text, "Reasoning:")
        .ok_or_else(|| parse_err("reasoning"))?
        .to_owned();
    let next_steps = field(text, "Next steps:").map(str::to_owned);
    let source_doc = field(text, "(ref:")
        .and_then(|r| r.strip_suffix(')'))
        .map(|r| r.trim().to_owned())
        .ok_or_else(|| parse_err("ref"))?;
    Ok(Recommendation {
        verdict,
        reasoning,
        next_steps,
        source_doc,
    })
}

pub fn render_verdict(v: &CoverageVerdict) -> String {
    [
        format!("Coverage: {}", v.coverage.label()),
        format!("Clinical Appropriateness: {}", v.appropriateness.verdict.label()),
        format!("Summary: {}", v.summary),
        format!("Next Steps: {}", v.next_steps),
    ]
    .join("\n")
}

pub fn parse_verdict(text: &str) -> Result<VerdictFields, PolicyError> {
    let coverage = field(text, "Coverage:").ok_or_else(|| parse_err("coverage"))?;
    let coverage = Coverage::ALL
        .into_iter()
        .find(|c| c.label().eq_ignore_ascii_case(coverage))
        .ok_or_else(|| parse_err("coverage"))?;
    let appropriateness = field(text, "Clinical Appropriateness:")
        .and_then(Appropriateness::from_label)
        .ok_or_else(|| parse_err("clinical appropriateness"))?;
    Ok(VerdictFields {
        coverage,
        appropriateness,
        summary: field(text, "Summary:").ok_or_else(|| parse_err("summary"))?.to_owned(),
        next_steps: field(text, "Next Steps:")
            .ok_or_else(|| parse_err("next steps"))?
            .to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locality::hex_token_regex;
    use proptest::prelude::*;

    const T1: &str = "e5aa44dc52f67331c3022c00653efaf0e5a307dc0a2df5bae51efc198d7d35bf";

    fn cln0001() -> CoverageInquiry {
        CoverageInquiry {
            patient_token: CaseToken::parse(T1).unwrap(),
            symptom_class: SymptomClass::Moderate,
            duration_weeks: 12,
            functional_limitation: "difficulty stairs and prolonged standing".into(),
            prior_tx: vec!["NSAID_2_weeks".into(), "home_exercises".into()],
            proposed_treatment: "conservative_management".into(),
        }
    }

    #[test]
    fn inquiry_text_for_cln0001() {
        let text = render_inquiry(&cln0001());
        assert_eq!(
            text,
            format!(
                "Coverage inquiry for patient_token={T1}\n\
                 Presentation: moderate knee pain for 12 weeks.\n\
                 Functional limitation: difficulty stairs and prolonged standing\n\
                 Prior conservative management: NSAID 2 weeks; home exercises.\n\
                 Proposed treatment: conservative management.\n\
                 Please advise coverage and any prerequisites."
            )
        );
        assert_eq!(parse_inquiry(&text).unwrap(), cln0001());
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(parse_inquiry("hello"), Err(PolicyError::Parse("patient_token".into())));
        let no_presentation = format!("{INQUIRY_HEADER}{T1}\n");
        assert_eq!(
            parse_inquiry(&no_presentation),
            Err(PolicyError::Parse("presentation".into()))
        );
        assert!(parse_consult("Presentation: mild knee pain for 1 weeks.").is_err());
    }

    #[test]
    fn consult_has_no_token() {
        let text = render_consult(&SpecialistConsult::from(&cln0001()));
        assert!(!text.contains(T1));
        assert!(!hex_token_regex().is_match(&text));
        assert!(text.starts_with(CONSULT_HEADER));
    }

    #[test]
    fn recommendation_matches_transcript_layout() {
        let r = Recommendation {
            verdict: Appropriateness::AppropriateNow,
            reasoning:
                "Standard conservative management is consistent with moderate symptoms and early functional limitation."
                    .into(),
            next_steps: Some("Continue structured physiotherapy if not already completed.".into()),
            source_doc: "osteoarthritis_knee_guidance.md".into(),
        };
        let text = render_recommendation(&r);
        assert!(text.starts_with("Recommendation: Appropriate now.\nReasoning: "));
        assert!(text.ends_with("(ref: osteoarthritis_knee_guidance.md)"));
        assert_eq!(parse_recommendation(&text).unwrap(), r);
        let bare = Recommendation { next_steps: None, ..r };
        assert_eq!(parse_recommendation(&render_recommendation(&bare)).unwrap(), bare);
    }

    #[test]
    fn verdict_layout() {
        let v = CoverageVerdict {
            coverage: Coverage::NotCovered,
            prerequisites_outstanding: vec![],
            appropriateness: Recommendation {
                verdict: Appropriateness::AppropriateNow,
                reasoning: "r".into(),
                next_steps: None,
                source_doc: "d".into(),
            },
            summary: "Conservative management is clinically appropriate but is not covered under the current plan."
                .into(),
            next_steps: "Consider reviewing plan options or alternative interventions.".into(),
        };
        let text = render_verdict(&v);
        assert!(text.starts_with("Coverage: Not covered\nClinical Appropriateness: Appropriate now\nSummary: "));
        let f = parse_verdict(&text).unwrap();
        assert_eq!(f.coverage, Coverage::NotCovered);
        assert_eq!(f.appropriateness, Appropriateness::AppropriateNow);
        assert_eq!(f.summary, v.summary);
        assert_eq!(f.next_steps, v.next_steps);
    }

    // Grammar for codes that round-trip through the word rendering.
    fn code() -> impl Strategy<Value = String> {
        "[A-Za-z0-9]{1,8}(_[A-Za-z0-9]{1,8}){0,3}".prop_filter("reserved", |s| !s.eq_ignore_ascii_case(NO_PRIOR))
    }

    fn class() -> impl Strategy<Value = SymptomClass> {
        prop::sample::select(SymptomClass::ALL.to_vec())
    }

    // Single-line, trimmed, non-empty free text.
    fn limitation() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9;,.>()' -]{0,40}".prop_map(|s| format!("x{}", s.trim_end()))
    }

    prop_compose! {
        fn inquiry()(
            token in "[0-9a-f]{64}",
            symptom_class in class(),
            duration_weeks in 0u32..520,
            functional_limitation in limitation(),
            prior_tx in prop::collection::vec(code(), 0..4),
            proposed_treatment in code(),
        ) -> CoverageInquiry {
            CoverageInquiry {
                patient_token: CaseToken::parse(&token).unwrap(),
                symptom_class, duration_weeks, functional_limitation, prior_tx, proposed_treatment,
            }
        }
    }

    proptest! {
        #[test]
        fn inquiry_round_trip(x in inquiry()) {
            prop_assert_eq!(parse_inquiry(&render_inquiry(&x)).unwrap(), x);
        }

        #[test]
        fn consult_round_trip_and_token_free(x in inquiry()) {
            let c = SpecialistConsult::from(&x);
            let text = render_consult(&c);
            prop_assert!(!hex_token_regex().is_match(&text));
            prop_assert_eq!(parse_consult(&text).unwrap(), c);
        }
    }
}
