use super::templates::{
    Appropriateness, Coverage, CoverageInquiry, CoverageVerdict, Recommendation, SpecialistConsult, parse_inquiry,
    parse_recommendation, render_consult, render_verdict,
};
use super::{prerequisites_satisfied, treatment_title};
use crate::datastore::{CoverageRule, EnrollmentRow, EnrollmentStatus};
use crate::runtime::{Policy, PolicyError, PolicyTurn, ToolCall, ToolName, ToolOutput, TurnContext};

/// Matches the inquiry token against enrolment, applies plan rules, and asks
/// the specialist for a token-free appropriateness opinion.
#[derive(Debug, Clone, Copy, Default)]
pub struct InsurerPolicy;

impl Policy for InsurerPolicy {
    fn step(&self, ctx: &TurnContext<'_>) -> Result<PolicyTurn, PolicyError> {
        let inquiry = parse_inquiry(ctx.request)?;

        let enrollment = match ctx.last(ToolName::EnrollmentMatch) {
            None => {
                return Ok(PolicyTurn::call(
                    "Matching the patient token against enrolment.",
                    vec![ToolCall::new(
                        ToolName::EnrollmentMatch,
                        [("token", inquiry.patient_token.as_str())],
                    )],
                ));
            }
            Some(ToolOutput::Enrollment(e)) => e.as_ref().filter(|e| e.status == EnrollmentStatus::Active),
            Some(_) => return Err(PolicyError::Unexpected("enrollment_match".into())),
        };

        let Some(relayed) = ctx.last(ToolName::RelayCall) else {
            let consult = render_consult(&SpecialistConsult::from(&inquiry));
            let mut calls = Vec::new();
            if let Some(e) = enrollment {
                calls.push(ToolCall::new(
                    ToolName::CoverageLookup,
                    [
                        ("plan_id", e.plan_id.as_str()),
                        ("treatment_code", inquiry.proposed_treatment.as_str()),
                    ],
                ));
            }
            calls.push(ToolCall::new(
                ToolName::RelayCall,
                [("target", ctx.param("relay_target")?), ("body", consult.as_str())],
            ));
            return Ok(PolicyTurn::call(
                "Applying plan rules and consulting the specialist.",
                calls,
            ));
        };
        let ToolOutput::Relay(reply) = relayed else {
            return Err(PolicyError::Unexpected("relay_call".into()));
        };
        let recommendation = parse_recommendation(reply)?;
        let rule = match ctx.last(ToolName::CoverageLookup) {
            Some(ToolOutput::Coverage(r)) => r.as_ref(),
            Some(_) => return Err(PolicyError::Unexpected("coverage_lookup".into())),
            None => None,
        };
        let verdict = compose_verdict(&inquiry, enrollment, rule, recommendation);
        Ok(PolicyTurn::reply(render_verdict(&verdict)))
    }
}

fn appropriateness_phrase(a: Appropriateness) -> &'static str {
    match a {
        Appropriateness::AppropriateNow => "clinically appropriate",
        Appropriateness::AppropriateAfterSteps => "clinically appropriate after further conservative steps",
        Appropriateness::NotCurrentlyAppropriate => "not currently clinically appropriate",
    }
}

/// Combines enrolment, the plan rule, and the specialist's opinion.
/// `enrollment` must already be filtered to active rows.
pub fn compose_verdict(
    inquiry: &CoverageInquiry,
    enrollment: Option<&EnrollmentRow>,
    rule: Option<&CoverageRule>,
    recommendation: Recommendation,
) -> CoverageVerdict {
    let treatment = treatment_title(&inquiry.proposed_treatment);
    let phrase = appropriateness_phrase(recommendation.verdict);
    let joiner = if recommendation.verdict == Appropriateness::NotCurrentlyAppropriate {
        "and"
    } else {
        "but"
    };

    let (coverage, outstanding, summary, next_steps) = match (enrollment, rule) {
        (None, _) => (
            Coverage::NotCovered,
            Vec::new(),
            format!("{treatment} is {phrase} {joiner} no active enrolment matches this inquiry."),
            "Confirm enrolment details with the member before resubmitting.".to_owned(),
        ),
        (Some(_), Some(rule)) if rule.covered => {
            let (met, outstanding) = prerequisites_satisfied(rule, inquiry);
            if met {
                let next = recommendation
                    .next_steps
                    .clone()
                    .unwrap_or_else(|| "Proceed with the proposed treatment.".to_owned());
                (
                    Coverage::Covered,
                    outstanding,
                    format!("{treatment} is covered under the current plan and is {phrase}."),
                    next,
                )
            } else {
                let next = format!("Complete outstanding prerequisites: {}.", outstanding.join(", "));
                (
                    Coverage::CoveredWithPrerequisites,
                    outstanding,
                    format!("{treatment} is covered once outstanding prerequisites are met and is {phrase}."),
                    next,
                )
            }
        }
        (Some(_), _) => (
            Coverage::NotCovered,
            Vec::new(),
            format!("{treatment} is {phrase} {joiner} is not covered under the current plan."),
            "Consider reviewing plan options or alternative interventions.".to_owned(),
        ),
    };
    CoverageVerdict {
        coverage,
        prerequisites_outstanding: outstanding,
        appropriateness: recommendation,
        summary,
        next_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::SymptomClass;
    use crate::pseudonym::CaseToken;

    fn inquiry(treatment: &str, prior: &[&str]) -> CoverageInquiry {
        CoverageInquiry {
            patient_token: CaseToken::parse(&"a".repeat(64)).unwrap(),
            symptom_class: SymptomClass::Moderate,
            duration_weeks: 12,
            functional_limitation: "stairs".into(),
            prior_tx: prior.iter().map(|s| s.to_string()).collect(),
            proposed_treatment: treatment.into(),
        }
    }

    fn rec(v: Appropriateness) -> Recommendation {
        Recommendation {
            verdict: v,
            reasoning: "r".into(),
            next_steps: None,
            source_doc: "d".into(),
        }
    }

    fn enrolled(plan: &str) -> EnrollmentRow {
        EnrollmentRow {
            subject_token: CaseToken::parse(&"a".repeat(64)).unwrap(),
            insurance_number: "INS-1".into(),
            plan_id: plan.into(),
            status: EnrollmentStatus::Active,
        }
    }

    fn rule(covered: bool, prereqs: &[&str]) -> CoverageRule {
        CoverageRule {
            plan_id: "PLAN-A".into(),
            treatment_code: "knee_hyaluronic_injection".into(),
            covered,
            prerequisites: prereqs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn uncovered_summary_wording() {
        let e = enrolled("PLAN-A");
        let v = compose_verdict(
            &inquiry("conservative_management", &[]),
            Some(&e),
            None,
            rec(Appropriateness::AppropriateNow),
        );
        assert_eq!(v.coverage, Coverage::NotCovered);
        assert_eq!(
            v.summary,
            "Conservative management is clinically appropriate but is not covered under the current plan."
        );
        assert_eq!(
            v.next_steps,
            "Consider reviewing plan options or alternative interventions."
        );
    }

    #[test]
    fn prerequisites_drive_coverage() {
        let e = enrolled("PLAN-A");
        let inq = inquiry("knee_hyaluronic_injection", &["NSAID_2_weeks"]);
        let r = rule(true, &["physiotherapy_6_weeks", "failed_simple_analgesia"]);
        let v = compose_verdict(&inq, Some(&e), Some(&r), rec(Appropriateness::AppropriateNow));
        assert_eq!(v.coverage, Coverage::CoveredWithPrerequisites);
        assert_eq!(v.prerequisites_outstanding, vec!["physiotherapy_6_weeks".to_owned()]);

        let inq = inquiry("knee_hyaluronic_injection", &["NSAID_2_weeks", "physio_6_weeks"]);
        let v = compose_verdict(&inq, Some(&e), Some(&r), rec(Appropriateness::AppropriateNow));
        assert_eq!(v.coverage, Coverage::Covered);

        let v = compose_verdict(
            &inq,
            Some(&e),
            Some(&rule(false, &[])),
            rec(Appropriateness::AppropriateNow),
        );
        assert_eq!(v.coverage, Coverage::NotCovered);
    }

    #[test]
    fn no_enrolment_is_not_covered() {
        let inq = inquiry("knee_hyaluronic_injection", &[]);
        let v = compose_verdict(
            &inq,
            None,
            Some(&rule(true, &[])),
            rec(Appropriateness::NotCurrentlyAppropriate),
        );
        assert_eq!(v.coverage, Coverage::NotCovered);
    }
}
