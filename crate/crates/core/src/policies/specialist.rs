use super::templates::{Appropriateness, Recommendation, SpecialistConsult, parse_consult, render_recommendation};
use super::{CONSERVATIVE_MANAGEMENT, HYALURONIC_INJECTION, PHYSIOTHERAPY_COURSE, StepFamily, weeks_of};
use crate::datastore::{GuidanceDoc, SymptomClass};
use crate::runtime::{Policy, PolicyError, PolicyTurn, ToolCall, ToolName, ToolOutput, TurnContext};

/// Answers token-free consults from local guidance documents.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpecialistPolicy;

impl Policy for SpecialistPolicy {
    fn step(&self, ctx: &TurnContext<'_>) -> Result<PolicyTurn, PolicyError> {
        let consult = parse_consult(ctx.request)?;
        match ctx.last(ToolName::GuidanceSearch) {
            None => Ok(PolicyTurn::call(
                "Checking local guidance.",
                vec![ToolCall::new(ToolName::GuidanceSearch, [])],
            )),
            Some(ToolOutput::Guidance(docs)) => {
                Ok(PolicyTurn::reply(render_recommendation(&recommend(&consult, docs)?)))
            }
            Some(_) => Err(PolicyError::Unexpected("guidance_search".into())),
        }
    }
}

/// Ladder steps 1 to 3 and whether the consult documents each.
fn ladder_evidence(c: &SpecialistConsult) -> [bool; 3] {
    [
        !c.prior_tx.is_empty(),
        weeks_of(&c.prior_tx, StepFamily::Analgesia) >= 2,
        weeks_of(&c.prior_tx, StepFamily::Physiotherapy) >= 6,
    ]
}

fn red_flag_hit<'a>(c: &SpecialistConsult, docs: &'a [GuidanceDoc]) -> Option<(&'a GuidanceDoc, &'a str)> {
    let limitation = c.functional_limitation.to_lowercase();
    docs.iter().filter(|d| d.is_red_flag_list()).find_map(|d| {
        d.red_flags.iter().find_map(|flag| {
            let lower = flag.to_lowercase();
            let key = lower.strip_prefix("suspected ").unwrap_or(&lower);
            limitation.contains(key).then_some((d, flag.as_str()))
        })
    })
}

pub fn recommend(c: &SpecialistConsult, docs: &[GuidanceDoc]) -> Result<Recommendation, PolicyError> {
    if let Some((doc, flag)) = red_flag_hit(c, docs) {
        return Ok(Recommendation {
            verdict: Appropriateness::NotCurrentlyAppropriate,
            reasoning: format!(
                "The reported limitation matches the red flag \"{flag}\", which needs urgent assessment before any planned treatment."
            ),
            next_steps: Some("Arrange urgent clinical review.".into()),
            source_doc: doc.doc_id.clone(),
        });
    }
    let doc = docs
        .iter()
        .find(|d| !d.is_red_flag_list())
        .ok_or_else(|| PolicyError::Unexpected("no guidance document available".into()))?;
    let class = c.symptom_class;

    let (verdict, reasoning, next_steps) = match c.proposed_treatment.as_str() {
        HYALURONIC_INJECTION => {
            let evidence = ladder_evidence(c);
            let missing: Vec<&str> = doc
                .ladder
                .iter()
                .zip(evidence)
                .filter(|(_, ok)| !ok)
                .map(|(step, _)| step.as_str())
                .collect();
            if missing.is_empty() && doc.ladder.len() >= 3 {
                (
                    Appropriateness::AppropriateNow,
                    format!(
                        "Ladder steps 1 to 3 are documented and {class} symptoms persist after {} weeks, so intra-articular hyaluronic acid can be considered.",
                        c.duration_weeks
                    ),
                    None,
                )
            } else {
                (
                    Appropriateness::AppropriateAfterSteps,
                    "Intra-articular hyaluronic acid is considered only after ladder steps 1 to 3, and not all of them are documented.".to_owned(),
                    Some(format!("Complete first: {}.", missing.join("; "))),
                )
            }
        }
        t @ (CONSERVATIVE_MANAGEMENT | PHYSIOTHERAPY_COURSE) => {
            let what = if t == CONSERVATIVE_MANAGEMENT {
                "Standard conservative management"
            } else {
                "A structured physiotherapy course"
            };
            if class == SymptomClass::Severe {
                (
                    Appropriateness::AppropriateAfterSteps,
                    "Severe symptoms with substantial functional loss call for an escalation review beyond conservative care alone.".to_owned(),
                    Some("Complete the remaining ladder steps and reassess for intra-articular options.".into()),
                )
            } else {
                let next = if ladder_evidence(c)[2] {
                    "Maintain the home exercise programme and review function."
                } else {
                    "Continue structured physiotherapy if not already completed."
                };
                (
                    Appropriateness::AppropriateNow,
                    format!("{what} is consistent with {class} symptoms and early functional limitation."),
                    Some(next.to_owned()),
                )
            }
        }
        _ => (
            Appropriateness::NotCurrentlyAppropriate,
            "The local guidance does not address the proposed treatment.".to_owned(),
            Some("Refer for specialist assessment.".into()),
        ),
    };
    Ok(Recommendation {
        verdict,
        reasoning,
        next_steps,
        source_doc: doc.doc_id.clone(),
    })
}
