use regex::Regex;

use super::infer_treatment;
use super::templates::{CoverageInquiry, render_inquiry};
use crate::pseudonym::normalize_id;
use crate::runtime::{Policy, PolicyError, PolicyTurn, ToolCall, ToolName, ToolOutput, TurnContext};

/// Raw identifier format searched for in free-text requests. Overridable
/// with the `id_pattern` operation parameter.
pub const DEFAULT_ID_PATTERN: &str = r"CLN-\d{4}";

/// Entry-point policy at the clinic. Turns a request naming a patient into a
/// pseudonymised coverage inquiry, relays it, and returns the verdict as-is.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClinicPolicy;

struct Ask {
    patient_id: String,
    treatment: Option<String>,
}

fn parse_request(request: &str, pattern: &str) -> Result<Ask, PolicyError> {
    let id_re =
        Regex::new(&format!(r"(?i)\b({pattern})\b")).map_err(|_| PolicyError::MissingParam("id_pattern".into()))?;
    let m = id_re
        .find(request)
        .ok_or_else(|| PolicyError::Parse("patient_id".into()))?;
    let treatment_re = Regex::new(r"(?i)^\s+for\s+([a-z][a-z0-9_]*)").expect("static regex");
    let treatment = treatment_re
        .captures(&request[m.end()..])
        .map(|c| c[1].to_ascii_lowercase());
    Ok(Ask {
        patient_id: m.as_str().to_owned(),
        treatment,
    })
}

impl Policy for ClinicPolicy {
    fn step(&self, ctx: &TurnContext<'_>) -> Result<PolicyTurn, PolicyError> {
        let pattern = ctx.params.get("id_pattern").map_or(DEFAULT_ID_PATTERN, String::as_str);
        let ask = parse_request(ctx.request, pattern)?;
        let id = normalize_id(&ask.patient_id).map_err(|_| PolicyError::Parse("patient_id".into()))?;

        let obs = ctx.last(ToolName::CsvLookup);
        let token = ctx.last(ToolName::HmacToken);
        let (obs, token) = match (obs, token) {
            (None, _) | (_, None) => {
                return Ok(PolicyTurn::call(
                    "Reading the case facts and deriving the patient token.",
                    vec![
                        ToolCall::new(ToolName::CsvLookup, [("patient_id", id.as_str())]),
                        ToolCall::new(
                            ToolName::HmacToken,
                            [("secret", ctx.param("secret")?), ("id", id.as_str())],
                        ),
                    ],
                ));
            }
            (Some(ToolOutput::Observation(o)), Some(ToolOutput::Token(t))) => (o, t),
            _ => return Err(PolicyError::Unexpected("csv_lookup/hmac_token".into())),
        };
        let obs = obs.as_ref().ok_or(PolicyError::PatientNotFound)?;

        match ctx.last(ToolName::RelayCall) {
            None => {
                let treatment = ask.treatment.unwrap_or_else(|| infer_treatment(obs).to_owned());
                let inquiry = CoverageInquiry {
                    patient_token: token.clone(),
                    symptom_class: obs.symptom_class,
                    duration_weeks: obs.duration_weeks,
                    functional_limitation: obs.functional_limitation.clone(),
                    prior_tx: obs.prior_conservative_tx.clone(),
                    proposed_treatment: treatment,
                };
                let body = render_inquiry(&inquiry);
                Ok(PolicyTurn::call(
                    "Sending a coverage inquiry to the insurer.",
                    vec![ToolCall::new(
                        ToolName::RelayCall,
                        [("target", ctx.param("relay_target")?), ("body", body.as_str())],
                    )],
                ))
            }
            Some(ToolOutput::Relay(verdict)) => Ok(PolicyTurn::reply(verdict.clone())),
            Some(_) => Err(PolicyError::Unexpected("relay_call".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_parsing() {
        let a = parse_request("Confirm coverage for CLN-0001", DEFAULT_ID_PATTERN).unwrap();
        assert_eq!(a.patient_id, "CLN-0001");
        assert_eq!(a.treatment, None);
        let a = parse_request(
            "check cln-0003 for knee_hyaluronic_injection please",
            DEFAULT_ID_PATTERN,
        )
        .unwrap();
        assert_eq!(a.patient_id, "cln-0003");
        assert_eq!(a.treatment.as_deref(), Some("knee_hyaluronic_injection"));
        assert!(matches!(
            parse_request("Confirm coverage for my patient", DEFAULT_ID_PATTERN),
            Err(PolicyError::Parse(_))
        ));
    }
}
