use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::datastore::{ClinicalObservation, CoverageRule, EnrollmentRow, GuidanceDoc};
use crate::pseudonym::CaseToken;

/// The built-in tool registry. There are no file-write or network tools
/// other than the relay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ToolName {
    CsvLookup,
    EnrollmentMatch,
    CoverageLookup,
    GuidanceSearch,
    HmacToken,
    RelayCall,
}

impl ToolName {
    pub const ALL: [ToolName; 6] = [
        Self::CsvLookup,
        Self::EnrollmentMatch,
        Self::CoverageLookup,
        Self::GuidanceSearch,
        Self::HmacToken,
        Self::RelayCall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CsvLookup => "csv_lookup",
            Self::EnrollmentMatch => "enrollment_match",
            Self::CoverageLookup => "coverage_lookup",
            Self::GuidanceSearch => "guidance_search",
            Self::HmacToken => "hmac_token",
            Self::RelayCall => "relay_call",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tool `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: String,
    pub args: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn new<const N: usize>(tool: ToolName, args: [(&str, &str); N]) -> Self {
        Self {
            tool: tool.as_str().to_owned(),
            args: args.into_iter().map(|(k, v)| (k.to_owned(), v.to_owned())).collect(),
        }
    }

    pub fn arg(&self, name: &str) -> Option<&str> {
        self.args.get(name).map(String::as_str)
    }
}

/// Structured tool output. [`ToolResult::text`] gives the rendering a
/// language model would see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolOutput {
    Observation(Option<ClinicalObservation>),
    Token(CaseToken),
    Enrollment(Option<EnrollmentRow>),
    Coverage(Option<CoverageRule>),
    Guidance(Vec<GuidanceDoc>),
    Relay(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    pub call: ToolCall,
    pub output: ToolOutput,
}

impl ToolResult {
    pub fn text(&self) -> String {
        match &self.output {
            ToolOutput::Observation(None) | ToolOutput::Enrollment(None) | ToolOutput::Coverage(None) => {
                "no matching row".into()
            }
            ToolOutput::Observation(Some(o)) => format!(
                "patient_id={}, symptom_class={}, duration_weeks={}, functional_limitation={}, prior_conservative_tx={}",
                o.patient_id,
                o.symptom_class,
                o.duration_weeks,
                o.functional_limitation,
                o.prior_conservative_tx.join(";")
            ),
            ToolOutput::Token(t) => t.to_string(),
            ToolOutput::Enrollment(Some(r)) => {
                format!("plan_id={}, status={}", r.plan_id, r.status.as_str())
            }
            ToolOutput::Coverage(Some(r)) => format!(
                "plan_id={}, treatment_code={}, covered={}, prerequisites={}",
                r.plan_id,
                r.treatment_code,
                if r.covered { "yes" } else { "no" },
                r.prerequisites.join(";")
            ),
            ToolOutput::Guidance(docs) => docs
                .iter()
                .map(|d| format!("{}: {}", d.doc_id, d.title))
                .collect::<Vec<_>>()
                .join("\n"),
            ToolOutput::Relay(body) => body.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for t in ToolName::ALL {
            assert_eq!(t.as_str().parse::<ToolName>().unwrap(), t);
        }
        assert!("web_fetch".parse::<ToolName>().is_err());
    }
}
