//! Heading-anchored reader for the specialist's markdown guidance extracts.
//!
//! Only the subset the extracts use is understood: `#`/`##` headings and
//! `-` or numbered list items. A document whose title starts with
//! "Red Flags" is a red-flag list; any other document must carry the
//! severity-band and management-ladder sections.

use std::path::Path;

use super::DatastoreError;

pub const SEVERITY_HEADING: &str = "Symptom Severity Bands";
pub const LADDER_HEADING: &str = "Conservative Management Ladder";
const RED_FLAGS_PREFIX: &str = "Red Flags";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GuidanceDoc {
    pub doc_id: String,
    pub title: String,
    /// Lowercased band name and its description, in source order.
    pub severity_bands: Vec<(String, String)>,
    pub ladder: Vec<String>,
    pub red_flags: Vec<String>,
    /// Any other `##` sections, kept verbatim.
    pub sections: Vec<(String, Vec<String>)>,
}

impl GuidanceDoc {
    pub fn is_red_flag_list(&self) -> bool {
        self.title.starts_with(RED_FLAGS_PREFIX)
    }

    pub fn severity_band(&self, band: &str) -> Option<&str> {
        self.severity_bands
            .iter()
            .find(|(b, _)| b.eq_ignore_ascii_case(band))
            .map(|(_, d)| d.as_str())
    }
}

pub fn parse_guidance(doc_id: &str, text: &str) -> Result<GuidanceDoc, DatastoreError> {
    let schema = |missing: &str| DatastoreError::Schema {
        file: doc_id.to_owned(),
        missing: missing.to_owned(),
    };

    let mut title = None;
    // (heading, items); the title's own items live under an empty heading.
    let mut sections: Vec<(String, Vec<String>)> = vec![(String::new(), Vec::new())];
    for line in text.lines().map(str::trim) {
        if let Some(h) = line.strip_prefix("## ") {
            sections.push((h.trim().to_owned(), Vec::new()));
        } else if let Some(h) = line.strip_prefix("# ") {
            if title.is_none() {
                title = Some(h.trim().to_owned());
            }
        } else if let Some(item) = list_item(line) {
            sections.last_mut().expect("non-empty").1.push(item.to_owned());
        }
    }
    let title = title.ok_or_else(|| schema("# <title>"))?;

    let mut doc = GuidanceDoc {
        doc_id: doc_id.to_owned(),
        title,
        ..Default::default()
    };
    let mut take = |heading: &str| {
        sections
            .iter()
            .position(|(h, _)| h == heading)
            .map(|i| sections.remove(i).1)
    };

    if doc.is_red_flag_list() {
        doc.red_flags = take("").unwrap_or_default();
    } else {
        let bands = take(SEVERITY_HEADING).ok_or_else(|| schema(SEVERITY_HEADING))?;
        doc.ladder = take(LADDER_HEADING).ok_or_else(|| schema(LADDER_HEADING))?;
        doc.severity_bands = bands
            .iter()
            .map(|b| match b.split_once(':') {
                Some((name, desc)) => (name.trim().to_lowercase(), desc.trim().to_owned()),
                None => (b.trim().to_lowercase(), String::new()),
            })
            .collect();
        take("");
    }
    doc.sections = sections.into_iter().filter(|(h, _)| !h.is_empty()).collect();
    Ok(doc)
}

fn list_item(line: &str) -> Option<&str> {
    if let Some(rest) = line.strip_prefix("- ") {
        return Some(rest.trim());
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        return line[digits..].strip_prefix(". ").map(str::trim);
    }
    None
}

/// Loads every `*.md` file in `dir`, sorted by file name.
pub fn load_guidance(dir: &Path) -> Result<Vec<GuidanceDoc>, DatastoreError> {
    let io = |e: std::io::Error| DatastoreError::Io {
        file: dir.display().to_string(),
        reason: e.to_string(),
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == "md") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    files
        .iter()
        .map(|path| {
            let doc_id = path.file_name().expect("file").to_string_lossy().into_owned();
            let text = std::fs::read_to_string(path).map_err(|e| DatastoreError::Io {
                file: doc_id.clone(),
                reason: e.to_string(),
            })?;
            parse_guidance(&doc_id, &text)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::test_support::fixtures;

    #[test]
    fn loads_fixture_guidance() {
        let docs = load_guidance(&fixtures().join("specialist/guidance")).unwrap();
        assert_eq!(docs.len(), 2);

        let g = &docs[0];
        assert_eq!(g.doc_id, "osteoarthritis_knee_guidance.md");
        assert_eq!(g.ladder.len(), 4);
        assert_eq!(g.ladder[2], "Physiotherapy 6 weeks");
        assert_eq!(g.severity_bands.len(), 3);
        assert_eq!(
            g.severity_band("Severe"),
            Some("pain at rest, substantial functional loss")
        );
        assert!(!g.is_red_flag_list());
        assert_eq!(g.sections.len(), 2);

        let r = &docs[1];
        assert_eq!(r.doc_id, "osteoarthritis_knee_red_flags.md");
        assert!(r.is_red_flag_list());
        assert_eq!(r.red_flags.len(), 4);
        assert_eq!(r.red_flags[2], "Locked knee");
    }

    #[test]
    fn empty_directory() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(load_guidance(tmp.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_heading_is_named() {
        let text = "# Some Guidance\n\n## Symptom Severity Bands\n- Mild: x\n";
        match parse_guidance("g.md", text) {
            Err(DatastoreError::Schema { missing, .. }) => assert_eq!(missing, LADDER_HEADING),
            other => panic!("expected schema error, got {other:?}"),
        }
        assert!(matches!(
            parse_guidance("g.md", "- orphan\n"),
            Err(DatastoreError::Schema { .. })
        ));
    }
}
