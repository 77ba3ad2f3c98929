//! Organ-level findings records.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

use super::registry::{OrganRegistry, GENERAL_KEY};

/// Findings text required for (and implied by) `not_examined`.
pub const NOT_EXAMINED: &str = "not_examined";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Normal,
    Abnormal,
    NotExamined,
}

impl Status {
    pub const ALL: [Status; 3] = [Status::Normal, Status::Abnormal, Status::NotExamined];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Normal => "normal",
            Status::Abnormal => "abnormal",
            Status::NotExamined => NOT_EXAMINED,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Status::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganFinding {
    pub status: Status,
    pub findings: String,
}

impl OrganFinding {
    pub fn not_examined() -> Self {
        OrganFinding {
            status: Status::NotExamined,
            findings: NOT_EXAMINED.to_string(),
        }
    }
}

/// Per-organ status and findings plus an optional study-level note.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FindingsRecord {
    organs: BTreeMap<String, OrganFinding>,
    general: Option<String>,
}

fn violation(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

impl FindingsRecord {
    pub fn new(general: Option<String>) -> Self {
        FindingsRecord {
            organs: BTreeMap::new(),
            general,
        }
    }

    /// Adds an organ, enforcing `not_examined => findings == "not_examined"`.
    pub fn insert(&mut self, registry: &OrganRegistry, organ: &str, finding: OrganFinding) -> Result<()> {
        if !registry.contains(organ) {
            return Err(violation(organ, "organ is not in the registry"));
        }
        if finding.status == Status::NotExamined && finding.findings != NOT_EXAMINED {
            return Err(violation(
                organ,
                format!("status not_examined requires findings \"{NOT_EXAMINED}\""),
            ));
        }
        self.organs.insert(organ.to_string(), finding);
        Ok(())
    }

    pub fn get(&self, organ: &str) -> Option<&OrganFinding> {
        self.organs.get(organ)
    }

    pub fn organs(&self) -> impl Iterator<Item = (&String, &OrganFinding)> {
        self.organs.iter()
    }

    pub fn len(&self) -> usize {
        self.organs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.organs.is_empty()
    }

    pub fn general(&self) -> Option<&str> {
        self.general.as_deref()
    }

    /// Serializes in registry order with `general` last.
    pub fn to_json(&self, registry: &OrganRegistry) -> String {
        let mut map = Map::new();
        for name in registry.names() {
            if let Some(f) = self.organs.get(name) {
                let mut entry = Map::new();
                entry.insert("status".into(), Value::String(f.status.as_str().into()));
                entry.insert("findings".into(), Value::String(f.findings.clone()));
                map.insert(name.clone(), Value::Object(entry));
            }
        }
        if let Some(g) = &self.general {
            map.insert(GENERAL_KEY.into(), Value::String(g.clone()));
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("string map serializes")
    }
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses the organ-keyed JSON schema against `registry`.
pub fn parse_findings(text: &str, registry: &OrganRegistry) -> Result<FindingsRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::Parse {
            offset: text.len() - text.trim_start().len(),
            message: "top level must be a JSON object".into(),
        });
    };
    let mut record = FindingsRecord::default();
    for (key, v) in map {
        if key == GENERAL_KEY {
            record.general = match v {
                Value::Null => None,
                Value::String(s) => Some(s),
                _ => return Err(violation(GENERAL_KEY, "must be a string")),
            };
            continue;
        }
        let Value::Object(entry) = v else {
            return Err(violation(&key, "entry must be an object with status and findings"));
        };
        if let Some(extra) = entry.keys().find(|k| *k != "status" && *k != "findings") {
            return Err(violation(&key, format!("unexpected field `{extra}`")));
        }
        let status = match entry.get("status") {
            Some(Value::String(s)) => {
                Status::parse(s).ok_or_else(|| violation(&key, format!("unknown status `{s}`")))?
            }
            _ => return Err(violation(&key, "missing string field `status`")),
        };
        let findings = match entry.get("findings") {
            Some(Value::String(s)) => s.clone(),
            _ => return Err(violation(&key, "missing string field `findings`")),
        };
        record.insert(registry, &key, OrganFinding { status, findings })?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn general_only_record() {
        let r = parse_findings(r#"{"general": "x"}"#, &OrganRegistry::default()).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.general(), Some("x"));
    }

    #[test]
    fn not_examined_with_text_is_rejected() {
        let err = parse_findings(
            r#"{"Liver": {"status":"not_examined","findings":"healthy"}}"#,
            &OrganRegistry::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Validation { ref field, .. } if field == "Liver"),
            "{err}"
        );
    }

    #[test]
    fn unknown_organ_and_status_are_rejected() {
        let reg = OrganRegistry::default();
        assert!(matches!(
            parse_findings(r#"{"Tail": {"status":"normal","findings":"ok"}}"#, &reg),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            parse_findings(r#"{"Liver": {"status":"fine","findings":"ok"}}"#, &reg),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "{\n  \"Liver\": {\"status\": \"normal\",, }\n}";
        match parse_findings(text, &OrganRegistry::default()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 1], ","),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let reg = OrganRegistry::default();
        let mut r = FindingsRecord::new(Some("note".into()));
        r.insert(
            &reg,
            "Heart",
            OrganFinding {
                status: Status::Normal,
                findings: "Fine.".into(),
            },
        )
        .unwrap();
        r.insert(&reg, "Brain", OrganFinding::not_examined()).unwrap();
        assert_eq!(parse_findings(&r.to_json(&reg), &reg).unwrap(), r);
    }
}
