//! Chunk-aligned description composition.

use super::findings::{FindingsRecord, Status, NOT_EXAMINED};
use super::registry::OrganRegistry;

/// Description of a window that intersects no organ.
pub const EMPTY_CHUNK_SENTENCE: &str = "No target structures were detected in this CT block.";

const NOT_EXAMINED_SUFFIX: &str = "were not examined.";

/// Composes `S_X (+) S_N (+) S_A (+) S_g` for the organs seen in a window.
///
/// Organs are visited in registry order. Organs missing from the record
/// count as not examined; examined organs with empty findings are dropped.
pub fn compose_description<S: AsRef<str>>(record: &FindingsRecord, organs: &[S], registry: &OrganRegistry) -> String {
    if organs.is_empty() {
        return EMPTY_CHUNK_SENTENCE.to_string();
    }
    let seen = |name: &str| organs.iter().any(|o| o.as_ref() == name);
    let mut not_examined = Vec::new();
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for name in registry.names().iter().filter(|n| seen(n)) {
        match record.get(name) {
            None => not_examined.push(name.as_str()),
            Some(f) => match f.status {
                Status::NotExamined => not_examined.push(name.as_str()),
                Status::Normal if !f.findings.is_empty() => normal.push(f.findings.as_str()),
                Status::Abnormal if !f.findings.is_empty() => abnormal.push(f.findings.as_str()),
                _ => {}
            },
        }
    }
    let s_x = if not_examined.is_empty() {
        String::new()
    } else {
        format!("{} {NOT_EXAMINED_SUFFIX}", not_examined.join(", "))
    };
    let s_g = record
        .general()
        .filter(|g| !g.is_empty() && *g != NOT_EXAMINED)
        .unwrap_or("");
    let segments = [s_x, normal.join(", "), abnormal.join(", "), s_g.to_string()];
    segments
        .iter()
        .filter(|s| !s.is_empty())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}
