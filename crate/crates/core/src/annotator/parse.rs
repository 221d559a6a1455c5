//! Numbered-list and JSON label formats.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{class_id_ignore_case, ClassId};

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("unrecognized structure: {0}")]
    Structure(String),
    #[error("expected {expected} labels, found {found}")]
    Count { expected: usize, found: usize },
    #[error("item {index}: unknown class {label:?}")]
    UnknownLabel { index: usize, label: String },
    #[error("completion missing from response")]
    Missing,
}

/// Renders `items` as `1. a; 2. b;`.
pub fn render_numbered<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {};", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders labels as a JSON object keyed `"1"`..`"B"` in order.
pub fn render_json<S: AsRef<str>>(items: &[S]) -> String {
    let body = items
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "\"{}\": {}",
                i + 1,
                serde_json::to_string(s.as_ref()).expect("strings serialize")
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    format!("{{{body}}}")
}

fn strip_marker(s: &str, k: usize) -> Option<&str> {
    let digits = k.to_string();
    let rest = s.strip_prefix(digits.as_str())?;
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim_start())
}

/// Finds the separator before item `k`; returns (end of current item, start of next).
fn find_marker(s: &str, k: usize) -> Option<(usize, usize)> {
    for (pos, ch) in s.char_indices() {
        if ch != ';' && ch != '\n' {
            continue;
        }
        let after = &s[pos + 1..];
        let trimmed = after.trim_start();
        if let Some(rest) = strip_marker(trimmed, k) {
            return Some((pos, s.len() - rest.len()));
        }
    }
    None
}

/// Splits `1. x; 2. y;` into `["x", "y"]`.
///
/// Items are found by looking for the next sequential number after a `;` or a
/// newline, so items may themselves contain semicolons. Returns `None` when
/// the text does not start with item 1.
pub fn split_numbered(content: &str) -> Option<Vec<&str>> {
    let mut rest = strip_marker(content.trim(), 1)?;
    let mut items = Vec::new();
    let mut k = 2;
    loop {
        match find_marker(rest, k) {
            Some((end, next)) => {
                items.push(rest[..end].trim());
                rest = &rest[next..];
                k += 1;
            }
            None => {
                items.push(clean_item(rest));
                return Some(items);
            }
        }
    }
}

fn clean_item(s: &str) -> &str {
    let s = s.trim();
    s.strip_suffix(';').unwrap_or(s).trim_end()
}

fn strip_code_fence(s: &str) -> &str {
    let t = s.trim();
    match t.strip_prefix("```") {
        Some(inner) => {
            let inner = inner.strip_prefix("json").unwrap_or(inner);
            inner.strip_suffix("```").unwrap_or(inner).trim()
        }
        None => t,
    }
}

fn raw_items(content: &str) -> Result<Vec<String>, ParseFailure> {
    let body = strip_code_fence(content);
    if body.starts_with('{') || body.starts_with('[') {
        let value: Value =
            serde_json::from_str(body).map_err(|e| ParseFailure::Structure(e.to_string()))?;
        return match value {
            Value::Object(map) => {
                let mut keyed = Vec::with_capacity(map.len());
                for (key, v) in map {
                    let idx: usize = key
                        .trim()
                        .parse()
                        .map_err(|_| ParseFailure::Structure(format!("non-numeric key {key:?}")))?;
                    let label = v
                        .as_str()
                        .ok_or_else(|| ParseFailure::Structure(format!("value for {key} is not a string")))?;
                    keyed.push((idx, label.to_string()));
                }
                keyed.sort_by_key(|(i, _)| *i);
                if keyed.iter().enumerate().any(|(pos, (i, _))| *i != pos + 1) {
                    return Err(ParseFailure::Structure("keys are not 1..B".into()));
                }
                Ok(keyed.into_iter().map(|(_, l)| l).collect())
            }
            Value::Array(values) => values
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(ParseFailure::Structure(format!("non-string item {other}"))),
                })
                .collect(),
            other => Err(ParseFailure::Structure(format!("unexpected JSON {other}"))),
        };
    }
    split_numbered(body)
        .map(|items| items.into_iter().map(str::to_string).collect())
        .ok_or_else(|| ParseFailure::Structure("expected a numbered list or JSON object".into()))
}

/// Per-item parse: structural problems fail the whole completion, while an
/// unrecognised class name only blanks its own slot.
pub fn parse_label_slots(
    content: &str,
    batch_size: usize,
    class_names: &[String],
) -> Result<Vec<Option<ClassId>>, ParseFailure> {
    let items = raw_items(content)?;
    if items.len() != batch_size {
        return Err(ParseFailure::Count {
            expected: batch_size,
            found: items.len(),
        });
    }
    Ok(items
        .iter()
        .map(|label| class_id_ignore_case(class_names, label))
        .collect())
}

/// Parses exactly `batch_size` labels, matched case-insensitively to `class_names`.
pub fn parse_labels(
    content: &str,
    batch_size: usize,
    class_names: &[String],
) -> Result<Vec<ClassId>, ParseFailure> {
    let items = raw_items(content)?;
    if items.len() != batch_size {
        return Err(ParseFailure::Count {
            expected: batch_size,
            found: items.len(),
        });
    }
    items
        .iter()
        .enumerate()
        .map(|(i, label)| {
            class_id_ignore_case(class_names, label).ok_or_else(|| ParseFailure::UnknownLabel {
                index: i + 1,
                label: label.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentiment() -> Vec<String> {
        vec!["Negative".into(), "Positive".into()]
    }

    fn news() -> Vec<String> {
        ["World", "Sports", "Business", "Sci/Tech"].map(String::from).to_vec()
    }

    #[test]
    fn numbered_form() {
        assert_eq!(
            parse_labels("1. Negative; 2. Positive;", 2, &sentiment()).unwrap(),
            vec![0, 1]
        );
    }

    #[test]
    fn json_form() {
        assert_eq!(
            parse_labels(r#"{"1": "World", "2": "Sports"}"#, 2, &news()).unwrap(),
            vec![0, 1]
        );
    }

    #[test]
    fn count_mismatch() {
        assert_eq!(
            parse_labels("1. Negative;", 2, &sentiment()),
            Err(ParseFailure::Count { expected: 2, found: 1 })
        );
    }

    #[test]
    fn case_insensitive_and_canonical() {
        assert_eq!(parse_labels("1. negative; 2. POSITIVE", 2, &sentiment()).unwrap(), vec![0, 1]);
        assert_eq!(parse_labels("1. sci/tech;\n2. world;", 2, &news()).unwrap(), vec![3, 0]);
    }

    #[test]
    fn unknown_label() {
        assert_eq!(
            parse_labels("1. Negative; 2. UNKNOWN;", 2, &sentiment()),
            Err(ParseFailure::UnknownLabel { index: 2, label: "UNKNOWN".into() })
        );
        assert_eq!(
            parse_label_slots("1. Negative; 2. UNKNOWN;", 2, &sentiment()).unwrap(),
            vec![Some(0), None]
        );
    }

    #[test]
    fn garbage_is_failure() {
        for bad in ["", "Negative", "{", "{\"a\": \"Negative\"}", "[1, 2]", "2. Negative;", "```json\n{\"1\": 3}\n```"] {
            assert!(parse_labels(bad, 1, &sentiment()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn fenced_json_accepted() {
        assert_eq!(
            parse_labels("```json\n{\"1\": \"Positive\"}\n```", 1, &sentiment()).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn sentences_with_semicolons_split_on_numbers() {
        let s = "1. slow; dull and long; 2. a 2. b; 3. fine;";
        assert_eq!(split_numbered(s).unwrap(), vec!["slow; dull and long", "a 2. b", "fine"]);
        assert_eq!(split_numbered("1. only"), Some(vec!["only"]));
        assert_eq!(split_numbered("10. x"), None);
    }

    #[test]
    fn render_shapes() {
        assert_eq!(render_numbered(&["Negative", "Positive"]), "1. Negative; 2. Positive;");
        assert_eq!(render_json(&["World", "Sports"]), r#"{"1": "World", "2": "Sports"}"#);
    }

    proptest! {
        #[test]
        fn round_trip_both_forms(labels in prop::collection::vec(0usize..4, 1..=10)) {
            let names = news();
            let rendered: Vec<&str> = labels.iter().map(|&c| names[c].as_str()).collect();
            prop_assert_eq!(parse_labels(&render_numbered(&rendered), labels.len(), &names).unwrap(), labels.clone());
            prop_assert_eq!(parse_labels(&render_json(&rendered), labels.len(), &names).unwrap(), labels);
        }

        #[test]
        fn arbitrary_text_never_panics(s in ".{0,80}", b in 0usize..12) {
            let _ = parse_labels(&s, b, &news());
            let _ = parse_label_slots(&s, b, &news());
        }
    }
}
