//! Parsing of region-labeling replies.
//!
//! The expected reply is a JSON array of objects, each mapping a mark number
//! to a distortion label plus a `"gpt4v iqa"` message. Parsing is strict on
//! content but tolerant of packaging: surrounding prose, markdown fences and
//! trailing commas are accepted.

use serde_json::{Map, Value};
use thiserror::Error;

pub const MESSAGE_KEY: &str = "gpt4v iqa";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoLabelEntry {
    pub mark: u32,
    pub raw_label: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AutoLabelResponse {
    pub entries: Vec<AutoLabelEntry>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON array found in reply")]
    NoJsonArray,
    #[error("entry {0} is not an object")]
    NotAnObject(usize),
    #[error("entry {0} has no mark number")]
    MissingMark(usize),
    #[error("entry {index}: mark {mark} has no label")]
    MissingLabel { index: usize, mark: u32 },
    #[error("entry {index}: key {key:?} is not a positive integer mark")]
    NonIntegerMark { index: usize, key: String },
}

impl AutoLabelResponse {
    pub fn to_json(&self) -> String {
        let arr: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert(e.mark.to_string(), Value::String(e.raw_label.clone()));
                m.insert(MESSAGE_KEY.to_string(), Value::String(e.message.clone()));
                Value::Object(m)
            })
            .collect();
        serde_json::to_string_pretty(&Value::Array(arr)).expect("plain JSON values")
    }

    pub fn label_for(&self, mark: u32) -> Option<&str> {
        self.entries.iter().find(|e| e.mark == mark).map(|e| e.raw_label.as_str())
    }
}

/// Remove commas that directly precede a closing bracket, outside strings.
fn strip_trailing_commas(s: &str) -> String {
    let bytes: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in bytes.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                out.push(c);
            }
            ',' => {
                let next = bytes[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Byte offset one past the bracket closing the one at `start`.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0i32;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '[' | '{' => depth += 1,
            ']' | '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

fn try_array(candidate: &str) -> Option<Vec<Value>> {
    let cleaned = strip_trailing_commas(candidate);
    match serde_json::from_str::<Value>(&cleaned) {
        Ok(Value::Array(a)) => Some(a),
        _ => None,
    }
}

fn extract_array(text: &str) -> Option<Vec<Value>> {
    if let Some(a) = try_array(text.trim()) {
        return Some(a);
    }
    for (start, _) in text.match_indices('[') {
        if let Some(end) = balanced_end(text, start) {
            if let Some(a) = try_array(&text[start..end]) {
                return Some(a);
            }
        }
    }
    None
}

fn parse_mark(key: &str) -> Option<u32> {
    let k = key.trim();
    let k = k.strip_prefix('[').and_then(|k| k.strip_suffix(']')).unwrap_or(k).trim();
    k.parse::<u32>().ok().filter(|&m| m > 0)
}

pub fn parse_response(text: &str) -> Result<AutoLabelResponse, ParseError> {
    let array = extract_array(text).ok_or(ParseError::NoJsonArray)?;
    let mut entries = Vec::new();
    for (index, v) in array.into_iter().enumerate() {
        let Value::Object(obj) = v else {
            return Err(ParseError::NotAnObject(index));
        };
        let message = match obj.get(MESSAGE_KEY) {
            Some(Value::String(s)) => s.clone(),
            _ => String::new(),
        };
        let mut found = false;
        for (key, value) in &obj {
            if key == MESSAGE_KEY {
                continue;
            }
            let mark = parse_mark(key).ok_or_else(|| ParseError::NonIntegerMark {
                index,
                key: key.clone(),
            })?;
            let label = match value {
                Value::String(s) if !s.trim().is_empty() => s.trim().to_string(),
                _ => return Err(ParseError::MissingLabel { index, mark }),
            };
            entries.push(AutoLabelEntry {
                mark,
                raw_label: label,
                message: message.clone(),
            });
            found = true;
        }
        if !found {
            return Err(ParseError::MissingMark(index));
        }
    }
    Ok(AutoLabelResponse { entries })
}
