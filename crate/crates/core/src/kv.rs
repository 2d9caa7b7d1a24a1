//! Line-oriented `key=value` text records.
//!
//! This is the wire format for element records, HTTP bodies and reports.
//! Values are escaped so that a record is always one field per line:
//! `\\` → `\\\\`, newline → `\\n`, carriage return → `\\r`, tab → `\\t`.
//! Keys may not contain `=` or whitespace. Blank lines separate records in
//! multi-record files.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: missing '=' separator")]
    MissingSeparator { line: usize },
    #[error("line {line}: bad escape sequence")]
    BadEscape { line: usize },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}`: {reason}")]
    BadField { field: String, reason: String },
}

pub fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for ch in value.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(value: &str) -> Option<String> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            't' => out.push('\t'),
            _ => return None,
        }
    }
    Some(out)
}

/// An ordered list of fields. Duplicate keys are kept; `get` returns the first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        debug_assert!(!key.contains('=') && !key.contains(char::is_whitespace));
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.push(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::MissingField(key.to_string()))
    }

    pub fn parse_field<T>(&self, key: &str) -> Result<T, KvError>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e: T::Err| KvError::BadField {
            field: key.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            let _ = writeln!(out, "{k}={}", escape(v));
        }
        out
    }

    pub fn decode(text: &str) -> Result<Record, KvError> {
        let mut records = decode_all(text)?;
        Ok(if records.is_empty() {
            Record::new()
        } else {
            records.swap_remove(0)
        })
    }
}

/// Parses blank-line separated records.
pub fn decode_all(text: &str) -> Result<Vec<Record>, KvError> {
    let mut records = Vec::new();
    let mut current = Record::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            if !current.is_empty() {
                records.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(KvError::MissingSeparator { line: line_no })?;
        let value = unescape(value).ok_or(KvError::BadEscape { line: line_no })?;
        current.fields.push((key.trim().to_string(), value));
    }
    if !current.is_empty() {
        records.push(current);
    }
    Ok(records)
}

pub fn encode_all<'a>(records: impl IntoIterator<Item = &'a Record>) -> String {
    records
        .into_iter()
        .map(Record::encode)
        .collect::<Vec<_>>()
        .join("\n")
}
