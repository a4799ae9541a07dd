//! Canonical key-value text blocks.
//!
//! Metadata, stats sidecars and candidate lists are stored as UTF-8
//! `key=value\n` lines with keys sorted bytewise, so a block is
//! human-auditable in a hex dump and byte-deterministic for hashing.
//! Backslash and newline in values are escaped (`\\` and `\n`); keys may
//! not contain `=`, newline or backslash.

use std::collections::BTreeMap;

use thiserror::Error;

/// Error for structured blocks layered on the kv format (stats,
/// candidate lists, case metadata).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("unexpected key {0:?}")]
    UnknownKey(String),
    #[error("bad value for key {0:?}")]
    BadValue(String),
    #[error("missing key {0:?}")]
    Missing(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("kv block is not valid UTF-8")]
    NotUtf8,
    #[error("kv line {0} has no '=' separator")]
    MissingSeparator(usize),
    #[error("kv line {0} has an invalid escape sequence")]
    BadEscape(usize),
    #[error("kv key {0:?} contains a forbidden character")]
    BadKey(String),
    #[error("duplicate kv key {0:?}")]
    DuplicateKey(String),
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(value: &str, line: usize) -> Result<String, KvError> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            _ => return Err(KvError::BadEscape(line)),
        }
    }
    Ok(out)
}

fn key_is_valid(key: &str) -> bool {
    !key.is_empty() && !key.contains(['=', '\n', '\\'])
}

/// Serializes the pairs as a canonical block: sorted keys, one
/// `key=value\n` line each.
pub fn to_block<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<u8> {
    let sorted: BTreeMap<&str, &str> = pairs.into_iter().collect();
    let mut out = String::new();
    for (key, value) in sorted {
        debug_assert!(key_is_valid(key));
        out.push_str(key);
        out.push('=');
        out.push_str(&escape(value));
        out.push('\n');
    }
    out.into_bytes()
}

/// Parses a block back into pairs, in the block's own line order.
pub fn from_block(bytes: &[u8]) -> Result<Vec<(String, String)>, KvError> {
    let text = std::str::from_utf8(bytes).map_err(|_| KvError::NotUtf8)?;
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or(KvError::MissingSeparator(line_no))?;
        if !key_is_valid(key) {
            return Err(KvError::BadKey(key.to_string()));
        }
        if !seen.insert(key.to_string()) {
            return Err(KvError::DuplicateKey(key.to_string()));
        }
        out.push((key.to_string(), unescape(value, line_no)?));
    }
    Ok(out)
}
