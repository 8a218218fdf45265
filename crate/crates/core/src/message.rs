//! RFC-822-style message model: an ordered header list plus a raw body.
//!
//! Header order is significant (`Received` chains are read newest-first)
//! and duplicate names are legal, so headers live in a `Vec`, not a map.
//! Parsing handles simple continuation-line unfolding; values are stored
//! unfolded and serialization never re-folds.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("header line {0} is malformed")]
    MalformedHeaderLine(usize),
    #[error("invalid header name {0:?}")]
    InvalidHeaderName(String),
    #[error("header block is not valid UTF-8")]
    HeaderNotUtf8,
    #[error("missing required header {0}")]
    MissingHeader(&'static str),
    #[error("header {0} appears more than once")]
    DuplicateHeader(&'static str),
}

/// One header field. Name matching is case-insensitive; the original
/// spelling is preserved for serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    name: String,
    value: String,
}

impl Header {
    pub fn new(name: &str, value: &str) -> Result<Self, MessageError> {
        if name.is_empty() || !name.bytes().all(is_header_name_byte) {
            return Err(MessageError::InvalidHeaderName(name.to_string()));
        }
        Ok(Header {
            name: name.to_string(),
            value: value.trim().to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn is(&self, name: &str) -> bool {
        self.name.eq_ignore_ascii_case(name)
    }
}

impl fmt::Display for Header {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.value)
    }
}

/// Printable ASCII except colon and space, per the classic field-name rule.
fn is_header_name_byte(b: u8) -> bool {
    (33..=126).contains(&b) && b != b':'
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MailMessage {
    headers: Vec<Header>,
    body: Vec<u8>,
}

impl MailMessage {
    pub fn new() -> Self {
        MailMessage::default()
    }

    /// Builder-style helper for tests and programmatic construction.
    /// Panics on an invalid header name; use `push_header` to handle
    /// the error.
    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.push_header(name, value).expect("valid header name");
        self
    }

    pub fn with_body(mut self, body: &[u8]) -> Self {
        self.body = body.to_vec();
        self
    }

    /// Appends a header after all existing ones.
    pub fn push_header(&mut self, name: &str, value: &str) -> Result<(), MessageError> {
        self.headers.push(Header::new(name, value)?);
        Ok(())
    }

    /// Inserts a header above all existing ones, the way a relay stamps
    /// `Received`.
    pub fn insert_header_top(&mut self, name: &str, value: &str) -> Result<(), MessageError> {
        self.headers.insert(0, Header::new(name, value)?);
        Ok(())
    }

    /// Removes the header at `index`.
    pub fn remove_header(&mut self, index: usize) -> Header {
        self.headers.remove(index)
    }

    pub fn headers(&self) -> &[Header] {
        &self.headers
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn set_body(&mut self, body: Vec<u8>) {
        self.body = body;
    }

    /// All values for `name`, in message order.
    pub fn values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> {
        self.headers
            .iter()
            .filter(move |h| h.is(name))
            .map(|h| h.value())
    }

    /// Indices of all headers named `name`, in message order.
    pub fn positions(&self, name: &str) -> Vec<usize> {
        self.headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.is(name))
            .map(|(i, _)| i)
            .collect()
    }

    /// The value of a header that must appear exactly once.
    pub fn single(&self, name: &'static str) -> Result<&str, MessageError> {
        let mut it = self.values(name);
        let first = it.next().ok_or(MessageError::MissingHeader(name))?;
        if it.next().is_some() {
            return Err(MessageError::DuplicateHeader(name));
        }
        Ok(first)
    }

    /// The value of a header that may appear at most once.
    pub fn at_most_one(&self, name: &'static str) -> Result<Option<&str>, MessageError> {
        let mut it = self.values(name);
        let first = it.next();
        if it.next().is_some() {
            return Err(MessageError::DuplicateHeader(name));
        }
        Ok(first)
    }

    /// Parses a wire-format message: header lines, a blank line, then the
    /// body verbatim. Accepts both CRLF and bare LF line endings in the
    /// header block. Lines starting with whitespace continue the previous
    /// header; the fold is replaced by a single space.
    pub fn parse(raw: &[u8]) -> Result<Self, MessageError> {
        let (head, body) = split_head_body(raw);
        let head = std::str::from_utf8(head).map_err(|_| MessageError::HeaderNotUtf8)?;

        let mut headers: Vec<Header> = Vec::new();
        for (lineno, line) in head.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            if line.starts_with(' ') || line.starts_with('\t') {
                let prev = headers
                    .last_mut()
                    .ok_or(MessageError::MalformedHeaderLine(lineno + 1))?;
                let cont = line.trim();
                if !cont.is_empty() {
                    prev.value.push(' ');
                    prev.value.push_str(cont);
                }
                continue;
            }
            let (name, value) = line
                .split_once(':')
                .ok_or(MessageError::MalformedHeaderLine(lineno + 1))?;
            headers.push(Header::new(name, value)?);
        }
        Ok(MailMessage {
            headers,
            body: body.to_vec(),
        })
    }

    /// Serializes with CRLF line endings. Parsing the result yields the
    /// same header names, values, and order, and the same body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for h in &self.headers {
            out.extend_from_slice(h.name.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(h.value.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        out
    }

    /// The header block alone, as serialized by `to_bytes`, without the
    /// blank separator line. Complaints carry exactly this as their body.
    pub fn header_block(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for h in &self.headers {
            out.extend_from_slice(h.name.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(h.value.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        out
    }
}

/// Splits raw bytes at the first blank line; returns (header bytes, body).
fn split_head_body(raw: &[u8]) -> (&[u8], &[u8]) {
    let mut i = 0;
    while i < raw.len() {
        // End of a line at i..j, with the line terminator consumed.
        let line_start = i;
        let mut j = i;
        while j < raw.len() && raw[j] != b'\n' {
            j += 1;
        }
        let mut line_end = j;
        if line_end > line_start && raw[line_end - 1] == b'\r' {
            line_end -= 1;
        }
        let next = if j < raw.len() { j + 1 } else { j };
        if line_end == line_start {
            // Blank line: header block ends before it, body follows it.
            return (&raw[..line_start], &raw[next..]);
        }
        i = next;
    }
    (raw, &[])
}
