//! The header digest relays log and complaints are validated against.
//!
//! The digest covers the fields a complainant can reproduce from a
//! delivered message and a forger cannot freely rewrite without breaking
//! the trace: `Date`, `To`, `From`, and every `Received` value in
//! newest-first order. Header names are excluded; each value is trimmed
//! and internal whitespace runs collapse to one space; the fields are
//! joined by single 0x0A bytes and hashed with SHA-256.
//!
//! A relay computes the digest at ingress, before adding its own stamp,
//! so the value it logs is the one a downstream complaint reproduces by
//! stripping everything the path added later.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::message::{MailMessage, MessageError};
use crate::received::RECEIVED;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DigestError {
    #[error("missing required header {0}")]
    MissingHeader(&'static str),
    #[error("header {0} appears more than once")]
    DuplicateHeader(&'static str),
}

/// SHA-256 over the canonical header input; 32 bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeaderDigest(pub [u8; 32]);

impl HeaderDigest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(HeaderDigest(out))
    }

    /// First eight hex digits, used in traces and event lines.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for HeaderDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HeaderDigest({})", self.to_hex())
    }
}

impl fmt::Display for HeaderDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for HeaderDigest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeaderDigest::from_hex(s)
    }
}

fn canonicalize(value: &str) -> String {
    value.split_ascii_whitespace().collect::<Vec<_>>().join(" ")
}

fn required<'a>(msg: &'a MailMessage, name: &'static str) -> Result<&'a str, DigestError> {
    msg.single(name).map_err(|e| match e {
        MessageError::MissingHeader(n) => DigestError::MissingHeader(n),
        MessageError::DuplicateHeader(n) => DigestError::DuplicateHeader(n),
        _ => unreachable!("single() only fails with missing or duplicate"),
    })
}

/// The exact byte string that is hashed. Exposed for inspection and
/// tests; `compute_digest` is the normal entry point.
pub fn canonical_input(msg: &MailMessage) -> Result<Vec<u8>, DigestError> {
    let mut fields: Vec<String> = Vec::new();
    fields.push(canonicalize(required(msg, "Date")?));
    fields.push(canonicalize(required(msg, "To")?));
    fields.push(canonicalize(required(msg, "From")?));
    for value in msg.values(RECEIVED) {
        fields.push(canonicalize(value));
    }
    Ok(fields.join("\n").into_bytes())
}

/// Digest of the message's current header state. `Date`, `To`, and
/// `From` must each appear exactly once.
pub fn compute_digest(msg: &MailMessage) -> Result<HeaderDigest, DigestError> {
    let input = canonical_input(msg)?;
    Ok(HeaderDigest(Sha256::digest(&input).into()))
}
