//! The `X-Bulk-Mail` classification header.
//!
//! Grammar of the header value:
//!
//! ```text
//! value      = "ADV" ":" group *("," group)
//!            / "LIST" ":" identifier
//! group      = segment *("." segment)      ; interest-group name
//! identifier = segment *("." segment)      ; opt-in list id
//! segment    = 1*(ALPHA / DIGIT)
//! ```
//!
//! Leaders are case-insensitive and whitespace around colons and commas
//! is ignored. A message without the header is personal mail.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::message::MailMessage;

pub const BULK_HEADER: &str = "X-Bulk-Mail";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BulkHeaderError {
    #[error("unknown classification leader {0:?}")]
    UnknownLeader(String),
    #[error("advertisement with empty group list")]
    EmptyGroupList,
    #[error("empty list identifier")]
    EmptyIdentifier,
    #[error("invalid name segment in {0:?}")]
    InvalidSegment(String),
    #[error("message carries more than one {BULK_HEADER} header")]
    DuplicateHeader,
}

/// A dot-separated hierarchical name: interest groups and list ids share
/// this shape. Stored lowercase; segments are ASCII alphanumerics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HierarchicalName(String);

impl HierarchicalName {
    pub fn new(s: &str) -> Result<Self, BulkHeaderError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(BulkHeaderError::InvalidSegment(s.to_string()));
        }
        let lower = s.to_ascii_lowercase();
        let ok = lower
            .split('.')
            .all(|seg| !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_alphanumeric()));
        if !ok {
            return Err(BulkHeaderError::InvalidSegment(s.to_string()));
        }
        Ok(HierarchicalName(lower))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('.')
    }

    /// True when `self` names `other` or one of its ancestors: equality
    /// or a prefix ending at a dot boundary. `rec.sports` covers
    /// `rec.sports.sailing` but not `rec.sportsmanship`.
    pub fn covers(&self, other: &HierarchicalName) -> bool {
        let p = &self.0;
        let o = &other.0;
        o == p || (o.len() > p.len() && o.starts_with(p.as_str()) && o.as_bytes()[p.len()] == b'.')
    }
}

impl fmt::Display for HierarchicalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for HierarchicalName {
    type Err = BulkHeaderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HierarchicalName::new(s)
    }
}

/// An interest-group name such as `rec.sports.sailing`.
pub type InterestGroup = HierarchicalName;

/// An opt-in list identifier such as `freefood.348290`.
pub type ListId = HierarchicalName;

/// Message classification derived from the `X-Bulk-Mail` header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BulkClass {
    /// No `X-Bulk-Mail` header: ordinary personal mail.
    Personal,
    /// Unsolicited advertisement targeted at one or more interest groups.
    Advertisement(Vec<InterestGroup>),
    /// Mail from an opt-in list the recipient is expected to have joined.
    List(ListId),
}

impl BulkClass {
    /// Parses a header value (the part after `X-Bulk-Mail:`).
    pub fn parse_value(value: &str) -> Result<Self, BulkHeaderError> {
        let (leader, rest) = match value.split_once(':') {
            Some((l, r)) => (l.trim(), r),
            None => (value.trim(), ""),
        };
        if leader.eq_ignore_ascii_case("ADV") {
            let mut groups: Vec<InterestGroup> = Vec::new();
            let rest = rest.trim();
            if rest.is_empty() {
                return Err(BulkHeaderError::EmptyGroupList);
            }
            for part in rest.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    return Err(BulkHeaderError::EmptyGroupList);
                }
                let group = InterestGroup::new(part)?;
                if !groups.contains(&group) {
                    groups.push(group);
                }
            }
            Ok(BulkClass::Advertisement(groups))
        } else if leader.eq_ignore_ascii_case("LIST") {
            let rest = rest.trim();
            if rest.is_empty() {
                return Err(BulkHeaderError::EmptyIdentifier);
            }
            Ok(BulkClass::List(ListId::new(rest)?))
        } else {
            Err(BulkHeaderError::UnknownLeader(leader.to_string()))
        }
    }

    /// Classifies a whole message. Absent header means personal; more
    /// than one header is malformed.
    pub fn of_message(msg: &MailMessage) -> Result<Self, BulkHeaderError> {
        let mut it = msg.values(BULK_HEADER);
        match it.next() {
            None => Ok(BulkClass::Personal),
            Some(value) => {
                if it.next().is_some() {
                    return Err(BulkHeaderError::DuplicateHeader);
                }
                BulkClass::parse_value(value)
            }
        }
    }

    /// The header value for this classification, `None` for personal
    /// mail. `parse_value` on the result yields the classification back.
    pub fn header_value(&self) -> Option<String> {
        match self {
            BulkClass::Personal => None,
            BulkClass::Advertisement(groups) => {
                let list: Vec<&str> = groups.iter().map(|g| g.as_str()).collect();
                Some(format!("ADV: {}", list.join(", ")))
            }
            BulkClass::List(id) => Some(format!("LIST: {id}")),
        }
    }

    pub fn is_list(&self) -> bool {
        matches!(self, BulkClass::List(_))
    }
}
