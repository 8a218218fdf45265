//! Domain names, mailbox addresses, and money.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Currency amounts are integer cents everywhere; no floating point.
pub type Cents = i64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrError {
    #[error("empty domain name")]
    EmptyDomain,
    #[error("invalid domain name {0:?}")]
    InvalidDomain(String),
    #[error("invalid mailbox address {0:?}")]
    InvalidAddress(String),
}

/// A DNS-style domain name, stored lowercase.
///
/// Segments are ASCII alphanumerics and hyphens separated by dots;
/// comparisons are therefore case-insensitive by construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainName(String);

impl DomainName {
    pub fn new(s: &str) -> Result<Self, AddrError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(AddrError::EmptyDomain);
        }
        let lower = s.to_ascii_lowercase();
        let valid = lower.split('.').all(|seg| {
            let b = seg.as_bytes();
            !b.is_empty()
                && b.iter().all(|c| c.is_ascii_alphanumeric() || *c == b'-')
                && b[0].is_ascii_alphanumeric()
                && b[b.len() - 1].is_ascii_alphanumeric()
        });
        if !valid {
            return Err(AddrError::InvalidDomain(s.to_string()));
        }
        Ok(DomainName(lower))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DomainName {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainName::new(s)
    }
}

/// A mailbox address `local@domain`. The local part is kept verbatim
/// except for surrounding whitespace; the domain is normalized.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address {
    local: String,
    domain: DomainName,
}

impl Address {
    pub fn new(local: &str, domain: DomainName) -> Result<Self, AddrError> {
        let local = local.trim();
        if local.is_empty() || local.contains('@') || local.contains(char::is_whitespace) {
            return Err(AddrError::InvalidAddress(format!("{local}@{domain}")));
        }
        Ok(Address {
            local: local.to_string(),
            domain,
        })
    }

    pub fn parse(s: &str) -> Result<Self, AddrError> {
        let s = s.trim();
        let (local, domain) = s
            .rsplit_once('@')
            .ok_or_else(|| AddrError::InvalidAddress(s.to_string()))?;
        Address::new(local, DomainName::new(domain)?)
    }

    pub fn local(&self) -> &str {
        &self.local
    }

    pub fn domain(&self) -> &DomainName {
        &self.domain
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.local, self.domain)
    }
}

impl FromStr for Address {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Address::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_normalizes_case() {
        let d = DomainName::new(" A.Example ").unwrap();
        assert_eq!(d.as_str(), "a.example");
        assert_eq!(d, DomainName::new("a.EXAMPLE").unwrap());
    }

    #[test]
    fn domain_rejects_bad_shapes() {
        for bad in ["", ".", "a..b", "-", "a b", "a.example."] {
            assert!(DomainName::new(bad).is_err(), "{bad:?} accepted");
        }
        assert!(DomainName::new("relay-1.a.example").is_ok());
    }

    #[test]
    fn address_parse_round_trip() {
        let a = Address::parse("Alice@B.Example").unwrap();
        assert_eq!(a.local(), "Alice");
        assert_eq!(a.domain().as_str(), "b.example");
        assert_eq!(a.to_string(), "Alice@b.example");
    }

    #[test]
    fn address_rejects_missing_parts() {
        assert!(Address::parse("nobody").is_err());
        assert!(Address::parse("@x.example").is_err());
        assert!(Address::parse("a b@x.example").is_err());
    }
}
