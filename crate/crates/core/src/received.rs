//! `Received` trace stamps and the path operations built on them.
//!
//! Every relay prepends one stamp recording where the message came from:
//! a peer relay, or a local client that authenticated to submit mail.
//! Complaints walk this chain in reverse, so a relay must be able to
//! find its own stamp, discard everything added downstream of it, and
//! name the hop the message arrived from.

use chrono::{DateTime, SecondsFormat, Utc};

use thiserror::Error;

use crate::addr::DomainName;
use crate::message::MailMessage;

pub const RECEIVED: &str = "Received";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("no trace stamp added by relay {0}")]
    RelayNotOnPath(DomainName),
}

/// Where a relay got the message from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StampSource {
    /// Handed over by a peer relay.
    Peer(DomainName),
    /// Submitted by a local client over an authenticated session.
    AuthenticatedUser(String),
}

/// One relay's trace stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedStamp {
    pub relay: DomainName,
    pub source: StampSource,
    pub timestamp: DateTime<Utc>,
}

impl ReceivedStamp {
    /// The wire form, e.g.
    /// `from a.example by b.example with esmtp; Tue, 1 Mar 2005 10:00:00 +0000`.
    /// `esmtpa` marks an authenticated client submission.
    pub fn to_value(&self) -> String {
        let (host, proto) = match &self.source {
            StampSource::Peer(d) => (d.as_str(), "esmtp"),
            StampSource::AuthenticatedUser(u) => (u.as_str(), "esmtpa"),
        };
        format!(
            "from {host} by {relay} with {proto}; {date}",
            relay = self.relay,
            date = self.timestamp.to_rfc2822()
        )
    }

    /// Parses a stamp in our wire form. Foreign `Received` values fail
    /// here and are treated as opaque: they still count for positional
    /// operations and the digest, but carry no routing information.
    pub fn parse_value(value: &str) -> Option<ReceivedStamp> {
        let rest = value.trim().strip_prefix("from ")?;
        let (host, rest) = rest.split_once(" by ")?;
        let (relay, rest) = rest.split_once(" with ")?;
        let (proto, date) = rest.split_once(';')?;
        let relay = DomainName::new(relay).ok()?;
        let timestamp = DateTime::parse_from_rfc2822(date.trim()).ok()?.to_utc();
        let source = match proto.trim() {
            "esmtp" => StampSource::Peer(DomainName::new(host).ok()?),
            "esmtpa" => StampSource::AuthenticatedUser(host.trim().to_string()),
            _ => return None,
        };
        Some(ReceivedStamp {
            relay,
            source,
            timestamp,
        })
    }
}

/// Prepends `stamp` as the newest `Received` header.
pub fn add_received_stamp(msg: &mut MailMessage, stamp: &ReceivedStamp) {
    msg.insert_header_top(RECEIVED, &stamp.to_value())
        .expect("constant header name is valid");
}

/// Index (within the header list) and parsed form of the newest stamp
/// added by `relay`.
fn own_stamp_position(msg: &MailMessage, relay: &DomainName) -> Option<(usize, ReceivedStamp)> {
    for idx in msg.positions(RECEIVED) {
        let value = msg.headers()[idx].value();
        if let Some(stamp) = ReceivedStamp::parse_value(value) {
            if &stamp.relay == relay {
                return Some((idx, stamp));
            }
        }
    }
    None
}

/// Returns a copy of the message as it looked when `relay` first saw it:
/// the relay's own stamp and every `Received` header newer than it are
/// removed. Non-trace headers are untouched. This is the message state
/// whose digest the relay logged at ingress.
pub fn strip_downstream_headers(
    msg: &MailMessage,
    relay: &DomainName,
) -> Result<MailMessage, PathError> {
    let (own_idx, _) =
        own_stamp_position(msg, relay).ok_or_else(|| PathError::RelayNotOnPath(relay.clone()))?;
    let mut out = msg.clone();
    let mut removed = 0usize;
    for idx in msg.positions(RECEIVED) {
        if idx <= own_idx {
            out.remove_header(idx - removed);
            removed += 1;
        }
    }
    Ok(out)
}

/// Who handed the message to `relay`, read from the relay's own stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpstreamHop {
    /// A peer relay: the complaint has another hop to travel.
    Peer(DomainName),
    /// The relay's own authenticated client: the origin is reached.
    Origin(String),
}

pub fn upstream_peer(msg: &MailMessage, relay: &DomainName) -> Result<UpstreamHop, PathError> {
    let (_, stamp) =
        own_stamp_position(msg, relay).ok_or_else(|| PathError::RelayNotOnPath(relay.clone()))?;
    Ok(match stamp.source {
        StampSource::Peer(d) => UpstreamHop::Peer(d),
        StampSource::AuthenticatedUser(u) => UpstreamHop::Origin(u),
    })
}

/// The host named in the oldest stamp on the message: for list mail this
/// is the remailer that injected it. `None` when the message carries no
/// parseable stamp.
pub fn origin_host(msg: &MailMessage) -> Option<DomainName> {
    let positions = msg.positions(RECEIVED);
    let oldest = *positions.last()?;
    let stamp = ReceivedStamp::parse_value(msg.headers()[oldest].value())?;
    Some(match stamp.source {
        StampSource::Peer(d) => d,
        StampSource::AuthenticatedUser(_) => stamp.relay,
    })
}

/// Formats a timestamp the way message `Date` headers are written.
pub fn format_date(t: DateTime<Utc>) -> String {
    t.to_rfc2822()
}

/// Parses a message `Date` header value.
pub fn parse_date(value: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc2822(value.trim())
        .ok()
        .map(|d| d.to_utc())
        .or_else(|| {
            DateTime::parse_from_rfc3339(value.trim())
                .ok()
                .map(|d| d.to_utc())
        })
}

/// Seconds-precision RFC 3339, used in traces and reports.
pub fn format_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn dom(s: &str) -> DomainName {
        DomainName::new(s).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2005, 3, 1, 10, 0, 0).unwrap()
    }

    fn stamp_peer(from: &str, by: &str) -> ReceivedStamp {
        ReceivedStamp {
            relay: dom(by),
            source: StampSource::Peer(dom(from)),
            timestamp: t0(),
        }
    }

    fn stamp_user(user: &str, by: &str) -> ReceivedStamp {
        ReceivedStamp {
            relay: dom(by),
            source: StampSource::AuthenticatedUser(user.to_string()),
            timestamp: t0(),
        }
    }

    #[test]
    fn stamp_value_round_trips() {
        for s in [stamp_peer("a.example", "b.example"), stamp_user("alice", "a.example")] {
            let back = ReceivedStamp::parse_value(&s.to_value()).unwrap();
            assert_eq!(s, back);
        }
    }

    #[test]
    fn foreign_received_values_parse_to_none() {
        for v in [
            "by mx.example (Postfix) id 123; Tue, 1 Mar 2005 10:00:00 +0000",
            "from x by y with esmtp",
            "garbage",
        ] {
            assert!(ReceivedStamp::parse_value(v).is_none(), "{v:?}");
        }
    }

    /// Message as it stands after s -> a -> b -> c, before c stamps it.
    fn chain_msg() -> MailMessage {
        let mut m = MailMessage::new()
            .with_header("Date", &format_date(t0()))
            .with_header("To", "dst@c.example")
            .with_header("From", "src@a.example");
        add_received_stamp(&mut m, &stamp_user("src", "a.example"));
        add_received_stamp(&mut m, &stamp_peer("a.example", "b.example"));
        m
    }

    #[test]
    fn strip_removes_own_stamp_and_everything_newer() {
        let mut m = chain_msg();
        add_received_stamp(&mut m, &stamp_peer("b.example", "c.example"));

        let at_b = strip_downstream_headers(&m, &dom("b.example")).unwrap();
        let values: Vec<_> = at_b.values(RECEIVED).collect();
        assert_eq!(values.len(), 1);
        assert!(values[0].contains("by a.example"));
        assert_eq!(at_b.single("From").unwrap(), "src@a.example");

        let at_a = strip_downstream_headers(&m, &dom("a.example")).unwrap();
        assert_eq!(at_a.values(RECEIVED).count(), 0);
    }

    #[test]
    fn strip_reproduces_ingress_state_exactly() {
        let ingress = chain_msg();
        let mut forwarded = ingress.clone();
        add_received_stamp(&mut forwarded, &stamp_peer("b.example", "c.example"));
        let back = strip_downstream_headers(&forwarded, &dom("c.example")).unwrap();
        assert_eq!(back, ingress);
    }

    #[test]
    fn strip_fails_off_path() {
        let m = chain_msg();
        assert_eq!(
            strip_downstream_headers(&m, &dom("z.example")),
            Err(PathError::RelayNotOnPath(dom("z.example")))
        );
    }

    #[test]
    fn upstream_hop_reads_own_stamp() {
        let m = chain_msg();
        assert_eq!(
            upstream_peer(&m, &dom("b.example")).unwrap(),
            UpstreamHop::Peer(dom("a.example"))
        );
        assert_eq!(
            upstream_peer(&m, &dom("a.example")).unwrap(),
            UpstreamHop::Origin("src".to_string())
        );
        assert!(upstream_peer(&m, &dom("c.example")).is_err());
    }

    #[test]
    fn origin_host_reads_oldest_stamp() {
        let m = chain_msg();
        assert_eq!(origin_host(&m), Some(dom("a.example")));
        let bare = MailMessage::new().with_header("To", "x@y.example");
        assert_eq!(origin_host(&bare), None);
    }

    #[test]
    fn opaque_foreign_stamps_are_skipped_not_fatal() {
        let mut m = chain_msg();
        m.insert_header_top(RECEIVED, "by legacy.example (qmail); some date")
            .unwrap();
        assert_eq!(
            upstream_peer(&m, &dom("b.example")).unwrap(),
            UpstreamHop::Peer(dom("a.example"))
        );
        // Stripping at b also discards the newer opaque stamp.
        let at_b = strip_downstream_headers(&m, &dom("b.example")).unwrap();
        assert_eq!(at_b.values(RECEIVED).count(), 1);
    }

    #[test]
    fn date_parsing_accepts_rfc2822() {
        let d = parse_date("Tue, 1 Mar 2005 10:00:00 +0000").unwrap();
        assert_eq!(d, t0());
        assert!(parse_date("not a date").is_none());
    }
}
