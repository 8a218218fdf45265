//! Complaint validation and micro-penalty settlement.
//!
//! A complaint is the delivered message's headers, handed back along the
//! `Received` path one hop at a time. Each relay on the path strips what
//! was added downstream of it, recomputes the digest, and checks its own
//! log: present, inside the window, not yet complained about, and handed
//! to the very peer now complaining. Only then does money move: the
//! relay pays the complaining hop one micro-penalty and either forwards
//! the complaint to its own upstream (recovering the penalty there on
//! acceptance) or, if the mail came from its own client, charges that
//! client and notifies them.
//!
//! Validation runs to completion before the log entry is marked, so a
//! rejected complaint can never burn a message's one complaint.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::Mutex;
use thiserror::Error;

use crate::addr::{Cents, DomainName};
use crate::bulk::BulkClass;
use crate::digest::compute_digest;
use crate::events::{EventKind, RelayEvent};
use crate::hashlog::{ComplaintCheck, LogStore};
use crate::message::MailMessage;
use crate::policy::{ComplaintSanction, RateLimitConfig};
use crate::received::{parse_date, strip_downstream_headers, upstream_peer, UpstreamHop};

/// Mailbox local-part every participating relay intercepts complaints on.
pub const SPAMSINK: &str = "spamsink";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComplaintError {
    #[error("malformed complaint: {0}")]
    Malformed(String),
}

/// Where a complaint entered this relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComplaintSource {
    /// A peer relay on the downstream side of the mail's path.
    Downstream(DomainName),
    /// A local recipient redirecting a delivered message.
    LocalRecipient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The digest is not in the relay's window: never forwarded here,
    /// or the relay is not on the recorded path at all.
    NotInLog,
    /// This message's one complaint was already spent.
    Duplicate,
    /// The message is too old to complain about.
    TooOld,
    /// The complaining hop is not the hop the message was handed to.
    UnknownDownstream,
    /// Opt-in list mail: subscribers ceded the right to complain.
    ListMail,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::NotInLog => "not_in_log",
            RejectReason::Duplicate => "duplicate",
            RejectReason::TooOld => "too_old",
            RejectReason::UnknownDownstream => "unknown_downstream",
            RejectReason::ListMail => "list_mail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComplaintOutcome {
    /// Valid here; the next hop is a peer. The caller transports
    /// `complaint` (the message as this relay logged it at ingress) to
    /// `peer` and credits the ledger when that peer accepts.
    ForwardedUpstream {
        peer: DomainName,
        complaint: MailMessage,
    },
    /// Valid here and the mail came from this relay's own client: the
    /// penalty lands on that account and the chain ends.
    OriginSanctioned {
        user: String,
        sanction: ComplaintSanction,
    },
    Rejected(RejectReason),
}

/// Everything a complaint needs from the relay it runs at.
pub struct ComplaintContext<'a> {
    pub relay_id: &'a DomainName,
    pub log: &'a LogStore,
    pub ledger: &'a PeerLedger,
    pub cfg: &'a RateLimitConfig,
    /// The relay's ingress age limit for mail. A complaint dated older
    /// than the log window plus this cannot be valid anywhere on the
    /// path, because the mail could not have been logged that late.
    pub max_mail_age: TimeDelta,
}

/// Runs the complaint protocol at one relay.
///
/// `original` is the complained-about message as the complainant holds
/// it. For a local recipient that is the delivered message; for a peer
/// it is the header state that peer logged at its own ingress, which has
/// this relay's stamp on top.
///
/// When the chain ends here, `sanction_origin` is called with the
/// client named in the relay's own stamp; the caller registers the
/// complaint on that account and returns the sanction.
pub fn handle_complaint(
    ctx: &ComplaintContext<'_>,
    original: &MailMessage,
    from: &ComplaintSource,
    sanction_origin: &mut dyn FnMut(&str) -> ComplaintSanction,
    now: DateTime<Utc>,
    events: &mut Vec<RelayEvent>,
) -> Result<ComplaintOutcome, ComplaintError> {
    let reject = |reason: RejectReason, events: &mut Vec<RelayEvent>| {
        events.push(
            RelayEvent::new(EventKind::ComplaintRejected)
                .peer(source_label(from))
                .reason(reason.as_str()),
        );
        Ok(ComplaintOutcome::Rejected(reason))
    };

    // Subscribers to an opt-in list ceded the right to complain about it.
    match BulkClass::of_message(original) {
        Ok(class) if class.is_list() => return reject(RejectReason::ListMail, events),
        Ok(_) => {}
        Err(e) => return Err(ComplaintError::Malformed(e.to_string())),
    }

    // Age gate: older than the retention window plus the forwarding age
    // limit means no relay on the path can still hold the entry.
    let date_value = original
        .at_most_one("Date")
        .map_err(|e| ComplaintError::Malformed(e.to_string()))?
        .ok_or_else(|| ComplaintError::Malformed("complaint has no Date header".into()))?;
    let sent_at =
        parse_date(date_value).ok_or_else(|| ComplaintError::Malformed("bad Date header".into()))?;
    if now - sent_at > ctx.log.retention() + ctx.max_mail_age {
        return reject(RejectReason::TooOld, events);
    }

    // Reconstruct the message state this relay saw at ingress. Not being
    // on the recorded path is indistinguishable from never having
    // forwarded the message.
    let ingress = match strip_downstream_headers(original, ctx.relay_id) {
        Ok(m) => m,
        Err(_) => return reject(RejectReason::NotInLog, events),
    };
    let digest = compute_digest(&ingress).map_err(|e| ComplaintError::Malformed(e.to_string()))?;

    // Validate the complaining hop against the logged next hop before
    // spending the entry's one complaint.
    let entry = match ctx.log.lookup(&digest, now) {
        Some(e) => e,
        None => return reject(RejectReason::NotInLog, events),
    };
    let expected_hop = match from {
        ComplaintSource::Downstream(d) => d,
        ComplaintSource::LocalRecipient(_) => ctx.relay_id,
    };
    if &entry.peer != expected_hop {
        return reject(RejectReason::UnknownDownstream, events);
    }

    match ctx.log.check_and_mark(&digest, now) {
        ComplaintCheck::Accepted => {}
        ComplaintCheck::AlreadyComplained => return reject(RejectReason::Duplicate, events),
        ComplaintCheck::NotFound | ComplaintCheck::Expired => {
            return reject(RejectReason::NotInLog, events)
        }
    }

    events.push(
        RelayEvent::new(EventKind::ComplaintAccepted)
            .digest(digest.short())
            .peer(source_label(from)),
    );

    // The complaining hop gets paid by the relay that forwarded to it.
    if let ComplaintSource::Downstream(peer) = from {
        let balance = ctx.ledger.settle(peer, -ctx.cfg.micro_penalty);
        events.push(
            RelayEvent::new(EventKind::LedgerDebit)
                .digest(digest.short())
                .peer(peer)
                .amount(-ctx.cfg.micro_penalty)
                .info(format!("balance={balance}")),
        );
    }

    match upstream_peer(original, ctx.relay_id) {
        Ok(UpstreamHop::Peer(peer)) => {
            events.push(
                RelayEvent::new(EventKind::ComplaintForwarded)
                    .digest(digest.short())
                    .peer(&peer),
            );
            Ok(ComplaintOutcome::ForwardedUpstream {
                peer,
                complaint: ingress,
            })
        }
        Ok(UpstreamHop::Origin(user)) => {
            let sanction = sanction_origin(&user);
            events.push(
                RelayEvent::new(EventKind::SenderNotified)
                    .digest(digest.short())
                    .user(&user)
                    .amount(ctx.cfg.micro_penalty),
            );
            events.push(
                RelayEvent::new(match sanction {
                    ComplaintSanction::Warned => EventKind::SenderWarned,
                    ComplaintSanction::Terminated => EventKind::SenderTerminated,
                })
                .user(&user),
            );
            Ok(ComplaintOutcome::OriginSanctioned { user, sanction })
        }
        // Own stamp present (strip succeeded) but unreadable: treat as
        // structural damage to the complaint.
        Err(e) => Err(ComplaintError::Malformed(e.to_string())),
    }
}

/// Credits the upstream peer's side of an accepted forwarded complaint.
/// Called by the transport when the upstream relay accepts; an upstream
/// that never accepts (unreachable, not participating) leaves the cost
/// here, which is exactly the absorbed-penalty deployment story.
pub fn credit_upstream(
    ledger: &PeerLedger,
    peer: &DomainName,
    cfg: &RateLimitConfig,
    digest_short: &str,
    events: &mut Vec<RelayEvent>,
) {
    let balance = ledger.settle(peer, cfg.micro_penalty);
    events.push(
        RelayEvent::new(EventKind::LedgerCredit)
            .digest(digest_short.to_string())
            .peer(peer)
            .amount(cfg.micro_penalty)
            .info(format!("balance={balance}")),
    );
}

fn source_label(from: &ComplaintSource) -> String {
    match from {
        ComplaintSource::Downstream(d) => d.to_string(),
        ComplaintSource::LocalRecipient(u) => format!("local:{u}"),
    }
}

/// Default ingress age limit: mail dated older than this is refused.
pub const MAX_MAIL_AGE: TimeDelta = TimeDelta::days(7);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeCheck {
    Fresh,
    TooOld,
}

/// Ingress age gate: a message dated more than `limit` ago (or bearing
/// an unparseable date) is refused, so nothing can arrive near the end
/// of a relay's retention window and complaints always have most of the
/// window left to travel in.
pub fn check_age(date_value: &str, limit: TimeDelta, now: DateTime<Utc>) -> AgeCheck {
    match parse_date(date_value) {
        Some(sent_at) if now - sent_at <= limit => AgeCheck::Fresh,
        _ => AgeCheck::TooOld,
    }
}

// ---------------------------------------------------------------------------
// Peer ledger

/// Running balances with peer relays, in cents. Positive means the peer
/// owes this relay. Settlements from complaint handling come in penalty-
/// sized steps; the sum over a closed system of relays is zero because
/// every debit here is a credit on the peer's side.
#[derive(Debug, Default)]
pub struct PeerLedger {
    balances: Mutex<BTreeMap<DomainName, Cents>>,
}

impl PeerLedger {
    pub fn new() -> Self {
        PeerLedger::default()
    }

    /// Applies a signed amount to the peer's balance; returns the new
    /// balance.
    pub fn settle(&self, peer: &DomainName, amount: Cents) -> Cents {
        let mut balances = self.balances.lock();
        let balance = balances.entry(peer.clone()).or_insert(0);
        *balance += amount;
        *balance
    }

    pub fn balance(&self, peer: &DomainName) -> Cents {
        self.balances.lock().get(peer).copied().unwrap_or(0)
    }

    /// Sum of all balances: what the world owes this relay.
    pub fn net(&self) -> Cents {
        self.balances.lock().values().sum()
    }

    pub fn entries(&self) -> Vec<(DomainName, Cents)> {
        self.balances
            .lock()
            .iter()
            .map(|(d, c)| (d.clone(), *c))
            .collect()
    }

    /// One `peer balance_cents` line per peer, sorted by peer name.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (peer, cents) in self.entries() {
            writeln!(out, "{peer} {cents}").expect("string write");
        }
        out
    }

    /// Parses the `report` format back.
    pub fn from_report(text: &str) -> Result<PeerLedger, String> {
        let ledger = PeerLedger::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (peer, cents) = line
                .split_once(' ')
                .ok_or_else(|| format!("line {}: expected 'peer cents'", idx + 1))?;
            let peer = DomainName::new(peer).map_err(|e| format!("line {}: {e}", idx + 1))?;
            let cents: Cents = cents
                .trim()
                .parse()
                .map_err(|e| format!("line {}: {e}", idx + 1))?;
            ledger.settle(&peer, cents);
        }
        Ok(ledger)
    }
}
