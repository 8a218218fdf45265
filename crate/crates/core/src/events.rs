//! Structured events emitted by relay operations.
//!
//! Nothing is dropped or rejected silently: every decision that affects
//! a message, a complaint, a ledger, or an account produces one event.
//! Hosts decide where the lines go (a log file for the proxy, the trace
//! for the simulator). Field order in the rendered line is fixed so
//! traces compare byte-for-byte.

use std::fmt;

use crate::addr::Cents;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    MailForwarded,
    MailDelivered,
    MailRejected,
    MailDiscarded,
    MailDropped,
    ComplaintAccepted,
    ComplaintRejected,
    ComplaintForwarded,
    ComplaintDeadLetter,
    SenderNotified,
    SenderWarned,
    SenderTerminated,
    LedgerDebit,
    LedgerCredit,
    ConnectionRefused,
    ConnectionBounced,
    PeerCutOff,
    LogExpired,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::MailForwarded => "mail_forwarded",
            EventKind::MailDelivered => "mail_delivered",
            EventKind::MailRejected => "mail_rejected",
            EventKind::MailDiscarded => "mail_discarded",
            EventKind::MailDropped => "mail_dropped",
            EventKind::ComplaintAccepted => "complaint_accepted",
            EventKind::ComplaintRejected => "complaint_rejected",
            EventKind::ComplaintForwarded => "complaint_forwarded",
            EventKind::ComplaintDeadLetter => "complaint_dead_letter",
            EventKind::SenderNotified => "sender_notified",
            EventKind::SenderWarned => "sender_warned",
            EventKind::SenderTerminated => "sender_terminated",
            EventKind::LedgerDebit => "ledger_debit",
            EventKind::LedgerCredit => "ledger_credit",
            EventKind::ConnectionRefused => "connection_refused",
            EventKind::ConnectionBounced => "connection_bounced",
            EventKind::PeerCutOff => "peer_cut_off",
            EventKind::LogExpired => "log_expired",
        }
    }
}

/// One relay decision. Optional fields render only when present, in a
/// fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayEvent {
    pub kind: EventKind,
    pub digest: Option<String>,
    pub peer: Option<String>,
    pub user: Option<String>,
    pub reason: Option<String>,
    pub amount: Option<Cents>,
    pub info: Option<String>,
}

impl RelayEvent {
    pub fn new(kind: EventKind) -> Self {
        RelayEvent {
            kind,
            digest: None,
            peer: None,
            user: None,
            reason: None,
            amount: None,
            info: None,
        }
    }

    pub fn digest(mut self, short: impl Into<String>) -> Self {
        self.digest = Some(short.into());
        self
    }

    pub fn peer(mut self, peer: impl fmt::Display) -> Self {
        self.peer = Some(peer.to_string());
        self
    }

    pub fn user(mut self, user: impl Into<String>) -> Self {
        self.user = Some(user.into());
        self
    }

    pub fn reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = Some(reason.into());
        self
    }

    pub fn amount(mut self, cents: Cents) -> Self {
        self.amount = Some(cents);
        self
    }

    pub fn info(mut self, info: impl Into<String>) -> Self {
        self.info = Some(info.into());
        self
    }
}

impl fmt::Display for RelayEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event={}", self.kind.as_str())?;
        if let Some(d) = &self.digest {
            write!(f, " digest={d}")?;
        }
        if let Some(p) = &self.peer {
            write!(f, " peer={p}")?;
        }
        if let Some(u) = &self.user {
            write!(f, " user={u}")?;
        }
        if let Some(r) = &self.reason {
            write!(f, " reason={r}")?;
        }
        if let Some(a) = &self.amount {
            write!(f, " amount={a}")?;
        }
        if let Some(i) = &self.info {
            write!(f, " info={i}")?;
        }
        Ok(())
    }
}
