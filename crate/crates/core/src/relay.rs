//! Relay-side decision logic, shared by the SMTP proxy and the network
//! simulator.
//!
//! A `RelayNode` owns one relay's state: the digest log, the peer
//! ledger, client accounts and policies, and peer standing. Methods take
//! the current time and an event buffer and return decisions; hosts
//! execute the side effects (SMTP replies, forwarding, trace lines), so
//! the same node logic runs under tokio and under a virtual clock.

use std::collections::{BTreeMap, VecDeque};

use chrono::{DateTime, TimeDelta, Utc};
use parking_lot::Mutex;

use crate::addr::{Address, Cents, DomainName};
use crate::bulk::BulkClass;
use crate::digest::{compute_digest, HeaderDigest};
use crate::events::{EventKind, RelayEvent};
use crate::hashlog::LogStore;
use crate::message::MailMessage;
use crate::penalty::{
    check_age, credit_upstream, handle_complaint, AgeCheck, ComplaintContext, ComplaintError,
    ComplaintOutcome, ComplaintSource, PeerLedger, MAX_MAIL_AGE, SPAMSINK,
};
use crate::policy::{
    filter_decision, whitelist_check, ClientAccount, FilterDecision, PolicyError, RateLimitConfig,
    RecipientPolicy, SendAdmission, WhitelistDecision,
};
use crate::received::{add_received_stamp, origin_host, ReceivedStamp, StampSource};

/// Reply text a cut-off peer's connections are bounced with. Names the
/// ways back in, as required for a remedy notice.
pub const CUT_OFF_REMEDY: &str = "too many validated complaints about mail from your system; \
     remedy: have your provider adopt accountable bulk-mail handling, or move to a provider \
     that already has";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerRelationship {
    /// Signed the penalty contract: complaints settle on the ledger.
    Contracted,
    /// Tolerated without a contract, within a complaint budget.
    Uncontracted,
}

/// Knobs for one relay.
#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub local_domain: DomainName,
    pub rate: RateLimitConfig,
    /// Ingress age limit: mail dated older than this is refused.
    pub max_mail_age: TimeDelta,
    /// Accepted complaints an uncontracted peer may draw inside
    /// `uncontracted_window` before its connections are bounced.
    pub uncontracted_threshold: u32,
    pub uncontracted_window: TimeDelta,
}

impl RelayConfig {
    pub fn new(local_domain: DomainName) -> RelayConfig {
        RelayConfig {
            local_domain,
            rate: RateLimitConfig::default(),
            max_mail_age: MAX_MAIL_AGE,
            uncontracted_threshold: 100,
            uncontracted_window: TimeDelta::days(30),
        }
    }
}

/// Where a message entered this relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MailSource {
    Peer(DomainName),
    Client(String),
}

/// Where the relay is about to send it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextHop {
    /// A local mailbox on this relay.
    Local,
    Peer(DomainName),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnectionDecision {
    Accept(PeerRelationship),
    /// No relationship at all: the connection is refused outright.
    RefuseUnknown,
    /// Uncontracted peer over its complaint budget: bounce with remedy.
    BounceCutOff { remedy: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelayVerdict {
    /// Stamped and ready to hand to the next hop (or the local store).
    Forward {
        stamped: MailMessage,
        /// The ingress digest that was logged; `None` for list mail,
        /// which is never logged.
        digest: Option<HeaderDigest>,
    },
    /// Refused with an SMTP code and line.
    Reject { code: u16, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryDecision {
    Deliver,
    /// List mail the recipient has not whitelisted, dropped at the final
    /// relay only.
    DropUnsubscribedList,
    /// Advertisement matching the recipient's discard filters.
    DiscardFiltered,
}

/// Who is talking on a complaint-submission session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionIdentity {
    Peer(DomainName),
    User(String),
}

#[derive(Debug, Default)]
pub struct UserState {
    pub account: ClientAccount,
    pub policy: RecipientPolicy,
}

struct PeerState {
    relationship: PeerRelationship,
    accepted_complaints: VecDeque<DateTime<Utc>>,
    cut_off: bool,
}

pub struct RelayNode {
    cfg: RelayConfig,
    log: LogStore,
    ledger: PeerLedger,
    users: Mutex<BTreeMap<String, UserState>>,
    peers: Mutex<BTreeMap<DomainName, PeerState>>,
}

impl RelayNode {
    pub fn new(cfg: RelayConfig) -> RelayNode {
        let retention = cfg.rate.log_window;
        RelayNode {
            cfg,
            log: LogStore::new(retention),
            ledger: PeerLedger::new(),
            users: Mutex::new(BTreeMap::new()),
            peers: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &RelayConfig {
        &self.cfg
    }

    pub fn local_domain(&self) -> &DomainName {
        &self.cfg.local_domain
    }

    pub fn log(&self) -> &LogStore {
        &self.log
    }

    pub fn ledger(&self) -> &PeerLedger {
        &self.ledger
    }

    pub fn add_user(&self, name: &str, policy: RecipientPolicy) {
        self.users.lock().insert(
            name.to_string(),
            UserState {
                account: ClientAccount::new(),
                policy,
            },
        );
    }

    pub fn set_user_policy(&self, name: &str, policy: RecipientPolicy) {
        self.users.lock().entry(name.to_string()).or_default().policy = policy;
    }

    pub fn has_user(&self, name: &str) -> bool {
        self.users.lock().contains_key(name)
    }

    pub fn add_peer(&self, domain: DomainName, relationship: PeerRelationship) {
        self.peers.lock().insert(
            domain,
            PeerState {
                relationship,
                accepted_complaints: VecDeque::new(),
                cut_off: false,
            },
        );
    }

    pub fn peer_relationship(&self, domain: &DomainName) -> Option<PeerRelationship> {
        self.peers.lock().get(domain).map(|p| p.relationship)
    }

    /// The complaint mailbox every participating relay intercepts.
    pub fn complaint_address(&self) -> Address {
        Address::new(SPAMSINK, self.cfg.local_domain.clone()).expect("constant local part")
    }

    pub fn is_local(&self, addr: &Address) -> bool {
        addr.domain() == &self.cfg.local_domain
    }

    /// Gate for an incoming relay connection, by peer identity.
    pub fn admit_connection(
        &self,
        peer: &DomainName,
        _now: DateTime<Utc>,
        events: &mut Vec<RelayEvent>,
    ) -> ConnectionDecision {
        let peers = self.peers.lock();
        match peers.get(peer) {
            None => {
                events.push(
                    RelayEvent::new(EventKind::ConnectionRefused)
                        .peer(peer)
                        .reason("unknown_peer"),
                );
                ConnectionDecision::RefuseUnknown
            }
            Some(state) if state.cut_off => {
                events.push(
                    RelayEvent::new(EventKind::ConnectionBounced)
                        .peer(peer)
                        .reason("cut_off"),
                );
                ConnectionDecision::BounceCutOff {
                    remedy: CUT_OFF_REMEDY,
                }
            }
            Some(state) => ConnectionDecision::Accept(state.relationship),
        }
    }

    /// Full ingress processing for one message headed to one next hop.
    ///
    /// In order: age gate, classification, digest, sender admission (for
    /// local clients, all recipients or none), log record (except list
    /// mail), then the relay's own trace stamp. A rejected message is
    /// never logged and burns no client quota.
    pub fn relay_message(
        &self,
        source: &MailSource,
        msg: &MailMessage,
        rcpt_count: u32,
        next_hop: &NextHop,
        now: DateTime<Utc>,
        events: &mut Vec<RelayEvent>,
    ) -> RelayVerdict {
        let reject = |code: u16, kind: &str, detail: String, events: &mut Vec<RelayEvent>| {
            events.push(
                RelayEvent::new(EventKind::MailRejected)
                    .peer(source_label(source))
                    .reason(kind.to_string())
                    .info(detail.clone()),
            );
            RelayVerdict::Reject {
                code,
                reason: detail,
            }
        };

        if rcpt_count == 0 {
            return reject(503, "no_recipients", "no recipients given".into(), events);
        }

        let date_value = match msg.at_most_one("Date") {
            Ok(Some(v)) => v,
            Ok(None) => return reject(554, "malformed", "missing Date header".into(), events),
            Err(e) => return reject(554, "malformed", e.to_string(), events),
        };
        if check_age(date_value, self.cfg.max_mail_age, now) == AgeCheck::TooOld {
            return reject(
                554,
                "too_old",
                format!(
                    "message date exceeds the {}-day forwarding limit",
                    self.cfg.max_mail_age.num_days()
                ),
                events,
            );
        }

        let class = match BulkClass::of_message(msg) {
            Ok(c) => c,
            Err(e) => return reject(554, "malformed_bulk_header", e.to_string(), events),
        };

        let digest = match compute_digest(msg) {
            Ok(d) => d,
            Err(e) => return reject(554, "malformed", e.to_string(), events),
        };

        if let MailSource::Client(user) = source {
            let mut users = self.users.lock();
            let state = match users.get_mut(user) {
                Some(s) => s,
                None => return reject(550, "unknown_user", format!("no account {user}"), events),
            };
            match state.account.admit_sends(now, &self.cfg.rate, rcpt_count) {
                SendAdmission::Admitted => {}
                SendAdmission::RateLimited => {
                    return reject(
                        452,
                        "rate_limited",
                        format!(
                            "weekly send limit of {} reached",
                            self.cfg.rate.send_limit_per_week
                        ),
                        events,
                    )
                }
                SendAdmission::AccountTerminated => {
                    return reject(554, "account_terminated", "account terminated".into(), events)
                }
            }
        }

        let logged = if class.is_list() {
            None
        } else {
            let hop_domain = match next_hop {
                NextHop::Local => &self.cfg.local_domain,
                NextHop::Peer(d) => d,
            };
            if let Err(e) = self.log.record(&digest, hop_domain, now) {
                return reject(451, "log_unavailable", e.to_string(), events);
            }
            Some(digest)
        };

        let mut stamped = msg.clone();
        add_received_stamp(
            &mut stamped,
            &ReceivedStamp {
                relay: self.cfg.local_domain.clone(),
                source: match source {
                    MailSource::Peer(d) => StampSource::Peer(d.clone()),
                    MailSource::Client(u) => StampSource::AuthenticatedUser(u.clone()),
                },
                timestamp: now,
            },
        );

        events.push({
            let mut ev = RelayEvent::new(EventKind::MailForwarded)
                .peer(source_label(source))
                .info(format!(
                    "class={} next={}",
                    class_label(&class),
                    hop_label(next_hop)
                ));
            if let Some(d) = &logged {
                ev = ev.digest(d.short());
            }
            ev
        });

        RelayVerdict::Forward {
            stamped,
            digest: logged,
        }
    }

    /// Mailbox-time decision for one local recipient. Advertisement
    /// filters and list whitelists apply only here, at the final relay.
    pub fn final_delivery(
        &self,
        msg: &MailMessage,
        recipient: &str,
        _now: DateTime<Utc>,
        events: &mut Vec<RelayEvent>,
    ) -> DeliveryDecision {
        // Ingress already rejected malformed classifications; a message
        // that still fails here is delivered like personal mail rather
        // than vanishing.
        let class = BulkClass::of_message(msg).unwrap_or(BulkClass::Personal);
        let policy = {
            let users = self.users.lock();
            users
                .get(recipient)
                .map(|u| u.policy.clone())
                .unwrap_or_default()
        };
        match &class {
            BulkClass::Personal => {
                events.push(RelayEvent::new(EventKind::MailDelivered).user(recipient));
                DeliveryDecision::Deliver
            }
            BulkClass::List(id) => {
                let injected_by = origin_host(msg);
                match whitelist_check(id, injected_by.as_ref(), &policy.whitelist) {
                    WhitelistDecision::Allowed => {
                        events.push(
                            RelayEvent::new(EventKind::MailDelivered)
                                .user(recipient)
                                .info(format!("list={id}")),
                        );
                        DeliveryDecision::Deliver
                    }
                    WhitelistDecision::Drop => {
                        events.push(
                            RelayEvent::new(EventKind::MailDropped)
                                .user(recipient)
                                .reason("not_whitelisted")
                                .info(format!("list={id}")),
                        );
                        DeliveryDecision::DropUnsubscribedList
                    }
                }
            }
            BulkClass::Advertisement(_) => match filter_decision(&class, &policy.rules) {
                FilterDecision::Deliver => {
                    events.push(
                        RelayEvent::new(EventKind::MailDelivered)
                            .user(recipient)
                            .info("class=adv".to_string()),
                    );
                    DeliveryDecision::Deliver
                }
                FilterDecision::Discard => {
                    events.push(
                        RelayEvent::new(EventKind::MailDiscarded)
                            .user(recipient)
                            .reason("filtered"),
                    );
                    DeliveryDecision::DiscardFiltered
                }
            },
        }
    }

    /// Handles mail addressed to the spamsink mailbox: a complaint.
    ///
    /// From a local user, the submitted message is the delivered mail
    /// being complained about, redirected whole. From a peer, the body
    /// carries the original's header block. Accepted complaints
    /// attributed to an uncontracted upstream count toward cutting that
    /// peer off.
    pub fn handle_spamsink(
        &self,
        who: &SessionIdentity,
        submitted: &MailMessage,
        now: DateTime<Utc>,
        events: &mut Vec<RelayEvent>,
    ) -> Result<ComplaintOutcome, ComplaintError> {
        let (original, from) = match who {
            SessionIdentity::User(user) => {
                (submitted.clone(), ComplaintSource::LocalRecipient(user.clone()))
            }
            SessionIdentity::Peer(peer) => {
                let original = MailMessage::parse(submitted.body())
                    .map_err(|e| ComplaintError::Malformed(e.to_string()))?;
                (original, ComplaintSource::Downstream(peer.clone()))
            }
        };

        let ctx = ComplaintContext {
            relay_id: &self.cfg.local_domain,
            log: &self.log,
            ledger: &self.ledger,
            cfg: &self.cfg.rate,
            max_mail_age: self.cfg.max_mail_age,
        };
        let outcome = {
            let mut users = self.users.lock();
            let rate = &self.cfg.rate;
            let mut sanction = |user: &str| {
                users
                    .entry(user.to_string())
                    .or_default()
                    .account
                    .register_complaint(now, rate)
            };
            handle_complaint(&ctx, &original, &from, &mut sanction, now, events)?
        };

        if let ComplaintOutcome::ForwardedUpstream { peer, .. } = &outcome {
            self.note_complaint_attributed(peer, now, events);
        }
        Ok(outcome)
    }

    /// Ledger credit for a forwarded complaint the upstream accepted.
    pub fn upstream_accepted(
        &self,
        peer: &DomainName,
        digest_short: &str,
        events: &mut Vec<RelayEvent>,
    ) {
        credit_upstream(&self.ledger, peer, &self.cfg.rate, digest_short, events);
    }

    /// Counts an accepted complaint against an uncontracted upstream and
    /// cuts the peer off at the threshold.
    fn note_complaint_attributed(
        &self,
        peer: &DomainName,
        now: DateTime<Utc>,
        events: &mut Vec<RelayEvent>,
    ) {
        let mut peers = self.peers.lock();
        let Some(state) = peers.get_mut(peer) else {
            return;
        };
        if state.relationship != PeerRelationship::Uncontracted {
            return;
        }
        let window = self.cfg.uncontracted_window;
        while let Some(&front) = state.accepted_complaints.front() {
            if now - front > window {
                state.accepted_complaints.pop_front();
            } else {
                break;
            }
        }
        state.accepted_complaints.push_back(now);
        if !state.cut_off && state.accepted_complaints.len() as u64 >= self.cfg.uncontracted_threshold as u64
        {
            state.cut_off = true;
            events.push(
                RelayEvent::new(EventKind::PeerCutOff)
                    .peer(peer)
                    .info(format!(
                        "accepted_complaints={}",
                        state.accepted_complaints.len()
                    )),
            );
        }
    }

    /// Complaint count currently held against an uncontracted peer.
    pub fn uncontracted_complaints(&self, peer: &DomainName) -> usize {
        self.peers
            .lock()
            .get(peer)
            .map(|s| s.accepted_complaints.len())
            .unwrap_or(0)
    }

    /// Clears a client's complaint counter for the reset fee.
    pub fn reset_user_counter(&self, user: &str) -> Result<Cents, PolicyError> {
        let mut users = self.users.lock();
        let state = users
            .get_mut(user)
            .ok_or_else(|| PolicyError::BadConfig(format!("no account {user}")))?;
        state.account.reset_counter(&self.cfg.rate)
    }

    /// Sends the client has used inside the current week window.
    pub fn user_sends_in_window(&self, user: &str, now: DateTime<Utc>) -> usize {
        self.users
            .lock()
            .get_mut(user)
            .map(|s| s.account.sends_in_window(now))
            .unwrap_or(0)
    }

    pub fn user_is_terminated(&self, user: &str) -> bool {
        self.users
            .lock()
            .get(user)
            .map(|s| s.account.is_terminated())
            .unwrap_or(false)
    }

    /// Sweeps aged-out log entries; emits an event when anything went.
    pub fn expire_log(&self, now: DateTime<Utc>, events: &mut Vec<RelayEvent>) -> usize {
        let removed = self.log.expire(now);
        if removed > 0 {
            events.push(
                RelayEvent::new(EventKind::LogExpired).info(format!("removed={removed}")),
            );
        }
        removed
    }
}

fn source_label(source: &MailSource) -> String {
    match source {
        MailSource::Peer(d) => d.to_string(),
        MailSource::Client(u) => format!("client:{u}"),
    }
}

fn hop_label(hop: &NextHop) -> String {
    match hop {
        NextHop::Local => "local".to_string(),
        NextHop::Peer(d) => d.to_string(),
    }
}

fn class_label(class: &BulkClass) -> &'static str {
    match class {
        BulkClass::Personal => "personal",
        BulkClass::Advertisement(_) => "adv",
        BulkClass::List(_) => "list",
    }
}
