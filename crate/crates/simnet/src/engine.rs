//! Deterministic discrete-event execution of a parsed scenario.
//!
//! The engine owns one in-process `RelayNode` per participating domain
//! plus inert stand-ins for legacy domains, a virtual clock, and a
//! priority queue of pending work. Every observable step appends one
//! trace line; counters accumulate into a metric map that expectations
//! are checked against when the queue drains.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use bulkmail_core::bulk::BULK_HEADER;
use bulkmail_core::digest::compute_digest;
use bulkmail_core::events::{EventKind, RelayEvent};
use bulkmail_core::penalty::{ComplaintOutcome, SPAMSINK};
use bulkmail_core::policy::RecipientPolicy;
use bulkmail_core::received::{add_received_stamp, format_date, parse_date, ReceivedStamp, StampSource};
use bulkmail_core::relay::{
    ConnectionDecision, DeliveryDecision, MailSource, NextHop, PeerRelationship, RelayConfig,
    RelayNode, RelayVerdict, SessionIdentity,
};
use bulkmail_core::{Address, DomainName, MailMessage};

use crate::scenario::{Action, Decl, Expectation, LimitKnob, Scenario, SendSpec, SimError};

/// Hop budget per message; a topology needing more is misconfigured.
const MAX_HOPS: usize = 32;

/// Base retry delay for a complaint that could not reach its upstream.
const RETRY_BASE_SECS: i64 = 3600;

/// Retry delays cap at one day between attempts.
const RETRY_CAP_SECS: i64 = 86_400;

/// The outcome of one scenario run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    /// One line per event, newline-terminated; a pure function of the
    /// scenario text and the seed.
    pub trace: String,
    pub metrics: BTreeMap<String, i64>,
    /// Unmet expectations and failed attack checks, in occurrence order.
    pub failures: Vec<String>,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// The metric map rendered one `key=value` per line, sorted by key.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metrics {
            out.push_str(k);
            out.push('=');
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Runs a scenario to completion under a fixed seed.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<RunResult, SimError> {
    let mut eng = Engine::build(sc, seed)?;
    eng.run()?;
    Ok(eng.finish(sc))
}

/// Simulated start of time; every trace timestamp counts up from here.
pub(crate) fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2005, 3, 1, 0, 0, 0).unwrap()
}

/// First eight hex digits of the SHA-256 of a message body, used to
/// spot in-transit body swaps across trace lines.
pub(crate) fn body_fingerprint(body: &[u8]) -> String {
    hex::encode(&Sha256::digest(body)[..4])
}

pub(crate) struct SimNode {
    pub(crate) legacy: bool,
    /// Present exactly when the node participates in the protocol.
    pub(crate) relay: Option<RelayNode>,
}

/// Where a message walk ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum SendEnd {
    Delivered,
    Rejected {
        node: DomainName,
        code: u16,
        reason: String,
    },
    /// A cut-off upstream was bounced with the remedy notice; the walk
    /// stops because no alternative route may mask a sanction.
    Bounced {
        node: DomainName,
    },
    NoRoute {
        node: DomainName,
    },
}

/// Where a complaint chain ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ChainEnd {
    /// The chain walked back to the first relay, which sanctioned the
    /// origin account.
    Sanctioned { node: DomainName, user: String },
    Rejected { node: DomainName, reason: String },
    DeadLetter { node: DomainName, reason: String },
    /// Parked for retry behind a partition; a queued item owns it now.
    Deferred,
}

struct Queued {
    at: DateTime<Utc>,
    order: u64,
    item: QueuedItem,
}

enum QueuedItem {
    Script(Action),
    RetryComplaint {
        from: DomainName,
        to: DomainName,
        complaint: MailMessage,
        digest_short: String,
        attempt: u32,
    },
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.order == other.order
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

pub(crate) struct Engine {
    pub(crate) nodes: BTreeMap<DomainName, SimNode>,
    mx: BTreeMap<DomainName, Vec<DomainName>>,
    smarthost: BTreeMap<DomainName, DomainName>,
    partitions: BTreeSet<(DomainName, DomainName)>,
    /// Delivered copies keyed by (message id, mailbox, domain); the
    /// exact bytes a complaint would be filed over.
    pub(crate) delivered: BTreeMap<(String, String, DomainName), MailMessage>,
    /// Each message as it arrived at each node, before that node's own
    /// trace stamp.
    pub(crate) received_at: BTreeMap<(String, DomainName), MailMessage>,
    pub(crate) original_body: BTreeMap<String, Vec<u8>>,
    /// Body fingerprint per hop in arrival order, for tamper forensics.
    pub(crate) body_trail: BTreeMap<String, Vec<(DomainName, String)>>,
    /// One-shot body replacements armed by the body hijack attack.
    pub(crate) tamper: BTreeMap<DomainName, Vec<u8>>,
    trace: Vec<String>,
    pub(crate) metrics: BTreeMap<String, i64>,
    pub(crate) rng: ChaCha8Rng,
    epoch: DateTime<Utc>,
    pub(crate) now: DateTime<Utc>,
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    order: u64,
    msg_auto: u64,
    pub(crate) failures: Vec<String>,
}

impl Engine {
    fn build(sc: &Scenario, seed: u64) -> Result<Engine, SimError> {
        let epoch = sim_epoch();
        let mut eng = Engine {
            nodes: BTreeMap::new(),
            mx: BTreeMap::new(),
            smarthost: BTreeMap::new(),
            partitions: BTreeSet::new(),
            delivered: BTreeMap::new(),
            received_at: BTreeMap::new(),
            original_body: BTreeMap::new(),
            body_trail: BTreeMap::new(),
            tamper: BTreeMap::new(),
            trace: Vec::new(),
            metrics: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch,
            now: epoch,
            queue: BinaryHeap::new(),
            seq: 0,
            order: 0,
            msg_auto: 0,
            failures: Vec::new(),
        };

        // Limit overrides apply at node construction, so collect them
        // first regardless of where they appear in the file.
        let mut limits: BTreeMap<DomainName, Vec<(LimitKnob, i64)>> = BTreeMap::new();
        for decl in &sc.decls {
            if let Decl::Limit { domain, knob, value } = decl {
                limits.entry(domain.clone()).or_default().push((*knob, *value));
            }
        }

        for decl in &sc.decls {
            if let Decl::Node { domain, legacy } = decl {
                if eng.nodes.contains_key(domain) {
                    return Err(SimError::Build(format!("node {domain} declared twice")));
                }
                let relay = if *legacy {
                    None
                } else {
                    let mut cfg = RelayConfig::new(domain.clone());
                    for (knob, value) in limits.get(domain).map(Vec::as_slice).unwrap_or(&[]) {
                        match knob {
                            LimitKnob::Sends => cfg.rate.send_limit_per_week = *value as u32,
                            LimitKnob::Complaints => cfg.rate.complaint_limit = *value as u32,
                            LimitKnob::Cutoff => cfg.uncontracted_threshold = *value as u32,
                            LimitKnob::Penalty => cfg.rate.micro_penalty = *value,
                        }
                    }
                    Some(RelayNode::new(cfg))
                };
                eng.nodes.insert(
                    domain.clone(),
                    SimNode {
                        legacy: *legacy,
                        relay,
                    },
                );
            }
        }

        for domain in limits.keys() {
            match eng.nodes.get(domain) {
                None => return Err(SimError::Build(format!("limit for undeclared node {domain}"))),
                Some(n) if n.legacy => {
                    return Err(SimError::Build(format!("limit on legacy node {domain}")))
                }
                Some(_) => {}
            }
        }

        // Policy text accumulates per user in declaration order; the
        // relay parses the finished file once.
        let mut policies: BTreeMap<(DomainName, String), Vec<String>> = BTreeMap::new();
        for decl in &sc.decls {
            match decl {
                Decl::Node { .. } | Decl::Limit { .. } => {}
                Decl::User(addr) => {
                    if !eng.nodes.contains_key(addr.domain()) {
                        return Err(SimError::Build(format!(
                            "user {addr} on undeclared node {}",
                            addr.domain()
                        )));
                    }
                    policies
                        .entry((addr.domain().clone(), addr.local().to_string()))
                        .or_default();
                }
                Decl::Contract(a, b) | Decl::Uncontracted(a, b) => {
                    let rel = if matches!(decl, Decl::Contract(..)) {
                        PeerRelationship::Contracted
                    } else {
                        PeerRelationship::Uncontracted
                    };
                    if a == b {
                        return Err(SimError::Build(format!("{a} cannot peer with itself")));
                    }
                    for (x, y) in [(a, b), (b, a)] {
                        let node = eng.nodes.get(x).ok_or_else(|| {
                            SimError::Build(format!("peering references undeclared node {x}"))
                        })?;
                        if !eng.nodes.contains_key(y) {
                            return Err(SimError::Build(format!(
                                "peering references undeclared node {y}"
                            )));
                        }
                        if let Some(relay) = &node.relay {
                            relay.add_peer(y.clone(), rel);
                        }
                    }
                }
                Decl::Mx { dest, relays } => {
                    if !eng.nodes.contains_key(dest) {
                        return Err(SimError::Build(format!("mx for undeclared node {dest}")));
                    }
                    for r in relays {
                        if !eng.nodes.contains_key(r) {
                            return Err(SimError::Build(format!(
                                "mx for {dest} lists undeclared relay {r}"
                            )));
                        }
                    }
                    if eng.mx.insert(dest.clone(), relays.clone()).is_some() {
                        return Err(SimError::Build(format!("mx for {dest} declared twice")));
                    }
                }
                Decl::Smarthost { node, via } => {
                    for d in [node, via] {
                        if !eng.nodes.contains_key(d) {
                            return Err(SimError::Build(format!(
                                "smarthost references undeclared node {d}"
                            )));
                        }
                    }
                    if node == via {
                        return Err(SimError::Build(format!("{node} cannot smarthost to itself")));
                    }
                    if eng.smarthost.insert(node.clone(), via.clone()).is_some() {
                        return Err(SimError::Build(format!("smarthost for {node} declared twice")));
                    }
                }
                Decl::Whitelist { user, list, remailer } => {
                    let key = (user.domain().clone(), user.local().to_string());
                    let lines = policies.get_mut(&key).ok_or_else(|| {
                        SimError::Build(format!("whitelist for undeclared user {user}"))
                    })?;
                    lines.push(match remailer {
                        Some(r) => format!("list {list} {r}"),
                        None => format!("list {list}"),
                    });
                }
                Decl::Filter { user, line } => {
                    let key = (user.domain().clone(), user.local().to_string());
                    let lines = policies.get_mut(&key).ok_or_else(|| {
                        SimError::Build(format!("filter for undeclared user {user}"))
                    })?;
                    lines.push(line.clone());
                }
            }
        }

        for ((domain, local), lines) in &policies {
            let node = &eng.nodes[domain];
            match &node.relay {
                Some(relay) => {
                    let policy = RecipientPolicy::parse(&lines.join("\n")).map_err(|e| {
                        SimError::Build(format!("policy for {local}@{domain}: {e}"))
                    })?;
                    relay.add_user(local, policy);
                }
                None if lines.is_empty() => {}
                None => {
                    return Err(SimError::Build(format!(
                        "filter/whitelist for {local}@{domain} on a legacy node"
                    )))
                }
            }
        }

        for (offset, _, action) in &sc.events {
            eng.push_queue(epoch + *offset, QueuedItem::Script(action.clone()));
        }
        Ok(eng)
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(Reverse(q)) = self.queue.pop() {
            self.now = q.at;
            match q.item {
                QueuedItem::Script(action) => self.exec_action(&action)?,
                QueuedItem::RetryComplaint {
                    from,
                    to,
                    complaint,
                    digest_short,
                    attempt,
                } => {
                    self.deliver_complaint(&from, &to, complaint, &digest_short, attempt)?;
                }
            }
        }
        Ok(())
    }

    fn finish(mut self, sc: &Scenario) -> RunResult {
        let mut sum = 0i64;
        for (domain, node) in &self.nodes {
            if let Some(relay) = &node.relay {
                let net = relay.ledger().net();
                self.metrics.insert(format!("ledger.{domain}"), net);
                self.metrics.insert(format!("log.{domain}"), relay.log().len() as i64);
                sum += net;
            }
        }
        self.metrics.insert("ledger_sum".to_string(), sum);

        let mut trace = self.trace.join("\n");
        if !trace.is_empty() {
            trace.push('\n');
        }

        let mut failures = self.failures;
        for exp in &sc.expects {
            match exp {
                Expectation::Metric { key, op, value } => {
                    let actual = self.metrics.get(key).copied().unwrap_or(0);
                    if !op.holds(actual, *value) {
                        failures.push(format!(
                            "metric {key}: wanted {} {value}, got {actual}",
                            op.symbol()
                        ));
                    }
                }
                Expectation::TraceContains(needle) => {
                    if !trace.contains(needle) {
                        failures.push(format!("trace missing {needle:?}"));
                    }
                }
                Expectation::TraceLacks(needle) => {
                    if trace.contains(needle) {
                        failures.push(format!("trace must not contain {needle:?}"));
                    }
                }
            }
        }

        RunResult {
            name: sc.name.clone(),
            trace,
            metrics: self.metrics,
            failures,
        }
    }

    // -- plumbing ----------------------------------------------------------

    pub(crate) fn elapsed(&self) -> i64 {
        (self.now - self.epoch).num_seconds()
    }

    fn push_queue(&mut self, at: DateTime<Utc>, item: QueuedItem) {
        let order = self.order;
        self.order += 1;
        self.queue.push(Reverse(Queued { at, order, item }));
    }

    fn script_err(&self, msg: impl Into<String>) -> SimError {
        SimError::Script {
            at: self.elapsed(),
            msg: msg.into(),
        }
    }

    pub(crate) fn node(&self, domain: &DomainName) -> Result<&SimNode, SimError> {
        self.nodes
            .get(domain)
            .ok_or_else(|| self.script_err(format!("no such node {domain}")))
    }

    pub(crate) fn relay(&self, domain: &DomainName) -> Result<&RelayNode, SimError> {
        self.node(domain)?
            .relay
            .as_ref()
            .ok_or_else(|| self.script_err(format!("{domain} does not participate")))
    }

    pub(crate) fn ledger_net(&self, domain: &DomainName) -> i64 {
        self.nodes
            .get(domain)
            .and_then(|n| n.relay.as_ref())
            .map(|r| r.ledger().net())
            .unwrap_or(0)
    }

    pub(crate) fn fail(&mut self, msg: String) {
        self.failures.push(msg);
    }

    /// Position in the trace, for checking only lines emitted after it.
    pub(crate) fn trace_mark(&self) -> usize {
        self.trace.len()
    }

    pub(crate) fn trace_since(&self, mark: usize) -> String {
        self.trace[mark.min(self.trace.len())..].join("\n")
    }

    /// Appends one trace line for a relay event and bumps its counters.
    fn push_event(&mut self, node: &DomainName, ev: &RelayEvent) {
        let kind = ev.kind.as_str();
        *self.metrics.entry(format!("count.{kind}")).or_insert(0) += 1;
        if let Some(reason) = &ev.reason {
            *self
                .metrics
                .entry(format!("count.{kind}.{reason}"))
                .or_insert(0) += 1;
        }
        let line = format!("t={} seq={} node={} {}", self.elapsed(), self.seq, node, ev);
        self.seq += 1;
        self.trace.push(line);
    }

    fn drain(&mut self, node: &DomainName, events: Vec<RelayEvent>) {
        for ev in events {
            self.push_event(node, &ev);
        }
    }

    /// Appends an engine-level line in the same shape relay events use.
    pub(crate) fn push_raw(&mut self, node: &DomainName, text: String) {
        if let Some(rest) = text.strip_prefix("event=") {
            let kind = rest.split_whitespace().next().unwrap_or("");
            *self.metrics.entry(format!("count.{kind}")).or_insert(0) += 1;
            if let Some(pos) = text.find(" reason=") {
                let reason = text[pos + 8..].split_whitespace().next().unwrap_or("");
                *self
                    .metrics
                    .entry(format!("count.{kind}.{reason}"))
                    .or_insert(0) += 1;
            }
        }
        let line = format!("t={} seq={} node={} {}", self.elapsed(), self.seq, node, text);
        self.seq += 1;
        self.trace.push(line);
    }

    fn norm_pair(a: &DomainName, b: &DomainName) -> (DomainName, DomainName) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    fn is_partitioned(&self, a: &DomainName, b: &DomainName) -> bool {
        self.partitions.contains(&Self::norm_pair(a, b))
    }

    // -- script actions ----------------------------------------------------

    fn exec_action(&mut self, action: &Action) -> Result<(), SimError> {
        match action {
            Action::Send(spec) => {
                let msg_id = self.next_msg_id(spec);
                self.exec_send(spec, &msg_id)?;
            }
            Action::Complain { user, msg_id } => {
                self.exec_complain(user, msg_id)?;
            }
            Action::Attack(spec) => crate::attacks::execute(self, spec)?,
            Action::Partition(a, b) => {
                self.node(a)?;
                self.node(b)?;
                self.partitions.insert(Self::norm_pair(a, b));
                self.push_raw(a, format!("event=link_partitioned peer={b}"));
            }
            Action::Heal(a, b) => {
                self.partitions.remove(&Self::norm_pair(a, b));
                self.push_raw(a, format!("event=link_healed peer={b}"));
            }
            Action::Expire(domain) => {
                let relay = self.relay(domain)?;
                let mut ev = Vec::new();
                relay.expire_log(self.now, &mut ev);
                self.drain(domain, ev);
            }
        }
        Ok(())
    }

    pub(crate) fn next_msg_id(&mut self, spec: &SendSpec) -> String {
        match &spec.msg_id {
            Some(id) => id.clone(),
            None => self.fresh_msg_id(),
        }
    }

    pub(crate) fn fresh_msg_id(&mut self) -> String {
        self.msg_auto += 1;
        format!("m{}", self.msg_auto)
    }

    // -- sending -----------------------------------------------------------

    /// Submits a message at its origin and walks it hop by hop to the
    /// destination domain.
    pub(crate) fn exec_send(&mut self, spec: &SendSpec, msg_id: &str) -> Result<SendEnd, SimError> {
        let origin = spec.from.domain().clone();
        self.node(&origin)?;
        let dest = spec
            .rcpts
            .first()
            .ok_or_else(|| self.script_err("send with no recipients"))?
            .domain()
            .clone();

        let to_value = spec
            .rcpts
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let from_value = spec
            .from_header
            .clone()
            .unwrap_or_else(|| spec.from.to_string());
        let mut msg = MailMessage::new()
            .with_header("Date", &format_date(self.now + spec.date_offset))
            .with_header("To", &to_value)
            .with_header("From", &from_value)
            .with_header("Message-Id", &format!("<{msg_id}@{origin}>"))
            .with_body(&spec.body);
        if let Some(value) = spec.class.header_value() {
            msg = msg.with_header(BULK_HEADER, &value);
        }

        self.original_body.insert(msg_id.to_string(), spec.body.clone());
        self.body_trail.insert(msg_id.to_string(), Vec::new());

        let source = MailSource::Client(spec.from.local().to_string());
        self.walk_from(msg_id, msg, origin, source, &dest, &spec.rcpts)
    }

    /// Walks a message from `start` toward the recipients' domain. The
    /// attack that injects mail mid-path enters here directly.
    pub(crate) fn walk_from(
        &mut self,
        msg_id: &str,
        mut current: MailMessage,
        start: DomainName,
        mut source: MailSource,
        dest: &DomainName,
        rcpts: &[Address],
    ) -> Result<SendEnd, SimError> {
        let mut at = start;
        for _ in 0..MAX_HOPS {
            self.node(&at)?;
            self.received_at
                .insert((msg_id.to_string(), at.clone()), current.clone());
            let body_hex = body_fingerprint(current.body());
            self.body_trail
                .entry(msg_id.to_string())
                .or_default()
                .push((at.clone(), body_hex.clone()));

            // The next hop is probed before ingress so the log records
            // the peer that actually accepted the connection.
            let next = if at == *dest {
                NextHop::Local
            } else {
                match self.probe_route(&at, dest)? {
                    Probe::Via(via) => NextHop::Peer(via),
                    Probe::Bounced { node } => return Ok(SendEnd::Bounced { node }),
                    Probe::NoRoute => {
                        self.push_raw(
                            &at,
                            format!("event=mail_rejected reason=no_route info=dest:{dest}"),
                        );
                        return Ok(SendEnd::NoRoute { node: at });
                    }
                }
            };

            let participating = !self.node(&at)?.legacy;
            if participating {
                let (verdict, mut ev) = {
                    let relay = self.node(&at)?.relay.as_ref().expect("participating node");
                    let mut ev = Vec::new();
                    let v = relay.relay_message(
                        &source,
                        &current,
                        rcpts.len() as u32,
                        &next,
                        self.now,
                        &mut ev,
                    );
                    (v, ev)
                };
                for e in &mut ev {
                    if e.kind == EventKind::MailForwarded {
                        e.info = Some(match e.info.take() {
                            Some(info) => format!("{info} body={body_hex}"),
                            None => format!("body={body_hex}"),
                        });
                    }
                }
                self.drain(&at, ev);
                match verdict {
                    RelayVerdict::Reject { code, reason } => {
                        return Ok(SendEnd::Rejected {
                            node: at,
                            code,
                            reason,
                        })
                    }
                    RelayVerdict::Forward { stamped, .. } => current = stamped,
                }
            } else {
                // A legacy relay stamps and forwards but keeps no log
                // and applies no policy.
                let stamp_source = match &source {
                    MailSource::Peer(d) => StampSource::Peer(d.clone()),
                    MailSource::Client(u) => StampSource::AuthenticatedUser(u.clone()),
                };
                add_received_stamp(
                    &mut current,
                    &ReceivedStamp {
                        relay: at.clone(),
                        source: stamp_source,
                        timestamp: self.now,
                    },
                );
                self.push_raw(
                    &at,
                    format!(
                        "event=mail_forwarded peer={} info=class=legacy next={} body={body_hex}",
                        source_label(&source),
                        hop_label(&next),
                    ),
                );
            }

            if let Some(body) = self.tamper.remove(&at) {
                current.set_body(body);
            }

            match next {
                NextHop::Local => {
                    self.deliver_all(msg_id, &current, &at, rcpts)?;
                    return Ok(SendEnd::Delivered);
                }
                NextHop::Peer(via) => {
                    source = MailSource::Peer(at.clone());
                    at = via;
                }
            }
        }
        Err(self.script_err(format!("message {msg_id} exceeded {MAX_HOPS} hops")))
    }

    /// Picks the peer the current node hands the message to, honoring
    /// smarthost routes, destination relay lists, and link state.
    pub(crate) fn probe_route(
        &mut self,
        at: &DomainName,
        dest: &DomainName,
    ) -> Result<Probe, SimError> {
        let candidates: Vec<DomainName> = if let Some(via) = self.smarthost.get(at) {
            vec![via.clone()]
        } else {
            let mxl = self
                .mx
                .get(dest)
                .cloned()
                .unwrap_or_else(|| vec![dest.clone()]);
            if mxl.iter().any(|m| m == at) {
                // A listed relay for the destination hands off inward.
                vec![dest.clone()]
            } else {
                mxl
            }
        };

        for cand in candidates {
            if self.is_partitioned(at, &cand) {
                self.push_raw(
                    at,
                    format!("event=connection_refused peer={cand} reason=unreachable"),
                );
                continue;
            }
            let decision = {
                match &self.node(&cand)?.relay {
                    None => None,
                    Some(relay) => {
                        let mut ev = Vec::new();
                        let d = relay.admit_connection(at, self.now, &mut ev);
                        Some((d, ev))
                    }
                }
            };
            match decision {
                // Legacy systems accept mail from anybody.
                None => return Ok(Probe::Via(cand)),
                Some((d, ev)) => {
                    self.drain(&cand, ev);
                    match d {
                        ConnectionDecision::Accept(_) => return Ok(Probe::Via(cand)),
                        ConnectionDecision::RefuseUnknown => continue,
                        ConnectionDecision::BounceCutOff { remedy } => {
                            // The sender is told how to get mail moving
                            // again; no alternative route may mask it.
                            self.push_raw(
                                at,
                                format!("event=remedy_received peer={cand} info={remedy}"),
                            );
                            return Ok(Probe::Bounced { node: cand });
                        }
                    }
                }
            }
        }
        Ok(Probe::NoRoute)
    }

    fn deliver_all(
        &mut self,
        msg_id: &str,
        msg: &MailMessage,
        at: &DomainName,
        rcpts: &[Address],
    ) -> Result<(), SimError> {
        for rcpt in rcpts {
            if rcpt.domain() != at {
                self.push_raw(
                    at,
                    format!("event=mail_rejected user={} reason=wrong_domain", rcpt),
                );
                continue;
            }
            let participating = !self.node(at)?.legacy;
            if participating {
                let known = self.node(at)?.relay.as_ref().expect("participating").has_user(rcpt.local());
                if !known {
                    self.push_raw(
                        at,
                        format!("event=mail_rejected user={} reason=unknown_user", rcpt.local()),
                    );
                    continue;
                }
                let (decision, ev) = {
                    let relay = self.node(at)?.relay.as_ref().expect("participating");
                    let mut ev = Vec::new();
                    let d = relay.final_delivery(msg, rcpt.local(), self.now, &mut ev);
                    (d, ev)
                };
                self.drain(at, ev);
                if matches!(decision, DeliveryDecision::Deliver) {
                    self.store_delivery(msg_id, rcpt, msg);
                }
            } else {
                self.push_raw(at, format!("event=mail_delivered user={}", rcpt.local()));
                self.store_delivery(msg_id, rcpt, msg);
            }
        }
        Ok(())
    }

    fn store_delivery(&mut self, msg_id: &str, rcpt: &Address, msg: &MailMessage) {
        self.delivered.insert(
            (
                msg_id.to_string(),
                rcpt.local().to_string(),
                rcpt.domain().clone(),
            ),
            msg.clone(),
        );
        *self
            .metrics
            .entry(format!("inbox.{}.{}", rcpt.domain(), rcpt.local()))
            .or_insert(0) += 1;
    }

    // -- complaints ----------------------------------------------------------

    /// Files a complaint at the recipient's own relay and follows the
    /// chain upstream as far as it goes.
    pub(crate) fn exec_complain(
        &mut self,
        user: &Address,
        msg_id: &str,
    ) -> Result<ChainEnd, SimError> {
        let key = (
            msg_id.to_string(),
            user.local().to_string(),
            user.domain().clone(),
        );
        let copy = self
            .delivered
            .get(&key)
            .cloned()
            .ok_or_else(|| self.script_err(format!("{user} holds no delivered message {msg_id}")))?;
        let domain = user.domain().clone();

        if self.node(&domain)?.legacy {
            // Nowhere to file: the recipient's own provider does not
            // participate.
            let ev = RelayEvent::new(EventKind::ComplaintDeadLetter)
                .user(user.local())
                .reason("not_participating");
            self.push_event(&domain, &ev);
            return Ok(ChainEnd::DeadLetter {
                node: domain,
                reason: "not_participating".to_string(),
            });
        }

        let (outcome, ev) = {
            let relay = self.node(&domain)?.relay.as_ref().expect("participating");
            let mut ev = Vec::new();
            let o = relay.handle_spamsink(
                &SessionIdentity::User(user.local().to_string()),
                &copy,
                self.now,
                &mut ev,
            );
            (o, ev)
        };
        self.drain(&domain, ev);

        match outcome {
            Err(e) => {
                let ev = RelayEvent::new(EventKind::ComplaintRejected)
                    .user(user.local())
                    .reason("malformed")
                    .info(e.to_string());
                self.push_event(&domain, &ev);
                Ok(ChainEnd::Rejected {
                    node: domain,
                    reason: "malformed".to_string(),
                })
            }
            Ok(ComplaintOutcome::Rejected(r)) => Ok(ChainEnd::Rejected {
                node: domain,
                reason: r.as_str().to_string(),
            }),
            Ok(ComplaintOutcome::OriginSanctioned { user, .. }) => Ok(ChainEnd::Sanctioned {
                node: domain,
                user,
            }),
            Ok(ComplaintOutcome::ForwardedUpstream { peer, complaint }) => {
                let short = compute_digest(&complaint)
                    .map(|d| d.short())
                    .unwrap_or_default();
                self.deliver_complaint(&domain, &peer, complaint, &short, 0)
            }
        }
    }

    /// Carries a complaint one hop upstream, retrying through
    /// partitions while it can still arrive inside the upstream's
    /// complaint window, then follows any further forwarding.
    pub(crate) fn deliver_complaint(
        &mut self,
        from: &DomainName,
        to: &DomainName,
        complaint: MailMessage,
        digest_short: &str,
        attempt: u32,
    ) -> Result<ChainEnd, SimError> {
        if self.is_partitioned(from, to) {
            let (retention, age_limit) = {
                let relay = self.relay(from)?;
                (relay.log().retention(), relay.config().max_mail_age)
            };
            let deadline = complaint
                .single("Date")
                .ok()
                .and_then(parse_date)
                .map(|sent| sent + retention + age_limit);
            let delay = RETRY_BASE_SECS
                .saturating_mul(1 << attempt.min(5))
                .min(RETRY_CAP_SECS);
            let retry_at = self.now + TimeDelta::seconds(delay);
            return match deadline {
                Some(deadline) if retry_at <= deadline => {
                    self.push_raw(
                        from,
                        format!(
                            "event=complaint_retry peer={to} digest={digest_short} attempt={}",
                            attempt + 1
                        ),
                    );
                    self.push_queue(
                        retry_at,
                        QueuedItem::RetryComplaint {
                            from: from.clone(),
                            to: to.clone(),
                            complaint,
                            digest_short: digest_short.to_string(),
                            attempt: attempt + 1,
                        },
                    );
                    Ok(ChainEnd::Deferred)
                }
                _ => {
                    let ev = RelayEvent::new(EventKind::ComplaintDeadLetter)
                        .peer(to)
                        .digest(digest_short)
                        .reason("window_exhausted");
                    self.push_event(from, &ev);
                    Ok(ChainEnd::DeadLetter {
                        node: from.clone(),
                        reason: "window_exhausted".to_string(),
                    })
                }
            };
        }

        let dead = |reason: &str| {
            RelayEvent::new(EventKind::ComplaintDeadLetter)
                .peer(to)
                .digest(digest_short)
                .reason(reason.to_string())
        };

        let Some(to_node) = self.nodes.get(to) else {
            let ev = dead("no_such_relay");
            self.push_event(from, &ev);
            return Ok(ChainEnd::DeadLetter {
                node: from.clone(),
                reason: "no_such_relay".to_string(),
            });
        };
        if to_node.legacy {
            // The upstream never joined; the forwarder absorbs the
            // penalty it already paid downstream.
            let ev = dead("not_participating");
            self.push_event(from, &ev);
            return Ok(ChainEnd::DeadLetter {
                node: from.clone(),
                reason: "not_participating".to_string(),
            });
        }

        let (admit, ev) = {
            let relay = self.node(to)?.relay.as_ref().expect("participating");
            let mut ev = Vec::new();
            let d = relay.admit_connection(from, self.now, &mut ev);
            (d, ev)
        };
        self.drain(to, ev);
        let refusal = match admit {
            ConnectionDecision::Accept(_) => None,
            ConnectionDecision::RefuseUnknown => Some("connection_refused"),
            ConnectionDecision::BounceCutOff { .. } => Some("connection_bounced"),
        };
        if let Some(reason) = refusal {
            let ev = dead(reason);
            self.push_event(from, &ev);
            return Ok(ChainEnd::DeadLetter {
                node: from.clone(),
                reason: reason.to_string(),
            });
        }

        // The wire form a forwarding relay sends: the original's header
        // block as the body, addressed sink to sink.
        let wire = MailMessage::new()
            .with_header("Date", &format_date(self.now))
            .with_header("To", &format!("{SPAMSINK}@{to}"))
            .with_header("From", &format!("{SPAMSINK}@{from}"))
            .with_body(&complaint.header_block());

        let (outcome, ev) = {
            let relay = self.node(to)?.relay.as_ref().expect("participating");
            let mut ev = Vec::new();
            let o = relay.handle_spamsink(
                &SessionIdentity::Peer(from.clone()),
                &wire,
                self.now,
                &mut ev,
            );
            (o, ev)
        };
        self.drain(to, ev);

        let outcome = match outcome {
            Err(e) => {
                let ev = RelayEvent::new(EventKind::ComplaintRejected)
                    .peer(from)
                    .reason("malformed")
                    .info(e.to_string());
                self.push_event(to, &ev);
                return Ok(ChainEnd::Rejected {
                    node: to.clone(),
                    reason: "malformed".to_string(),
                });
            }
            Ok(o) => o,
        };
        if let ComplaintOutcome::Rejected(r) = &outcome {
            return Ok(ChainEnd::Rejected {
                node: to.clone(),
                reason: r.as_str().to_string(),
            });
        }

        // Acceptance settles the forwarder's ledger with its upstream.
        let mut ev = Vec::new();
        self.relay(from)?.upstream_accepted(to, digest_short, &mut ev);
        self.drain(from, ev);

        match outcome {
            ComplaintOutcome::OriginSanctioned { user, .. } => Ok(ChainEnd::Sanctioned {
                node: to.clone(),
                user,
            }),
            ComplaintOutcome::ForwardedUpstream { peer, complaint } => {
                let short = compute_digest(&complaint)
                    .map(|d| d.short())
                    .unwrap_or_default();
                self.deliver_complaint(to, &peer, complaint, &short, 0)
            }
            ComplaintOutcome::Rejected(_) => unreachable!("rejected handled above"),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Probe {
    Via(DomainName),
    Bounced { node: DomainName },
    NoRoute,
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
