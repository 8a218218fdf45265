//! The proxy server: session handling, slave forwarding, spamsink
//! interception, complaint courier, and shutdown dumps.

use std::collections::VecDeque;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;
use std::sync::Arc;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use thiserror::Error;
use tokio::io::{AsyncWrite, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;
use tokio::time::{sleep_until, timeout, Instant};

use bulkmail_core::config::ProxyConfig;
use bulkmail_core::digest::compute_digest;
use bulkmail_core::events::{EventKind, RelayEvent};
use bulkmail_core::hashlog::SnapshotError;
use bulkmail_core::penalty::{ComplaintOutcome, SPAMSINK};
use bulkmail_core::received::format_date;
use bulkmail_core::relay::{
    ConnectionDecision, DeliveryDecision, MailSource, NextHop, RelayNode, RelayVerdict,
    SessionIdentity,
};
use bulkmail_core::{Address, DomainName, MailMessage};

use crate::smtp::{
    parse_command, read_data_body, read_line, write_line, Command, MailJob, SmtpError,
};

/// Sessions idle longer than this are closed.
const SESSION_IDLE: Duration = Duration::from_secs(300);

/// A complaint is retried this many times before dead-lettering.
const COMPLAINT_ATTEMPTS: u32 = 6;

/// How long shutdown waits for live sessions before cutting them off.
const DRAIN_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("slave at {0} not reachable: {1}")]
    SlaveUnreachable(String, SmtpError),
    #[error("snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
    #[error("proxy task lost")]
    TaskLost,
}

/// A complaint waiting to travel one hop upstream.
struct ComplaintJob {
    peer: DomainName,
    complaint: MailMessage,
    digest_short: String,
    attempt: u32,
}

/// Line-oriented event log; every relay event appends one line.
struct EventSink {
    file: Option<Mutex<std::fs::File>>,
}

impl EventSink {
    fn open(path: Option<&Path>) -> Result<EventSink, ProxyError> {
        let file = match path {
            None => None,
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
        };
        Ok(EventSink { file })
    }

    fn emit(&self, domain: &DomainName, events: &[RelayEvent]) {
        let Some(file) = &self.file else { return };
        let mut file = file.lock().expect("event sink poisoned");
        let ts = Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true);
        for ev in events {
            let _ = writeln!(file, "ts={ts} node={domain} {ev}");
        }
    }
}

struct Shared {
    cfg: ProxyConfig,
    node: Arc<RelayNode>,
    events: EventSink,
    jobs: mpsc::UnboundedSender<ComplaintJob>,
}

impl Shared {
    fn emit(&self, events: &[RelayEvent]) {
        self.events.emit(&self.cfg.local_domain, events);
    }
}

pub struct Proxy;

/// A running proxy; dropping it does not stop the server, call
/// [`ProxyHandle::shutdown`].
pub struct ProxyHandle {
    local_addr: SocketAddr,
    node: Arc<RelayNode>,
    stop: watch::Sender<bool>,
    done: tokio::task::JoinHandle<Result<(), ProxyError>>,
}

impl ProxyHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// The live relay state, for inspection by tests and tooling.
    pub fn node(&self) -> &RelayNode {
        &self.node
    }

    /// Stops accepting, drains sessions and pending complaints, then
    /// writes the configured log snapshot and ledger report.
    pub async fn shutdown(self) -> Result<(), ProxyError> {
        let _ = self.stop.send(true);
        self.done.await.map_err(|_| ProxyError::TaskLost)?
    }
}

impl Proxy {
    /// Binds the listener, verifies the slave answers, and starts
    /// serving in the background.
    pub async fn spawn(cfg: ProxyConfig) -> Result<ProxyHandle, ProxyError> {
        let listener = TcpListener::bind(&cfg.listen_addr).await?;
        let local_addr = listener.local_addr()?;

        probe_slave(&cfg.slave_addr).await?;

        let node = Arc::new(RelayNode::new(cfg.relay_config()));
        for (domain, peer) in &cfg.peers {
            node.add_peer(domain.clone(), peer.relationship);
        }
        for (name, user) in &cfg.users {
            node.add_user(name, user.policy.clone());
        }

        let events = EventSink::open(cfg.event_log.as_deref())?;
        let (jobs_tx, jobs_rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared {
            cfg,
            node: node.clone(),
            events,
            jobs: jobs_tx,
        });

        let (stop_tx, stop_rx) = watch::channel(false);
        let done = tokio::spawn(run_proxy(shared, listener, jobs_rx, stop_rx));

        Ok(ProxyHandle {
            local_addr,
            node,
            stop: stop_tx,
            done,
        })
    }
}

/// The slave must greet with 220 before the proxy opens for business.
async fn probe_slave(addr: &str) -> Result<(), ProxyError> {
    let check = async {
        let stream = TcpStream::connect(addr).await.map_err(SmtpError::Io)?;
        let (read_half, mut w) = stream.into_split();
        let mut r = BufReader::new(read_half);
        let reply = crate::smtp::read_reply(&mut r).await?;
        if reply.code != 220 {
            return Err(SmtpError::Refused {
                phase: "slave greeting",
                code: reply.code,
                text: reply.text,
            });
        }
        let _ = write_line(&mut w, "QUIT").await;
        Ok(())
    };
    match timeout(Duration::from_secs(10), check).await {
        Ok(Ok(())) => Ok(()),
        Ok(Err(e)) => Err(ProxyError::SlaveUnreachable(addr.to_string(), e)),
        Err(_) => Err(ProxyError::SlaveUnreachable(addr.to_string(), SmtpError::Timeout)),
    }
}

async fn run_proxy(
    shared: Arc<Shared>,
    listener: TcpListener,
    jobs_rx: mpsc::UnboundedReceiver<ComplaintJob>,
    mut stop: watch::Receiver<bool>,
) -> Result<(), ProxyError> {
    let (finish_tx, finish_rx) = watch::channel(false);
    let courier = tokio::spawn(run_courier(shared.clone(), jobs_rx, finish_rx));

    let mut sessions = JoinSet::new();
    loop {
        tokio::select! {
            _ = stop.changed() => break,
            accepted = listener.accept() => {
                let Ok((stream, peer_addr)) = accepted else { continue };
                let shared = shared.clone();
                sessions.spawn(async move {
                    let _ = Session::new(shared, peer_addr.ip()).run(stream).await;
                });
            }
        }
    }
    drop(listener);

    // Give live sessions a moment, then cut them loose.
    let drain = async {
        while sessions.join_next().await.is_some() {}
    };
    if timeout(DRAIN_GRACE, drain).await.is_err() {
        sessions.abort_all();
    }

    // Every accepted complaint is enqueued before its 250 goes out, so
    // once sessions are gone the channel holds everything outstanding.
    let _ = finish_tx.send(true);
    let _ = courier.await;

    write_dumps(&shared)
}

fn write_dumps(shared: &Shared) -> Result<(), ProxyError> {
    if let Some(path) = &shared.cfg.log_snapshot {
        let mut file = std::fs::File::create(path)?;
        shared.node.log().snapshot(&mut file)?;
    }
    if let Some(path) = &shared.cfg.ledger_report {
        std::fs::write(path, shared.node.ledger().report())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Complaint courier

/// Carries accepted complaints one hop upstream with exponential
/// backoff; at shutdown, everything still outstanding gets one final
/// attempt and then the dead-letter file.
async fn run_courier(
    shared: Arc<Shared>,
    mut rx: mpsc::UnboundedReceiver<ComplaintJob>,
    mut finish: watch::Receiver<bool>,
) {
    let mut pending: VecDeque<(Instant, ComplaintJob)> = VecDeque::new();
    loop {
        let next_due = pending.iter().map(|(at, _)| *at).min();
        tokio::select! {
            _ = finish.changed() => break,
            job = rx.recv() => {
                // The sender lives in Shared, which outlives us; recv
                // only yields jobs.
                if let Some(job) = job {
                    attempt_delivery(&shared, job, &mut pending, false).await;
                }
            }
            _ = async { sleep_until(next_due.unwrap()).await }, if next_due.is_some() => {
                let now = Instant::now();
                let mut i = 0;
                while i < pending.len() {
                    if pending[i].0 <= now {
                        let (_, job) = pending.remove(i).expect("index checked");
                        attempt_delivery(&shared, job, &mut pending, false).await;
                    } else {
                        i += 1;
                    }
                }
            }
        }
    }

    // Final sweep: whatever is queued or waiting on a timer gets one
    // more try, then the dead-letter file.
    while let Ok(job) = rx.try_recv() {
        attempt_delivery(&shared, job, &mut pending, true).await;
    }
    while let Some((_, job)) = pending.pop_front() {
        attempt_delivery(&shared, job, &mut pending, true).await;
    }
}

async fn attempt_delivery(
    shared: &Shared,
    job: ComplaintJob,
    pending: &mut VecDeque<(Instant, ComplaintJob)>,
    last_chance: bool,
) {
    let addr = shared
        .cfg
        .peers
        .get(&job.peer)
        .and_then(|p| p.addr.clone());
    let Some(addr) = addr else {
        dead_letter(shared, &job, "no_peer_address");
        return;
    };

    let local = &shared.cfg.local_domain;
    let wire = MailMessage::new()
        .with_header("Date", &format_date(Utc::now()))
        .with_header("To", &format!("{SPAMSINK}@{}", job.peer))
        .with_header("From", &format!("{SPAMSINK}@{local}"))
        .with_body(&job.complaint.header_block());
    let mail = MailJob {
        helo: local.to_string(),
        auth: None,
        mail_from: format!("{SPAMSINK}@{local}"),
        rcpts: vec![format!("{SPAMSINK}@{}", job.peer)],
        body: wire.to_bytes(),
    };

    match crate::smtp::smtp_send(&addr, &mail).await {
        Ok(reply) if reply.code == 250 => {
            let mut events = Vec::new();
            shared
                .node
                .upstream_accepted(&job.peer, &job.digest_short, &mut events);
            events.push(
                RelayEvent::new(EventKind::ComplaintForwarded)
                    .peer(&job.peer)
                    .digest(&job.digest_short),
            );
            shared.emit(&events);
        }
        Ok(_) => {
            // The upstream answered and said no; retrying would not
            // change its mind.
            dead_letter(shared, &job, "refused_upstream");
        }
        Err(_) if job.attempt + 1 < COMPLAINT_ATTEMPTS && !last_chance => {
            let backoff = shared.cfg.complaint_retry_base_secs.max(1) << job.attempt;
            let at = Instant::now() + Duration::from_secs(backoff);
            pending.push_back((
                at,
                ComplaintJob {
                    attempt: job.attempt + 1,
                    ..job
                },
            ));
        }
        Err(_) => {
            dead_letter(shared, &job, "unreachable");
        }
    }
}

/// Terminal failure: record the complaint for the operator and log it.
fn dead_letter(shared: &Shared, job: &ComplaintJob, reason: &str) {
    if let Some(path) = &shared.cfg.dead_letter {
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(
                f,
                "-- complaint for {} digest {} reason {reason}",
                job.peer, job.digest_short
            );
            let _ = f.write_all(&job.complaint.to_bytes());
            let _ = writeln!(f);
        }
    }
    shared.emit(&[RelayEvent::new(EventKind::ComplaintDeadLetter)
        .peer(&job.peer)
        .digest(&job.digest_short)
        .reason(reason.to_string())]);
}

// ---------------------------------------------------------------------------
// Sessions

/// Who the connection has proven to be.
enum Identity {
    /// Nothing proven yet: maybe a client about to AUTH, maybe an
    /// unknown relay that will be refused at MAIL.
    None,
    Peer(DomainName),
    User(String),
}

#[derive(Default)]
struct Envelope {
    mail_from: Option<String>,
    rcpts: Vec<Address>,
    spamsink: bool,
}

struct Session {
    shared: Arc<Shared>,
    source_ip: IpAddr,
    identity: Identity,
    envelope: Envelope,
}

impl Session {
    fn new(shared: Arc<Shared>, source_ip: IpAddr) -> Session {
        Session {
            shared,
            source_ip,
            identity: Identity::None,
            envelope: Envelope::default(),
        }
    }

    async fn run(mut self, stream: TcpStream) -> Result<(), SmtpError> {
        let (read_half, mut w) = stream.into_split();
        let mut r = BufReader::new(read_half);
        let domain = self.shared.cfg.local_domain.clone();
        write_line(&mut w, &format!("220 {domain} ESMTP proxy ready")).await?;

        loop {
            let line = match timeout(SESSION_IDLE, read_line(&mut r)).await {
                Err(_) => {
                    let _ = write_line(&mut w, "421 idle timeout").await;
                    return Ok(());
                }
                Ok(Err(SmtpError::Closed)) => return Ok(()),
                Ok(Err(e)) => return Err(e),
                Ok(Ok(line)) => line,
            };
            let command = parse_command(&String::from_utf8_lossy(&line));
            match command {
                Command::Helo(name) => {
                    if !self.greet(&mut w, &name, false).await? {
                        return Ok(());
                    }
                }
                Command::Ehlo(name) => {
                    if !self.greet(&mut w, &name, true).await? {
                        return Ok(());
                    }
                }
                Command::AuthPlain(payload) => self.auth(&mut w, &payload).await?,
                Command::Mail(path) => {
                    if !self.mail(&mut w, path).await? {
                        return Ok(());
                    }
                }
                Command::Rcpt(path) => self.rcpt(&mut w, &path).await?,
                Command::Data => self.data(&mut w, &mut r).await?,
                Command::Rset => {
                    self.envelope = Envelope::default();
                    write_line(&mut w, "250 ok").await?;
                }
                Command::Noop => write_line(&mut w, "250 ok").await?,
                Command::Quit => {
                    write_line(&mut w, "221 bye").await?;
                    return Ok(());
                }
                Command::Unknown(_) => {
                    write_line(&mut w, "502 command not implemented").await?;
                }
            }
        }
    }

    /// HELO/EHLO: resolve the peer identity from the announced name
    /// against the peer table; cut-off peers are bounced here. Returns
    /// false when the session must close.
    async fn greet<W: AsyncWrite + Unpin>(
        &mut self,
        w: &mut W,
        name: &str,
        extended: bool,
    ) -> Result<bool, SmtpError> {
        self.envelope = Envelope::default();
        let domain = &self.shared.cfg.local_domain;

        if let Ok(claimed) = DomainName::new(name) {
            if let Some(entry) = self.shared.cfg.peers.get(&claimed) {
                let ip_ok = entry.source_ip.map_or(true, |ip| ip == self.source_ip);
                if ip_ok {
                    let mut events = Vec::new();
                    let decision =
                        self.shared
                            .node
                            .admit_connection(&claimed, Utc::now(), &mut events);
                    self.shared.emit(&events);
                    match decision {
                        ConnectionDecision::Accept(_) => {
                            self.identity = Identity::Peer(claimed);
                        }
                        ConnectionDecision::BounceCutOff { remedy } => {
                            write_line(w, &format!("554 {remedy}")).await?;
                            return Ok(false);
                        }
                        ConnectionDecision::RefuseUnknown => {
                            // Configured but not yet known to the node;
                            // treated like any unknown connection.
                            self.identity = Identity::None;
                        }
                    }
                }
                // An address mismatch leaves the session unproven.
            }
        }

        if extended {
            write_line(w, &format!("250-{domain} greets {name}")).await?;
            write_line(w, "250 AUTH PLAIN").await?;
        } else {
            write_line(w, &format!("250 {domain}")).await?;
        }
        Ok(true)
    }

    async fn auth<W: AsyncWrite + Unpin>(
        &mut self,
        w: &mut W,
        payload: &str,
    ) -> Result<(), SmtpError> {
        use base64::Engine;
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(payload.trim())
            .unwrap_or_default();
        // PLAIN: authzid NUL authcid NUL password
        let mut parts = decoded.split(|&b| b == 0);
        let _authz = parts.next();
        let user = parts
            .next()
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default();
        let pass = parts
            .next()
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default();

        let ok = self
            .shared
            .cfg
            .users
            .get(&user)
            .is_some_and(|u| u.password == pass);
        if ok {
            self.identity = Identity::User(user);
            write_line(w, "235 authentication successful").await
        } else {
            write_line(w, "535 authentication failed").await
        }
    }

    /// MAIL: the point where an unproven session is refused, so an
    /// unknown relay moves on to its next MX entry. Returns false when
    /// the session must close.
    async fn mail<W: AsyncWrite + Unpin>(
        &mut self,
        w: &mut W,
        path: String,
    ) -> Result<bool, SmtpError> {
        if matches!(self.identity, Identity::None) {
            self.shared.emit(&[RelayEvent::new(EventKind::ConnectionRefused)
                .reason("unknown_peer")
                .info(format!("source={}", self.source_ip))]);
            write_line(w, "554 unknown peer: authenticate or arrange a peering contract").await?;
            return Ok(false);
        }
        if self.envelope.mail_from.is_some() {
            write_line(w, "503 nested MAIL").await?;
            return Ok(true);
        }
        self.envelope.mail_from = Some(path);
        write_line(w, "250 ok").await?;
        Ok(true)
    }

    async fn rcpt<W: AsyncWrite + Unpin>(
        &mut self,
        w: &mut W,
        path: &str,
    ) -> Result<(), SmtpError> {
        if self.envelope.mail_from.is_none() {
            return write_line(w, "503 MAIL first").await;
        }
        let Ok(addr) = Address::parse(path) else {
            return write_line(w, "553 unparseable address").await;
        };
        let local = &self.shared.cfg.local_domain;
        let is_sink = addr.local() == SPAMSINK && addr.domain() == local;

        if is_sink {
            if !self.envelope.rcpts.is_empty() {
                return write_line(w, "452 a complaint must be the only recipient").await;
            }
            self.envelope.spamsink = true;
            return write_line(w, "250 ok").await;
        }
        if self.envelope.spamsink {
            return write_line(w, "452 a complaint must be the only recipient").await;
        }
        if let Some(first) = self.envelope.rcpts.first() {
            if first.domain() != addr.domain() {
                return write_line(w, "452 one destination domain per message").await;
            }
        }
        self.envelope.rcpts.push(addr);
        write_line(w, "250 ok").await
    }

    async fn data<W: AsyncWrite + Unpin, R: tokio::io::AsyncBufRead + Unpin>(
        &mut self,
        w: &mut W,
        r: &mut R,
    ) -> Result<(), SmtpError> {
        if self.envelope.mail_from.is_none()
            || (self.envelope.rcpts.is_empty() && !self.envelope.spamsink)
        {
            return write_line(w, "503 need MAIL and RCPT first").await;
        }
        write_line(w, "354 end data with <CRLF>.<CRLF>").await?;
        let raw = match read_data_body(r).await {
            Ok(raw) => raw,
            Err(SmtpError::MessageTooLarge) => {
                self.envelope = Envelope::default();
                return write_line(w, "552 message too large").await;
            }
            Err(e) => return Err(e),
        };
        let envelope = std::mem::take(&mut self.envelope);
        let (code, text) = self.process(&envelope, &raw).await;
        write_line(w, &format!("{code} {text}")).await
    }

    /// Full handling of one finished DATA payload.
    async fn process(&mut self, envelope: &Envelope, raw: &[u8]) -> (u16, String) {
        let Ok(msg) = MailMessage::parse(raw) else {
            return (554, "malformed message".to_string());
        };
        if envelope.spamsink {
            self.process_complaint(&msg)
        } else {
            self.process_mail(envelope, &msg).await
        }
    }

    fn process_complaint(&self, msg: &MailMessage) -> (u16, String) {
        let who = match &self.identity {
            Identity::User(u) => SessionIdentity::User(u.clone()),
            Identity::Peer(d) => SessionIdentity::Peer(d.clone()),
            Identity::None => return (554, "unidentified session".to_string()),
        };
        let mut events = Vec::new();
        let outcome = self
            .shared
            .node
            .handle_spamsink(&who, msg, Utc::now(), &mut events);
        self.shared.emit(&events);
        match outcome {
            Err(e) => (554, format!("complaint rejected: {e}")),
            Ok(ComplaintOutcome::Rejected(reason)) => {
                (554, format!("complaint rejected: {}", reason.as_str()))
            }
            Ok(ComplaintOutcome::OriginSanctioned { .. }) => {
                (250, "complaint accepted; sender sanctioned".to_string())
            }
            Ok(ComplaintOutcome::ForwardedUpstream { peer, complaint }) => {
                let digest_short = compute_digest(&complaint)
                    .map(|d| d.short())
                    .unwrap_or_default();
                let _ = self.shared.jobs.send(ComplaintJob {
                    peer,
                    complaint,
                    digest_short,
                    attempt: 0,
                });
                (250, "complaint accepted; forwarding upstream".to_string())
            }
        }
    }

    async fn process_mail(&self, envelope: &Envelope, msg: &MailMessage) -> (u16, String) {
        let source = match &self.identity {
            Identity::User(u) => MailSource::Client(u.clone()),
            Identity::Peer(d) => MailSource::Peer(d.clone()),
            Identity::None => return (554, "unidentified session".to_string()),
        };
        let local = &self.shared.cfg.local_domain;
        let dest = envelope.rcpts[0].domain().clone();

        // Route first so a message that cannot leave is refused before
        // it burns quota or a log slot.
        let (next_hop, relay_addr) = if dest == *local {
            (NextHop::Local, self.shared.cfg.slave_addr.clone())
        } else {
            match self.shared.cfg.peers.get(&dest).and_then(|p| p.addr.clone()) {
                Some(addr) => (NextHop::Peer(dest.clone()), addr),
                None => return (554, format!("no route to {dest}")),
            }
        };

        let mut events = Vec::new();
        let verdict = self.shared.node.relay_message(
            &source,
            msg,
            envelope.rcpts.len() as u32,
            &next_hop,
            Utc::now(),
            &mut events,
        );
        self.shared.emit(&events);
        let stamped = match verdict {
            RelayVerdict::Reject { code, reason } => return (code, reason),
            RelayVerdict::Forward { stamped, .. } => stamped,
        };

        // At the final relay, list whitelists and advertisement
        // filters choose the mailboxes that actually receive a copy.
        let deliver_to: Vec<String> = if matches!(next_hop, NextHop::Local) {
            let mut keep = Vec::new();
            let mut events = Vec::new();
            for rcpt in &envelope.rcpts {
                let decision =
                    self.shared
                        .node
                        .final_delivery(&stamped, rcpt.local(), Utc::now(), &mut events);
                if matches!(decision, DeliveryDecision::Deliver) {
                    keep.push(rcpt.to_string());
                }
            }
            self.shared.emit(&events);
            keep
        } else {
            envelope.rcpts.iter().map(ToString::to_string).collect()
        };

        if deliver_to.is_empty() {
            return (250, "accepted; all copies withheld by recipient policy".to_string());
        }

        let job = MailJob {
            helo: local.to_string(),
            auth: None,
            mail_from: envelope.mail_from.clone().unwrap_or_default(),
            rcpts: deliver_to,
            body: stamped.to_bytes(),
        };
        match crate::smtp::smtp_send(&relay_addr, &job).await {
            // The next server's verdict, success or not, verbatim.
            Ok(reply) => (reply.code, reply.text),
            Err(SmtpError::Refused { code, text, .. }) => (code, text),
            Err(e) => {
                self.shared.emit(&[RelayEvent::new(EventKind::MailRejected)
                    .reason("relay_unreachable")
                    .info(e.to_string())]);
                (451, format!("downstream delivery failed: {e}"))
            }
        }
    }
}
