//! End-to-end proxy tests: a real proxy instance between an SMTP
//! client and mock slave and peer servers.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{TimeDelta, Utc};
use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};

use bulkmail_core::config::ProxyConfig;
use bulkmail_core::hashlog::LogStore;
use bulkmail_core::penalty::PeerLedger;
use bulkmail_core::received::{add_received_stamp, format_date, ReceivedStamp, StampSource};
use bulkmail_core::{DomainName, MailMessage};
use bulkmail_proxy::smtp::{read_data_body, read_line, write_line};
use bulkmail_proxy::{smtp_send, MailJob, Proxy, ProxyError, ProxyHandle, SmtpError};

type Seen = Arc<Mutex<Vec<(String, Vec<String>, Vec<u8>)>>>;

/// Minimal SMTP server capturing every (MAIL, RCPTs, body) it is sent.
async fn spawn_mock(data_reply: Option<(u16, String)>) -> (SocketAddr, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let seen: Seen = Arc::default();
    let captured = seen.clone();
    tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                break;
            };
            let reply = data_reply.clone();
            let seen = captured.clone();
            tokio::spawn(async move {
                let _ = serve_mock(stream, reply, seen).await;
            });
        }
    });
    (addr, seen)
}

async fn serve_mock(
    stream: TcpStream,
    data_reply: Option<(u16, String)>,
    seen: Seen,
) -> Result<(), SmtpError> {
    let (read_half, mut w) = stream.into_split();
    let mut r = BufReader::new(read_half);
    write_line(&mut w, "220 mock ready").await?;
    let mut from = String::new();
    let mut rcpts: Vec<String> = Vec::new();
    loop {
        let line = read_line(&mut r).await?;
        let text = String::from_utf8_lossy(&line).to_string();
        let upper = text.to_ascii_uppercase();
        let path = |s: &str| {
            s.split_once(':')
                .map(|(_, p)| p.trim().trim_matches(|c| c == '<' || c == '>').to_string())
                .unwrap_or_default()
        };
        if upper.starts_with("DATA") {
            write_line(&mut w, "354 go ahead").await?;
            let body = read_data_body(&mut r).await?;
            seen.lock().unwrap().push((from.clone(), rcpts.clone(), body));
            rcpts.clear();
            let (code, text) = data_reply.clone().unwrap_or((250, "queued".to_string()));
            write_line(&mut w, &format!("{code} {text}")).await?;
        } else if upper.starts_with("MAIL") {
            from = path(&text);
            write_line(&mut w, "250 ok").await?;
        } else if upper.starts_with("RCPT") {
            rcpts.push(path(&text));
            write_line(&mut w, "250 ok").await?;
        } else if upper.starts_with("QUIT") {
            write_line(&mut w, "221 bye").await?;
            return Ok(());
        } else if upper.starts_with("AUTH") {
            write_line(&mut w, "235 ok").await?;
        } else {
            write_line(&mut w, "250 mock").await?;
        }
    }
}

/// Config text: `top` lands among the top-level keys, `tail` after the
/// last section (so user keys or whole peer sections can be appended).
fn config_toml(slave: SocketAddr, top: &str, tail: &str) -> String {
    format!(
        "local_domain = \"home.example\"\n\
         listen_addr = \"127.0.0.1:0\"\n\
         slave_addr = \"{slave}\"\n\
         complaint_retry_base_secs = 1\n\
         {top}\n\
         [user.alice]\n\
         password = \"sesame\"\n\
         \n\
         [user.bob]\n\
         password = \"lemon\"\n\
         {tail}"
    )
}

async fn start(toml: &str, dir: &std::path::Path) -> ProxyHandle {
    let cfg = ProxyConfig::from_toml(toml, dir).unwrap();
    Proxy::spawn(cfg).await.unwrap()
}

fn basic_mail(from: &str, to: &str, age: TimeDelta) -> MailMessage {
    MailMessage::new()
        .with_header("Date", &format_date(Utc::now() - age))
        .with_header("To", to)
        .with_header("From", from)
        .with_header("Subject", "greetings")
        .with_body(b"hi there\r\n")
}

fn client_job(user: &str, pass: &str, rcpts: &[&str], msg: &MailMessage) -> MailJob {
    MailJob {
        helo: "workstation.home.example".to_string(),
        auth: Some((user.to_string(), pass.to_string())),
        mail_from: format!("{user}@home.example"),
        rcpts: rcpts.iter().map(|s| s.to_string()).collect(),
        body: msg.to_bytes(),
    }
}

fn peer_job(helo: &str, from: &str, rcpts: &[&str], body: Vec<u8>) -> MailJob {
    MailJob {
        helo: helo.to_string(),
        auth: None,
        mail_from: from.to_string(),
        rcpts: rcpts.iter().map(|s| s.to_string()).collect(),
        body,
    }
}

async fn wait_for(mut cond: impl FnMut() -> bool, what: &str) {
    for _ in 0..400 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("timed out waiting for {what}");
}

fn domain(s: &str) -> DomainName {
    DomainName::new(s).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn relays_client_mail_to_slave_with_stamp_and_log_entry() {
    let (slave, seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let proxy = start(&config_toml(slave, "", ""), dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::zero());
    let job = client_job("alice", "sesame", &["bob@home.example"], &msg);
    let reply = smtp_send(&addr, &job).await.unwrap();
    assert_eq!(reply.code, 250, "{}", reply.text);

    let (_, rcpts, body) = seen.lock().unwrap()[0].clone();
    assert_eq!(rcpts, vec!["bob@home.example".to_string()]);
    let delivered = MailMessage::parse(&body).unwrap();
    let stamps: Vec<&str> = delivered.values("Received").collect();
    assert_eq!(stamps.len(), 1);
    assert!(stamps[0].contains("by home.example"), "{}", stamps[0]);
    assert!(stamps[0].contains("esmtpa"), "{}", stamps[0]);
    assert_eq!(delivered.body(), &b"hi there\r\n"[..]);
    assert_eq!(proxy.node().log().len(), 1);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn stale_mail_refused_before_the_slave_sees_it() {
    let (slave, seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let proxy = start(&config_toml(slave, "", ""), dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::days(8));
    let job = client_job("alice", "sesame", &["bob@home.example"], &msg);
    let reply = smtp_send(&addr, &job).await.unwrap();
    assert_eq!(reply.code, 554, "{}", reply.text);
    assert!(seen.lock().unwrap().is_empty());
    assert_eq!(proxy.node().log().len(), 0);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn multi_recipient_logs_once_and_rate_counts_per_mailbox() {
    let (slave, seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let toml = config_toml(slave, "send_limit_per_week = 3\n", "");
    let proxy = start(&toml, dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail(
        "alice@home.example",
        "bob@home.example, carol@home.example",
        TimeDelta::zero(),
    );
    let two = client_job(
        "alice",
        "sesame",
        &["bob@home.example", "carol@home.example"],
        &msg,
    );
    assert_eq!(smtp_send(&addr, &two).await.unwrap().code, 250);
    assert_eq!(proxy.node().log().len(), 1, "one entry for two recipients");
    assert_eq!(seen.lock().unwrap()[0].1.len(), 2);

    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::zero());
    let one = client_job("alice", "sesame", &["bob@home.example"], &msg);
    assert_eq!(smtp_send(&addr, &one).await.unwrap().code, 250);

    // Two messages but three mailboxes: the weekly budget is spent.
    let reply = smtp_send(&addr, &one).await.unwrap();
    assert_eq!(reply.code, 452, "{}", reply.text);
    assert_eq!(proxy.node().log().len(), 2);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn complaint_travels_upstream_and_credits_the_ledger() {
    let (slave, slave_seen) = spawn_mock(None).await;
    let (upstream, up_seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let peer = format!(
        "\n[peer.\"up.example\"]\nrelationship = \"contracted\"\naddr = \"{upstream}\"\n"
    );
    let toml = config_toml(slave, "", &peer);
    let proxy = start(&toml, dir.path()).await;
    let addr = proxy.local_addr().to_string();

    // A peer hands over mail that already carries its own stamp.
    let mut injected = basic_mail("spammer@origin.example", "bob@home.example", TimeDelta::zero());
    add_received_stamp(
        &mut injected,
        &ReceivedStamp {
            relay: domain("up.example"),
            source: StampSource::Peer(domain("origin.example")),
            timestamp: Utc::now(),
        },
    );
    let job = peer_job(
        "up.example",
        "spammer@origin.example",
        &["bob@home.example"],
        injected.to_bytes(),
    );
    assert_eq!(smtp_send(&addr, &job).await.unwrap().code, 250);

    // The recipient complains with the message exactly as delivered.
    let (_, _, delivered) = slave_seen.lock().unwrap()[0].clone();
    let complaint = MailJob {
        helo: "workstation.home.example".to_string(),
        auth: Some(("bob".to_string(), "lemon".to_string())),
        mail_from: "bob@home.example".to_string(),
        rcpts: vec!["spamsink@home.example".to_string()],
        body: delivered.clone(),
    };
    let reply = smtp_send(&addr, &complaint).await.unwrap();
    assert_eq!(reply.code, 250, "{}", reply.text);

    // The courier carries it one hop upstream and settles the ledger.
    wait_for(|| up_seen.lock().unwrap().len() == 1, "upstream complaint").await;
    let (_, rcpts, _) = up_seen.lock().unwrap()[0].clone();
    assert_eq!(rcpts, vec!["spamsink@up.example".to_string()]);
    let up = domain("up.example");
    wait_for(|| proxy.node().ledger().balance(&up) > 0, "ledger credit").await;
    assert_eq!(
        proxy.node().ledger().balance(&up),
        proxy.node().config().rate.micro_penalty
    );
    // The slave never sees complaint traffic.
    assert_eq!(slave_seen.lock().unwrap().len(), 1);

    // Complaining twice about the same copy fails.
    let reply = smtp_send(&addr, &complaint).await.unwrap();
    assert_eq!(reply.code, 554, "{}", reply.text);
    assert!(reply.text.contains("duplicate"), "{}", reply.text);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_relay_refused_at_mail_not_at_greeting() {
    let (slave, _) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let proxy = start(&config_toml(slave, "", ""), dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail("x@stranger.example", "bob@home.example", TimeDelta::zero());
    let job = peer_job(
        "stranger.example",
        "x@stranger.example",
        &["bob@home.example"],
        msg.to_bytes(),
    );
    match smtp_send(&addr, &job).await {
        Err(SmtpError::Refused { phase, code, .. }) => {
            assert_eq!(phase, "MAIL", "EHLO itself stays polite");
            assert_eq!(code, 554);
        }
        other => panic!("expected refusal at MAIL, got {other:?}"),
    }

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn uncontracted_peer_over_budget_is_bounced_with_remedy() {
    let (slave, slave_seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let toml = config_toml(
        slave,
        "uncontracted_threshold = 1\ndead_letter = \"dead.letters\"\n",
        "\n[peer.\"rogue.example\"]\nrelationship = \"uncontracted\"\n",
    );
    let proxy = start(&toml, dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let mut injected = basic_mail("seller@rogue.example", "bob@home.example", TimeDelta::zero());
    add_received_stamp(
        &mut injected,
        &ReceivedStamp {
            relay: domain("rogue.example"),
            source: StampSource::Peer(domain("dialup.rogue.example")),
            timestamp: Utc::now(),
        },
    );
    let job = peer_job(
        "rogue.example",
        "seller@rogue.example",
        &["bob@home.example"],
        injected.to_bytes(),
    );
    assert_eq!(smtp_send(&addr, &job).await.unwrap().code, 250);

    let (_, _, delivered) = slave_seen.lock().unwrap()[0].clone();
    let complaint = MailJob {
        helo: "workstation.home.example".to_string(),
        auth: Some(("bob".to_string(), "lemon".to_string())),
        mail_from: "bob@home.example".to_string(),
        rcpts: vec!["spamsink@home.example".to_string()],
        body: delivered,
    };
    assert_eq!(smtp_send(&addr, &complaint).await.unwrap().code, 250);

    // No address on file for the rogue, so the complaint dead-letters,
    // but the attribution still counts against it.
    let dead = dir.path().join("dead.letters");
    wait_for(|| dead.exists(), "dead letter file").await;
    let text = std::fs::read_to_string(&dead).unwrap();
    assert!(text.contains("no_peer_address"), "{text}");

    match smtp_send(&addr, &job).await {
        Err(SmtpError::Refused { phase, code, text }) => {
            assert_eq!(phase, "EHLO");
            assert_eq!(code, 554);
            assert!(text.contains("remedy"), "{text}");
        }
        other => panic!("expected cut-off bounce at EHLO, got {other:?}"),
    }

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn list_mail_skips_the_log_and_drops_unsubscribed_mailboxes() {
    let (slave, slave_seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bob.policy"),
        "list freefood.348290 remailer.example\n",
    )
    .unwrap();
    let toml = config_toml(
        slave,
        "",
        "policy_file = \"bob.policy\"\n\n[peer.\"up.example\"]\nrelationship = \"contracted\"\n",
    );
    let proxy = start(&toml, dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let mut msg = MailMessage::new()
        .with_header("Date", &format_date(Utc::now()))
        .with_header("To", "bob@home.example, carol@home.example")
        .with_header("From", "announce@freefood.example")
        .with_header("X-Bulk-Mail", "LIST: freefood.348290")
        .with_body(b"free lunch today\r\n");
    // The oldest stamp records which remailer injected the list mail.
    add_received_stamp(
        &mut msg,
        &ReceivedStamp {
            relay: domain("up.example"),
            source: StampSource::Peer(domain("remailer.example")),
            timestamp: Utc::now(),
        },
    );
    let job = peer_job(
        "up.example",
        "announce@freefood.example",
        &["bob@home.example", "carol@home.example"],
        msg.to_bytes(),
    );
    assert_eq!(smtp_send(&addr, &job).await.unwrap().code, 250);

    // Only the subscriber's copy reaches the slave; nothing is logged.
    let (_, rcpts, delivered) = slave_seen.lock().unwrap()[0].clone();
    assert_eq!(rcpts, vec!["bob@home.example".to_string()]);
    assert_eq!(proxy.node().log().len(), 0);

    // List mail is whitelisted, not complainable.
    let complaint = MailJob {
        helo: "workstation.home.example".to_string(),
        auth: Some(("bob".to_string(), "lemon".to_string())),
        mail_from: "bob@home.example".to_string(),
        rcpts: vec!["spamsink@home.example".to_string()],
        body: delivered,
    };
    let reply = smtp_send(&addr, &complaint).await.unwrap();
    assert_eq!(reply.code, 554, "{}", reply.text);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn dot_stuffed_bodies_round_trip_exactly() {
    let (slave, seen) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let proxy = start(&config_toml(slave, "", ""), dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let body: &[u8] = b".leading dot\r\n..two dots\r\n.\t\r\nplain line\r\n";
    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::zero())
        .with_body(body);
    let job = client_job("alice", "sesame", &["bob@home.example"], &msg);
    assert_eq!(smtp_send(&addr, &job).await.unwrap().code, 250);

    let (_, _, captured) = seen.lock().unwrap()[0].clone();
    let delivered = MailMessage::parse(&captured).unwrap();
    assert_eq!(delivered.body(), body);

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn slave_rejection_reaches_the_client_verbatim() {
    let (slave, _) = spawn_mock(Some((552, "mailbox bulging".to_string()))).await;
    let dir = tempfile::tempdir().unwrap();
    let proxy = start(&config_toml(slave, "", ""), dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::zero());
    let job = client_job("alice", "sesame", &["bob@home.example"], &msg);
    let reply = smtp_send(&addr, &job).await.unwrap();
    assert_eq!(reply.code, 552);
    assert_eq!(reply.text, "mailbox bulging");

    proxy.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_dumps_a_restorable_snapshot_and_ledger_report() {
    let (slave, _) = spawn_mock(None).await;
    let dir = tempfile::tempdir().unwrap();
    let toml = config_toml(
        slave,
        "event_log = \"events.log\"\nlog_snapshot = \"log.snap\"\nledger_report = \"ledger.txt\"\n",
        "",
    );
    let proxy = start(&toml, dir.path()).await;
    let addr = proxy.local_addr().to_string();

    let msg = basic_mail("alice@home.example", "bob@home.example", TimeDelta::zero());
    let job = client_job("alice", "sesame", &["bob@home.example"], &msg);
    assert_eq!(smtp_send(&addr, &job).await.unwrap().code, 250);
    proxy.shutdown().await.unwrap();

    let mut snap = std::fs::File::open(dir.path().join("log.snap")).unwrap();
    let restored = LogStore::restore(&mut snap).unwrap();
    assert_eq!(restored.len(), 1);

    let report = std::fs::read_to_string(dir.path().join("ledger.txt")).unwrap();
    PeerLedger::from_report(&report).unwrap();

    let events = std::fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert!(events.contains("event=mail_forwarded"), "{events}");
}

#[tokio::test(flavor = "multi_thread")]
async fn startup_fails_when_the_slave_is_unreachable() {
    let dead = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let gone = dead.local_addr().unwrap();
    drop(dead);

    let dir = tempfile::tempdir().unwrap();
    let toml = config_toml(gone, "", "");
    let cfg = ProxyConfig::from_toml(&toml, dir.path()).unwrap();
    match Proxy::spawn(cfg).await {
        Err(ProxyError::SlaveUnreachable(..)) => {}
        Err(e) => panic!("wrong error: {e}"),
        Ok(_) => panic!("proxy started against a dead slave"),
    }
}
