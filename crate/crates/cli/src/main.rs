//! `bulkmail`: operator entry points for the relay proxy, the network
//! simulator, log and ledger inspection, filter testing, manual
//! complaint filing, and log-store benchmarks.
//!
//! Exit codes: 0 success, 1 operational failure (rejected complaint,
//! failed scenario expectation, unreadable input), 2 usage error.
//! Machine-readable output goes to stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chrono::{SecondsFormat, TimeDelta, Utc};
use clap::{Parser, Subcommand};

use bulkmail_core::config::ProxyConfig;
use bulkmail_core::digest::compute_digest;
use bulkmail_core::hashlog::LogStore;
use bulkmail_core::penalty::{PeerLedger, SPAMSINK};
use bulkmail_core::policy::{
    filter_decision, whitelist_check, FilterDecision, RecipientPolicy, WhitelistDecision,
};
use bulkmail_core::received::{add_received_stamp, format_date, ReceivedStamp, StampSource};
use bulkmail_core::{BulkClass, DomainName, HeaderDigest, MailMessage};
use bulkmail_proxy::{smtp_send, MailJob, Proxy};
use bulkmail_simnet::{run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "bulkmail", version, about = "Accountable bulk-mail relay tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the SMTP proxy described by a TOML config file.
    ProxyRun {
        config: PathBuf,
    },
    /// Execute a scenario file and print its metrics.
    SimRun {
        scenario: PathBuf,
        /// Seed for the scenario's random choices.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Look one digest up in a saved log snapshot.
    LogInspect {
        snapshot: PathBuf,
        /// 64 hex digits.
        digest: HeaderDigest,
    },
    /// Re-render a saved ledger report in canonical form.
    LedgerReport {
        state: PathBuf,
    },
    /// Apply a recipient policy file to one classification header value.
    FilterTest {
        rules: PathBuf,
        /// For example "ADV: rec.sports.swimming".
        header: String,
    },
    /// Fill a log store and print throughput and memory figures.
    BenchLog {
        entries: usize,
    },
    /// Submit a raw message file as a complaint to a running proxy.
    ComplaintFile {
        config: PathBuf,
        message: PathBuf,
        /// Complainant account; defaults to the first user in the config.
        #[arg(long)]
        user: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::ProxyRun { config } => cmd_proxy_run(&config),
        Cmd::SimRun { scenario, seed, trace } => cmd_sim_run(&scenario, seed, trace.as_deref()),
        Cmd::LogInspect { snapshot, digest } => cmd_log_inspect(&snapshot, &digest),
        Cmd::LedgerReport { state } => cmd_ledger_report(&state),
        Cmd::FilterTest { rules, header } => cmd_filter_test(&rules, &header),
        Cmd::BenchLog { entries } => cmd_bench_log(entries),
        Cmd::ComplaintFile { config, message, user } => {
            cmd_complaint_file(&config, &message, user.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("bulkmail: {msg}");
            ExitCode::from(1)
        }
    }
}

fn read_text(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_proxy_run(config: &Path) -> Result<ExitCode, String> {
    let cfg = ProxyConfig::load(config).map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async {
        let proxy = Proxy::spawn(cfg).await.map_err(|e| e.to_string())?;
        eprintln!("listening on {}; ctrl-c stops and dumps state", proxy.local_addr());
        tokio::signal::ctrl_c().await.map_err(|e| e.to_string())?;
        eprintln!("shutting down");
        proxy.shutdown().await.map_err(|e| e.to_string())?;
        Ok(ExitCode::SUCCESS)
    })
}

fn cmd_sim_run(scenario: &Path, seed: u64, trace: Option<&Path>) -> Result<ExitCode, String> {
    let text = read_text(scenario)?;
    let sc = Scenario::parse(&text).map_err(|e| e.to_string())?;
    let run = run_scenario(&sc, seed).map_err(|e| e.to_string())?;
    if let Some(path) = trace {
        fs::write(path, &run.trace).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    print!("scenario={}\nseed={seed}\n", run.name);
    print!("{}", run.metrics_text());
    if run.passed() {
        println!("result=pass");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("result=fail");
        for failure in &run.failures {
            eprintln!("failed: {failure}");
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_log_inspect(snapshot: &Path, digest: &HeaderDigest) -> Result<ExitCode, String> {
    let mut file =
        fs::File::open(snapshot).map_err(|e| format!("{}: {e}", snapshot.display()))?;
    let store = LogStore::restore(&mut file).map_err(|e| e.to_string())?;
    match store.peek(digest) {
        Some(entry) => {
            println!(
                "found peer={} logged_at={} complaint_filed={}",
                entry.peer,
                entry.logged_at.to_rfc3339_opts(SecondsFormat::Secs, true),
                entry.complaint_filed
            );
            Ok(ExitCode::SUCCESS)
        }
        None => {
            println!("absent");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_ledger_report(state: &Path) -> Result<ExitCode, String> {
    let text = read_text(state)?;
    let ledger = PeerLedger::from_report(&text)?;
    print!("{}", ledger.report());
    Ok(ExitCode::SUCCESS)
}

fn cmd_filter_test(rules: &Path, header: &str) -> Result<ExitCode, String> {
    let policy = RecipientPolicy::parse(&read_text(rules)?).map_err(|e| e.to_string())?;
    let class = BulkClass::parse_value(header).map_err(|e| e.to_string())?;
    let word = match &class {
        BulkClass::List(id) => match whitelist_check(id, None, &policy.whitelist) {
            WhitelistDecision::Allowed => "deliver",
            WhitelistDecision::Drop => "drop",
        },
        _ => match filter_decision(&class, &policy.rules) {
            FilterDecision::Deliver => "deliver",
            FilterDecision::Discard => "discard",
        },
    };
    println!("{word}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench_log(entries: usize) -> Result<ExitCode, String> {
    use rand::{RngCore, SeedableRng};

    if entries == 0 {
        return Err("entry count must be positive".to_string());
    }
    let now = Utc::now();
    let peer = DomainName::new("peer.example").expect("constant domain");

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xb01d);
    let mut digests = Vec::with_capacity(entries);
    for _ in 0..entries {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        digests.push(HeaderDigest(bytes));
    }

    let store = LogStore::with_capacity(TimeDelta::days(14), entries);
    let started = Instant::now();
    for digest in &digests {
        store.record(digest, &peer, now).map_err(|e| e.to_string())?;
    }
    let insert_secs = started.elapsed().as_secs_f64();

    let sample: Vec<&HeaderDigest> = digests
        .iter()
        .step_by((entries / 100_000).max(1))
        .collect();
    let started = Instant::now();
    let mut found = 0usize;
    for digest in &sample {
        if store.lookup(digest, now).is_some() {
            found += 1;
        }
    }
    let lookup_secs = started.elapsed().as_secs_f64();
    if found != sample.len() {
        return Err(format!("lookup mismatch: {found} of {}", sample.len()));
    }

    // Digest timing over a message of about 1 KB with a realistic
    // header chain.
    let mut msg = MailMessage::new()
        .with_header("Date", &format_date(now))
        .with_header("To", "one@a.example, two@b.example")
        .with_header("From", "sender@origin.example")
        .with_header("Subject", "benchmark payload");
    for relay in ["relay1.example", "relay2.example", "relay3.example"] {
        add_received_stamp(
            &mut msg,
            &ReceivedStamp {
                relay: DomainName::new(relay).expect("constant domain"),
                source: StampSource::Peer(peer.clone()),
                timestamp: now,
            },
        );
    }
    let header_len = msg.to_bytes().len();
    let msg = msg.with_body(&vec![b'x'; 1024usize.saturating_sub(header_len)]);
    let rounds = 10_000u32;
    let started = Instant::now();
    for _ in 0..rounds {
        compute_digest(&msg).map_err(|e| e.to_string())?;
    }
    let digest_secs = started.elapsed().as_secs_f64();

    println!("entries={entries}");
    println!("inserts_per_sec={:.0}", entries as f64 / insert_secs);
    println!(
        "bytes_per_entry={:.1}",
        store.memory_bytes() as f64 / entries as f64
    );
    println!(
        "mean_lookup_us={:.3}",
        lookup_secs * 1e6 / sample.len() as f64
    );
    println!("mean_digest_us={:.3}", digest_secs * 1e6 / f64::from(rounds));
    Ok(ExitCode::SUCCESS)
}

fn cmd_complaint_file(
    config: &Path,
    message: &Path,
    user: Option<&str>,
) -> Result<ExitCode, String> {
    let cfg = ProxyConfig::load(config).map_err(|e| e.to_string())?;
    let raw = fs::read(message).map_err(|e| format!("{}: {e}", message.display()))?;
    let user = match user {
        Some(name) => name.to_string(),
        None => cfg
            .users
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| "config declares no users".to_string())?,
    };
    let password = cfg
        .users
        .get(&user)
        .ok_or_else(|| format!("user {user} not in config"))?
        .password
        .clone();
    let local = cfg.local_domain.clone();
    let job = MailJob {
        helo: format!("cli.{local}"),
        auth: Some((user.clone(), password)),
        mail_from: format!("{user}@{local}"),
        rcpts: vec![format!("{SPAMSINK}@{local}")],
        body: raw,
    };
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let reply = rt
        .block_on(smtp_send(&cfg.listen_addr, &job))
        .map_err(|e| e.to_string())?;
    println!("{} {}", reply.code, reply.text);
    if reply.code == 250 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
