//! Relay configuration file: TOML keys for the proxy's addresses, the
//! economic knobs, peer relationships, and client accounts.
//!
//! ```toml
//! local_domain = "a.example"
//! listen_addr = "127.0.0.1:2525"
//! slave_addr = "127.0.0.1:2526"
//! micro_penalty_cents = 10
//! log_window_days = 14
//! age_limit_days = 7
//! send_limit_per_week = 100
//! complaint_limit = 10
//! complaint_window_days = 90
//! uncontracted_threshold = 100
//!
//! [peer."b.example"]
//! relationship = "contracted"
//! addr = "192.0.2.7:25"        # where to deliver forwarded complaints
//!
//! [user.alice]
//! password = "example"
//! policy_file = "alice.policy" # filters and list subscriptions
//! ```
//!
//! Policy files are resolved relative to the config file's directory.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use chrono::TimeDelta;
use serde::Deserialize;
use thiserror::Error;

use crate::addr::{AddrError, Cents, DomainName};
use crate::policy::{PolicyError, RateLimitConfig, RecipientPolicy};
use crate::relay::{PeerRelationship, RelayConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {0}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Addr(#[from] AddrError),
    #[error("{0}")]
    Policy(#[from] PolicyError),
    #[error("peer {0}: unknown relationship {1:?} (use \"contracted\" or \"uncontracted\")")]
    BadRelationship(String, String),
    #[error("peer {0}: bad source_ip {1:?}")]
    BadSourceIp(String, String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    local_domain: String,
    listen_addr: String,
    slave_addr: String,
    #[serde(default = "d_micro_penalty")]
    micro_penalty_cents: Cents,
    #[serde(default = "d_log_window")]
    log_window_days: u32,
    #[serde(default = "d_age_limit")]
    age_limit_days: u32,
    #[serde(default = "d_send_limit")]
    send_limit_per_week: u32,
    #[serde(default = "d_complaint_limit")]
    complaint_limit: u32,
    #[serde(default = "d_complaint_window")]
    complaint_window_days: u32,
    #[serde(default = "d_reset_fee")]
    reset_fee_cents: Cents,
    #[serde(default = "d_monthly_fee")]
    monthly_fee_cents: Cents,
    #[serde(default = "d_uncontracted_threshold")]
    uncontracted_threshold: u32,
    #[serde(default = "d_uncontracted_window")]
    uncontracted_window_days: u32,
    #[serde(default = "d_retry_base")]
    complaint_retry_base_secs: u64,
    event_log: Option<PathBuf>,
    log_snapshot: Option<PathBuf>,
    ledger_report: Option<PathBuf>,
    dead_letter: Option<PathBuf>,
    #[serde(default)]
    peer: BTreeMap<String, RawPeer>,
    #[serde(default)]
    user: BTreeMap<String, RawUser>,
}

fn d_micro_penalty() -> Cents {
    10
}
fn d_log_window() -> u32 {
    14
}
fn d_age_limit() -> u32 {
    7
}
fn d_send_limit() -> u32 {
    100
}
fn d_complaint_limit() -> u32 {
    10
}
fn d_complaint_window() -> u32 {
    90
}
fn d_reset_fee() -> Cents {
    100
}
fn d_monthly_fee() -> Cents {
    3000
}
fn d_uncontracted_threshold() -> u32 {
    100
}
fn d_uncontracted_window() -> u32 {
    30
}
fn d_retry_base() -> u64 {
    3600
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeer {
    relationship: String,
    addr: Option<String>,
    source_ip: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUser {
    password: String,
    policy_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PeerEntry {
    pub relationship: PeerRelationship,
    /// Where this peer's relay listens; needed to forward complaints.
    pub addr: Option<String>,
    /// When set, connections claiming this peer must come from here.
    pub source_ip: Option<IpAddr>,
}

#[derive(Debug, Clone)]
pub struct UserEntry {
    pub password: String,
    pub policy: RecipientPolicy,
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub local_domain: DomainName,
    pub listen_addr: String,
    pub slave_addr: String,
    pub rate: RateLimitConfig,
    pub max_mail_age: TimeDelta,
    pub uncontracted_threshold: u32,
    pub uncontracted_window: TimeDelta,
    pub complaint_retry_base_secs: u64,
    pub event_log: Option<PathBuf>,
    pub log_snapshot: Option<PathBuf>,
    pub ledger_report: Option<PathBuf>,
    pub dead_letter: Option<PathBuf>,
    pub peers: BTreeMap<DomainName, PeerEntry>,
    pub users: BTreeMap<String, UserEntry>,
}

impl ProxyConfig {
    pub fn load(path: &Path) -> Result<ProxyConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ProxyConfig::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<ProxyConfig, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;

        let rate = RateLimitConfig {
            send_limit_per_week: raw.send_limit_per_week,
            micro_penalty: raw.micro_penalty_cents,
            complaint_limit: raw.complaint_limit,
            complaint_window: TimeDelta::days(raw.complaint_window_days as i64),
            reset_fee: raw.reset_fee_cents,
            monthly_fee: raw.monthly_fee_cents,
            log_window: TimeDelta::days(raw.log_window_days as i64),
        };
        rate.validate()?;

        let mut peers = BTreeMap::new();
        for (name, p) in raw.peer {
            let domain = DomainName::new(&name)?;
            let relationship = match p.relationship.as_str() {
                "contracted" => PeerRelationship::Contracted,
                "uncontracted" => PeerRelationship::Uncontracted,
                other => {
                    return Err(ConfigError::BadRelationship(name, other.to_string()));
                }
            };
            let source_ip = match p.source_ip {
                None => None,
                Some(ip) => Some(
                    ip.parse::<IpAddr>()
                        .map_err(|_| ConfigError::BadSourceIp(name.clone(), ip))?,
                ),
            };
            peers.insert(
                domain,
                PeerEntry {
                    relationship,
                    addr: p.addr,
                    source_ip,
                },
            );
        }

        let mut users = BTreeMap::new();
        for (name, u) in raw.user {
            let policy = match u.policy_file {
                None => RecipientPolicy::default(),
                Some(rel) => {
                    let path = base_dir.join(rel);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| ConfigError::Io(path, e))?;
                    RecipientPolicy::parse(&text)?
                }
            };
            users.insert(
                name,
                UserEntry {
                    password: u.password,
                    policy,
                },
            );
        }

        Ok(ProxyConfig {
            local_domain: DomainName::new(&raw.local_domain)?,
            listen_addr: raw.listen_addr,
            slave_addr: raw.slave_addr,
            rate,
            max_mail_age: TimeDelta::days(raw.age_limit_days as i64),
            uncontracted_threshold: raw.uncontracted_threshold,
            uncontracted_window: TimeDelta::days(raw.uncontracted_window_days as i64),
            complaint_retry_base_secs: raw.complaint_retry_base_secs,
            event_log: raw.event_log.map(|p| base_dir.join(p)),
            log_snapshot: raw.log_snapshot.map(|p| base_dir.join(p)),
            ledger_report: raw.ledger_report.map(|p| base_dir.join(p)),
            dead_letter: raw.dead_letter.map(|p| base_dir.join(p)),
            peers,
            users,
        })
    }

    /// The node-logic portion of this configuration.
    pub fn relay_config(&self) -> RelayConfig {
        RelayConfig {
            local_domain: self.local_domain.clone(),
            rate: self.rate.clone(),
            max_mail_age: self.max_mail_age,
            uncontracted_threshold: self.uncontracted_threshold,
            uncontracted_window: self.uncontracted_window,
        }
    }
}
