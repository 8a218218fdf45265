//! Recipient filtering, opt-in whitelists, and per-client send and
//! complaint accounting.
//!
//! The economics live here: a client may send at most `send_limit` mails
//! per sliding week, each complaint costs the ISP a fixed micro-penalty
//! that is passed to the client, and an account that draws `complaint_limit`
//! complaints inside the complaint window is terminated. Together with
//! the relay's digest retention window this caps what one account can
//! ever cost: sends that can still draw complaints are those inside the
//! retention window, and the account dies one complaint before the limit
//! is passed on top of that.

use std::collections::VecDeque;

use chrono::{DateTime, TimeDelta, Utc};
use thiserror::Error;

use crate::addr::{Cents, DomainName};
use crate::bulk::{BulkClass, InterestGroup, ListId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy line {0}: {1}")]
    BadLine(usize, String),
    #[error("invalid rate configuration: {0}")]
    BadConfig(String),
    #[error("account is terminated")]
    AccountTerminated,
}

// ---------------------------------------------------------------------------
// Advertisement filters

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterAction {
    Keep,
    Discard,
}

/// One recipient rule: applies to an interest group and everything under
/// it. Earlier rules win, so specific keeps can precede broad discards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRule {
    pub prefix: InterestGroup,
    pub action: FilterAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Deliver,
    Discard,
}

/// Applies a recipient's rules to a classified message.
///
/// Personal and list mail always pass; list delivery is governed by the
/// whitelist instead. An advertisement is discarded only when every one
/// of its groups matches a discard rule first: a single group the
/// recipient has not filtered (or has kept) is enough to deliver.
pub fn filter_decision(class: &BulkClass, rules: &[FilterRule]) -> FilterDecision {
    let groups = match class {
        BulkClass::Advertisement(groups) => groups,
        BulkClass::Personal | BulkClass::List(_) => return FilterDecision::Deliver,
    };
    let all_discarded = groups.iter().all(|g| {
        rules
            .iter()
            .find(|r| r.prefix.covers(g))
            .is_some_and(|r| r.action == FilterAction::Discard)
    });
    if all_discarded {
        FilterDecision::Discard
    } else {
        FilterDecision::Deliver
    }
}

// ---------------------------------------------------------------------------
// Opt-in list whitelist

/// One subscription: the list id, optionally pinned to the remailer the
/// list is expected to arrive from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhitelistEntry {
    pub list_id: ListId,
    pub remailer: Option<DomainName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitelistDecision {
    Allowed,
    Drop,
}

/// List mail is delivered only to recipients subscribed to the list; a
/// subscription pinned to a remailer also requires the mail to have been
/// injected by that host.
pub fn whitelist_check(
    list_id: &ListId,
    injected_by: Option<&DomainName>,
    entries: &[WhitelistEntry],
) -> WhitelistDecision {
    let allowed = entries.iter().any(|e| {
        e.list_id == *list_id
            && match &e.remailer {
                None => true,
                Some(required) => injected_by == Some(required),
            }
    });
    if allowed {
        WhitelistDecision::Allowed
    } else {
        WhitelistDecision::Drop
    }
}

// ---------------------------------------------------------------------------
// Per-recipient policy files

/// A recipient's filter rules and subscriptions, in file order.
///
/// File format, one directive per line (`#` starts a comment):
///
/// ```text
/// discard rec.sports
/// keep rec.sports.sailing
/// list freefood.348290 remailer.example
/// ```
///
/// The remailer on a `list` line is optional; brackets around it are
/// tolerated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecipientPolicy {
    pub rules: Vec<FilterRule>,
    pub whitelist: Vec<WhitelistEntry>,
}

impl RecipientPolicy {
    pub fn parse(text: &str) -> Result<RecipientPolicy, PolicyError> {
        let mut policy = RecipientPolicy::default();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let verb = words.next().unwrap();
            let arg = words
                .next()
                .ok_or_else(|| PolicyError::BadLine(lineno, format!("{verb} needs an argument")))?;
            let bad = |msg: String| PolicyError::BadLine(lineno, msg);
            match verb {
                "discard" | "keep" => {
                    if words.next().is_some() {
                        return Err(bad(format!("{verb} takes one group")));
                    }
                    let prefix = InterestGroup::new(arg).map_err(|e| bad(e.to_string()))?;
                    let action = if verb == "keep" {
                        FilterAction::Keep
                    } else {
                        FilterAction::Discard
                    };
                    policy.rules.push(FilterRule { prefix, action });
                }
                "list" => {
                    let list_id = ListId::new(arg).map_err(|e| bad(e.to_string()))?;
                    let remailer = match words.next() {
                        None => None,
                        Some(host) => {
                            let host = host.trim_start_matches('[').trim_end_matches(']');
                            Some(DomainName::new(host).map_err(|e| bad(e.to_string()))?)
                        }
                    };
                    if words.next().is_some() {
                        return Err(bad("list takes an id and an optional remailer".into()));
                    }
                    policy.whitelist.push(WhitelistEntry { list_id, remailer });
                }
                other => return Err(bad(format!("unknown directive {other:?}"))),
            }
        }
        Ok(policy)
    }
}

// ---------------------------------------------------------------------------
// Rate limits, complaint sanctions, liability

/// The knobs that bound a client's sending and an ISP's exposure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateLimitConfig {
    /// Sends allowed per sliding week.
    pub send_limit_per_week: u32,
    /// What one validated complaint costs, in cents.
    pub micro_penalty: Cents,
    /// Complaints inside `complaint_window` that terminate the account.
    pub complaint_limit: u32,
    pub complaint_window: TimeDelta,
    /// Fee to reset the complaint counter instead of termination.
    pub reset_fee: Cents,
    /// What the client pays the ISP per month.
    pub monthly_fee: Cents,
    /// The relay's digest retention window; sends older than this can no
    /// longer draw complaints, which is what makes liability finite.
    pub log_window: TimeDelta,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        RateLimitConfig {
            send_limit_per_week: 100,
            micro_penalty: 10,
            complaint_limit: 10,
            complaint_window: TimeDelta::days(90),
            reset_fee: 100,
            monthly_fee: 3000,
            log_window: TimeDelta::days(14),
        }
    }
}

impl RateLimitConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.send_limit_per_week == 0 {
            return Err(PolicyError::BadConfig("send limit must be positive".into()));
        }
        if self.complaint_limit == 0 {
            return Err(PolicyError::BadConfig(
                "complaint limit must be positive".into(),
            ));
        }
        if self.micro_penalty <= 0 {
            return Err(PolicyError::BadConfig("penalty must be positive".into()));
        }
        if self.complaint_window <= TimeDelta::zero() || self.log_window <= TimeDelta::zero() {
            return Err(PolicyError::BadConfig("windows must be positive".into()));
        }
        if self.max_liability() > self.monthly_fee {
            return Err(PolicyError::BadConfig(format!(
                "worst-case liability {} exceeds monthly fee {}",
                self.max_liability(),
                self.monthly_fee
            )));
        }
        Ok(())
    }

    /// The most one account can ever owe in penalties, in cents.
    ///
    /// Complaints only land on sends still inside the log window, so at
    /// most `send_limit_per_week * weeks(log_window)` sends are exposed
    /// at once; beyond that the account is terminated one complaint
    /// before the limit, adding `complaint_limit - 1` penalties that can
    /// already have been charged in the complaint window.
    pub fn max_liability(&self) -> Cents {
        let weeks = weeks_covering(self.log_window);
        let exposed = self.send_limit_per_week as Cents * weeks;
        let pre_charged = (self.complaint_limit - 1) as Cents;
        (exposed + pre_charged) * self.micro_penalty
    }
}

/// How many sliding weeks of sends can coexist inside `window`.
fn weeks_covering(window: TimeDelta) -> Cents {
    let secs = window.num_seconds();
    let week = TimeDelta::days(7).num_seconds();
    (secs + week - 1) / week
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendAdmission {
    Admitted,
    RateLimited,
    AccountTerminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplaintSanction {
    /// Complaint counted and the client is notified.
    Warned,
    /// The complaint limit is reached: the account is terminated.
    Terminated,
}

/// One client's sliding send and complaint history.
///
/// Timestamps must arrive in non-decreasing order; both queues are
/// pruned against their windows on every call. An event exactly at the
/// window boundary still counts.
#[derive(Debug, Clone, Default)]
pub struct ClientAccount {
    sends: VecDeque<DateTime<Utc>>,
    complaints: VecDeque<DateTime<Utc>>,
    terminated: bool,
}

fn prune(queue: &mut VecDeque<DateTime<Utc>>, window: TimeDelta, now: DateTime<Utc>) {
    while let Some(&front) = queue.front() {
        if now - front > window {
            queue.pop_front();
        } else {
            break;
        }
    }
}

impl ClientAccount {
    pub fn new() -> Self {
        ClientAccount::default()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Asks to send one message to one recipient.
    pub fn admit_send(&mut self, now: DateTime<Utc>, cfg: &RateLimitConfig) -> SendAdmission {
        self.admit_sends(now, cfg, 1)
    }

    /// Asks to send one message to `recipients` recipients; each one
    /// counts against the weekly limit. Admission is all-or-nothing so a
    /// rejected message burns no quota.
    pub fn admit_sends(
        &mut self,
        now: DateTime<Utc>,
        cfg: &RateLimitConfig,
        recipients: u32,
    ) -> SendAdmission {
        if self.terminated {
            return SendAdmission::AccountTerminated;
        }
        prune(&mut self.sends, TimeDelta::days(7), now);
        if self.sends.len() as u64 + recipients as u64 > cfg.send_limit_per_week as u64 {
            return SendAdmission::RateLimited;
        }
        for _ in 0..recipients {
            self.sends.push_back(now);
        }
        SendAdmission::Admitted
    }

    /// Sends counted against the weekly limit right now.
    pub fn sends_in_window(&mut self, now: DateTime<Utc>) -> usize {
        prune(&mut self.sends, TimeDelta::days(7), now);
        self.sends.len()
    }

    /// Records one validated complaint against this client.
    pub fn register_complaint(
        &mut self,
        now: DateTime<Utc>,
        cfg: &RateLimitConfig,
    ) -> ComplaintSanction {
        prune(&mut self.complaints, cfg.complaint_window, now);
        self.complaints.push_back(now);
        if self.complaints.len() as u64 >= cfg.complaint_limit as u64 {
            self.terminated = true;
            ComplaintSanction::Terminated
        } else {
            ComplaintSanction::Warned
        }
    }

    pub fn complaints_in_window(&mut self, now: DateTime<Utc>, cfg: &RateLimitConfig) -> usize {
        prune(&mut self.complaints, cfg.complaint_window, now);
        self.complaints.len()
    }

    /// Clears the complaint counter for the reset fee. A terminated
    /// account stays terminated; only a new contract revives service.
    pub fn reset_counter(&mut self, cfg: &RateLimitConfig) -> Result<Cents, PolicyError> {
        if self.terminated {
            return Err(PolicyError::AccountTerminated);
        }
        self.complaints.clear();
        Ok(cfg.reset_fee)
    }
}
