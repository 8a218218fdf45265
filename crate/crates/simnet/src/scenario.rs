//! Scenario script parsing.
//!
//! A scenario file is line-oriented. Blank lines and `#` comments are
//! skipped. Declarations come first and build the topology; `@<time>`
//! lines are events on the virtual clock; `expect` lines are assertions
//! evaluated after the run.
//!
//! ```text
//! name two-hop
//! node a.example
//! node old.example legacy
//! user alice@a.example
//! contract a.example b.example
//! uncontracted b.example old.example
//! mx c.example strict.example permissive.example
//! smarthost a.example b.example
//! whitelist bob@b.example freefood.348290 via remailer.example
//! filter bob@b.example discard rec.sports
//! limit a.example cutoff 3
//! @0 send alice@a.example -> bob@b.example adv misc.offers id m1
//! @1h complain bob@b.example m1
//! @2h attack stale_mail alice@a.example bob@b.example
//! @3h partition a.example b.example
//! @4h heal a.example b.example
//! @5d expire a.example
//! expect metric count.mail_delivered = 1
//! expect trace contains "event=sender_notified"
//! ```
//!
//! Times and durations are digit/unit runs: `90s`, `15m`, `2h`, `13d`,
//! compounds like `7d1s`, or a bare integer meaning seconds.

use chrono::TimeDelta;
use thiserror::Error;

use bulkmail_core::bulk::BulkClass;
use bulkmail_core::{Address, DomainName};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("topology error: {0}")]
    Build(String),
    #[error("script error at t={at}s: {msg}")]
    Script { at: i64, msg: String },
}

/// Topology declarations, applied before the clock starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decl {
    Node {
        domain: DomainName,
        legacy: bool,
    },
    User(Address),
    Contract(DomainName, DomainName),
    Uncontracted(DomainName, DomainName),
    Mx {
        dest: DomainName,
        relays: Vec<DomainName>,
    },
    Smarthost {
        node: DomainName,
        via: DomainName,
    },
    Whitelist {
        user: Address,
        list: String,
        remailer: Option<DomainName>,
    },
    Filter {
        user: Address,
        line: String,
    },
    Limit {
        domain: DomainName,
        knob: LimitKnob,
        value: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKnob {
    /// `send_limit_per_week`
    Sends,
    /// `complaint_limit`
    Complaints,
    /// `uncontracted_threshold`
    Cutoff,
    /// micro-penalty in cents
    Penalty,
}

/// One outbound message. All recipients must share a destination
/// domain; separate domains are separate sends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendSpec {
    pub from: Address,
    /// `From` header value when it differs from the submitting account,
    /// as a forging sender would write.
    pub from_header: Option<String>,
    pub rcpts: Vec<Address>,
    pub class: BulkClass,
    pub msg_id: Option<String>,
    /// Offset applied to the `Date` header relative to the send time.
    pub date_offset: TimeDelta,
    pub body: Vec<u8>,
}

/// Scripted misbehavior with a built-in expected outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackSpec {
    /// Spam sent under a forged `From`; the trace path still reaches the
    /// real origin account.
    FakeReturnAddress { spammer: Address, rcpt: Address },
    /// A relay that never handled the message files a complaint about
    /// it; the victim rejects it without any ledger movement.
    OffPathComplaint {
        attacker: DomainName,
        victim: DomainName,
        msg_id: String,
    },
    /// The same recipient complains twice; the second filing is refused.
    DuplicateComplaint { user: Address, msg_id: String },
    /// Mail dated eight days back; refused at ingress with an error,
    /// never dropped silently.
    StaleMail { sender: Address, rcpt: Address },
    /// A relay on the path forges a complaint for mail it only
    /// forwarded; the upstream accepts it but the origin account is
    /// notified, leaving an audit trail.
    OnPathForgedComplaint { relay: DomainName, msg_id: String },
    /// A relay swaps the body in transit; the digest covers only
    /// headers, so delivery proceeds, but the hop-by-hop body hashes in
    /// the trace identify the tamperer.
    BodyHijack {
        sender: Address,
        rcpt: Address,
        tamperer: DomainName,
    },
    /// A relay injects spam under an invented client; complaints walk
    /// back to it and stop there, so it absorbs the whole penalty.
    ForgedSpamByRelay { relay: DomainName, rcpt: Address },
}

impl AttackSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::FakeReturnAddress { .. } => "fake_return_address",
            AttackSpec::OffPathComplaint { .. } => "off_path_complaint",
            AttackSpec::DuplicateComplaint { .. } => "duplicate_complaint",
            AttackSpec::StaleMail { .. } => "stale_mail",
            AttackSpec::OnPathForgedComplaint { .. } => "on_path_forged_complaint",
            AttackSpec::BodyHijack { .. } => "body_hijack",
            AttackSpec::ForgedSpamByRelay { .. } => "forged_spam_by_relay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(SendSpec),
    Complain { user: Address, msg_id: String },
    Attack(AttackSpec),
    Partition(DomainName, DomainName),
    Heal(DomainName, DomainName),
    Expire(DomainName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl MetricOp {
    pub fn holds(self, actual: i64, wanted: i64) -> bool {
        match self {
            MetricOp::Eq => actual == wanted,
            MetricOp::Ne => actual != wanted,
            MetricOp::Lt => actual < wanted,
            MetricOp::Le => actual <= wanted,
            MetricOp::Gt => actual > wanted,
            MetricOp::Ge => actual >= wanted,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            MetricOp::Eq => "=",
            MetricOp::Ne => "!=",
            MetricOp::Lt => "<",
            MetricOp::Le => "<=",
            MetricOp::Gt => ">",
            MetricOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Metric {
        key: String,
        op: MetricOp,
        value: i64,
    },
    TraceContains(String),
    TraceLacks(String),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub decls: Vec<Decl>,
    /// (time since epoch, script order, action)
    pub events: Vec<(TimeDelta, usize, Action)>,
    pub expects: Vec<Expectation>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, SimError> {
        let mut name = "scenario".to_string();
        let mut decls = Vec::new();
        let mut events = Vec::new();
        let mut expects = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| SimError::Parse { line: lineno, msg };

            if let Some(rest) = line.strip_prefix('@') {
                let (time, rest) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| err("expected an action after the time".into()))?;
                let at = parse_duration(time).map_err(err)?;
                let action = parse_action(rest.trim()).map_err(err)?;
                events.push((at, events.len(), action));
                continue;
            }

            let mut words = line.split_whitespace();
            let head = words.next().expect("non-empty line");
            let rest: Vec<&str> = words.collect();
            match head {
                "name" => {
                    name = rest.join(" ");
                    if name.is_empty() {
                        return Err(err("name needs a value".into()));
                    }
                }
                "expect" => expects.push(parse_expect(&rest, line).map_err(err)?),
                _ => decls.push(parse_decl(head, &rest).map_err(err)?),
            }
        }

        Ok(Scenario {
            name,
            decls,
            events,
            expects,
        })
    }
}

fn domain(s: &str) -> Result<DomainName, String> {
    DomainName::new(s).map_err(|e| e.to_string())
}

fn address(s: &str) -> Result<Address, String> {
    Address::parse(s).map_err(|e| e.to_string())
}

fn parse_decl(head: &str, rest: &[&str]) -> Result<Decl, String> {
    let need = |n: usize, usage: &str| -> Result<(), String> {
        if rest.len() < n {
            Err(format!("usage: {usage}"))
        } else {
            Ok(())
        }
    };
    match head {
        "node" => {
            need(1, "node <domain> [legacy]")?;
            let legacy = match rest.get(1) {
                None => false,
                Some(&"legacy") => true,
                Some(other) => return Err(format!("unknown node flag {other:?}")),
            };
            Ok(Decl::Node {
                domain: domain(rest[0])?,
                legacy,
            })
        }
        "user" => {
            need(1, "user <local>@<domain>")?;
            Ok(Decl::User(address(rest[0])?))
        }
        "contract" => {
            need(2, "contract <a> <b>")?;
            Ok(Decl::Contract(domain(rest[0])?, domain(rest[1])?))
        }
        "uncontracted" => {
            need(2, "uncontracted <a> <b>")?;
            Ok(Decl::Uncontracted(domain(rest[0])?, domain(rest[1])?))
        }
        "mx" => {
            need(2, "mx <dest> <relay>...")?;
            let dest = domain(rest[0])?;
            let relays = rest[1..]
                .iter()
                .map(|r| domain(r))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Decl::Mx { dest, relays })
        }
        "smarthost" => {
            need(2, "smarthost <node> <via>")?;
            Ok(Decl::Smarthost {
                node: domain(rest[0])?,
                via: domain(rest[1])?,
            })
        }
        "whitelist" => {
            need(2, "whitelist <user> <list-id> [via <remailer>]")?;
            let remailer = match rest.get(2) {
                None => None,
                Some(&"via") => Some(domain(
                    rest.get(3).ok_or("missing remailer after 'via'")?,
                )?),
                Some(other) => return Err(format!("unexpected token {other:?}")),
            };
            Ok(Decl::Whitelist {
                user: address(rest[0])?,
                list: rest[1].to_string(),
                remailer,
            })
        }
        "filter" => {
            need(3, "filter <user> discard|keep <group>")?;
            if rest[1] != "discard" && rest[1] != "keep" {
                return Err(format!("filter action must be discard or keep, got {:?}", rest[1]));
            }
            Ok(Decl::Filter {
                user: address(rest[0])?,
                line: format!("{} {}", rest[1], rest[2]),
            })
        }
        "limit" => {
            need(3, "limit <domain> sends|complaints|cutoff|penalty <n>")?;
            let knob = match rest[1] {
                "sends" => LimitKnob::Sends,
                "complaints" => LimitKnob::Complaints,
                "cutoff" => LimitKnob::Cutoff,
                "penalty" => LimitKnob::Penalty,
                other => return Err(format!("unknown limit knob {other:?}")),
            };
            let value: i64 = rest[2]
                .parse()
                .map_err(|_| format!("bad limit value {:?}", rest[2]))?;
            if value <= 0 {
                return Err("limit value must be positive".into());
            }
            Ok(Decl::Limit {
                domain: domain(rest[0])?,
                knob,
                value,
            })
        }
        other => Err(format!("unknown directive {other:?}")),
    }
}

fn parse_action(rest: &str) -> Result<Action, String> {
    let mut words = rest.split_whitespace();
    let verb = words.next().ok_or("empty action")?;
    let args: Vec<&str> = words.collect();
    match verb {
        "send" => parse_send(rest).map(Action::Send),
        "complain" => {
            if args.len() != 2 {
                return Err("usage: complain <user>@<domain> <msg-id>".into());
            }
            Ok(Action::Complain {
                user: address(args[0])?,
                msg_id: args[1].to_string(),
            })
        }
        "attack" => parse_attack(&args).map(Action::Attack),
        "partition" | "heal" => {
            if args.len() != 2 {
                return Err(format!("usage: {verb} <a> <b>"));
            }
            let (a, b) = (domain(args[0])?, domain(args[1])?);
            Ok(if verb == "partition" {
                Action::Partition(a, b)
            } else {
                Action::Heal(a, b)
            })
        }
        "expire" => {
            if args.len() != 1 {
                return Err("usage: expire <domain>".into());
            }
            Ok(Action::Expire(domain(args[0])?))
        }
        other => Err(format!("unknown action {other:?}")),
    }
}

/// `send <from> -> <rcpt>[,<rcpt>] [personal|adv <groups>|list <id>]
/// [id <token>] [date <±duration>] [body <rest of line>]`
fn parse_send(line: &str) -> Result<SendSpec, String> {
    let mut words = line.split_whitespace().peekable();
    words.next(); // "send"
    let from = address(words.next().ok_or("send needs a sender")?)?;
    if words.next() != Some("->") {
        return Err("expected '->' after the sender".into());
    }
    let rcpt_list = words.next().ok_or("send needs recipients")?;
    let rcpts = rcpt_list
        .split(',')
        .map(address)
        .collect::<Result<Vec<_>, _>>()?;
    if rcpts.is_empty() {
        return Err("send needs at least one recipient".into());
    }
    let dest = rcpts[0].domain().clone();
    if rcpts.iter().any(|r| r.domain() != &dest) {
        return Err("all recipients of one send must share a domain; split the send".into());
    }

    let mut spec = SendSpec {
        from,
        from_header: None,
        rcpts,
        class: BulkClass::Personal,
        msg_id: None,
        date_offset: TimeDelta::zero(),
        body: b"hello".to_vec(),
    };
    while let Some(word) = words.next() {
        match word {
            "personal" => spec.class = BulkClass::Personal,
            "adv" => {
                let groups = words.next().ok_or("adv needs interest groups")?;
                spec.class = BulkClass::parse_value(&format!("ADV: {groups}"))
                    .map_err(|e| e.to_string())?;
            }
            "list" => {
                let id = words.next().ok_or("list needs an identifier")?;
                spec.class =
                    BulkClass::parse_value(&format!("LIST: {id}")).map_err(|e| e.to_string())?;
            }
            "id" => spec.msg_id = Some(words.next().ok_or("id needs a token")?.to_string()),
            "date" => {
                spec.date_offset = parse_signed_duration(words.next().ok_or("date needs ±duration")?)?
            }
            "body" => {
                let mut remaining: Vec<&str> = Vec::new();
                for w in words.by_ref() {
                    remaining.push(w);
                }
                spec.body = remaining.join(" ").into_bytes();
            }
            other => return Err(format!("unknown send option {other:?}")),
        }
    }
    Ok(spec)
}

fn parse_attack(args: &[&str]) -> Result<AttackSpec, String> {
    let kind = args.first().ok_or("attack needs a kind")?;
    let args = &args[1..];
    let need = |n: usize, usage: &str| -> Result<(), String> {
        if args.len() != n {
            Err(format!("usage: attack {usage}"))
        } else {
            Ok(())
        }
    };
    match *kind {
        "fake_return_address" => {
            need(2, "fake_return_address <spammer>@<isp> <rcpt>@<isp>")?;
            Ok(AttackSpec::FakeReturnAddress {
                spammer: address(args[0])?,
                rcpt: address(args[1])?,
            })
        }
        "off_path_complaint" => {
            need(3, "off_path_complaint <attacker-relay> <victim-relay> <msg-id>")?;
            Ok(AttackSpec::OffPathComplaint {
                attacker: domain(args[0])?,
                victim: domain(args[1])?,
                msg_id: args[2].to_string(),
            })
        }
        "duplicate_complaint" => {
            need(2, "duplicate_complaint <user>@<isp> <msg-id>")?;
            Ok(AttackSpec::DuplicateComplaint {
                user: address(args[0])?,
                msg_id: args[1].to_string(),
            })
        }
        "stale_mail" => {
            need(2, "stale_mail <sender>@<isp> <rcpt>@<isp>")?;
            Ok(AttackSpec::StaleMail {
                sender: address(args[0])?,
                rcpt: address(args[1])?,
            })
        }
        "on_path_forged_complaint" => {
            need(2, "on_path_forged_complaint <relay> <msg-id>")?;
            Ok(AttackSpec::OnPathForgedComplaint {
                relay: domain(args[0])?,
                msg_id: args[1].to_string(),
            })
        }
        "body_hijack" => {
            need(4, "body_hijack <sender>@<isp> <rcpt>@<isp> via <relay>")?;
            if args[2] != "via" {
                return Err("expected 'via' before the tampering relay".into());
            }
            Ok(AttackSpec::BodyHijack {
                sender: address(args[0])?,
                rcpt: address(args[1])?,
                tamperer: domain(args[3])?,
            })
        }
        "forged_spam_by_relay" => {
            need(2, "forged_spam_by_relay <relay> <rcpt>@<isp>")?;
            let relay = domain(args[0])?;
            let rcpt = address(args[1])?;
            if &relay == rcpt.domain() {
                return Err("the forging relay must not host the recipient".into());
            }
            Ok(AttackSpec::ForgedSpamByRelay { relay, rcpt })
        }
        other => Err(format!("unknown attack kind {other:?}")),
    }
}

fn parse_expect(rest: &[&str], line: &str) -> Result<Expectation, String> {
    match rest.first() {
        Some(&"metric") => {
            if rest.len() != 4 {
                return Err("usage: expect metric <key> <op> <value>".into());
            }
            let op = match rest[2] {
                "=" | "==" => MetricOp::Eq,
                "!=" => MetricOp::Ne,
                "<" => MetricOp::Lt,
                "<=" => MetricOp::Le,
                ">" => MetricOp::Gt,
                ">=" => MetricOp::Ge,
                other => return Err(format!("unknown comparison {other:?}")),
            };
            let value: i64 = rest[3]
                .parse()
                .map_err(|_| format!("bad metric value {:?}", rest[3]))?;
            Ok(Expectation::Metric {
                key: rest[1].to_string(),
                op,
                value,
            })
        }
        Some(&"trace") => {
            let verb = rest.get(1).copied().ok_or("expect trace contains|lacks ...")?;
            // The needle is the rest of the raw line, optionally quoted,
            // so it can contain spaces.
            let marker = format!(" {verb} ");
            let needle = line
                .split_once(&marker)
                .map(|(_, n)| n.trim())
                .unwrap_or("");
            let needle = needle
                .strip_prefix('"')
                .and_then(|n| n.strip_suffix('"'))
                .unwrap_or(needle);
            if needle.is_empty() {
                return Err("expect trace needs a search string".into());
            }
            match verb {
                "contains" => Ok(Expectation::TraceContains(needle.to_string())),
                "lacks" => Ok(Expectation::TraceLacks(needle.to_string())),
                other => Err(format!("unknown trace assertion {other:?}")),
            }
        }
        _ => Err("usage: expect metric ... | expect trace ...".into()),
    }
}

/// `90s`, `15m`, `2h`, `13d`, compounds like `7d1s`, or bare seconds.
pub fn parse_duration(s: &str) -> Result<TimeDelta, String> {
    let mut total: i64 = 0;
    let mut num = String::new();
    let mut any = false;
    for ch in s.chars() {
        if ch.is_ascii_digit() {
            num.push(ch);
            continue;
        }
        let n: i64 = num
            .parse()
            .map_err(|_| format!("bad duration {s:?}"))?;
        num.clear();
        let unit = match ch {
            's' => 1,
            'm' => 60,
            'h' => 3600,
            'd' => 86_400,
            other => return Err(format!("unknown time unit {other:?} in {s:?}")),
        };
        total += n * unit;
        any = true;
    }
    if !num.is_empty() {
        total += num.parse::<i64>().map_err(|_| format!("bad duration {s:?}"))?;
        any = true;
    }
    if !any {
        return Err(format!("empty duration {s:?}"));
    }
    Ok(TimeDelta::seconds(total))
}

fn parse_signed_duration(s: &str) -> Result<TimeDelta, String> {
    if let Some(rest) = s.strip_prefix('-') {
        parse_duration(rest).map(|d| -d)
    } else if let Some(rest) = s.strip_prefix('+') {
        parse_duration(rest)
    } else {
        parse_duration(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_parse() {
        assert_eq!(parse_duration("0").unwrap(), TimeDelta::zero());
        assert_eq!(parse_duration("90").unwrap(), TimeDelta::seconds(90));
        assert_eq!(parse_duration("15m").unwrap(), TimeDelta::minutes(15));
        assert_eq!(
            parse_duration("7d1s").unwrap(),
            TimeDelta::days(7) + TimeDelta::seconds(1)
        );
        assert!(parse_duration("x").is_err());
        assert!(parse_duration("5w").is_err());
        assert_eq!(
            parse_signed_duration("-8d").unwrap(),
            TimeDelta::days(-8)
        );
    }

    #[test]
    fn full_scenario_parses() {
        let text = r#"
            name demo
            node a.example
            node old.example legacy
            user alice@a.example
            contract a.example b.example
            mx c.example strict.example permissive.example
            smarthost a.example b.example
            whitelist alice@a.example freefood.348290 via remailer.example
            filter alice@a.example discard rec.sports
            limit a.example cutoff 3

            # two events and two checks
            @0 send alice@a.example -> bob@b.example adv misc.offers,rec.sports id m1 body hi there
            @1h complain bob@b.example m1
            expect metric count.mail_delivered = 1
            expect trace contains "event=sender_notified"
        "#;
        let sc = Scenario::parse(text).unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.decls.len(), 9);
        assert_eq!(sc.events.len(), 2);
        assert_eq!(sc.expects.len(), 2);

        let (at, _, action) = &sc.events[0];
        assert_eq!(*at, TimeDelta::zero());
        let Action::Send(spec) = action else {
            panic!("expected send");
        };
        assert_eq!(spec.msg_id.as_deref(), Some("m1"));
        assert_eq!(spec.body, b"hi there");
        assert!(matches!(spec.class, BulkClass::Advertisement(ref g) if g.len() == 2));
    }

    #[test]
    fn send_rejects_mixed_destination_domains() {
        let err = parse_send("send a@x.example -> b@y.example,c@z.example").unwrap_err();
        assert!(err.contains("share a domain"), "{err}");
    }

    #[test]
    fn attacks_parse() {
        for line in [
            "attack fake_return_address spam@a.example victim@c.example",
            "attack off_path_complaint x.example b.example m1",
            "attack duplicate_complaint bob@c.example m1",
            "attack stale_mail alice@a.example bob@c.example",
            "attack on_path_forged_complaint b.example m1",
            "attack body_hijack alice@a.example bob@c.example via b.example",
            "attack forged_spam_by_relay b.example victim@c.example",
        ] {
            let action = parse_action(line).unwrap_or_else(|e| panic!("{line}: {e}"));
            assert!(matches!(action, Action::Attack(_)), "{line}");
        }
        assert!(parse_action("attack unknown_kind x").is_err());
        assert!(parse_action("attack forged_spam_by_relay c.example victim@c.example").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Scenario::parse("node a.example\nbogus line here\n").unwrap_err();
        let SimError::Parse { line, .. } = err else {
            panic!("expected parse error, got {err:?}");
        };
        assert_eq!(line, 2);
    }

    #[test]
    fn expect_lines_parse() {
        let sc = Scenario::parse(
            "expect metric ledger.a.example >= -10\nexpect trace lacks \"event=mail_dropped\"\n",
        )
        .unwrap();
        assert_eq!(
            sc.expects[0],
            Expectation::Metric {
                key: "ledger.a.example".into(),
                op: MetricOp::Ge,
                value: -10
            }
        );
        assert_eq!(
            sc.expects[1],
            Expectation::TraceLacks("event=mail_dropped".into())
        );
    }
}
