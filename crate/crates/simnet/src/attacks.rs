//! Scripted misbehavior with built-in outcome checks.
//!
//! Each attack performs the hostile act against the live topology and
//! then verifies that the system responded the way the design claims
//! it must. A check that does not hold is recorded as a run failure;
//! the trace gets an `attack_ok` or `attack_failed` marker either way.

use rand::Rng;
use chrono::TimeDelta;

use bulkmail_core::bulk::BulkClass;
use bulkmail_core::digest::compute_digest;
use bulkmail_core::penalty::{ComplaintOutcome, SPAMSINK};
use bulkmail_core::received::{add_received_stamp, format_date, ReceivedStamp, StampSource};
use bulkmail_core::relay::{ConnectionDecision, MailSource, SessionIdentity};
use bulkmail_core::{Address, DomainName, MailMessage};

use crate::engine::{body_fingerprint, ChainEnd, Engine, Probe, SendEnd};
use crate::scenario::{AttackSpec, SendSpec, SimError};

/// Runs one attack and records whether the defense held.
pub(crate) fn execute(eng: &mut Engine, spec: &AttackSpec) -> Result<(), SimError> {
    let kind = spec.kind();
    let actor = actor_domain(spec);
    eng.push_raw(&actor, format!("event=attack kind={kind}"));
    let problem = match spec {
        AttackSpec::FakeReturnAddress { spammer, rcpt } => fake_return_address(eng, spammer, rcpt)?,
        AttackSpec::OffPathComplaint {
            attacker,
            victim,
            msg_id,
        } => off_path_complaint(eng, attacker, victim, msg_id)?,
        AttackSpec::DuplicateComplaint { user, msg_id } => duplicate_complaint(eng, user, msg_id)?,
        AttackSpec::StaleMail { sender, rcpt } => stale_mail(eng, sender, rcpt)?,
        AttackSpec::OnPathForgedComplaint { relay, msg_id } => {
            on_path_forged_complaint(eng, relay, msg_id)?
        }
        AttackSpec::BodyHijack {
            sender,
            rcpt,
            tamperer,
        } => body_hijack(eng, sender, rcpt, tamperer)?,
        AttackSpec::ForgedSpamByRelay { relay, rcpt } => forged_spam_by_relay(eng, relay, rcpt)?,
    };
    match problem {
        None => eng.push_raw(&actor, format!("event=attack_ok kind={kind}")),
        Some(detail) => {
            eng.push_raw(&actor, format!("event=attack_failed kind={kind}"));
            eng.fail(format!("attack {kind}: {detail}"));
        }
    }
    Ok(())
}

fn actor_domain(spec: &AttackSpec) -> DomainName {
    match spec {
        AttackSpec::FakeReturnAddress { spammer, .. } => spammer.domain().clone(),
        AttackSpec::OffPathComplaint { attacker, .. } => attacker.clone(),
        AttackSpec::DuplicateComplaint { user, .. } => user.domain().clone(),
        AttackSpec::StaleMail { sender, .. } => sender.domain().clone(),
        AttackSpec::OnPathForgedComplaint { relay, .. } => relay.clone(),
        AttackSpec::BodyHijack { tamperer, .. } => tamperer.clone(),
        AttackSpec::ForgedSpamByRelay { relay, .. } => relay.clone(),
    }
}

/// A forged `From` header changes nothing: the trace stamps walk the
/// complaint back to the account that really submitted the mail.
fn fake_return_address(
    eng: &mut Engine,
    spammer: &Address,
    rcpt: &Address,
) -> Result<Option<String>, SimError> {
    let forged = format!("innocent{:04x}@bystander.example", eng.rng.random::<u32>() & 0xffff);
    let spec = SendSpec {
        from: spammer.clone(),
        from_header: Some(forged),
        rcpts: vec![rcpt.clone()],
        class: BulkClass::parse_value("ADV: shady.pills").expect("valid class"),
        msg_id: None,
        date_offset: TimeDelta::zero(),
        body: b"get rich quick".to_vec(),
    };
    let msg_id = eng.next_msg_id(&spec);
    match eng.exec_send(&spec, &msg_id)? {
        SendEnd::Delivered => {}
        other => return Ok(Some(format!("spam never arrived: {other:?}"))),
    }
    match eng.exec_complain(rcpt, &msg_id)? {
        ChainEnd::Sanctioned { node, user }
            if &node == spammer.domain() && user == spammer.local() =>
        {
            Ok(None)
        }
        other => Ok(Some(format!(
            "complaint should have reached {spammer}, ended {other:?}"
        ))),
    }
}

/// A relay that never handled the message files a complaint about it.
/// The victim rejects the filing and no ledger balance moves.
fn off_path_complaint(
    eng: &mut Engine,
    attacker: &DomainName,
    victim: &DomainName,
    msg_id: &str,
) -> Result<Option<String>, SimError> {
    eng.node(attacker)?;
    let copy = eng
        .received_at
        .get(&(msg_id.to_string(), victim.clone()))
        .cloned()
        .ok_or_else(|| SimError::Script {
            at: eng.elapsed(),
            msg: format!("{victim} never handled message {msg_id}"),
        })?;

    let before: Vec<(DomainName, i64)> = eng
        .nodes
        .keys()
        .cloned()
        .map(|d| {
            let net = eng.ledger_net(&d);
            (d, net)
        })
        .collect();

    let (admit, ev) = {
        let relay = eng.relay(victim)?;
        let mut ev = Vec::new();
        let d = relay.admit_connection(attacker, eng.now, &mut ev);
        (d, ev)
    };
    let mut drained = ev;
    let outcome = match admit {
        ConnectionDecision::Accept(_) => {
            let wire = MailMessage::new()
                .with_header("Date", &format_date(eng.now))
                .with_header("To", &format!("{SPAMSINK}@{victim}"))
                .with_header("From", &format!("{SPAMSINK}@{attacker}"))
                .with_body(&copy.header_block());
            let relay = eng.relay(victim)?;
            Some(relay.handle_spamsink(
                &SessionIdentity::Peer(attacker.clone()),
                &wire,
                eng.now,
                &mut drained,
            ))
        }
        // Refused at the door: the filing never even reaches the log.
        _ => None,
    };
    for ev in drained {
        eng.push_raw(victim, ev.to_string());
    }

    if let Some(outcome) = outcome {
        match outcome {
            Ok(ComplaintOutcome::Rejected(r))
                if matches!(r.as_str(), "not_in_log" | "unknown_downstream") => {}
            Ok(other) => {
                return Ok(Some(format!(
                    "victim accepted an off-path complaint: {other:?}"
                )))
            }
            Err(e) => return Ok(Some(format!("filing failed to parse: {e}"))),
        }
    }

    for (domain, net) in before {
        let after = eng.ledger_net(&domain);
        if after != net {
            return Ok(Some(format!(
                "ledger of {domain} moved {net} -> {after} on a rejected complaint"
            )));
        }
    }
    Ok(None)
}

/// The same mailbox files the same complaint twice; the log's
/// complained flag makes the second filing bounce.
fn duplicate_complaint(
    eng: &mut Engine,
    user: &Address,
    msg_id: &str,
) -> Result<Option<String>, SimError> {
    let home = user.domain().clone();
    match eng.exec_complain(user, msg_id)? {
        ChainEnd::Rejected { node, reason } if node == home => {
            return Ok(Some(format!("first complaint already refused: {reason}")))
        }
        _ => {}
    }
    match eng.exec_complain(user, msg_id)? {
        ChainEnd::Rejected { node, reason } if node == home && reason == "duplicate" => Ok(None),
        other => Ok(Some(format!(
            "second complaint should bounce as a duplicate, ended {other:?}"
        ))),
    }
}

/// Mail dated beyond the age limit is refused at ingress with an
/// error the sender sees, not dropped on the floor.
fn stale_mail(eng: &mut Engine, sender: &Address, rcpt: &Address) -> Result<Option<String>, SimError> {
    let spec = SendSpec {
        from: sender.clone(),
        from_header: None,
        rcpts: vec![rcpt.clone()],
        class: BulkClass::Personal,
        msg_id: None,
        date_offset: TimeDelta::days(-8),
        body: b"old news".to_vec(),
    };
    let msg_id = eng.next_msg_id(&spec);
    let mark = eng.trace_mark();
    match eng.exec_send(&spec, &msg_id)? {
        SendEnd::Rejected { code, .. } => {
            if code != 554 {
                return Ok(Some(format!("expected a 554 refusal, got {code}")));
            }
            if !eng.trace_since(mark).contains("reason=too_old") {
                return Ok(Some("refusal was not reported as too_old".to_string()));
            }
            Ok(None)
        }
        other => Ok(Some(format!(
            "stale mail must be refused loudly, ended {other:?}"
        ))),
    }
}

/// A relay on the path forges a complaint for mail it only forwarded.
/// The upstream cannot tell it from a real one and accepts it, but the
/// origin account is notified, so the forgery leaves an audit trail.
fn on_path_forged_complaint(
    eng: &mut Engine,
    relay: &DomainName,
    msg_id: &str,
) -> Result<Option<String>, SimError> {
    eng.relay(relay)?;
    let copy = eng
        .received_at
        .get(&(msg_id.to_string(), relay.clone()))
        .cloned()
        .ok_or_else(|| SimError::Script {
            at: eng.elapsed(),
            msg: format!("{relay} never handled message {msg_id}"),
        })?;
    let upstream = copy
        .values("Received")
        .next()
        .and_then(ReceivedStamp::parse_value)
        .map(|s| s.relay)
        .ok_or_else(|| SimError::Script {
            at: eng.elapsed(),
            msg: format!("{relay} received {msg_id} straight from a client; nothing upstream"),
        })?;

    let gain_before = eng.ledger_net(relay);
    let short = compute_digest(&copy).map(|d| d.short()).unwrap_or_default();
    let mark = eng.trace_mark();
    let end = eng.deliver_complaint(relay, &upstream, copy, &short, 0)?;

    match end {
        ChainEnd::Sanctioned { .. } => {}
        other => {
            return Ok(Some(format!(
                "forged complaint should be indistinguishable and land, ended {other:?}"
            )))
        }
    }
    if !eng.trace_since(mark).contains("event=sender_") {
        return Ok(Some(
            "origin account was never notified; forgery left no audit trail".to_string(),
        ));
    }
    let gain = eng.ledger_net(relay) - gain_before;
    let penalty = eng.relay(relay)?.config().rate.micro_penalty;
    if gain != penalty {
        return Ok(Some(format!(
            "forger's ledger moved {gain}, expected the {penalty} credit"
        )));
    }
    Ok(None)
}

/// A relay swaps the body in transit. The digest covers headers only,
/// so delivery still works, and the hop-by-hop body fingerprints in
/// the trace point at exactly the hop that made the swap.
fn body_hijack(
    eng: &mut Engine,
    sender: &Address,
    rcpt: &Address,
    tamperer: &DomainName,
) -> Result<Option<String>, SimError> {
    eng.node(tamperer)?;
    let forged = format!("BUY NOW {:08x}", eng.rng.random::<u32>()).into_bytes();
    eng.tamper.insert(tamperer.clone(), forged);

    let spec = SendSpec {
        from: sender.clone(),
        from_header: None,
        rcpts: vec![rcpt.clone()],
        class: BulkClass::Personal,
        msg_id: None,
        date_offset: TimeDelta::zero(),
        body: b"meet at noon".to_vec(),
    };
    let msg_id = eng.next_msg_id(&spec);
    let end = eng.exec_send(&spec, &msg_id)?;

    if eng.tamper.remove(tamperer).is_some() {
        return Ok(Some(format!("{tamperer} was never on the path")));
    }
    match end {
        SendEnd::Delivered => {}
        other => {
            return Ok(Some(format!(
                "tampered mail should still deliver (digest covers headers only), ended {other:?}"
            )))
        }
    }

    let delivered = eng
        .delivered
        .get(&(
            msg_id.clone(),
            rcpt.local().to_string(),
            rcpt.domain().clone(),
        ))
        .cloned()
        .ok_or_else(|| SimError::Script {
            at: eng.elapsed(),
            msg: format!("delivered copy of {msg_id} missing"),
        })?;
    let original = spec.body.clone();
    if delivered.body() == original.as_slice() {
        return Ok(Some("body arrived unmodified; no hijack happened".to_string()));
    }

    let orig_hex = body_fingerprint(&original);
    let trail = eng.body_trail.get(&msg_id).cloned().unwrap_or_default();
    let mut culprit = None;
    for pair in trail.windows(2) {
        if pair[0].1 == orig_hex && pair[1].1 != orig_hex {
            culprit = Some(pair[0].0.clone());
            break;
        }
    }
    // No divergence between hops means the last hop swapped it after
    // accepting it.
    let culprit = culprit.or_else(|| trail.last().map(|(d, _)| d.clone()));

    match culprit {
        Some(found) if &found == tamperer => {
            eng.push_raw(
                tamperer,
                format!("event=tamper_traced digest_trail={orig_hex} info=culprit:{found}"),
            );
            Ok(None)
        }
        Some(found) => Ok(Some(format!(
            "fingerprint trail blames {found}, tamperer was {tamperer}"
        ))),
        None => Ok(Some("no fingerprint trail recorded".to_string())),
    }
}

/// A relay invents a client and injects spam under it, skipping every
/// ingress check except its own log write. Complaints walk back to
/// the forging relay and stop there, so it absorbs the whole penalty.
fn forged_spam_by_relay(
    eng: &mut Engine,
    relay: &DomainName,
    rcpt: &Address,
) -> Result<Option<String>, SimError> {
    let ghost = format!("ghost{:06x}", eng.rng.random::<u32>() & 0xff_ffff);
    let dest = rcpt.domain().clone();
    let msg_id = eng.fresh_msg_id();

    let msg = MailMessage::new()
        .with_header("Date", &format_date(eng.now))
        .with_header("To", &rcpt.to_string())
        .with_header("From", &format!("{ghost}@{relay}"))
        .with_header("Message-Id", &format!("<{msg_id}@{relay}>"))
        .with_header("X-Bulk-Mail", "ADV: shady.pills")
        .with_body(b"forged in the relay room");

    let digest = compute_digest(&msg).map_err(|e| SimError::Script {
        at: eng.elapsed(),
        msg: format!("forged message failed to digest: {e}"),
    })?;

    let via = match eng.probe_route(relay, &dest)? {
        Probe::Via(v) => v,
        other => {
            return Ok(Some(format!(
                "no open route from the forging relay: {other:?}"
            )))
        }
    };

    // The relay's own log must hold the digest or the coming complaint
    // would expose the forgery immediately.
    {
        let node = eng.relay(relay)?;
        node.log()
            .record(&digest, &via, eng.now)
            .map_err(|e| SimError::Script {
                at: eng.elapsed(),
                msg: format!("forger could not write its own log: {e}"),
            })?;
    }

    eng.received_at
        .insert((msg_id.clone(), relay.clone()), msg.clone());
    let body_hex = body_fingerprint(msg.body());
    eng.original_body.insert(msg_id.clone(), msg.body().to_vec());
    eng.body_trail
        .entry(msg_id.clone())
        .or_default()
        .push((relay.clone(), body_hex.clone()));

    let mut stamped = msg;
    add_received_stamp(
        &mut stamped,
        &ReceivedStamp {
            relay: relay.clone(),
            source: StampSource::AuthenticatedUser(ghost.clone()),
            timestamp: eng.now,
        },
    );
    eng.push_raw(
        relay,
        format!("event=mail_forwarded peer=client:{ghost} info=class=adv next={via} body={body_hex}"),
    );

    let before: Vec<(DomainName, i64)> = eng
        .nodes
        .keys()
        .cloned()
        .map(|d| {
            let net = eng.ledger_net(&d);
            (d, net)
        })
        .collect();

    match eng.walk_from(
        &msg_id,
        stamped,
        via,
        MailSource::Peer(relay.clone()),
        &dest,
        &[rcpt.clone()],
    )? {
        SendEnd::Delivered => {}
        other => return Ok(Some(format!("forged spam never arrived: {other:?}"))),
    }

    match eng.exec_complain(rcpt, &msg_id)? {
        ChainEnd::Sanctioned { node, user } if &node == relay && user == ghost => {}
        other => {
            return Ok(Some(format!(
                "complaint should stop at the forging relay {relay}, ended {other:?}"
            )))
        }
    }

    let penalty = eng.relay(&dest)?.config().rate.micro_penalty;
    let mut sum = 0;
    for (domain, net) in before {
        let delta = eng.ledger_net(&domain) - net;
        sum += delta;
        let expected = if &domain == relay {
            -penalty
        } else if domain == dest {
            penalty
        } else {
            0
        };
        if delta != expected {
            return Ok(Some(format!(
                "ledger of {domain} moved {delta}, expected {expected}"
            )));
        }
    }
    if sum != 0 {
        return Ok(Some(format!("penalties leaked: chain sum {sum}")));
    }
    Ok(None)
}
