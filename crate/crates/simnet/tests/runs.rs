//! End-to-end scenario runs against the in-process network.

use bulkmail_simnet::{run_scenario, RunResult, Scenario};

fn run(text: &str, seed: u64) -> RunResult {
    let sc = Scenario::parse(text).expect("scenario parses");
    run_scenario(&sc, seed).expect("scenario runs")
}

fn run_clean(text: &str, seed: u64) -> RunResult {
    let result = run(text, seed);
    assert!(
        result.passed(),
        "scenario {} failed:\n{}\ntrace:\n{}",
        result.name,
        result.failures.join("\n"),
        result.trace
    );
    result
}

#[test]
fn three_hop_chain_settles_to_zero() {
    // One advertisement crosses a -> b -> c; the recipient complains.
    // The recipient's ISP ends up holding the claim, the origin ISP
    // owes it, nobody in the middle keeps a cent.
    run_clean(
        r#"
        name chain3
        node a.example
        node b.example
        node c.example
        user alice@a.example
        user carol@c.example
        contract a.example b.example
        contract b.example c.example
        smarthost a.example b.example
        @0 send alice@a.example -> carol@c.example adv misc.offers id m1
        @1h complain carol@c.example m1
        expect metric inbox.c.example.carol = 1
        expect metric count.complaint_accepted = 3
        expect metric count.sender_notified = 1
        expect metric ledger.c.example = 10
        expect metric ledger.b.example = 0
        expect metric ledger.a.example = -10
        expect metric ledger_sum = 0
        expect metric log.a.example = 1
        expect metric log.b.example = 1
        expect metric log.c.example = 1
        expect trace contains "event=sender_notified"
        "#,
        7,
    );
}

#[test]
fn list_mail_skips_logs_and_drops_unsubscribed() {
    // A list blast reaches the subscriber, is dropped for the
    // non-subscriber at the final relay only, never hits any log, and
    // cannot be complained about.
    run_clean(
        r#"
        name list-flow
        node remailer.example
        node relay.example
        node isp.example
        user announce@remailer.example
        user sub@isp.example
        user uns@isp.example
        contract remailer.example relay.example
        contract relay.example isp.example
        smarthost remailer.example relay.example
        whitelist sub@isp.example freefood.348290 via remailer.example
        @0 send announce@remailer.example -> sub@isp.example,uns@isp.example list freefood.348290 id l1
        @1h complain sub@isp.example l1
        expect metric inbox.isp.example.sub = 1
        expect metric inbox.isp.example.uns = 0
        expect metric count.mail_dropped.not_whitelisted = 1
        expect metric count.mail_forwarded = 3
        expect metric log.remailer.example = 0
        expect metric log.relay.example = 0
        expect metric log.isp.example = 0
        expect metric count.complaint_rejected.list_mail = 1
        expect metric ledger_sum = 0
        expect trace contains "reason=not_whitelisted"
        "#,
        7,
    );
}

#[test]
fn mx_fallback_and_uncontracted_cutoff() {
    // A legacy spammer ISP is refused by the strict relay, falls back
    // to the permissive one, and keeps sending until two validated
    // complaints cut it off. The third send bounces with the remedy.
    run_clean(
        r#"
        name mx-fallback
        node spammerisp.example legacy
        node strict.example
        node permissive.example
        node dst.example
        user victim@dst.example
        contract strict.example dst.example
        contract permissive.example dst.example
        uncontracted permissive.example spammerisp.example
        mx dst.example strict.example permissive.example
        limit permissive.example cutoff 2
        @0 send eve@spammerisp.example -> victim@dst.example adv shady.pills id s1
        @10m send eve@spammerisp.example -> victim@dst.example adv shady.pills id s2
        @1h complain victim@dst.example s1
        @2h complain victim@dst.example s2
        @3h send eve@spammerisp.example -> victim@dst.example adv shady.pills id s3
        expect metric inbox.dst.example.victim = 2
        expect metric count.connection_refused.unknown_peer = 3
        expect metric count.peer_cut_off = 1
        expect metric count.connection_bounced.cut_off = 1
        expect metric count.complaint_dead_letter.not_participating = 2
        expect metric ledger.dst.example = 20
        expect metric ledger.permissive.example = -20
        expect metric ledger_sum = 0
        expect trace contains "event=remedy_received"
        expect trace contains "remedy:"
        "#,
        7,
    );
}

#[test]
fn partition_defers_then_delivers_complaint() {
    // The upstream link is down when the complaint needs to travel;
    // the forwarder retries on a backoff and settles once healed.
    run_clean(
        r#"
        name retry-heal
        node a.example
        node b.example
        node c.example
        user alice@a.example
        user carol@c.example
        contract a.example b.example
        contract b.example c.example
        smarthost a.example b.example
        @0 send alice@a.example -> carol@c.example adv misc.offers id m1
        @30m partition a.example b.example
        @1h complain carol@c.example m1
        @2h heal a.example b.example
        expect metric count.complaint_retry >= 1
        expect metric count.sender_notified = 1
        expect metric ledger.c.example = 10
        expect metric ledger.b.example = 0
        expect metric ledger.a.example = -10
        expect metric ledger_sum = 0
        "#,
        7,
    );
}

#[test]
fn partition_that_never_heals_dead_letters() {
    // The retry schedule gives up once the complaint could no longer
    // arrive inside the upstream's acceptance window; the forwarder
    // absorbs the penalty it already paid downstream.
    run_clean(
        r#"
        name retry-exhaust
        node a.example
        node b.example
        node c.example
        user alice@a.example
        user carol@c.example
        contract a.example b.example
        contract b.example c.example
        smarthost a.example b.example
        @0 send alice@a.example -> carol@c.example adv misc.offers id m1
        @30m partition a.example b.example
        @1h complain carol@c.example m1
        expect metric count.complaint_retry >= 20
        expect metric count.complaint_dead_letter.window_exhausted = 1
        expect metric count.sender_notified = 0
        expect metric ledger.c.example = 10
        expect metric ledger.b.example = -10
        expect metric ledger.a.example = 0
        expect metric ledger_sum = 0
        "#,
        7,
    );
}

#[test]
fn attack_gauntlet_all_defenses_hold() {
    run_clean(
        r#"
        name gauntlet
        node spam.example
        node mid.example
        node dst.example
        node rogue.example
        user eve@spam.example
        user bob@dst.example
        contract spam.example mid.example
        contract mid.example dst.example
        uncontracted rogue.example mid.example
        smarthost spam.example mid.example
        @0 send eve@spam.example -> bob@dst.example adv misc.offers id m1
        @10m attack off_path_complaint rogue.example mid.example m1
        @20m attack duplicate_complaint bob@dst.example m1
        @30m attack fake_return_address eve@spam.example bob@dst.example
        @40m attack stale_mail eve@spam.example bob@dst.example
        @50m send eve@spam.example -> bob@dst.example personal id m2
        @55m attack on_path_forged_complaint mid.example m2
        @70m attack body_hijack eve@spam.example bob@dst.example via mid.example
        @80m attack forged_spam_by_relay mid.example bob@dst.example
        expect metric count.attack = 7
        expect metric count.attack_ok = 7
        expect metric count.attack_failed = 0
        expect metric ledger_sum = 0
        expect trace lacks "event=attack_failed"
        "#,
        99,
    );
}

#[test]
fn same_seed_same_trace() {
    let text = r#"
        name determinism
        node spam.example
        node mid.example
        node dst.example
        user eve@spam.example
        user bob@dst.example
        contract spam.example mid.example
        contract mid.example dst.example
        smarthost spam.example mid.example
        @0 send eve@spam.example -> bob@dst.example adv misc.offers id m1
        @5m attack fake_return_address eve@spam.example bob@dst.example
        @10m attack body_hijack eve@spam.example bob@dst.example via mid.example
        @1h complain bob@dst.example m1
    "#;
    let a = run(text, 42);
    let b = run(text, 42);
    assert!(a.passed(), "failures: {:?}", a.failures);
    assert_eq!(a.trace, b.trace, "trace must be a pure function of (scenario, seed)");
    assert_eq!(a.metrics, b.metrics);

    // A different seed changes the forged identities but nothing about
    // the outcome.
    let c = run(text, 43);
    assert!(c.passed(), "failures: {:?}", c.failures);
    assert_eq!(
        a.metrics, c.metrics,
        "seed steers forged identities, not behavior"
    );
}

#[test]
fn rate_limit_and_termination_enforced() {
    // Three sends per week allowed; the fourth is refused. Complaint
    // number two terminates the account under a limit of two.
    run_clean(
        r#"
        name limits
        node isp.example
        node dst.example
        user mallory@isp.example
        user bob@dst.example
        contract isp.example dst.example
        limit isp.example sends 3
        limit isp.example complaints 2
        @0 send mallory@isp.example -> bob@dst.example adv misc.offers id m1
        @1m send mallory@isp.example -> bob@dst.example adv misc.offers id m2
        @2m send mallory@isp.example -> bob@dst.example adv misc.offers id m3
        @3m send mallory@isp.example -> bob@dst.example adv misc.offers id m4
        @1h complain bob@dst.example m1
        @2h complain bob@dst.example m2
        @3h send mallory@isp.example -> bob@dst.example adv misc.offers id m5
        expect metric inbox.dst.example.bob = 3
        expect metric count.mail_rejected.rate_limited = 1
        expect metric count.sender_notified = 2
        expect metric count.sender_warned = 1
        expect metric count.sender_terminated = 1
        expect metric count.mail_rejected.account_terminated = 1
        expect metric ledger_sum = 0
        "#,
        7,
    );
}

#[test]
fn expectations_catch_failures() {
    let text = r#"
        name unmet
        node a.example
        node b.example
        user alice@a.example
        user bob@b.example
        contract a.example b.example
        @0 send alice@a.example -> bob@b.example personal id m1
        expect metric inbox.b.example.bob = 5
        expect trace contains "event=never_happens"
    "#;
    let result = run(text, 7);
    assert_eq!(result.failures.len(), 2, "failures: {:?}", result.failures);
    assert!(!result.passed());
}

#[test]
fn log_expiry_scripted() {
    run_clean(
        r#"
        name expiry
        node a.example
        node b.example
        user alice@a.example
        user bob@b.example
        contract a.example b.example
        @0 send alice@a.example -> bob@b.example adv misc.offers id m1
        @15d expire a.example
        @15d1s expire b.example
        expect metric log.a.example = 0
        expect metric log.b.example = 0
        expect metric count.log_expired = 2
        "#,
        7,
    );
}
