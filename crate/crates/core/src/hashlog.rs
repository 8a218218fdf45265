//! Sliding-window store of header digests for forwarded mail.
//!
//! A relay answers one question here: "did I forward the message with
//! this digest inside the retention window, and has anyone complained
//! about it yet?" The store must stay cheap enough to hold weeks of
//! traffic in memory, so entries live in a packed open-addressing table:
//! 40 bytes per slot (digest, 32-bit timestamp, interned next-hop id,
//! flags) plus an occupancy bitmap. The load factor stays between 0.64
//! and 0.8, which bounds resident cost to under 64 bytes per entry at
//! any size; a general-purpose map with the same payload does not.
//!
//! The digest's own leading bytes are uniformly distributed, so they
//! serve directly as the probe start; no second hash function runs.
//!
//! Clocks are injected: every operation takes `now`. Timestamps are
//! stored as 32-bit unix seconds, valid through 2106.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use parking_lot::RwLock;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::addr::DomainName;
use crate::digest::HeaderDigest;

const MAGIC: &[u8; 4] = b"BGLG";
const VERSION: u8 = 1;
const SLOT_RECORD_BYTES: u16 = 40;
const FLAG_COMPLAINT: u16 = 1;
const MIN_SLOTS: usize = 64;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("peer intern table is full (65535 distinct next hops)")]
    TooManyPeers,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot I/O failed")]
    Io(#[from] io::Error),
    #[error("snapshot version {0} is not supported")]
    VersionMismatch(u8),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

/// Outcome of the complaint test-and-set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplaintCheck {
    /// Present, inside the window, first complaint: now marked.
    Accepted,
    /// No such digest was logged.
    NotFound,
    /// A complaint for this digest was already accepted.
    AlreadyComplained,
    /// Logged once, but the entry has aged out of the window.
    Expired,
}

/// A read-only view of one logged entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub logged_at: DateTime<Utc>,
    pub complaint_filed: bool,
    /// Where the message went next: a peer domain, or the relay's own
    /// domain for local delivery.
    pub peer: DomainName,
}

#[derive(Clone, Copy)]
#[repr(C)]
struct Slot {
    digest: [u8; 32],
    ts: u32,
    peer: u16,
    flags: u16,
}

const _: () = assert!(std::mem::size_of::<Slot>() == SLOT_RECORD_BYTES as usize);

enum Probe {
    Found(usize),
    Vacant(usize),
}

struct Table {
    slots: Vec<Slot>,
    occupied: Vec<u64>,
    len: usize,
    peers: Vec<String>,
    peer_ids: BTreeMap<String, u16>,
}

impl Table {
    fn with_slots(nslots: usize) -> Table {
        let nslots = nslots.max(MIN_SLOTS);
        Table {
            slots: vec![
                Slot {
                    digest: [0; 32],
                    ts: 0,
                    peer: 0,
                    flags: 0,
                };
                nslots
            ],
            occupied: vec![0u64; nslots.div_ceil(64)],
            len: 0,
            peers: Vec::new(),
            peer_ids: BTreeMap::new(),
        }
    }

    /// Slot count that keeps `n` entries at or under 0.8 load.
    fn slots_for(n: usize) -> usize {
        (n * 5 / 4 + 1).max(MIN_SLOTS)
    }

    fn is_occupied(&self, i: usize) -> bool {
        self.occupied[i / 64] & (1u64 << (i % 64)) != 0
    }

    fn set_occupied(&mut self, i: usize) {
        self.occupied[i / 64] |= 1u64 << (i % 64);
    }

    fn probe(&self, digest: &[u8; 32]) -> Probe {
        let n = self.slots.len();
        let start = u64::from_le_bytes(digest[..8].try_into().unwrap()) % n as u64;
        let mut i = start as usize;
        loop {
            if !self.is_occupied(i) {
                return Probe::Vacant(i);
            }
            if self.slots[i].digest == *digest {
                return Probe::Found(i);
            }
            i += 1;
            if i == n {
                i = 0;
            }
        }
    }

    fn intern(&mut self, peer: &str) -> Result<u16, LogError> {
        if let Some(&id) = self.peer_ids.get(peer) {
            return Ok(id);
        }
        let id = u16::try_from(self.peers.len()).map_err(|_| LogError::TooManyPeers)?;
        self.peers.push(peer.to_string());
        self.peer_ids.insert(peer.to_string(), id);
        Ok(id)
    }

    fn grow_if_needed(&mut self) {
        if (self.len + 1) * 5 <= self.slots.len() * 4 {
            return;
        }
        let mut bigger = Table::with_slots(self.slots.len() * 5 / 4 + 1);
        bigger.peers = std::mem::take(&mut self.peers);
        bigger.peer_ids = std::mem::take(&mut self.peer_ids);
        for i in 0..self.slots.len() {
            if self.is_occupied(i) {
                bigger.insert_fresh(self.slots[i]);
            }
        }
        *self = bigger;
    }

    /// Inserts a slot known not to be present. Caller ensures capacity.
    fn insert_fresh(&mut self, slot: Slot) {
        match self.probe(&slot.digest) {
            Probe::Vacant(i) => {
                self.slots[i] = slot;
                self.set_occupied(i);
                self.len += 1;
            }
            Probe::Found(_) => unreachable!("insert_fresh on present digest"),
        }
    }

    fn memory_bytes(&self) -> usize {
        self.slots.capacity() * std::mem::size_of::<Slot>()
            + self.occupied.capacity() * 8
            + self.peers.iter().map(|p| p.len()).sum::<usize>()
    }
}

fn ts_of(t: DateTime<Utc>) -> u32 {
    t.timestamp().clamp(0, u32::MAX as i64) as u32
}

fn dt_of(ts: u32) -> DateTime<Utc> {
    Utc.timestamp_opt(ts as i64, 0).unwrap()
}

/// The windowed digest log. Thread-safe; `check_and_mark` is an atomic
/// test-and-set, so exactly one of any set of racing complaints for the
/// same digest is accepted.
pub struct LogStore {
    inner: RwLock<Table>,
    retention: TimeDelta,
}

impl std::fmt::Debug for LogStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogStore")
            .field("len", &self.len())
            .field("retention", &self.retention)
            .finish_non_exhaustive()
    }
}

impl LogStore {
    pub fn new(retention: TimeDelta) -> LogStore {
        LogStore::with_capacity(retention, 0)
    }

    pub fn with_capacity(retention: TimeDelta, entries: usize) -> LogStore {
        LogStore {
            inner: RwLock::new(Table::with_slots(Table::slots_for(entries))),
            retention,
        }
    }

    pub fn retention(&self) -> TimeDelta {
        self.retention
    }

    fn is_fresh(&self, ts: u32, now: DateTime<Utc>) -> bool {
        now.timestamp() - ts as i64 <= self.retention.num_seconds()
    }

    /// Records a forwarded message's digest and its next hop. Recording
    /// the same digest again inside the window keeps the earliest
    /// timestamp and the original next hop; a record landing on an
    /// aged-out entry replaces it, complaint flag cleared.
    pub fn record(
        &self,
        digest: &HeaderDigest,
        peer: &DomainName,
        now: DateTime<Utc>,
    ) -> Result<(), LogError> {
        let mut t = self.inner.write();
        let peer_id = t.intern(peer.as_str())?;
        let ts = ts_of(now);
        match t.probe(digest.as_bytes()) {
            Probe::Found(i) => {
                if self.is_fresh(t.slots[i].ts, now) {
                    t.slots[i].ts = t.slots[i].ts.min(ts);
                } else {
                    t.slots[i] = Slot {
                        digest: *digest.as_bytes(),
                        ts,
                        peer: peer_id,
                        flags: 0,
                    };
                }
            }
            Probe::Vacant(_) => {
                t.grow_if_needed();
                t.insert_fresh(Slot {
                    digest: *digest.as_bytes(),
                    ts,
                    peer: peer_id,
                    flags: 0,
                });
            }
        }
        Ok(())
    }

    /// Atomically validates a complaint against the log and marks the
    /// entry so a second complaint for the same message is rejected.
    pub fn check_and_mark(&self, digest: &HeaderDigest, now: DateTime<Utc>) -> ComplaintCheck {
        let mut t = self.inner.write();
        match t.probe(digest.as_bytes()) {
            Probe::Vacant(_) => ComplaintCheck::NotFound,
            Probe::Found(i) => {
                if !self.is_fresh(t.slots[i].ts, now) {
                    ComplaintCheck::Expired
                } else if t.slots[i].flags & FLAG_COMPLAINT != 0 {
                    ComplaintCheck::AlreadyComplained
                } else {
                    t.slots[i].flags |= FLAG_COMPLAINT;
                    ComplaintCheck::Accepted
                }
            }
        }
    }

    /// The entry for `digest` if it is inside the window.
    pub fn lookup(&self, digest: &HeaderDigest, now: DateTime<Utc>) -> Option<LogEntry> {
        let t = self.inner.read();
        match t.probe(digest.as_bytes()) {
            Probe::Vacant(_) => None,
            Probe::Found(i) => {
                if self.is_fresh(t.slots[i].ts, now) {
                    Some(entry_view(&t, i))
                } else {
                    None
                }
            }
        }
    }

    /// The entry for `digest` regardless of age, for offline inspection
    /// of snapshots.
    pub fn peek(&self, digest: &HeaderDigest) -> Option<LogEntry> {
        let t = self.inner.read();
        match t.probe(digest.as_bytes()) {
            Probe::Vacant(_) => None,
            Probe::Found(i) => Some(entry_view(&t, i)),
        }
    }

    /// Sweeps out entries older than the window. Returns how many were
    /// removed. Lookups already ignore stale entries, so sweeping only
    /// reclaims memory.
    pub fn expire(&self, now: DateTime<Utc>) -> usize {
        let mut t = self.inner.write();
        let keep: Vec<Slot> = (0..t.slots.len())
            .filter(|&i| t.is_occupied(i) && self.is_fresh(t.slots[i].ts, now))
            .map(|i| t.slots[i])
            .collect();
        let removed = t.len - keep.len();
        if removed == 0 {
            return 0;
        }
        let mut fresh = Table::with_slots(Table::slots_for(keep.len()));
        fresh.peers = std::mem::take(&mut t.peers);
        fresh.peer_ids = std::mem::take(&mut t.peer_ids);
        for slot in keep {
            fresh.insert_fresh(slot);
        }
        *t = fresh;
        removed
    }

    pub fn len(&self) -> usize {
        self.inner.read().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Approximate resident bytes of the table, bitmap, and interned
    /// peer names.
    pub fn memory_bytes(&self) -> usize {
        self.inner.read().memory_bytes()
    }

    /// Writes a self-describing snapshot: magic, version, retention,
    /// peer table, length-prefixed records, and a trailing checksum
    /// (first four bytes of the SHA-256 of everything before it).
    /// The table is copied under the read lock and serialized outside
    /// it, so writers are blocked only for the copy.
    pub fn snapshot<W: Write>(&self, out: &mut W) -> Result<(), SnapshotError> {
        let (slots, peers) = {
            let t = self.inner.read();
            let slots: Vec<Slot> = (0..t.slots.len())
                .filter(|&i| t.is_occupied(i))
                .map(|i| t.slots[i])
                .collect();
            (slots, t.peers.clone())
        };

        let mut buf: Vec<u8> = Vec::with_capacity(64 + slots.len() * 42);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.retention.num_seconds() as u64).to_le_bytes());
        buf.extend_from_slice(&(peers.len() as u16).to_le_bytes());
        for p in &peers {
            buf.extend_from_slice(&(p.len() as u16).to_le_bytes());
            buf.extend_from_slice(p.as_bytes());
        }
        buf.extend_from_slice(&(slots.len() as u64).to_le_bytes());
        for s in &slots {
            buf.extend_from_slice(&SLOT_RECORD_BYTES.to_le_bytes());
            buf.extend_from_slice(&s.digest);
            buf.extend_from_slice(&s.ts.to_le_bytes());
            buf.extend_from_slice(&s.peer.to_le_bytes());
            buf.extend_from_slice(&s.flags.to_le_bytes());
        }
        let sum = Sha256::digest(&buf);
        buf.extend_from_slice(&sum[..4]);
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot back. Truncation, bad magic, or a checksum
    /// mismatch is reported as corruption, never as an empty log.
    pub fn restore<R: Read>(input: &mut R) -> Result<LogStore, SnapshotError> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        if buf.len() < MAGIC.len() + 1 + 4 {
            return Err(SnapshotError::CorruptSnapshot("file too short".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let sum = Sha256::digest(body);
        if tail != &sum[..4] {
            return Err(SnapshotError::CorruptSnapshot("checksum mismatch".into()));
        }
        let mut r = Cursor { buf: body, pos: 0 };
        if r.take_bytes(4)? != MAGIC {
            return Err(SnapshotError::CorruptSnapshot("bad magic".into()));
        }
        let version = r.take_bytes(1)?[0];
        if version != VERSION {
            return Err(SnapshotError::VersionMismatch(version));
        }
        let retention_secs = r.take_u64()?;
        let peer_count = r.take_u16()? as usize;
        let mut peers = Vec::with_capacity(peer_count);
        for _ in 0..peer_count {
            let len = r.take_u16()? as usize;
            let name = std::str::from_utf8(r.take_bytes(len)?)
                .map_err(|_| SnapshotError::CorruptSnapshot("peer name not UTF-8".into()))?;
            peers.push(name.to_string());
        }
        let entry_count = r.take_u64()? as usize;
        let mut table = Table::with_slots(Table::slots_for(entry_count));
        for p in &peers {
            table
                .intern(p)
                .map_err(|_| SnapshotError::CorruptSnapshot("peer table overflow".into()))?;
        }
        for _ in 0..entry_count {
            let rec_len = r.take_u16()? as usize;
            if rec_len < SLOT_RECORD_BYTES as usize {
                return Err(SnapshotError::CorruptSnapshot("record too short".into()));
            }
            let rec = r.take_bytes(rec_len)?;
            let slot = Slot {
                digest: rec[..32].try_into().unwrap(),
                ts: u32::from_le_bytes(rec[32..36].try_into().unwrap()),
                peer: u16::from_le_bytes(rec[36..38].try_into().unwrap()),
                flags: u16::from_le_bytes(rec[38..40].try_into().unwrap()),
            };
            if slot.peer as usize >= peers.len() {
                return Err(SnapshotError::CorruptSnapshot("peer id out of range".into()));
            }
            table.grow_if_needed();
            if let Probe::Vacant(_) = table.probe(&slot.digest) {
                table.insert_fresh(slot);
            } else {
                return Err(SnapshotError::CorruptSnapshot("duplicate digest".into()));
            }
        }
        if r.pos != body.len() {
            return Err(SnapshotError::CorruptSnapshot("trailing bytes".into()));
        }
        Ok(LogStore {
            inner: RwLock::new(table),
            retention: TimeDelta::seconds(retention_secs as i64),
        })
    }
}

fn entry_view(t: &Table, i: usize) -> LogEntry {
    let s = &t.slots[i];
    LogEntry {
        logged_at: dt_of(s.ts),
        complaint_filed: s.flags & FLAG_COMPLAINT != 0,
        peer: DomainName::new(&t.peers[s.peer as usize]).expect("interned names are valid"),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        if self.pos + n > self.buf.len() {
            return Err(SnapshotError::CorruptSnapshot("truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.take_bytes(2)?.try_into().unwrap()))
    }

    fn take_u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn dom(s: &str) -> DomainName {
        DomainName::new(s).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2005, 3, 1, 0, 0, 0).unwrap()
    }

    fn digest_n(n: u64) -> HeaderDigest {
        let mut d = [0u8; 32];
        d[..8].copy_from_slice(&Sha256::digest(n.to_le_bytes())[..8]);
        d[8..16].copy_from_slice(&n.to_le_bytes());
        HeaderDigest(d)
    }

    fn two_weeks() -> TimeDelta {
        TimeDelta::days(14)
    }

    #[test]
    fn record_then_check_and_mark() {
        let log = LogStore::new(two_weeks());
        let d = digest_n(1);
        log.record(&d, &dom("b.example"), t0()).unwrap();
        assert_eq!(log.check_and_mark(&d, t0()), ComplaintCheck::Accepted);
        assert_eq!(
            log.check_and_mark(&d, t0()),
            ComplaintCheck::AlreadyComplained
        );
        assert_eq!(
            log.check_and_mark(&digest_n(2), t0()),
            ComplaintCheck::NotFound
        );
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let log = LogStore::new(two_weeks());
        let d = digest_n(3);
        log.record(&d, &dom("b.example"), t0()).unwrap();
        let exactly = t0() + two_weeks();
        assert_eq!(log.check_and_mark(&d, exactly), ComplaintCheck::Accepted);

        let log2 = LogStore::new(two_weeks());
        log2.record(&d, &dom("b.example"), t0()).unwrap();
        let past = exactly + TimeDelta::seconds(1);
        assert_eq!(log2.check_and_mark(&d, past), ComplaintCheck::Expired);
        assert!(log2.lookup(&d, past).is_none());
        assert!(log2.peek(&d).is_some());
    }

    #[test]
    fn duplicate_record_keeps_earliest_timestamp() {
        let log = LogStore::new(two_weeks());
        let d = digest_n(4);
        log.record(&d, &dom("b.example"), t0() + TimeDelta::hours(2))
            .unwrap();
        log.record(&d, &dom("c.example"), t0()).unwrap();
        log.record(&d, &dom("c.example"), t0() + TimeDelta::days(1))
            .unwrap();
        let e = log.lookup(&d, t0() + TimeDelta::days(2)).unwrap();
        assert_eq!(e.logged_at, t0());
        assert_eq!(e.peer, dom("b.example"));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn record_over_stale_entry_starts_over() {
        let log = LogStore::new(two_weeks());
        let d = digest_n(5);
        log.record(&d, &dom("b.example"), t0()).unwrap();
        assert_eq!(log.check_and_mark(&d, t0()), ComplaintCheck::Accepted);
        let later = t0() + TimeDelta::days(30);
        log.record(&d, &dom("c.example"), later).unwrap();
        let e = log.lookup(&d, later).unwrap();
        assert!(!e.complaint_filed);
        assert_eq!(e.peer, dom("c.example"));
        assert_eq!(log.check_and_mark(&d, later), ComplaintCheck::Accepted);
    }

    #[test]
    fn expire_reclaims_and_preserves_survivors() {
        let log = LogStore::new(two_weeks());
        for n in 0..100 {
            log.record(&digest_n(n), &dom("b.example"), t0()).unwrap();
        }
        let later = t0() + TimeDelta::days(10);
        for n in 100..150 {
            log.record(&digest_n(n), &dom("c.example"), later).unwrap();
        }
        let now = t0() + TimeDelta::days(16);
        assert_eq!(log.expire(now), 100);
        assert_eq!(log.len(), 50);
        assert!(log.lookup(&digest_n(120), now).is_some());
        assert!(log.lookup(&digest_n(3), now).is_none());
        assert!(log.peek(&digest_n(3)).is_none());
        assert_eq!(log.expire(now), 0);
    }

    #[test]
    fn growth_keeps_every_entry_findable() {
        let log = LogStore::new(two_weeks());
        for n in 0..10_000 {
            log.record(&digest_n(n), &dom("b.example"), t0()).unwrap();
        }
        assert_eq!(log.len(), 10_000);
        for n in (0..10_000).step_by(97) {
            assert!(log.lookup(&digest_n(n), t0()).is_some(), "entry {n}");
        }
    }

    #[test]
    fn memory_stays_under_64_bytes_per_entry() {
        let log = LogStore::new(two_weeks());
        for n in 0..200_000u64 {
            log.record(&digest_n(n), &dom("peer.example"), t0()).unwrap();
        }
        let per_entry = log.memory_bytes() as f64 / log.len() as f64;
        assert!(per_entry <= 64.0, "resident {per_entry:.1} bytes/entry");
    }

    #[test]
    fn racing_complaints_accept_exactly_once() {
        let log = std::sync::Arc::new(LogStore::new(two_weeks()));
        let d = digest_n(7);
        log.record(&d, &dom("b.example"), t0()).unwrap();
        let accepted = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let log = log.clone();
                let accepted = accepted.clone();
                s.spawn(move || {
                    for _ in 0..100 {
                        if log.check_and_mark(&d, t0()) == ComplaintCheck::Accepted {
                            accepted.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        }
                    }
                });
            }
        });
        assert_eq!(accepted.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn snapshot_round_trip_preserves_lookups() {
        let log = LogStore::new(two_weeks());
        for n in 0..500 {
            let peer = if n % 2 == 0 { "b.example" } else { "c.example" };
            log.record(&digest_n(n), &dom(peer), t0() + TimeDelta::seconds(n as i64))
                .unwrap();
        }
        log.check_and_mark(&digest_n(42), t0() + TimeDelta::hours(1));

        let mut bytes = Vec::new();
        log.snapshot(&mut bytes).unwrap();
        let back = LogStore::restore(&mut bytes.as_slice()).unwrap();

        assert_eq!(back.retention(), two_weeks());
        assert_eq!(back.len(), 500);
        let now = t0() + TimeDelta::days(1);
        for n in 0..500 {
            assert_eq!(log.lookup(&digest_n(n), now), back.lookup(&digest_n(n), now));
        }
        assert!(back.peek(&digest_n(42)).unwrap().complaint_filed);
        assert_eq!(
            back.check_and_mark(&digest_n(42), now),
            ComplaintCheck::AlreadyComplained
        );
    }

    #[test]
    fn truncated_snapshot_is_corrupt_not_empty() {
        let log = LogStore::new(two_weeks());
        for n in 0..50 {
            log.record(&digest_n(n), &dom("b.example"), t0()).unwrap();
        }
        let mut bytes = Vec::new();
        log.snapshot(&mut bytes).unwrap();

        let cut = bytes.len() / 2;
        let err = LogStore::restore(&mut &bytes[..cut]).unwrap_err();
        assert!(matches!(err, SnapshotError::CorruptSnapshot(_)), "{err}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let log = LogStore::new(two_weeks());
        log.record(&digest_n(1), &dom("b.example"), t0()).unwrap();
        let mut bytes = Vec::new();
        log.snapshot(&mut bytes).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = LogStore::restore(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, SnapshotError::CorruptSnapshot(_)), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_distinguished() {
        let log = LogStore::new(two_weeks());
        let mut bytes = Vec::new();
        log.snapshot(&mut bytes).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        // Re-seal the checksum so only the magic is wrong.
        let body_len = wrong_magic.len() - 4;
        let sum = Sha256::digest(&wrong_magic[..body_len]);
        wrong_magic[body_len..].copy_from_slice(&sum[..4]);
        assert!(matches!(
            LogStore::restore(&mut wrong_magic.as_slice()).unwrap_err(),
            SnapshotError::CorruptSnapshot(_)
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        let sum = Sha256::digest(&wrong_version[..body_len]);
        wrong_version[body_len..].copy_from_slice(&sum[..4]);
        assert!(matches!(
            LogStore::restore(&mut wrong_version.as_slice()).unwrap_err(),
            SnapshotError::VersionMismatch(9)
        ));
    }
}
