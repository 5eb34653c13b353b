//! Multi-version record store.
//!
//! Each record owns a newest-first chain of versions. A version's `cstamp`
//! holds its creator's TID until the creator's post-commit replaces it with the
//! commit timestamp; `sstamp` goes `+inf -> overwriter TID -> overwriter's pi`.
//! Chain append is one CAS on the record head.

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering::SeqCst};

use crate::arena::PushArena;
use crate::kernel::{spin_while, StampWord, Tid, Timestamp, TransactionTable, TxnStatus, INFINITY};
use crate::schedulers::{SiNode, SsiTxn};

/// Payload of the initial "invalid" version of every record.
pub const INVALID_PAYLOAD: u64 = u64::MAX;

pub struct Version {
    key: usize,
    cstamp: AtomicU64,
    pstamp: AtomicU64,
    sstamp: AtomicU64,
    readers: AtomicU64,
    payload: AtomicU64,
    prev: *const Version,
    // SSI bookkeeping; untouched unless the SSI certifier runs.
    pub(crate) overwriter: AtomicPtr<SsiTxn>,
    pub(crate) sireads: AtomicPtr<SiNode>,
}

// SAFETY: `prev` points into the same arena and is immutable after creation;
// all other fields are atomics.
unsafe impl Send for Version {}
unsafe impl Sync for Version {}

impl Version {
    fn new(key: usize, cstamp: StampWord, payload: u64, prev: *const Version) -> Self {
        Version {
            key,
            cstamp: AtomicU64::new(cstamp.raw()),
            pstamp: AtomicU64::new(0),
            sstamp: AtomicU64::new(INFINITY),
            readers: AtomicU64::new(0),
            payload: AtomicU64::new(payload),
            prev,
            overwriter: AtomicPtr::new(ptr::null_mut()),
            sireads: AtomicPtr::new(ptr::null_mut()),
        }
    }

    pub fn key(&self) -> usize {
        self.key
    }

    pub fn cstamp_word(&self) -> StampWord {
        StampWord::from_raw(self.cstamp.load(SeqCst))
    }

    pub fn pstamp(&self) -> Timestamp {
        self.pstamp.load(SeqCst)
    }

    pub fn sstamp_word(&self) -> StampWord {
        StampWord::from_raw(self.sstamp.load(SeqCst))
    }

    pub fn readers(&self) -> u64 {
        self.readers.load(SeqCst)
    }

    /// `None` for the initial invalid version.
    pub fn payload(&self) -> Option<u64> {
        match self.payload.load(SeqCst) {
            INVALID_PAYLOAD => None,
            p => Some(p),
        }
    }

    pub fn prev(&self) -> Option<&Version> {
        // SAFETY: see the Send/Sync note above.
        unsafe { self.prev.as_ref() }
    }

    /// Set the reader bit; `true` if it was clear before.
    pub fn register_reader(&self, slot: usize) -> bool {
        self.readers.fetch_or(1 << slot, SeqCst) & (1 << slot) == 0
    }

    pub fn clear_reader(&self, slot: usize) {
        self.readers.fetch_and(!(1 << slot), SeqCst);
    }

    /// `pstamp = max(pstamp, ts)` by CAS loop.
    pub fn raise_pstamp(&self, ts: Timestamp) {
        let mut cur = self.pstamp.load(SeqCst);
        while cur < ts {
            match self.pstamp.compare_exchange_weak(cur, ts, SeqCst, SeqCst) {
                Ok(_) => break,
                Err(seen) => cur = seen,
            }
        }
    }

    pub fn snapshot(&self) -> VersionStamps {
        VersionStamps {
            cstamp: self.cstamp_word(),
            pstamp: self.pstamp(),
            sstamp: self.sstamp_word(),
            readers: self.readers(),
            payload: self.payload(),
        }
    }
}

impl std::fmt::Debug for Version {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Version")
            .field("key", &self.key)
            .field("cstamp", &self.cstamp_word())
            .field("pstamp", &self.pstamp())
            .field("sstamp", &self.sstamp_word())
            .field("readers", &format_args!("{:#x}", self.readers()))
            .finish()
    }
}

/// Plain copy of a version's stamps, for comparisons in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionStamps {
    pub cstamp: StampWord,
    pub pstamp: Timestamp,
    pub sstamp: StampWord,
    pub readers: u64,
    pub payload: Option<u64>,
}

pub struct Record {
    key: usize,
    head: AtomicPtr<Version>,
}

impl Record {
    pub fn key(&self) -> usize {
        self.key
    }

    pub fn head(&self) -> &Version {
        // SAFETY: head is never null after construction and points into the arena.
        unsafe { &*self.head.load(SeqCst) }
    }
}

/// Table-level pseudo-version for scans. Records are never inserted, so the
/// per-version successor stamps already cover what a table-level sstamp
/// would; only the predecessor side and the readers bitmap are kept here.
#[derive(Debug, Default)]
pub struct TableStamps {
    pstamp: AtomicU64,
    readers: AtomicU64,
}

impl TableStamps {
    pub fn pstamp(&self) -> Timestamp {
        self.pstamp.load(SeqCst)
    }

    pub fn raise_pstamp(&self, ts: Timestamp) {
        self.pstamp.fetch_max(ts, SeqCst);
    }

    pub fn readers(&self) -> u64 {
        self.readers.load(SeqCst)
    }

    /// Set the reader bit; `true` if it was clear before.
    pub fn register_reader(&self, slot: usize) -> bool {
        self.readers.fetch_or(1 << slot, SeqCst) & (1 << slot) == 0
    }
}

/// How a reader picks the visible version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// Newest version committed at or before the given time.
    Snapshot(Timestamp),
    /// Newest committed version.
    LatestCommitted,
}

/// State of a version's creator as seen by `me`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Creator {
    Committed(Timestamp),
    Own,
    InFlight,
    /// Commit timestamp, or 0 while it is still being drawn.
    Committing(Timestamp),
    Aborted,
}

/// A successful install: `prev` is the version overwritten and `prev_cstamp`
/// its commit timestamp.
#[derive(Debug, Clone, Copy)]
pub struct WriteEntry<'a> {
    pub new: &'a Version,
    pub prev: &'a Version,
    pub prev_cstamp: Timestamp,
}

#[derive(Debug)]
pub enum Install<'a> {
    New(WriteEntry<'a>),
    /// Own uncommitted head; payload replaced in place.
    Replaced(&'a Version),
    Conflict,
}

pub struct Store {
    records: Box<[Record]>,
    versions: PushArena<Version>,
}

impl Store {
    pub fn new(records: usize) -> Self {
        let versions = PushArena::new();
        let records = (0..records)
            .map(|key| {
                let v = versions.alloc(Version::new(
                    key,
                    StampWord::timestamp(0),
                    INVALID_PAYLOAD,
                    ptr::null(),
                ));
                Record {
                    key,
                    head: AtomicPtr::new(v as *const Version as *mut Version),
                }
            })
            .collect();
        Store { records, versions }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, key: usize) -> Option<&Record> {
        self.records.get(key)
    }

    pub fn version_count(&self) -> usize {
        self.versions.len()
    }

    /// Install a committed version directly, bypassing transactions. Used for
    /// bulk loading and for constructing fixtures.
    pub fn load_committed(&self, key: usize, cstamp: Timestamp, payload: u64) -> &Version {
        let rec = &self.records[key];
        let head = rec.head();
        let prior = head.cstamp_word();
        assert!(
            prior.as_timestamp().is_some_and(|c| c < cstamp),
            "loader needs increasing committed cstamps"
        );
        let v = self.versions.alloc(Version::new(
            key,
            StampWord::timestamp(cstamp),
            payload,
            head,
        ));
        v.pstamp.store(cstamp, SeqCst);
        head.sstamp.store(StampWord::timestamp(cstamp).raw(), SeqCst);
        rec.head.store(v as *const Version as *mut Version, SeqCst);
        v
    }

    /// Resolve the creator of `v`, consulting the transaction table when the
    /// cstamp still holds a TID.
    pub fn creator(&self, v: &Version, table: &TransactionTable, me: Tid) -> Creator {
        let word = v.cstamp_word();
        let Some(tid) = word.as_tid() else {
            return Creator::Committed(word.value());
        };
        if tid == me {
            return Creator::Own;
        }
        match table.observe(tid) {
            Some(view) => match view.status {
                TxnStatus::InFlight => Creator::InFlight,
                TxnStatus::Committing => Creator::Committing(view.cstamp),
                TxnStatus::Committed => Creator::Committed(view.cstamp),
                TxnStatus::Aborted => Creator::Aborted,
            },
            // The slot moved on, so the creator finished its post-commit or
            // abort; a committed creator has replaced the TID by now.
            None => match v.cstamp_word().as_timestamp() {
                Some(c) => Creator::Committed(c),
                None => Creator::Aborted,
            },
        }
    }

    /// The version `me` reads, with its commit stamp (`None` for an own write).
    pub fn visible_version(
        &self,
        key: usize,
        vis: Visibility,
        table: &TransactionTable,
        me: Tid,
    ) -> Option<(&Version, Option<Timestamp>)> {
        let mut v: &Version = self.record(key)?.head();
        loop {
            let next = match self.creator(v, table, me) {
                Creator::Own => return Some((v, None)),
                Creator::Committed(c) => match vis {
                    Visibility::LatestCommitted => return Some((v, Some(c))),
                    Visibility::Snapshot(begin) if c <= begin => return Some((v, Some(c))),
                    Visibility::Snapshot(_) => v.prev(),
                },
                Creator::InFlight | Creator::Aborted => v.prev(),
                Creator::Committing(c) => match vis {
                    Visibility::LatestCommitted => v.prev(),
                    Visibility::Snapshot(begin) => {
                        if c == 0 || c < begin {
                            // outcome decides visibility; it is imminent
                            std::thread::yield_now();
                            Some(v)
                        } else {
                            v.prev()
                        }
                    }
                },
            };
            // the initial version is committed, so the walk ends there
            v = next.expect("version chain ends in a committed version");
        }
    }

    /// Install a new version of `key` written by `me`.
    pub fn install_version(
        &self,
        key: usize,
        payload: u64,
        vis: Visibility,
        table: &TransactionTable,
        me: Tid,
    ) -> Option<Install<'_>> {
        let rec = self.record(key)?;
        loop {
            let head = rec.head();
            let prev_cstamp = match self.creator(head, table, me) {
                Creator::Own => {
                    head.payload.store(payload, SeqCst);
                    return Some(Install::Replaced(head));
                }
                Creator::InFlight | Creator::Committing(_) => return Some(Install::Conflict),
                Creator::Aborted => {
                    spin_while(|| ptr::eq(rec.head(), head));
                    continue;
                }
                Creator::Committed(c) => c,
            };
            if let Visibility::Snapshot(begin) = vis {
                if prev_cstamp > begin {
                    return Some(Install::Conflict);
                }
            }
            let claim = StampWord::tid(me);
            match head
                .sstamp
                .compare_exchange(INFINITY, claim.raw(), SeqCst, SeqCst)
            {
                Ok(_) => {}
                Err(seen) if StampWord::from_raw(seen).is_tid() => return Some(Install::Conflict),
                // committed overwriter: the head has already moved on
                Err(_) => continue,
            }
            let new = self
                .versions
                .alloc(Version::new(key, claim, payload, head));
            let head_ptr = head as *const Version as *mut Version;
            let new_ptr = new as *const Version as *mut Version;
            if rec
                .head
                .compare_exchange(head_ptr, new_ptr, SeqCst, SeqCst)
                .is_err()
            {
                head.sstamp.store(INFINITY, SeqCst);
                return Some(Install::Conflict);
            }
            return Some(Install::New(WriteEntry {
                new,
                prev: head,
                prev_cstamp,
            }));
        }
    }

    /// Post-commit of one write (`pi` is the writer's final successor stamp).
    pub fn finalize_write(&self, w: &WriteEntry<'_>, cstamp: Timestamp, pi: Timestamp) {
        w.prev.sstamp.store(StampWord::timestamp(pi).raw(), SeqCst);
        w.new.cstamp.store(StampWord::timestamp(cstamp).raw(), SeqCst);
        // fetch_max so a reader's earlier raise is not lost
        w.new.pstamp.fetch_max(cstamp, SeqCst);
    }

    /// Roll back one write: release the claim on `prev`, then unlink.
    pub fn rollback_write(&self, w: &WriteEntry<'_>) {
        w.prev.sstamp.store(INFINITY, SeqCst);
        w.prev.overwriter.store(ptr::null_mut(), SeqCst);
        let rec = &self.records[w.new.key];
        let unlinked = rec.head.compare_exchange(
            w.new as *const Version as *mut Version,
            w.prev as *const Version as *mut Version,
            SeqCst,
            SeqCst,
        );
        debug_assert!(unlinked.is_ok(), "uncommitted version was not the head");
    }

    /// Stamps of every version of `key`, newest first.
    pub fn chain(&self, key: usize) -> Vec<VersionStamps> {
        let mut out = Vec::new();
        let mut v = self.record(key).map(Record::head);
        while let Some(cur) = v {
            out.push(cur.snapshot());
            v = cur.prev();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn setup() -> (Store, TransactionTable) {
        (Store::new(4), TransactionTable::new(4).unwrap())
    }

    #[test]
    fn initial_version_is_invalid_and_committed_at_zero() {
        let (s, t) = setup();
        let me = t.begin(0, false).unwrap();
        let (v, c) = s.visible_version(0, Visibility::LatestCommitted, &t, me).unwrap();
        assert_eq!(c, Some(0));
        assert_eq!(v.payload(), None);
        assert_eq!(v.cstamp_word(), StampWord::timestamp(0));
        assert!(v.sstamp_word().is_infinity());
        assert!(s.visible_version(9, Visibility::LatestCommitted, &t, me).is_none());
    }

    #[test]
    fn snapshot_picks_version_before_begin() {
        let (s, t) = setup();
        s.load_committed(0, 3, 30);
        s.load_committed(0, 7, 70);
        let me = t.begin(0, false).unwrap();
        let (v, _) = s.visible_version(0, Visibility::Snapshot(5), &t, me).unwrap();
        assert_eq!(v.cstamp_word().value(), 3);
        let (v, _) = s.visible_version(0, Visibility::LatestCommitted, &t, me).unwrap();
        assert_eq!(v.cstamp_word().value(), 7);
    }

    #[test]
    fn uncommitted_head_is_skipped() {
        let (s, t) = setup();
        s.load_committed(0, 3, 30);
        let other = t.begin(1, false).unwrap();
        let me = t.begin(0, false).unwrap();
        assert!(matches!(
            s.install_version(0, 99, Visibility::LatestCommitted, &t, other),
            Some(Install::New(_))
        ));
        let (v, _) = s.visible_version(0, Visibility::LatestCommitted, &t, me).unwrap();
        assert_eq!(v.cstamp_word().value(), 3);
        // but the writer reads its own version
        let (v, c) = s.visible_version(0, Visibility::LatestCommitted, &t, other).unwrap();
        assert_eq!((v.payload(), c), (Some(99), None));
    }

    #[test]
    fn si_temporal_skew_conflicts() {
        let (s, t) = setup();
        s.load_committed(0, 7, 70);
        let me = t.begin(0, false).unwrap();
        assert!(matches!(
            s.install_version(0, 1, Visibility::Snapshot(5), &t, me),
            Some(Install::Conflict)
        ));
        match s.install_version(0, 1, Visibility::LatestCommitted, &t, me) {
            Some(Install::New(w)) => {
                assert_eq!(w.new.cstamp_word(), StampWord::tid(me));
                assert_eq!(w.prev.sstamp_word(), StampWord::tid(me));
                assert_eq!(w.prev_cstamp, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uncommitted_write_write_conflicts() {
        let (s, t) = setup();
        let a = t.begin(0, false).unwrap();
        let b = t.begin(1, false).unwrap();
        assert!(matches!(
            s.install_version(0, 1, Visibility::LatestCommitted, &t, a),
            Some(Install::New(_))
        ));
        assert!(matches!(
            s.install_version(0, 2, Visibility::LatestCommitted, &t, b),
            Some(Install::Conflict)
        ));
    }

    #[test]
    fn own_overwrite_replaces_payload() {
        let (s, t) = setup();
        let a = t.begin(0, false).unwrap();
        s.install_version(0, 1, Visibility::LatestCommitted, &t, a);
        assert!(matches!(
            s.install_version(0, 2, Visibility::LatestCommitted, &t, a),
            Some(Install::Replaced(_))
        ));
        assert_eq!(s.chain(0).len(), 2);
        assert_eq!(s.chain(0)[0].payload, Some(2));
    }

    #[test]
    fn reader_bits() {
        let (s, _) = setup();
        let v = s.record(0).unwrap().head();
        assert!(v.register_reader(2));
        assert_eq!(v.readers(), 0b100);
        assert!(!v.register_reader(2));
        v.clear_reader(2);
        assert_eq!(v.readers(), 0);
    }

    #[test]
    fn pstamp_raise_keeps_max() {
        let (s, _) = setup();
        let v = s.record(0).unwrap().head();
        v.raise_pstamp(4);
        v.raise_pstamp(9);
        v.raise_pstamp(6);
        assert_eq!(v.pstamp(), 9);
    }

    #[test]
    fn finalize_and_rollback() {
        let (s, t) = setup();
        let a = t.begin(0, false).unwrap();
        let Some(Install::New(w)) = s.install_version(1, 5, Visibility::LatestCommitted, &t, a)
        else {
            panic!()
        };
        s.rollback_write(&w);
        assert_eq!(s.chain(1).len(), 1);
        assert!(s.chain(1)[0].sstamp.is_infinity());

        let Some(Install::New(w)) = s.install_version(2, 5, Visibility::LatestCommitted, &t, a)
        else {
            panic!()
        };
        s.finalize_write(&w, 9, 4);
        let chain = s.chain(2);
        assert_eq!(chain[0].cstamp, StampWord::timestamp(9));
        assert_eq!(chain[0].pstamp, 9);
        assert_eq!(chain[1].sstamp, StampWord::timestamp(4));
    }

    #[test]
    fn concurrent_installers_leave_one_uncommitted_head() {
        let store = Arc::new(Store::new(1));
        let table = Arc::new(TransactionTable::new(8).unwrap());
        let hs: Vec<_> = (0..8)
            .map(|slot| {
                let (store, table) = (Arc::clone(&store), Arc::clone(&table));
                std::thread::spawn(move || {
                    let me = table.begin(slot, false).unwrap();
                    matches!(
                        store.install_version(0, slot as u64, Visibility::LatestCommitted, &table, me),
                        Some(Install::New(_))
                    )
                })
            })
            .collect();
        let winners = hs.into_iter().map(|h| h.join().unwrap()).filter(|&w| w).count();
        assert_eq!(winners, 1);
        let uncommitted = store.chain(0).iter().filter(|v| v.cstamp.is_tid()).count();
        assert_eq!(uncommitted, 1);
    }
}
