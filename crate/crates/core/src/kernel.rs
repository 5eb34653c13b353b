//! Timestamps, stamp words, transaction status and the thread-indexed
//! transaction table.
//!
//! Every stamp the engine stores (commit stamps, successor stamps, predecessor
//! stamps) lives in a single 64-bit word so it can be read and updated with one
//! atomic instruction. A word carries either a timestamp or a transaction id:
//!
//! ```text
//!  63   62   61 ........................................ 0
//! +----+----+-------------------------------------------+
//! |lock|tid |                 value                      |
//! +----+----+-------------------------------------------+
//! ```

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering::SeqCst};

use crate::error::{Error, Result};

/// Logical commit time. Zero is reserved for "invalid" / never committed.
pub type Timestamp = u64;

pub const LOCK_BIT: u64 = 1 << 63;
pub const TID_BIT: u64 = 1 << 62;
pub const VALUE_MASK: u64 = TID_BIT - 1;

/// Largest representable timestamp; used as the `+inf` successor stamp.
pub const INFINITY: Timestamp = VALUE_MASK;

/// Maximum number of worker slots. A readers bitmap is one `u64`.
pub const MAX_WORKERS: usize = 64;

const SLOT_BITS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StampKind {
    Timestamp,
    Tid,
}

/// A tagged 64-bit stamp.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StampWord(u64);

impl StampWord {
    pub const INFINITY: StampWord = StampWord(INFINITY);
    pub const INVALID: StampWord = StampWord(0);

    pub const fn from_raw(raw: u64) -> Self {
        StampWord(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn encode(kind: StampKind, value: u64, locked: bool) -> Self {
        assert!(value <= VALUE_MASK, "stamp value {value} exceeds 62 bits");
        let mut raw = value;
        if kind == StampKind::Tid {
            raw |= TID_BIT;
        }
        if locked {
            raw |= LOCK_BIT;
        }
        StampWord(raw)
    }

    pub fn decode(self) -> (StampKind, u64, bool) {
        (self.kind(), self.value(), self.is_locked())
    }

    pub fn timestamp(ts: Timestamp) -> Self {
        Self::encode(StampKind::Timestamp, ts, false)
    }

    pub fn tid(tid: Tid) -> Self {
        Self::encode(StampKind::Tid, tid.0, false)
    }

    pub const fn kind(self) -> StampKind {
        if self.0 & TID_BIT != 0 {
            StampKind::Tid
        } else {
            StampKind::Timestamp
        }
    }

    pub const fn value(self) -> u64 {
        self.0 & VALUE_MASK
    }

    pub const fn is_locked(self) -> bool {
        self.0 & LOCK_BIT != 0
    }

    pub const fn is_tid(self) -> bool {
        self.0 & TID_BIT != 0
    }

    /// `+inf` regardless of the lock flag.
    pub const fn is_infinity(self) -> bool {
        !self.is_tid() && self.value() == INFINITY
    }

    pub const fn as_tid(self) -> Option<Tid> {
        if self.is_tid() {
            Some(Tid(self.value()))
        } else {
            None
        }
    }

    pub const fn as_timestamp(self) -> Option<Timestamp> {
        if self.is_tid() {
            None
        } else {
            Some(self.value())
        }
    }
}

impl fmt::Debug for StampWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lock = if self.is_locked() { "+lock" } else { "" };
        match self.kind() {
            StampKind::Tid => write!(f, "Tid({}){lock}", self.value()),
            StampKind::Timestamp if self.is_infinity() => write!(f, "Inf{lock}"),
            StampKind::Timestamp => write!(f, "Ts({}){lock}", self.value()),
        }
    }
}

/// Transaction identifier. The low six bits name the worker slot that runs
/// the transaction; the rest is a per-slot sequence number starting at 1, so
/// no TID is ever 0 (0 names the initial "invalid" versions in traces).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tid(pub u64);

impl Tid {
    pub fn new(slot: usize, seq: u64) -> Self {
        assert!(slot < MAX_WORKERS && seq >= 1);
        let value = (seq << SLOT_BITS) | slot as u64;
        assert!(value <= VALUE_MASK, "tid space exhausted");
        Tid(value)
    }

    pub fn slot(self) -> usize {
        (self.0 & ((1 << SLOT_BITS) - 1)) as usize
    }
}

impl fmt::Debug for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Global commit-order counter.
#[derive(Debug, Default)]
pub struct Clock {
    last: AtomicU64,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Strictly increasing, never 0.
    pub fn next_timestamp(&self) -> Timestamp {
        let ts = self.last.fetch_add(1, SeqCst) + 1;
        assert!(ts < INFINITY, "timestamp counter exhausted");
        ts
    }

    /// Most recently issued timestamp (0 before the first draw).
    pub fn current(&self) -> Timestamp {
        self.last.load(SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TxnStatus {
    InFlight = 0,
    Committing = 1,
    Committed = 2,
    Aborted = 3,
}

impl TxnStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => TxnStatus::InFlight,
            1 => TxnStatus::Committing,
            2 => TxnStatus::Committed,
            3 => TxnStatus::Aborted,
            _ => unreachable!("corrupt status byte {v}"),
        }
    }

    pub fn can_transition(self, to: TxnStatus) -> bool {
        use TxnStatus::*;
        matches!(
            (self, to),
            (InFlight, Committing) | (InFlight, Aborted) | (Committing, Committed) | (Committing, Aborted)
        )
    }

    pub fn is_concluded(self) -> bool {
        matches!(self, TxnStatus::Committed | TxnStatus::Aborted)
    }
}

/// What a peer can see of another slot's transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeerView {
    pub tid: Tid,
    pub status: TxnStatus,
    pub cstamp: Timestamp,
    pub sstamp: StampWord,
    pub untracked: bool,
}

/// One entry of the transaction table. Written only by the worker that owns
/// the slot, except for `sstamp`, which updaters may lower by CAS while the
/// owner runs in untracked-read mode.
#[derive(Debug)]
pub struct TxnSlot {
    occupied: AtomicBool,
    seq: AtomicU64,
    tid: AtomicU64,
    status: AtomicU8,
    cstamp: AtomicU64,
    sstamp: AtomicU64,
    last_cstamp: AtomicU64,
    untracked: AtomicBool,
}

impl TxnSlot {
    fn new() -> Self {
        TxnSlot {
            occupied: AtomicBool::new(false),
            seq: AtomicU64::new(0),
            tid: AtomicU64::new(0),
            status: AtomicU8::new(TxnStatus::Aborted as u8),
            cstamp: AtomicU64::new(0),
            sstamp: AtomicU64::new(INFINITY),
            last_cstamp: AtomicU64::new(0),
            untracked: AtomicBool::new(false),
        }
    }

    pub fn status(&self) -> TxnStatus {
        TxnStatus::from_u8(self.status.load(SeqCst))
    }

    pub fn cstamp(&self) -> Timestamp {
        self.cstamp.load(SeqCst)
    }

    pub fn set_cstamp(&self, ts: Timestamp) {
        self.cstamp.store(ts, SeqCst);
    }

    pub fn sstamp_word(&self) -> StampWord {
        StampWord::from_raw(self.sstamp.load(SeqCst))
    }

    /// Owner-side `sstamp = min(sstamp, ts)`; the lock bit must be clear.
    pub fn lower_sstamp(&self, ts: Timestamp) {
        debug_assert!(!self.sstamp_word().is_locked());
        self.sstamp.fetch_min(ts, SeqCst);
    }

    /// Seal the successor stamp: after this no peer may lower it.
    pub fn seal_sstamp(&self) -> Timestamp {
        StampWord::from_raw(self.sstamp.fetch_or(LOCK_BIT, SeqCst)).value()
    }

    /// Peer-side CAS of an unsealed successor stamp.
    pub fn cas_sstamp(&self, current: StampWord, new: StampWord) -> std::result::Result<(), StampWord> {
        self.sstamp
            .compare_exchange(current.raw(), new.raw(), SeqCst, SeqCst)
            .map(|_| ())
            .map_err(StampWord::from_raw)
    }

    pub fn last_cstamp(&self) -> Timestamp {
        self.last_cstamp.load(SeqCst)
    }

    pub fn publish_last_cstamp(&self, ts: Timestamp) {
        let prev = self.last_cstamp.fetch_max(ts, SeqCst);
        debug_assert!(prev <= ts, "last_cstamp went backwards");
    }

    pub fn tid(&self) -> Tid {
        Tid(self.tid.load(SeqCst))
    }

    /// Announce untracked reads. Must precede the reader-bit registration
    /// of the first untracked read.
    pub fn set_untracked(&self) {
        self.untracked.store(true, SeqCst);
    }

    pub fn is_occupied(&self) -> bool {
        self.occupied.load(SeqCst)
    }
}

/// Centralized table, one entry per worker slot.
#[derive(Debug)]
pub struct TransactionTable {
    slots: Box<[TxnSlot]>,
}

impl TransactionTable {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 || workers > MAX_WORKERS {
            return Err(Error::InvalidConfig(format!(
                "worker count must be in 1..={MAX_WORKERS}, got {workers}"
            )));
        }
        Ok(TransactionTable {
            slots: (0..workers).map(|_| TxnSlot::new()).collect(),
        })
    }

    pub fn workers(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, i: usize) -> &TxnSlot {
        &self.slots[i]
    }

    /// Publish a fresh transaction in slot `i`.
    pub fn begin(&self, i: usize, untracked: bool) -> Result<Tid> {
        let slot = self.slots.get(i).ok_or(Error::SlotOutOfRange(i, self.slots.len()))?;
        if slot
            .occupied
            .compare_exchange(false, true, SeqCst, SeqCst)
            .is_err()
        {
            return Err(Error::SlotOccupied(i));
        }
        let seq = slot.seq.fetch_add(1, SeqCst) + 1;
        let tid = Tid::new(i, seq);
        // Blank the tid while the fields are reset: an observer that reads the
        // same tid before and after the fields saw a consistent entry.
        slot.tid.store(0, SeqCst);
        slot.status.store(TxnStatus::InFlight as u8, SeqCst);
        slot.cstamp.store(0, SeqCst);
        slot.sstamp.store(INFINITY, SeqCst);
        slot.untracked.store(untracked, SeqCst);
        slot.tid.store(tid.0, SeqCst);
        Ok(tid)
    }

    pub fn release(&self, i: usize) {
        debug_assert!(self.slots[i].status().is_concluded());
        self.slots[i].occupied.store(false, SeqCst);
    }

    /// Move slot `i` from `from` to `to`.
    pub fn transition_status(&self, i: usize, from: TxnStatus, to: TxnStatus) -> Result<()> {
        let slot = &self.slots[i];
        if !from.can_transition(to) {
            return Err(Error::Invariant(format!("illegal status edge {from:?} -> {to:?}")));
        }
        slot.status
            .compare_exchange(from as u8, to as u8, SeqCst, SeqCst)
            .map(|_| ())
            .map_err(|cur| {
                Error::Invariant(format!(
                    "status of slot {i} is {:?}, expected {from:?}",
                    TxnStatus::from_u8(cur)
                ))
            })
    }

    /// Snapshot of the transaction `tid`, or `None` once its slot has moved on.
    pub fn observe(&self, tid: Tid) -> Option<PeerView> {
        let slot = self.slots.get(tid.slot())?;
        if tid.0 == 0 || slot.tid.load(SeqCst) != tid.0 {
            return None;
        }
        let view = self.read_fields(slot, tid);
        if slot.tid.load(SeqCst) != tid.0 {
            return None;
        }
        Some(view)
    }

    /// Consistent snapshot of whatever transaction last owned slot `i`. A
    /// slot between owners reads as an aborted transaction with tid 0.
    pub fn observe_slot(&self, i: usize) -> PeerView {
        let slot = &self.slots[i];
        loop {
            let tid = Tid(slot.tid.load(SeqCst));
            if tid.0 == 0 {
                return PeerView {
                    tid,
                    status: TxnStatus::Aborted,
                    cstamp: 0,
                    sstamp: StampWord::INFINITY,
                    untracked: false,
                };
            }
            let view = self.read_fields(slot, tid);
            if slot.tid.load(SeqCst) == tid.0 {
                return view;
            }
        }
    }

    fn read_fields(&self, slot: &TxnSlot, tid: Tid) -> PeerView {
        PeerView {
            tid,
            status: slot.status(),
            cstamp: slot.cstamp(),
            sstamp: slot.sstamp_word(),
            untracked: slot.untracked.load(SeqCst),
        }
    }
}

pub(crate) const SPIN_LIMIT: u64 = 1_000_000_000;

/// Yielding spin. Debug builds assert the wait is finite.
pub(crate) fn spin_while(mut cond: impl FnMut() -> bool) {
    let mut n: u64 = 0;
    while cond() {
        n += 1;
        debug_assert!(n < SPIN_LIMIT, "spin exceeded {SPIN_LIMIT} iterations");
        std::thread::yield_now();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn first_timestamp_is_one() {
        assert_eq!(Clock::new().next_timestamp(), 1);
    }

    #[test]
    fn sequential_timestamps_are_dense() {
        let clock = Clock::new();
        let got: Vec<_> = (0..1000).map(|_| clock.next_timestamp()).collect();
        let want: Vec<_> = (1..=1000).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn concurrent_timestamps_are_unique() {
        let clock = Arc::new(Clock::new());
        let threads = 8;
        let per = 100_000;
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                let clock = Arc::clone(&clock);
                std::thread::spawn(move || {
                    let mut v = Vec::with_capacity(per);
                    let mut last = 0;
                    for _ in 0..per {
                        let ts = clock.next_timestamp();
                        assert!(ts > last);
                        last = ts;
                        v.push(ts);
                    }
                    v
                })
            })
            .collect();
        let mut all = HashSet::new();
        for h in handles {
            for ts in h.join().unwrap() {
                assert!(all.insert(ts), "duplicate timestamp {ts}");
            }
        }
        assert_eq!(all.len(), threads * per);
    }

    #[test]
    fn infinity_layout() {
        let inf = StampWord::INFINITY;
        assert_eq!(inf.kind(), StampKind::Timestamp);
        assert_eq!(inf.value(), (1 << 62) - 1);
        assert!(!inf.is_locked());
        assert!(StampWord::encode(StampKind::Timestamp, INFINITY, true).is_infinity());
    }

    #[test]
    fn tid_tag_and_slot() {
        let tid = Tid::new(5, 3);
        let w = StampWord::tid(tid);
        assert_eq!(w.raw(), TID_BIT | (3 << 6) | 5);
        assert_eq!(w.as_tid(), Some(tid));
        assert_eq!(tid.slot(), 5);
        assert!(w.as_timestamp().is_none());
    }

    proptest! {
        #[test]
        fn stamp_word_round_trip(value in 0u64..=VALUE_MASK, tid in any::<bool>(), locked in any::<bool>()) {
            let kind = if tid { StampKind::Tid } else { StampKind::Timestamp };
            let w = StampWord::encode(kind, value, locked);
            prop_assert_eq!(w.decode(), (kind, value, locked));
            prop_assert_eq!(StampWord::from_raw(w.raw()), w);
        }
    }

    #[test]
    fn begin_initializes_slot() {
        let table = TransactionTable::new(4).unwrap();
        let tid = table.begin(0, false).unwrap();
        let view = table.observe(tid).unwrap();
        assert_eq!(view.status, TxnStatus::InFlight);
        assert_eq!(view.cstamp, 0);
        assert!(view.sstamp.is_infinity());
    }

    #[test]
    fn begin_on_busy_slot_is_usage_error() {
        let table = TransactionTable::new(4).unwrap();
        table.begin(0, false).unwrap();
        assert!(matches!(table.begin(0, false), Err(Error::SlotOccupied(0))));
        assert!(matches!(table.begin(9, false), Err(Error::SlotOutOfRange(9, 4))));
    }

    #[test]
    fn status_edges() {
        let table = TransactionTable::new(1).unwrap();
        table.begin(0, false).unwrap();
        table
            .transition_status(0, TxnStatus::InFlight, TxnStatus::Committing)
            .unwrap();
        table
            .transition_status(0, TxnStatus::Committing, TxnStatus::Committed)
            .unwrap();
        assert!(table
            .transition_status(0, TxnStatus::Committed, TxnStatus::Aborted)
            .is_err());
        table.release(0);

        table.begin(0, false).unwrap();
        table
            .transition_status(0, TxnStatus::InFlight, TxnStatus::Aborted)
            .unwrap();
    }

    #[test]
    fn observe_rejects_stale_tid() {
        let table = TransactionTable::new(1).unwrap();
        let t1 = table.begin(0, false).unwrap();
        table.transition_status(0, TxnStatus::InFlight, TxnStatus::Aborted).unwrap();
        table.release(0);
        let t2 = table.begin(0, false).unwrap();
        assert_ne!(t1, t2);
        assert!(table.observe(t1).is_none());
        assert_eq!(table.observe(t2).unwrap().tid, t2);
    }

    #[test]
    fn sealed_sstamp_rejects_cas() {
        let table = TransactionTable::new(1).unwrap();
        table.begin(0, true).unwrap();
        let slot = table.slot(0);
        let cur = slot.sstamp_word();
        slot.cas_sstamp(cur, StampWord::timestamp(9)).unwrap();
        assert_eq!(slot.seal_sstamp(), 9);
        let sealed = slot.sstamp_word();
        assert!(sealed.is_locked());
        assert!(slot
            .cas_sstamp(StampWord::timestamp(9), StampWord::timestamp(4))
            .is_err());
    }

    #[test]
    fn non_inflight_status_implies_cstamp_soon() {
        let table = Arc::new(TransactionTable::new(2).unwrap());
        let clock = Arc::new(Clock::new());
        for _ in 0..200 {
            let tid = table.begin(0, false).unwrap();
            let (t2, c2) = (Arc::clone(&table), Arc::clone(&clock));
            let committer = std::thread::spawn(move || {
                t2.transition_status(0, TxnStatus::InFlight, TxnStatus::Committing).unwrap();
                std::thread::yield_now();
                t2.slot(0).set_cstamp(c2.next_timestamp());
                t2.transition_status(0, TxnStatus::Committing, TxnStatus::Committed).unwrap();
            });
            while let Some(view) = table.observe(tid) {
                if view.status != TxnStatus::InFlight {
                    let mut spins = 0u64;
                    while table.slot(0).cstamp() == 0 {
                        spins += 1;
                        assert!(spins < 10_000_000, "cstamp never published");
                        std::thread::yield_now();
                    }
                    break;
                }
                std::thread::yield_now();
            }
            committer.join().unwrap();
            table.release(0);
        }
    }
}
