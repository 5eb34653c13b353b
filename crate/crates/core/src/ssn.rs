//! Serial safety net certifier.
//!
//! A transaction T keeps two watermarks: `pstamp` (eta, the latest commit
//! stamp among committed predecessors reached through forward edges) and
//! `sstamp` (pi, the earliest successor reached through back edges). T may
//! commit only while `pi > eta`.
//!
//! Read-mostly transactions leave stale versions out of their read set. Their
//! reader bits stay set after they conclude, the slot's `last_cstamp` stands
//! in for their commit stamp, and updaters lower their `sstamp` directly
//! until the reader seals it with the lock bit.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};

use crate::engine::{CommitInfo, ReadResult, Transaction};
use crate::error::{AbortReason, Result};
use crate::kernel::{StampWord, Timestamp, TxnStatus, INFINITY};
use crate::mvstore::{Version, WriteEntry};
use crate::schedulers::Scheme;

/// `true` iff `pi <= eta`. `pi == INFINITY` never violates.
pub fn verify_exclusion(pi: Timestamp, eta: Timestamp) -> bool {
    pi != INFINITY && pi <= eta
}

/// Staleness filter: a version last committed more than `threshold` ticks ago
/// is read without tracking. `threshold == 0` keeps every read tracked.
pub fn is_stale(now: Timestamp, version_cstamp: Timestamp, threshold: u64) -> bool {
    threshold > 0 && now.saturating_sub(version_cstamp) > threshold
}

const SNAPSHOT_RING: usize = 1024;

/// Published safe snapshot stamps, newest last.
pub struct SafeSnapshots {
    taking: AtomicBool,
    count: AtomicU64,
    ring: Box<[AtomicU64]>,
}

impl Default for SafeSnapshots {
    fn default() -> Self {
        SafeSnapshots {
            taking: AtomicBool::new(false),
            count: AtomicU64::new(0),
            ring: (0..SNAPSHOT_RING).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl SafeSnapshots {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draw and publish a snapshot stamp. Returns `None` if another thread is
    /// taking one at the same moment.
    pub fn take(&self, clock: &crate::kernel::Clock) -> Option<Timestamp> {
        if self
            .taking
            .compare_exchange(false, true, SeqCst, SeqCst)
            .is_err()
        {
            return None;
        }
        let s = clock.next_timestamp();
        let n = self.count.load(SeqCst);
        self.ring[n as usize % SNAPSHOT_RING].store(s, SeqCst);
        self.count.store(n + 1, SeqCst);
        self.taking.store(false, SeqCst);
        Some(s)
    }

    pub fn latest(&self) -> Option<Timestamp> {
        let n = self.count.load(SeqCst);
        (n > 0).then(|| self.ring[(n - 1) as usize % SNAPSHOT_RING].load(SeqCst))
    }

    pub fn latest_or_take(&self, clock: &crate::kernel::Clock) -> Timestamp {
        loop {
            if let Some(s) = self.latest().or_else(|| self.take(clock)) {
                return s;
            }
            std::thread::yield_now();
        }
    }

    /// Newest snapshot stamp below `c`. Falls back to `c - 1`, an upper bound
    /// on any such stamp, if it has been pushed out of the ring.
    pub fn latest_before(&self, c: Timestamp) -> Option<Timestamp> {
        crate::kernel::spin_while(|| self.taking.load(SeqCst));
        let n = self.count.load(SeqCst);
        let kept = n.min(SNAPSHOT_RING as u64);
        for i in 0..kept {
            let s = self.ring[((n - 1 - i) as usize) % SNAPSHOT_RING].load(SeqCst);
            if s < c {
                return Some(s);
            }
        }
        (n > kept).then(|| c - 1)
    }
}

/// Result of examining one reader slot during eta finalization.
enum Peer {
    /// Contributes this commit stamp (0 for nothing).
    Eta(Timestamp),
    /// A reader committed, or sealed, after us without learning our pi.
    Missed,
}

impl<'e> Transaction<'e> {
    fn enforce(&self) -> bool {
        self.eng.cfg.enforce
    }

    fn mark_untracked(&mut self) {
        if !self.untracked_mode {
            self.eng.table.slot(self.slot).set_untracked();
            self.untracked_mode = true;
        }
    }

    fn early_check(&mut self) -> Result<()> {
        if self.enforce() && verify_exclusion(self.sstamp(), self.pstamp) {
            return Err(self.abort_with(AbortReason::SsnExclusion));
        }
        Ok(())
    }

    pub(crate) fn ssn_read(&mut self, v: &'e Version, cv: Timestamp) -> Result<()> {
        let e = self.eng;
        let slot = e.table.slot(self.slot);
        self.pstamp = self.pstamp.max(cv);
        if e.cfg.hierarchical {
            self.point_reads = true;
        }
        let stale = self.opts.read_mostly && is_stale(e.clock.current(), cv, e.cfg.staleness_threshold);
        if stale {
            self.mark_untracked();
        }
        // register before loading sstamp; an overwriter scans bits after
        // installing its TID, so one of the two sees the other
        let newly = v.register_reader(self.slot);
        let s = v.sstamp_word();
        if s.is_tid() || (s.is_infinity() && !stale) {
            self.reads.push((v, newly));
            self.tracked_reads += 1;
        } else if s.is_infinity() {
            self.untracked_reads += 1;
        } else {
            slot.lower_sstamp(s.value());
            if newly && !stale {
                v.clear_reader(self.slot);
            }
        }
        self.early_check()
    }

    pub(crate) fn ssn_write(&mut self, w: &WriteEntry<'e>) -> Result<()> {
        self.pstamp = self.pstamp.max(w.prev.pstamp());
        self.early_check()
    }

    /// Whole-table read under the table R mode.
    pub(crate) fn ssn_scan(&mut self) -> Result<Vec<ReadResult>> {
        let e = self.eng;
        let slot = e.table.slot(self.slot);
        self.mark_untracked();
        e.tstamps.register_reader(self.slot);
        self.scanned = true;
        let vis = self.opts.scheme.visibility(self.begin);
        let mut out = Vec::with_capacity(e.store.len());
        for key in 0..e.store.len() {
            let (v, cstamp) = e
                .store
                .visible_version(key, vis, &e.table, self.tid)
                .expect("key in range");
            out.push(ReadResult {
                payload: v.payload(),
                version_cstamp: cstamp,
            });
            let Some(cv) = cstamp else { continue };
            self.pstamp = self.pstamp.max(cv);
            let s = v.sstamp_word();
            if s.is_tid() {
                self.reads.push((v, false));
                self.tracked_reads += 1;
            } else if s.is_infinity() {
                self.untracked_reads += 1;
            } else {
                slot.lower_sstamp(s.value());
            }
        }
        self.early_check()?;
        Ok(out)
    }

    /// Commit stamp: read-only SI transactions commit at their snapshot.
    fn acquire_cstamp(&self) -> Timestamp {
        if self.opts.scheme == Scheme::Si && self.writes.is_empty() {
            self.begin
        } else {
            self.eng.clock.next_timestamp()
        }
    }

    fn snapshot_fold(&self, c: Timestamp) -> Timestamp {
        if self.writes.is_empty() {
            return 0;
        }
        let Some(s) = self.eng.snapshots.latest_before(c) else {
            return 0;
        };
        if self.writes.iter().any(|w| w.prev_cstamp < s) {
            s
        } else {
            0
        }
    }

    /// Latched commit; the caller holds the global commit latch.
    pub(crate) fn ssn_commit_serial(&mut self) -> Result<CommitInfo> {
        let e = self.eng;
        e.table
            .transition_status(self.slot, TxnStatus::InFlight, TxnStatus::Committing)?;
        let c = self.acquire_cstamp();
        e.table.slot(self.slot).set_cstamp(c);

        let mut pi = self.sstamp().min(c);
        for &(v, _) in &self.reads {
            let s = v.sstamp_word();
            // a TID here belongs to an overwriter that has not committed
            if !s.is_tid() {
                pi = pi.min(s.value());
            }
        }
        let mut eta = self.pstamp;
        for w in &self.writes {
            eta = eta.max(w.prev.pstamp());
        }
        let snap = self.snapshot_fold(c);
        self.conclude(c, pi, eta, snap, false)
    }

    /// Latch-free commit.
    pub(crate) fn ssn_parallel_commit(&mut self) -> Result<CommitInfo> {
        let e = self.eng;
        let slot = e.table.slot(self.slot);
        e.table
            .transition_status(self.slot, TxnStatus::InFlight, TxnStatus::Committing)?;
        let c = self.acquire_cstamp();
        slot.set_cstamp(c);

        let mut pi = self.sstamp().min(c);
        for i in 0..self.reads.len() {
            pi = pi.min(self.successor_stamp(self.reads[i].0, c));
        }
        if self.untracked_mode {
            slot.lower_sstamp(pi);
            pi = slot.seal_sstamp();
        }

        let mut eta = self.pstamp;
        let mut missed = false;
        for i in 0..self.writes.len() {
            let prev = self.writes[i].prev;
            let (r, m) = self.readers_eta(prev.readers(), c, pi);
            eta = eta.max(r);
            missed |= m;
            // re-read in case a reader finished after the bitmap scan
            eta = eta.max(prev.pstamp());
        }
        if e.cfg.hierarchical && !self.writes.is_empty() {
            let (r, m) = self.readers_eta(e.tstamps.readers(), c, pi);
            eta = eta.max(r);
            missed |= m;
            let tp = e.tstamps.pstamp();
            if tp < c {
                eta = eta.max(tp);
            }
        }
        let snap = self.snapshot_fold(c);
        self.conclude(c, pi, eta, snap, missed)
    }

    fn conclude(
        &mut self,
        c: Timestamp,
        pi: Timestamp,
        eta: Timestamp,
        snap: Timestamp,
        missed: bool,
    ) -> Result<CommitInfo> {
        let plain = missed || verify_exclusion(pi, eta);
        let violation = plain || verify_exclusion(pi, eta.max(snap));
        if violation && self.enforce() {
            let reason = if plain {
                AbortReason::SsnExclusion
            } else {
                AbortReason::SafeSnapshot
            };
            return Err(self.abort_with(reason));
        }
        if !self.untracked_mode {
            self.eng.table.slot(self.slot).lower_sstamp(pi);
        }
        self.finish_commit(c, pi)?;
        Ok(CommitInfo {
            cstamp: c,
            exclusion_violation: violation,
        })
    }

    /// Successor stamp contributed by a tracked read of `v`.
    fn successor_stamp(&self, v: &Version, c: Timestamp) -> Timestamp {
        let table = &self.eng.table;
        loop {
            let s = v.sstamp_word();
            let Some(u) = s.as_tid() else { return s.value() };
            if u == self.tid {
                return INFINITY;
            }
            let Some(view) = table.observe(u) else { continue };
            match view.status {
                TxnStatus::InFlight | TxnStatus::Aborted => return INFINITY,
                TxnStatus::Committing if view.cstamp == 0 => {}
                _ if view.cstamp > c => return INFINITY,
                TxnStatus::Committing => {}
                TxnStatus::Committed => return view.sstamp.value(),
            }
            std::thread::yield_now();
        }
    }

    /// Fold the readers in `bits` into eta. The flag reports a reader we could
    /// not account for.
    fn readers_eta(&self, bits: u64, c: Timestamp, pi: Timestamp) -> (Timestamp, bool) {
        let table = &self.eng.table;
        let mut bits = bits & !(1u64 << self.slot);
        let mut eta = 0;
        let mut missed = false;
        while bits != 0 {
            let r = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            if r >= table.workers() {
                continue;
            }
            match self.peer_eta(r, c, pi) {
                Peer::Eta(x) => eta = eta.max(x),
                Peer::Missed => missed = true,
            }
            // read-mostly transactions that already left this slot
            let lc = table.slot(r).last_cstamp();
            if lc >= c {
                missed = true;
            } else {
                eta = eta.max(lc);
            }
        }
        (eta, missed)
    }

    fn peer_eta(&self, r: usize, c: Timestamp, pi: Timestamp) -> Peer {
        let table = &self.eng.table;
        let slot_r = table.slot(r);
        loop {
            let view = table.observe_slot(r);
            match view.status {
                TxnStatus::Aborted => return Peer::Eta(0),
                TxnStatus::InFlight if !view.untracked => return Peer::Eta(0),
                TxnStatus::Committed => {
                    return if view.cstamp < c {
                        Peer::Eta(view.cstamp)
                    } else if view.untracked {
                        Peer::Missed
                    } else {
                        Peer::Eta(0)
                    };
                }
                TxnStatus::Committing if !view.untracked => {
                    if view.cstamp != 0 && view.cstamp > c {
                        return Peer::Eta(0);
                    }
                }
                _ => {
                    // untracked reader still running: hand it our pi
                    let cur = view.sstamp;
                    if cur.is_locked() || (view.cstamp != 0 && view.cstamp < c) {
                        if view.cstamp > c {
                            return Peer::Missed;
                        }
                        // earlier reader: a forward edge once it commits
                    } else if cur.value() <= pi
                        || slot_r.cas_sstamp(cur, StampWord::timestamp(pi)).is_ok()
                    {
                        return Peer::Eta(0);
                    }
                }
            }
            std::thread::yield_now();
        }
    }
}
