//! Engine facade: configuration, transaction lifecycle and dispatch to the
//! scheduler and certifier.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Mutex;

use crate::arena::PushArena;
use crate::error::{AbortReason, Error, Result};
use crate::kernel::{Clock, Tid, Timestamp, TransactionTable, TxnStatus, MAX_WORKERS};
use crate::mvstore::{Install, Store, TableStamps, Version, VersionStamps, WriteEntry};
use crate::schedulers::{self, Certifier, Scheme, SiNode, SsiTxn};
use crate::ssn::SafeSnapshots;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitPath {
    /// Commit under one global latch.
    Serial,
    /// Latch-free commit.
    Parallel,
}

impl std::str::FromStr for CommitPath {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "serial" => Ok(CommitPath::Serial),
            "parallel" => Ok(CommitPath::Parallel),
            _ => Err(format!("unknown commit path `{s}`")),
        }
    }
}

impl std::fmt::Display for CommitPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CommitPath::Serial => "serial",
            CommitPath::Parallel => "parallel",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub records: usize,
    pub workers: usize,
    pub certifier: Certifier,
    pub commit_path: CommitPath,
    /// `false` runs the certifier in observe mode: verdicts are reported in
    /// [`CommitInfo`] but never abort.
    pub enforce: bool,
    /// Read-mostly staleness threshold in clock ticks; 0 disables it.
    pub staleness_threshold: u64,
    /// Take a safe snapshot every this many commits; 0 disables it.
    pub safe_snapshot_interval: u64,
    /// Table-level stamps for scans (R / IR / IW modes).
    pub hierarchical: bool,
}

impl EngineConfig {
    pub fn new(records: usize, workers: usize, certifier: Certifier) -> Self {
        EngineConfig {
            records,
            workers,
            certifier,
            commit_path: CommitPath::Parallel,
            enforce: true,
            staleness_threshold: 0,
            safe_snapshot_interval: 0,
            hierarchical: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.workers == 0 || self.workers > MAX_WORKERS {
            return bad("workers must be in 1..=64");
        }
        if self.records == 0 {
            return bad("the store needs at least one record");
        }
        let ssn = self.certifier == Certifier::Ssn;
        if !ssn && (self.staleness_threshold > 0 || self.safe_snapshot_interval > 0 || self.hierarchical) {
            return bad("read-mostly, safe snapshots and table modes need the ssn certifier");
        }
        if self.commit_path == CommitPath::Serial && (self.staleness_threshold > 0 || self.hierarchical) {
            return bad("the serial commit path supports tracked reads only");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxnOptions {
    pub scheme: Scheme,
    /// Apply the staleness filter to reads.
    pub read_mostly: bool,
    /// Writes are rejected.
    pub read_only: bool,
    /// Read at the latest safe snapshot with no certification.
    pub use_safe_snapshot: bool,
}

impl TxnOptions {
    pub fn new(scheme: Scheme) -> Self {
        TxnOptions {
            scheme,
            read_mostly: false,
            read_only: false,
            use_safe_snapshot: false,
        }
    }

    pub fn read_mostly(mut self) -> Self {
        self.read_mostly = true;
        self
    }

    pub fn read_only(mut self) -> Self {
        self.read_only = true;
        self
    }

    pub fn on_safe_snapshot(mut self) -> Self {
        self.use_safe_snapshot = true;
        self.read_only = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadResult {
    /// `None` for a record that was never written.
    pub payload: Option<u64>,
    /// Commit stamp of the version read; `None` for an own write.
    pub version_cstamp: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOutcome {
    /// Payload of the overwritten version (`None` for the initial version).
    pub overwritten: Option<u64>,
    pub prev_cstamp: Option<Timestamp>,
    /// The transaction rewrote its own uncommitted version.
    pub replaced_own: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitInfo {
    pub cstamp: Timestamp,
    /// Observe mode only: the certifier would have aborted.
    pub exclusion_violation: bool,
}

pub struct Engine {
    pub(crate) cfg: EngineConfig,
    pub(crate) clock: Clock,
    pub(crate) table: TransactionTable,
    pub(crate) store: Store,
    pub(crate) tstamps: TableStamps,
    pub(crate) snapshots: SafeSnapshots,
    latch: Mutex<()>,
    commits: AtomicU64,
    ssi_states: PushArena<SsiTxn>,
    pub(crate) si_nodes: PushArena<SiNode>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Engine {
            table: TransactionTable::new(cfg.workers)?,
            store: Store::new(cfg.records),
            clock: Clock::new(),
            tstamps: TableStamps::default(),
            snapshots: SafeSnapshots::new(),
            latch: Mutex::new(()),
            commits: AtomicU64::new(0),
            ssi_states: PushArena::new(),
            si_nodes: PushArena::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn table(&self) -> &TransactionTable {
        &self.table
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn table_stamps(&self) -> &TableStamps {
        &self.tstamps
    }

    pub fn commits(&self) -> u64 {
        self.commits.load(SeqCst)
    }

    /// Stamps of every version of `key`, newest first.
    pub fn chain(&self, key: usize) -> Vec<VersionStamps> {
        self.store.chain(key)
    }

    /// Publish a safe snapshot now.
    pub fn take_safe_snapshot(&self) -> Option<Timestamp> {
        self.snapshots.take(&self.clock)
    }

    pub fn begin(&self, slot: usize, opts: TxnOptions) -> Result<Transaction<'_>> {
        if self.cfg.certifier == Certifier::Ssi && opts.scheme != Scheme::Si {
            return Err(Error::InvalidConfig("ssi runs over si only".into()));
        }
        if opts.use_safe_snapshot && (self.cfg.certifier != Certifier::Ssn || opts.scheme != Scheme::Si) {
            return Err(Error::InvalidConfig("safe snapshots need si+ssn".into()));
        }
        let tid = self.table.begin(slot, false)?;
        let begin = if opts.use_safe_snapshot {
            self.snapshots.latest_or_take(&self.clock)
        } else if opts.scheme == Scheme::Si {
            self.clock.next_timestamp()
        } else {
            0
        };
        let ssi = (self.cfg.certifier == Certifier::Ssi).then(|| self.ssi_states.alloc(SsiTxn::new(begin)));
        Ok(Transaction {
            eng: self,
            slot,
            tid,
            opts,
            begin,
            pstamp: 0,
            reads: Vec::new(),
            writes: Vec::new(),
            scanned: false,
            point_reads: false,
            untracked_mode: false,
            ssi,
            finished: false,
            tracked_reads: 0,
            untracked_reads: 0,
        })
    }

    pub(crate) fn note_commit(&self) {
        let n = self.commits.fetch_add(1, SeqCst) + 1;
        let k = self.cfg.safe_snapshot_interval;
        if k > 0 && n.is_multiple_of(k) {
            self.snapshots.take(&self.clock);
        }
    }
}

/// A tracked read: the version plus whether this transaction set its reader
/// bit (and so must clear it again).
pub(crate) type TrackedRead<'e> = (&'e Version, bool);

pub struct Transaction<'e> {
    pub(crate) eng: &'e Engine,
    pub(crate) slot: usize,
    pub(crate) tid: Tid,
    pub(crate) opts: TxnOptions,
    pub(crate) begin: Timestamp,
    pub(crate) pstamp: Timestamp,
    pub(crate) reads: Vec<TrackedRead<'e>>,
    pub(crate) writes: Vec<WriteEntry<'e>>,
    pub(crate) scanned: bool,
    pub(crate) point_reads: bool,
    pub(crate) untracked_mode: bool,
    pub(crate) ssi: Option<&'e SsiTxn>,
    finished: bool,
    pub(crate) tracked_reads: u64,
    pub(crate) untracked_reads: u64,
}

impl<'e> Transaction<'e> {
    pub fn tid(&self) -> Tid {
        self.tid
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn begin_stamp(&self) -> Timestamp {
        self.begin
    }

    pub fn pstamp(&self) -> Timestamp {
        self.pstamp
    }

    /// Current successor stamp (`INFINITY` until a back edge is seen).
    pub fn sstamp(&self) -> Timestamp {
        self.eng.table.slot(self.slot).sstamp_word().value()
    }

    pub fn tracked_reads(&self) -> u64 {
        self.tracked_reads
    }

    pub fn untracked_reads(&self) -> u64 {
        self.untracked_reads
    }

    pub fn read_set_len(&self) -> usize {
        self.reads.len()
    }

    pub fn write_set_len(&self) -> usize {
        self.writes.len()
    }

    fn ensure_active(&self) -> Result<()> {
        if self.finished {
            return Err(Error::Invariant("transaction already concluded".into()));
        }
        Ok(())
    }

    fn certifies(&self) -> bool {
        !self.opts.use_safe_snapshot
    }

    pub fn read(&mut self, key: usize) -> Result<ReadResult> {
        self.ensure_active()?;
        let e = self.eng;
        let vis = self.opts.scheme.visibility(self.begin);
        let (v, cstamp) = e
            .store
            .visible_version(key, vis, &e.table, self.tid)
            .ok_or(Error::NotFound(key))?;
        let result = ReadResult {
            payload: v.payload(),
            version_cstamp: cstamp,
        };
        let Some(cv) = cstamp else { return Ok(result) };
        if !self.certifies() {
            return Ok(result);
        }
        match e.cfg.certifier {
            Certifier::None => {}
            Certifier::Ssn => self.ssn_read(v, cv)?,
            Certifier::Ssi => {
                let me = self.ssi.expect("ssi state");
                if !schedulers::ssi_read(me, v, &e.si_nodes) && e.cfg.enforce {
                    return Err(self.abort_with(AbortReason::SsiDangerous));
                }
            }
        }
        Ok(result)
    }

    /// Read every record. With table modes on this takes the table in R mode.
    pub fn scan(&mut self) -> Result<Vec<ReadResult>> {
        self.ensure_active()?;
        if self.eng.cfg.hierarchical && self.certifies() {
            return self.ssn_scan();
        }
        (0..self.eng.store.len()).map(|k| self.read(k)).collect()
    }

    pub fn write(&mut self, key: usize, payload: u64) -> Result<WriteOutcome> {
        self.ensure_active()?;
        if self.opts.read_only {
            return Err(Error::InvalidConfig("write in a read-only transaction".into()));
        }
        let e = self.eng;
        let vis = self.opts.scheme.visibility(self.begin);
        let install = e
            .store
            .install_version(key, payload, vis, &e.table, self.tid)
            .ok_or(Error::NotFound(key))?;
        let entry = match install {
            Install::Conflict => return Err(self.abort_with(AbortReason::CcConflict)),
            Install::Replaced(_) => {
                return Ok(WriteOutcome {
                    overwritten: Some(self.tid.0),
                    prev_cstamp: None,
                    replaced_own: true,
                })
            }
            Install::New(entry) => entry,
        };
        self.writes.push(entry);
        match e.cfg.certifier {
            Certifier::None => {}
            Certifier::Ssn => self.ssn_write(&entry)?,
            Certifier::Ssi => schedulers::ssi_write(self.ssi.expect("ssi state"), entry.prev, &e.si_nodes),
        }
        Ok(WriteOutcome {
            overwritten: entry.prev.payload(),
            prev_cstamp: Some(entry.prev_cstamp),
            replaced_own: false,
        })
    }

    pub fn commit(mut self) -> Result<CommitInfo> {
        self.ensure_active()?;
        let e = self.eng;
        let _guard = (e.cfg.commit_path == CommitPath::Serial)
            .then(|| e.latch.lock().unwrap_or_else(|p| p.into_inner()));
        let info = if !self.certifies() {
            self.commit_snapshot_reader()?
        } else {
            match e.cfg.certifier {
                Certifier::None => self.commit_plain()?,
                Certifier::Ssn => match e.cfg.commit_path {
                    CommitPath::Serial => self.ssn_commit_serial()?,
                    CommitPath::Parallel => self.ssn_parallel_commit()?,
                },
                Certifier::Ssi => self.ssi_commit()?,
            }
        };
        e.note_commit();
        Ok(info)
    }

    pub fn abort(mut self) -> Result<()> {
        self.ensure_active()?;
        self.abort_with(AbortReason::User);
        Ok(())
    }

    fn commit_snapshot_reader(&mut self) -> Result<CommitInfo> {
        let e = self.eng;
        e.table
            .transition_status(self.slot, TxnStatus::InFlight, TxnStatus::Committing)?;
        e.table.slot(self.slot).set_cstamp(self.begin);
        self.finish_commit(self.begin, self.begin)?;
        Ok(CommitInfo {
            cstamp: self.begin,
            exclusion_violation: false,
        })
    }

    fn commit_plain(&mut self) -> Result<CommitInfo> {
        let e = self.eng;
        e.table
            .transition_status(self.slot, TxnStatus::InFlight, TxnStatus::Committing)?;
        let c = e.clock.next_timestamp();
        e.table.slot(self.slot).set_cstamp(c);
        self.finish_commit(c, c)?;
        Ok(CommitInfo {
            cstamp: c,
            exclusion_violation: false,
        })
    }

    fn ssi_commit(&mut self) -> Result<CommitInfo> {
        let e = self.eng;
        let me = self.ssi.expect("ssi state");
        e.table
            .transition_status(self.slot, TxnStatus::InFlight, TxnStatus::Committing)?;
        me.mark_committing();
        let c = e.clock.next_timestamp();
        e.table.slot(self.slot).set_cstamp(c);
        me.set_cstamp(c);
        let dangerous = schedulers::ssi_commit_check(me, c);
        if dangerous && e.cfg.enforce {
            return Err(self.abort_with(AbortReason::SsiDangerous));
        }
        self.finish_commit(c, c)?;
        Ok(CommitInfo {
            cstamp: c,
            exclusion_violation: dangerous,
        })
    }

    /// Status -> COMMITTED, then post-commit stamp propagation and release.
    /// `c` is the commit stamp, `pi` the final successor stamp.
    pub(crate) fn finish_commit(&mut self, c: Timestamp, pi: Timestamp) -> Result<()> {
        let e = self.eng;
        let slot = e.table.slot(self.slot);
        if self.untracked_mode {
            slot.publish_last_cstamp(c);
        }
        e.table
            .transition_status(self.slot, TxnStatus::Committing, TxnStatus::Committed)?;
        if let Some(me) = self.ssi {
            me.conclude(TxnStatus::Committed);
        }
        for &(v, _) in &self.reads {
            v.raise_pstamp(c);
        }
        for w in &self.writes {
            e.store.finalize_write(w, c, pi);
        }
        if self.scanned || self.point_reads {
            e.tstamps.raise_pstamp(c);
        }
        self.clear_reader_bits();
        self.finished = true;
        e.table.release(self.slot);
        Ok(())
    }

    fn clear_reader_bits(&self) {
        for &(v, set_by_me) in &self.reads {
            if set_by_me {
                v.clear_reader(self.slot);
            }
        }
    }

    /// Roll back and release the slot; returns the matching error.
    pub(crate) fn abort_with(&mut self, reason: AbortReason) -> Error {
        let e = self.eng;
        let status = e.table.slot(self.slot).status();
        if let Err(err) = e.table.transition_status(self.slot, status, TxnStatus::Aborted) {
            return err;
        }
        if let Some(me) = self.ssi {
            me.conclude(TxnStatus::Aborted);
        }
        for w in self.writes.iter().rev() {
            e.store.rollback_write(w);
        }
        self.clear_reader_bits();
        self.finished = true;
        e.table.release(self.slot);
        Error::Aborted(reason)
    }
}

impl Drop for Transaction<'_> {
    fn drop(&mut self) {
        if !self.finished {
            self.abort_with(AbortReason::User);
        }
    }
}
