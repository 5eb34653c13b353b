//! Scheduler policies and the SSI baseline certifier.
//!
//! SI and RC differ only in which version a read returns and in the SI
//! first-updater-wins rule; both are enforced by [`crate::mvstore`]. SSI keeps
//! two anti-dependency flags per transaction plus the list of its outbound
//! rw partners, and aborts a pivot whose outbound partner committed first.

use std::fmt;
use std::ptr;
use std::str::FromStr;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, AtomicU8, Ordering::SeqCst};

use crate::arena::PushArena;
use crate::kernel::{Timestamp, TxnStatus};
use crate::mvstore::{Version, Visibility};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Si,
    Rc,
}

impl Scheme {
    pub fn visibility(self, begin: Timestamp) -> Visibility {
        match self {
            Scheme::Si => Visibility::Snapshot(begin),
            Scheme::Rc => Visibility::LatestCommitted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Certifier {
    None,
    Ssn,
    Ssi,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($ty).to_lowercase())),
                }
            }
        }
    };
}

text_enum!(Scheme { Si => "si", Rc => "rc" });
text_enum!(Certifier { None => "none", Ssn => "ssn", Ssi => "ssi" });

const IN: u32 = 1;
const OUT: u32 = 1 << 1;
const SEALED: u32 = 1 << 2;

/// Lock-free singly linked list node pointing at a transaction's SSI state.
pub struct SiNode {
    txn: *const SsiTxn,
    next: *mut SiNode,
}

// SAFETY: both pointers target arena-owned, immutable-after-publish data.
unsafe impl Send for SiNode {}
unsafe impl Sync for SiNode {}

fn push(list: &AtomicPtr<SiNode>, arena: &PushArena<SiNode>, txn: &SsiTxn) {
    let mut head = list.load(SeqCst);
    loop {
        let node = arena.alloc(SiNode { txn, next: head });
        let node = node as *const SiNode as *mut SiNode;
        match list.compare_exchange(head, node, SeqCst, SeqCst) {
            Ok(_) => return,
            // the node leaks into the arena; retries are rare
            Err(cur) => head = cur,
        }
    }
}

fn for_each<'a>(list: &AtomicPtr<SiNode>, mut f: impl FnMut(&'a SsiTxn) -> bool) {
    let mut cur = list.load(SeqCst) as *const SiNode;
    // SAFETY: nodes and the states they point to live in engine arenas.
    while let Some(node) = unsafe { cur.as_ref() } {
        if !f(unsafe { &*node.txn }) {
            return;
        }
        cur = node.next;
    }
}

/// Per-transaction SSI state. Lives in an engine arena so peers may keep
/// references after the transaction concludes.
pub struct SsiTxn {
    flags: AtomicU32,
    status: AtomicU8,
    cstamp: AtomicU64,
    begin: Timestamp,
    partners: AtomicPtr<SiNode>,
}

impl SsiTxn {
    pub fn new(begin: Timestamp) -> Self {
        SsiTxn {
            flags: AtomicU32::new(0),
            status: AtomicU8::new(TxnStatus::InFlight as u8),
            cstamp: AtomicU64::new(0),
            begin,
            partners: AtomicPtr::new(ptr::null_mut()),
        }
    }

    pub fn in_rw(&self) -> bool {
        self.flags.load(SeqCst) & IN != 0
    }

    pub fn out_rw(&self) -> bool {
        self.flags.load(SeqCst) & OUT != 0
    }

    fn status(&self) -> u8 {
        self.status.load(SeqCst)
    }

    pub fn mark_committing(&self) {
        self.status.store(TxnStatus::Committing as u8, SeqCst);
    }

    pub fn set_cstamp(&self, c: Timestamp) {
        self.cstamp.store(c, SeqCst);
    }

    pub fn conclude(&self, status: TxnStatus) {
        debug_assert!(status.is_concluded());
        self.status.store(status as u8, SeqCst);
    }

    fn is_aborted(&self) -> bool {
        self.status() == TxnStatus::Aborted as u8
    }

    /// Whether this transaction commits with a timestamp below `c`. Waits out
    /// a concurrent pre-commit when the answer depends on it.
    fn committed_before(&self, c: Timestamp) -> bool {
        loop {
            match self.status() {
                s if s == TxnStatus::InFlight as u8 || s == TxnStatus::Aborted as u8 => return false,
                s if s == TxnStatus::Committed as u8 => return self.cstamp.load(SeqCst) < c,
                _ => {
                    let pc = self.cstamp.load(SeqCst);
                    if pc != 0 && pc > c {
                        return false;
                    }
                    std::thread::yield_now();
                }
            }
        }
    }

    fn add_out_partner(&self, partner: &SsiTxn, nodes: &PushArena<SiNode>) -> u32 {
        push(&self.partners, nodes, partner);
        self.flags.fetch_or(OUT, SeqCst)
    }
}

/// Reader side: `me` read `v`. Returns `false` when `me` must abort because
/// the overwriter already certified itself with an outbound edge.
pub(crate) fn ssi_read(me: &SsiTxn, v: &Version, nodes: &PushArena<SiNode>) -> bool {
    push(&v.sireads, nodes, me);
    let w = v.overwriter.load(SeqCst) as *const SsiTxn;
    if w.is_null() || ptr::eq(w, me) {
        return true;
    }
    // SAFETY: arena-owned.
    let w = unsafe { &*w };
    if w.is_aborted() {
        return true;
    }
    me.add_out_partner(w, nodes);
    let old = w.flags.fetch_or(IN, SeqCst);
    !(old & SEALED != 0 && old & OUT != 0)
}

/// Writer side: `me` just overwrote `prev`.
pub(crate) fn ssi_write(me: &SsiTxn, prev: &Version, nodes: &PushArena<SiNode>) {
    prev.overwriter
        .store(me as *const SsiTxn as *mut SsiTxn, SeqCst);
    for_each(&prev.sireads, |r| {
        let stale = r.status() == TxnStatus::Committed as u8 && r.cstamp.load(SeqCst) < me.begin;
        if !ptr::eq(r, me) && !r.is_aborted() && !stale {
            me.flags.fetch_or(IN, SeqCst);
            r.add_out_partner(me, nodes);
        }
        true
    });
}

/// Pre-commit check; `me` already holds commit timestamp `c`. Returns `true`
/// when `me` is the pivot of a dangerous structure.
pub(crate) fn ssi_commit_check(me: &SsiTxn, c: Timestamp) -> bool {
    let flags = me.flags.fetch_or(SEALED, SeqCst);
    if flags & IN == 0 || flags & OUT == 0 {
        return false;
    }
    let mut dangerous = false;
    for_each(&me.partners, |p| {
        dangerous = p.committed_before(c);
        !dangerous
    });
    dangerous
}
