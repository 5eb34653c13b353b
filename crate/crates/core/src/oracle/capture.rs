//! Engine calls that also append their trace events.
//!
//! Payloads hold the raw tid of the last writer, so the creator of every
//! version read or overwritten is known without asking the engine.

use super::trace::TraceEvent;
use crate::engine::{CommitInfo, Engine, ReadResult, Transaction, TxnOptions, WriteOutcome};
use crate::error::{Error, Result};

fn note_abort(err: &Error, tid: u64, thread: usize, log: &mut Vec<TraceEvent>) {
    if let Some(r) = err.abort_reason() {
        log.push(TraceEvent::abort(tid, thread, r));
    }
}

pub fn begin<'e>(
    eng: &'e Engine,
    slot: usize,
    opts: TxnOptions,
    log: &mut Vec<TraceEvent>,
) -> Result<Transaction<'e>> {
    let t = eng.begin(slot, opts)?;
    log.push(TraceEvent::begin(t.tid().0, slot));
    Ok(t)
}

pub fn read(t: &mut Transaction<'_>, key: usize, log: &mut Vec<TraceEvent>) -> Result<ReadResult> {
    let (tid, thread) = (t.tid().0, t.slot());
    match t.read(key) {
        Ok(r) => {
            if let Some(c) = r.version_cstamp {
                log.push(TraceEvent::read(tid, thread, key, c, r.payload.unwrap_or(0)));
            }
            Ok(r)
        }
        Err(e) => {
            note_abort(&e, tid, thread, log);
            Err(e)
        }
    }
}

/// Full-table read; result `i` is record `i`.
pub fn scan(t: &mut Transaction<'_>, log: &mut Vec<TraceEvent>) -> Result<Vec<ReadResult>> {
    let (tid, thread) = (t.tid().0, t.slot());
    match t.scan() {
        Ok(rs) => {
            for (key, r) in rs.iter().enumerate() {
                if let Some(c) = r.version_cstamp {
                    log.push(TraceEvent::read(tid, thread, key, c, r.payload.unwrap_or(0)));
                }
            }
            Ok(rs)
        }
        Err(e) => {
            note_abort(&e, tid, thread, log);
            Err(e)
        }
    }
}

/// Writes the transaction's own tid as payload.
pub fn write(t: &mut Transaction<'_>, key: usize, log: &mut Vec<TraceEvent>) -> Result<WriteOutcome> {
    let (tid, thread) = (t.tid().0, t.slot());
    match t.write(key, tid) {
        Ok(w) => {
            if let (false, Some(c)) = (w.replaced_own, w.prev_cstamp) {
                log.push(TraceEvent::write(tid, thread, key, c, w.overwritten.unwrap_or(0)));
            }
            Ok(w)
        }
        Err(e) => {
            note_abort(&e, tid, thread, log);
            Err(e)
        }
    }
}

pub fn commit(t: Transaction<'_>, log: &mut Vec<TraceEvent>) -> Result<CommitInfo> {
    let (tid, thread) = (t.tid().0, t.slot());
    match t.commit() {
        Ok(info) => {
            log.push(TraceEvent::commit(tid, thread, info.cstamp));
            Ok(info)
        }
        Err(e) => {
            note_abort(&e, tid, thread, log);
            Err(e)
        }
    }
}

pub fn abort(t: Transaction<'_>, log: &mut Vec<TraceEvent>) -> Result<()> {
    let (tid, thread) = (t.tid().0, t.slot());
    t.abort()?;
    log.push(TraceEvent::abort(tid, thread, crate::error::AbortReason::User));
    Ok(())
}
