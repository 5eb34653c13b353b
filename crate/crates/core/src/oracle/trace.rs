//! Line-delimited trace format.
//!
//! ```text
//! # ssn-trace v1
//! <kind> <tid> <thread> <key> <version_cstamp> <creator_tid> <final_cstamp> <abort_reason>
//! ```
//!
//! Absent fields are written as `-`. Reads and writes name the version they
//! touched (for writes: the version they overwrote) by key, creator tid and
//! commit stamp. Creator tid 0 denotes the initial version of a record.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{AbortReason, Error, Result};

pub const HEADER: &str = "# ssn-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Begin,
    Read,
    Write,
    Commit,
    Abort,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Begin => "begin",
            EventKind::Read => "read",
            EventKind::Write => "write",
            EventKind::Commit => "commit",
            EventKind::Abort => "abort",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "begin" => EventKind::Begin,
            "read" => EventKind::Read,
            "write" => EventKind::Write,
            "commit" => EventKind::Commit,
            "abort" => EventKind::Abort,
            _ => return Err(format!("unknown event kind `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub tid: u64,
    pub thread: usize,
    pub key: Option<usize>,
    pub version_cstamp: Option<u64>,
    pub creator: Option<u64>,
    pub final_cstamp: Option<u64>,
    pub abort_reason: Option<AbortReason>,
}

impl TraceEvent {
    fn bare(kind: EventKind, tid: u64, thread: usize) -> Self {
        TraceEvent {
            kind,
            tid,
            thread,
            key: None,
            version_cstamp: None,
            creator: None,
            final_cstamp: None,
            abort_reason: None,
        }
    }

    pub fn begin(tid: u64, thread: usize) -> Self {
        Self::bare(EventKind::Begin, tid, thread)
    }

    pub fn read(tid: u64, thread: usize, key: usize, cstamp: u64, creator: u64) -> Self {
        TraceEvent {
            key: Some(key),
            version_cstamp: Some(cstamp),
            creator: Some(creator),
            ..Self::bare(EventKind::Read, tid, thread)
        }
    }

    /// `cstamp` and `creator` identify the overwritten version.
    pub fn write(tid: u64, thread: usize, key: usize, cstamp: u64, creator: u64) -> Self {
        TraceEvent {
            kind: EventKind::Write,
            ..Self::read(tid, thread, key, cstamp, creator)
        }
    }

    pub fn commit(tid: u64, thread: usize, cstamp: u64) -> Self {
        TraceEvent {
            final_cstamp: Some(cstamp),
            ..Self::bare(EventKind::Commit, tid, thread)
        }
    }

    pub fn abort(tid: u64, thread: usize, reason: AbortReason) -> Self {
        TraceEvent {
            abort_reason: Some(reason),
            ..Self::bare(EventKind::Abort, tid, thread)
        }
    }
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.kind.as_str(),
            self.tid,
            self.thread,
            opt(&self.key),
            opt(&self.version_cstamp),
            opt(&self.creator),
            opt(&self.final_cstamp),
            opt(&self.abort_reason),
        )
    }
}

fn field<T: FromStr>(s: &str, name: &str, line: usize) -> Result<Option<T>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Trace {
        line,
        msg: format!("bad {name} `{s}`"),
    })
}

fn required<T>(v: Option<T>, name: &str, kind: EventKind, line: usize) -> Result<T> {
    v.ok_or_else(|| Error::Trace {
        line,
        msg: format!("{} event needs a {name}", kind.as_str()),
    })
}

/// Parses one event line. `line` is only used for diagnostics.
pub fn parse_event(text: &str, line: usize) -> Result<TraceEvent> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 8 {
        return Err(Error::Trace {
            line,
            msg: format!("expected 8 fields, found {}", parts.len()),
        });
    }
    let kind: EventKind = parts[0].parse().map_err(|msg| Error::Trace { line, msg })?;
    let tid = required(field(parts[1], "tid", line)?, "tid", kind, line)?;
    let thread = required(field(parts[2], "thread", line)?, "thread", kind, line)?;
    let reason = match parts[7] {
        "-" => None,
        s => Some(AbortReason::parse(s).ok_or_else(|| Error::Trace {
            line,
            msg: format!("unknown abort reason `{s}`"),
        })?),
    };
    let ev = TraceEvent {
        kind,
        tid,
        thread,
        key: field(parts[3], "key", line)?,
        version_cstamp: field(parts[4], "version_cstamp", line)?,
        creator: field(parts[5], "creator_tid", line)?,
        final_cstamp: field(parts[6], "final_cstamp", line)?,
        abort_reason: reason,
    };
    match kind {
        EventKind::Read | EventKind::Write => {
            required(ev.key, "key", kind, line)?;
            required(ev.version_cstamp, "version_cstamp", kind, line)?;
            required(ev.creator, "creator_tid", kind, line)?;
        }
        EventKind::Commit => {
            required(ev.final_cstamp, "final_cstamp", kind, line)?;
        }
        EventKind::Abort => {
            required(ev.abort_reason, "abort_reason", kind, line)?;
        }
        EventKind::Begin => {}
    }
    if tid == 0 {
        return Err(Error::Trace {
            line,
            msg: "tid 0 is reserved for initial versions".into(),
        });
    }
    Ok(ev)
}

/// Reads a whole trace. The header is optional; blank lines and other `#`
/// lines are skipped.
pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        events.push(parse_event(text, i + 1)?);
    }
    Ok(events)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    read_trace(text.as_bytes())
}

pub fn write_trace(mut out: impl Write, events: &[TraceEvent]) -> std::io::Result<()> {
    writeln!(out, "{HEADER}")?;
    for ev in events {
        writeln!(out, "{ev}")?;
    }
    Ok(())
}

pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, events).expect("in-memory write");
    String::from_utf8(buf).expect("ascii trace")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_layout() {
        let ev = TraceEvent::read(7, 2, 11, 5, 3);
        assert_eq!(ev.to_string(), "read 7 2 11 5 3 - -");
        let ev = TraceEvent::abort(9, 0, AbortReason::SsnExclusion);
        assert_eq!(ev.to_string(), "abort 9 0 - - - - ssn_exclusion");
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let text = "# ssn-trace v1\nbegin 1 0 - - - - -\nread 1 0 - 0 0 - -\n";
        match parse_trace(text) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_trace("begin 1 0 - -").is_err());
        assert!(parse_trace("abort 1 0 - - - - oops").is_err());
        assert!(parse_trace("commit 0 0 - - - 4 -").is_err());
    }

    fn event() -> impl Strategy<Value = TraceEvent> {
        let reason = proptest::sample::select(AbortReason::ALL.to_vec());
        (0..5u8, 1..1000u64, 0..64usize, 0..100usize, 0..1000u64, 0..1000u64, reason).prop_map(
            |(k, tid, th, key, c, creator, r)| match k {
                0 => TraceEvent::begin(tid, th),
                1 => TraceEvent::read(tid, th, key, c, creator),
                2 => TraceEvent::write(tid, th, key, c, creator),
                3 => TraceEvent::commit(tid, th, c),
                _ => TraceEvent::abort(tid, th, r),
            },
        )
    }

    proptest! {
        #[test]
        fn text_round_trip(events in proptest::collection::vec(event(), 0..40)) {
            let text = format_trace(&events);
            prop_assert_eq!(parse_trace(&text).unwrap(), events);
        }
    }
}
