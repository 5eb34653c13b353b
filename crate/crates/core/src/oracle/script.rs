//! Schedule scripts and their deterministic replay.
//!
//! ```text
//! # one step per line: <txn> <op> [record]
//! T1 read B
//! T2 write B
//! T2 commit
//! T1 abort
//! T1 retry      # rerun T1's reads and writes as T1' and commit it
//! ```
//!
//! Transactions begin at their first step and each gets its own worker
//! slot. Record names become keys in order of first use.

use std::fmt;

use super::capture;
use super::trace::TraceEvent;
use crate::engine::{CommitPath, Engine, EngineConfig, Transaction, TxnOptions};
use crate::error::{AbortReason, Error, Result};
use crate::mvstore::VersionStamps;
use crate::schedulers::{Certifier, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Read(usize),
    Write(usize),
    Commit,
    Abort,
    /// Replays every read and write of the (aborted) transaction in a fresh
    /// one, then commits it.
    Retry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub txn: usize,
    pub op: Op,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleScript {
    txns: Vec<String>,
    records: Vec<String>,
    steps: Vec<Step>,
}

impl ScheduleScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = ScheduleScript::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Script(format!("line {}: {msg}: `{line}`", i + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (name, op, rec) = match parts[..] {
                [n, op] => (n, op, None),
                [n, op, r] => (n, op, Some(r)),
                _ => return Err(bad("expected `<txn> <op> [record]`")),
            };
            let txn = s.txn_id(name);
            let op = match (op, rec) {
                ("read", Some(r)) => Op::Read(s.record_id(r)),
                ("write", Some(r)) => Op::Write(s.record_id(r)),
                ("commit", None) => Op::Commit,
                ("abort", None) => Op::Abort,
                ("retry", None) => Op::Retry,
                ("read" | "write", None) => return Err(bad("missing record")),
                ("commit" | "abort" | "retry", Some(_)) => return Err(bad("unexpected record")),
                _ => return Err(bad("unknown operation")),
            };
            s.steps.push(Step { txn, op });
        }
        Ok(s)
    }

    fn txn_id(&mut self, name: &str) -> usize {
        intern(&mut self.txns, name)
    }

    fn record_id(&mut self, name: &str) -> usize {
        intern(&mut self.records, name)
    }

    /// Builds a script from labelled steps; used by the enumerator.
    pub fn from_steps(txns: Vec<String>, records: Vec<String>, steps: Vec<Step>) -> Self {
        ScheduleScript { txns, records, steps }
    }

    pub fn txns(&self) -> &[String] {
        &self.txns
    }

    pub fn records(&self) -> &[String] {
        &self.records
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn intern(names: &mut Vec<String>, name: &str) -> usize {
    names.iter().position(|n| n == name).unwrap_or_else(|| {
        names.push(name.to_string());
        names.len() - 1
    })
}

impl fmt::Display for ScheduleScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            let t = &self.txns[s.txn];
            match s.op {
                Op::Read(k) => writeln!(f, "{t} read {}", self.records[k])?,
                Op::Write(k) => writeln!(f, "{t} write {}", self.records[k])?,
                Op::Commit => writeln!(f, "{t} commit")?,
                Op::Abort => writeln!(f, "{t} abort")?,
                Op::Retry => writeln!(f, "{t} retry")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Committed {
        cstamp: u64,
        /// Set in observe mode when the certifier would have aborted.
        violation: bool,
    },
    Aborted(AbortReason),
}

impl Outcome {
    pub fn committed(self) -> bool {
        matches!(self, Outcome::Committed { .. })
    }

    pub fn reason(self) -> Option<AbortReason> {
        match self {
            Outcome::Aborted(r) => Some(r),
            Outcome::Committed { .. } => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Committed { cstamp, violation: false } => write!(f, "committed cstamp={cstamp}"),
            Outcome::Committed { cstamp, violation: true } => {
                write!(f, "committed cstamp={cstamp} violation=observed")
            }
            Outcome::Aborted(r) => write!(f, "aborted reason={r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayConfig {
    pub scheme: Scheme,
    pub certifier: Certifier,
    pub commit_path: CommitPath,
    /// `false` records certifier verdicts without aborting.
    pub enforce: bool,
    /// `false` silently skips steps of transactions that already aborted.
    pub strict: bool,
}

impl ReplayConfig {
    pub fn new(scheme: Scheme, certifier: Certifier) -> Self {
        ReplayConfig {
            scheme,
            certifier,
            commit_path: CommitPath::Serial,
            enforce: true,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Replay {
    /// Outcome per transaction label, in order of first appearance. Retries
    /// are labelled with a trailing `'`.
    pub outcomes: Vec<(String, Outcome)>,
    pub trace: Vec<TraceEvent>,
    /// Final version chain of every record, newest first.
    pub chains: Vec<Vec<VersionStamps>>,
}

impl Replay {
    pub fn outcome(&self, label: &str) -> Option<Outcome> {
        self.outcomes.iter().find(|(l, _)| l == label).map(|(_, o)| *o)
    }

    pub fn render(&self) -> String {
        self.outcomes.iter().map(|(l, o)| format!("{l} {o}\n")).collect()
    }
}

enum Slot<'e> {
    Idle,
    Active(Transaction<'e>),
    Done(Outcome),
}

struct Runner<'e> {
    eng: &'e Engine,
    opts: TxnOptions,
    strict: bool,
    labels: Vec<String>,
    slots: Vec<Slot<'e>>,
    history: Vec<Vec<Op>>,
    log: Vec<TraceEvent>,
}

impl<'e> Runner<'e> {
    fn fail(&self, txn: usize, what: &str) -> Result<()> {
        if self.strict {
            Err(Error::Script(format!("{} {what}", self.labels[txn])))
        } else {
            Ok(())
        }
    }

    fn settle(&mut self, txn: usize, r: Result<Option<Outcome>>) -> Result<()> {
        match r {
            Ok(Some(o)) => self.slots[txn] = Slot::Done(o),
            Ok(None) => {}
            Err(Error::Aborted(reason)) => self.slots[txn] = Slot::Done(Outcome::Aborted(reason)),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn step(&mut self, txn: usize, op: Op) -> Result<()> {
        if op == Op::Retry {
            return self.retry(txn);
        }
        if let Slot::Idle = self.slots[txn] {
            let t = capture::begin(self.eng, txn, self.opts, &mut self.log)?;
            self.slots[txn] = Slot::Active(t);
        }
        let t = match std::mem::replace(&mut self.slots[txn], Slot::Idle) {
            Slot::Active(t) => t,
            done => {
                self.slots[txn] = done;
                return self.fail(txn, "already finished");
            }
        };
        self.history[txn].push(op);
        let log = &mut self.log;
        let r = match op {
            Op::Commit => capture::commit(t, log).map(|i| {
                Some(Outcome::Committed {
                    cstamp: i.cstamp,
                    violation: i.exclusion_violation,
                })
            }),
            Op::Abort => capture::abort(t, log).map(|_| Some(Outcome::Aborted(AbortReason::User))),
            Op::Read(k) | Op::Write(k) => {
                let mut t = t;
                let r = if let Op::Read(_) = op {
                    capture::read(&mut t, k, log).map(drop)
                } else {
                    capture::write(&mut t, k, log).map(drop)
                };
                if r.is_ok() {
                    self.slots[txn] = Slot::Active(t);
                }
                r.map(|_| None)
            }
            Op::Retry => unreachable!(),
        };
        self.settle(txn, r)
    }

    fn retry(&mut self, txn: usize) -> Result<()> {
        match self.slots[txn] {
            Slot::Done(Outcome::Aborted(_)) => {}
            _ => return self.fail(txn, "retried without having aborted"),
        }
        let label = format!("{}'", self.labels[txn]);
        let new = self.labels.len();
        if new >= self.eng.config().workers {
            return Err(Error::Script("too many transactions".into()));
        }
        self.labels.push(label);
        self.slots.push(Slot::Idle);
        self.history.push(Vec::new());
        let ops: Vec<Op> = self.history[txn]
            .iter()
            .copied()
            .filter(|o| matches!(o, Op::Read(_) | Op::Write(_)))
            .chain([Op::Commit])
            .collect();
        for op in ops {
            self.step(new, op)?;
            if let Slot::Done(_) = self.slots[new] {
                break;
            }
        }
        Ok(())
    }
}

/// Replays `script` with enforcement on and the serial commit path.
pub fn replay_scripted(script: &ScheduleScript, scheme: Scheme, certifier: Certifier) -> Result<Replay> {
    replay_with(script, &ReplayConfig::new(scheme, certifier))
}

pub fn replay_with(script: &ScheduleScript, cfg: &ReplayConfig) -> Result<Replay> {
    if script.is_empty() {
        return Ok(Replay::default());
    }
    let retries = script.steps.iter().filter(|s| s.op == Op::Retry).count();
    let workers = script.txns.len() + retries;
    let mut ecfg = EngineConfig::new(script.records.len().max(1), workers, cfg.certifier);
    ecfg.commit_path = cfg.commit_path;
    ecfg.enforce = cfg.enforce;
    let eng = Engine::new(ecfg)?;
    let mut r = Runner {
        eng: &eng,
        opts: TxnOptions::new(cfg.scheme),
        strict: cfg.strict,
        labels: script.txns.clone(),
        slots: script.txns.iter().map(|_| Slot::Idle).collect(),
        history: vec![Vec::new(); script.txns.len()],
        log: Vec::new(),
    };
    for s in &script.steps {
        r.step(s.txn, s.op)?;
    }
    // Transactions left open by the script are rolled back.
    for i in 0..r.slots.len() {
        if let Slot::Active(_) = r.slots[i] {
            let Slot::Active(t) = std::mem::replace(&mut r.slots[i], Slot::Done(Outcome::Aborted(AbortReason::User))) else {
                unreachable!()
            };
            capture::abort(t, &mut r.log)?;
        }
    }
    let outcomes = r
        .labels
        .iter()
        .zip(&r.slots)
        .filter_map(|(l, s)| match s {
            Slot::Done(o) => Some((l.clone(), *o)),
            _ => None,
        })
        .collect();
    let trace = std::mem::take(&mut r.log);
    drop(r);
    let chains = (0..eng.store().len()).map(|k| eng.chain(k)).collect();
    Ok(Replay { outcomes, trace, chains })
}
