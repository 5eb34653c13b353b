//! Exhaustive interleaving of small transaction programs.
//!
//! Every merge of the programs' steps that preserves each program's own
//! order is replayed single-threaded. Steps of a transaction the engine has
//! already aborted are skipped.

use super::graph::{build_graph, DependencyGraph, Violations};
use super::script::{Op, Outcome, ReplayConfig, ScheduleScript, Step, replay_with};
use crate::engine::CommitPath;
use crate::error::{AbortReason, Error, Result};
use crate::schedulers::{Certifier, Scheme};

pub const MAX_INTERLEAVINGS: u128 = 1_000_000;

/// Built-in program families. Each is a script whose per-transaction step
/// sequences form the programs; its own interleaving is irrelevant.
pub const FAMILIES: [(&str, &str); 4] = [
    (
        "write-skew",
        "T1 read x\nT1 read y\nT1 write x\nT1 commit\n\
         T2 read x\nT2 read y\nT2 write y\nT2 commit\n",
    ),
    (
        "three-party",
        "T1 read B\nT1 write A\nT1 commit\n\
         T2 write B\nT2 commit\n\
         T3 read A\nT3 read B\nT3 write C\nT3 commit\n",
    ),
    (
        "rw-chain",
        "T1 read a\nT1 write b\nT1 commit\n\
         T2 read b\nT2 write c\nT2 commit\n\
         T3 read c\nT3 write a\nT3 commit\n",
    ),
    (
        "repeatable-read",
        "T read x\nT read x\nT commit\n\
         W write x\nW commit\n",
    ),
];

pub fn family(name: &str) -> Option<ScheduleScript> {
    FAMILIES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScheduleScript::parse(text).expect("built-in family parses"))
}

/// Number of order-preserving merges of sequences with the given lengths,
/// or `None` once it passes `cap`.
pub fn interleaving_count(lens: &[usize], cap: u128) -> Option<u128> {
    let mut total: u128 = 1;
    let mut placed = 0u128;
    for &n in lens {
        // times C(placed + n, n), one exact factor at a time
        for i in 1..=n as u128 {
            total = total.checked_mul(placed + i)? / i;
        }
        if total > cap {
            return None;
        }
        placed += n as u128;
    }
    (total <= cap).then_some(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumConfig {
    pub scheme: Scheme,
    pub certifier: Certifier,
    pub enforce: bool,
}

impl Default for EnumConfig {
    /// Observe-mode SSN over RC.
    fn default() -> Self {
        EnumConfig {
            scheme: Scheme::Rc,
            certifier: Certifier::Ssn,
            enforce: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct History {
    pub script: ScheduleScript,
    pub outcomes: Vec<(String, Outcome)>,
    pub graph: DependencyGraph,
    pub violations: Violations,
    /// The engine's certifier reported an exclusion violation for some
    /// transaction (abort under enforcement, flag in observe mode).
    pub online_violation: bool,
}

impl History {
    pub fn cyclic(&self) -> bool {
        !self.violations.is_empty()
    }

    /// Every SCC has a member failing the offline exclusion test.
    pub fn offline_attributed(&self) -> bool {
        self.violations.unattributed().next().is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EnumSummary {
    pub histories: u64,
    pub cyclic: u64,
    /// Cyclic histories in which the certifier reported a violation.
    pub cyclic_caught: u64,
    /// Histories, cyclic or not, with a reported violation.
    pub violations: u64,
    /// Cyclic histories with an SCC lacking an offline-flagged member.
    pub unattributed: u64,
}

impl EnumSummary {
    /// Every cyclic history was caught online and attributed offline.
    pub fn sound(&self) -> bool {
        self.cyclic_caught == self.cyclic && self.unattributed == 0
    }

    pub fn render(&self) -> String {
        format!(
            "enumerate histories={} cyclic={} cyclic_caught={} violations={} unattributed={} sound={}\n",
            self.histories,
            self.cyclic,
            self.cyclic_caught,
            self.violations,
            self.unattributed,
            self.sound()
        )
    }
}

fn programs(script: &ScheduleScript) -> Vec<Vec<Op>> {
    let mut progs = vec![Vec::new(); script.txns().len()];
    for s in script.steps() {
        progs[s.txn].push(s.op);
    }
    progs
}

fn merges(progs: &[Vec<Op>], pos: &mut [usize], cur: &mut Vec<Step>, out: &mut dyn FnMut(&[Step]) -> Result<()>) -> Result<()> {
    let mut any = false;
    for t in 0..progs.len() {
        if pos[t] < progs[t].len() {
            any = true;
            cur.push(Step {
                txn: t,
                op: progs[t][pos[t]],
            });
            pos[t] += 1;
            merges(progs, pos, cur, out)?;
            pos[t] -= 1;
            cur.pop();
        }
    }
    if !any {
        out(cur)?;
    }
    Ok(())
}

/// Replays every interleaving of the per-transaction programs in
/// `programs_script`, calling `visit` on each history.
pub fn enumerate_interleavings(
    programs_script: &ScheduleScript,
    cfg: EnumConfig,
    mut visit: impl FnMut(&History),
) -> Result<EnumSummary> {
    let progs = programs(programs_script);
    if progs.iter().flatten().any(|op| *op == Op::Retry) {
        return Err(Error::Script("retry steps cannot be enumerated".into()));
    }
    let lens: Vec<usize> = progs.iter().map(Vec::len).collect();
    if interleaving_count(&lens, MAX_INTERLEAVINGS).is_none() {
        let n: usize = lens.iter().sum();
        return Err(Error::Script(format!(
            "more than {MAX_INTERLEAVINGS} interleavings ({n} steps over {} programs)",
            lens.len()
        )));
    }
    let rcfg = ReplayConfig {
        scheme: cfg.scheme,
        certifier: cfg.certifier,
        commit_path: CommitPath::Serial,
        enforce: cfg.enforce,
        strict: false,
    };
    let mut summary = EnumSummary::default();
    let mut pos = vec![0; progs.len()];
    let mut sink = |steps: &[Step]| -> Result<()> {
        let script = ScheduleScript::from_steps(
            programs_script.txns().to_vec(),
            programs_script.records().to_vec(),
            steps.to_vec(),
        );
        let replay = replay_with(&script, &rcfg)?;
        let graph = build_graph(&replay.trace)?;
        let violations = graph.find_violations();
        let online_violation = replay.outcomes.iter().any(|(_, o)| match o {
            Outcome::Committed { violation, .. } => *violation,
            Outcome::Aborted(r) => matches!(r, AbortReason::SsnExclusion | AbortReason::SsiDangerous),
        });
        let h = History {
            script,
            outcomes: replay.outcomes,
            graph,
            violations,
            online_violation,
        };
        summary.histories += 1;
        summary.violations += u64::from(h.online_violation);
        if h.cyclic() {
            summary.cyclic += 1;
            summary.cyclic_caught += u64::from(h.online_violation);
            summary.unattributed += u64::from(!h.offline_attributed());
        }
        visit(&h);
        Ok(())
    };
    merges(&progs, &mut pos, &mut Vec::new(), &mut sink)?;
    Ok(summary)
}
