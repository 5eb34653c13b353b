//! Run statistics and their text form.
//!
//! ```text
//! # ssnbench stats v1
//! group id=0 threads=8 offered=.. committed=.. aborted=.. cc_conflict=.. ... throughput=..
//! total offered=.. committed=.. ...
//! ```

use std::fmt::Write as _;
use std::time::Duration;

use crate::error::AbortReason;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupStats {
    pub threads: usize,
    pub offered: u64,
    pub committed: u64,
    /// Indexed like [`AbortReason::ALL`].
    pub aborts: [u64; 5],
    pub retries: u64,
    /// Transactions given up after hitting the retry cap.
    pub alarms: u64,
    pub tracked_reads: u64,
    pub untracked_reads: u64,
}

fn reason_index(r: AbortReason) -> usize {
    AbortReason::ALL.iter().position(|x| *x == r).expect("listed")
}

impl GroupStats {
    pub fn record_abort(&mut self, r: AbortReason) {
        self.aborts[reason_index(r)] += 1;
    }

    pub fn aborts_for(&self, r: AbortReason) -> u64 {
        self.aborts[reason_index(r)]
    }

    pub fn aborted(&self) -> u64 {
        self.aborts.iter().sum()
    }

    /// Committed share of all attempts.
    pub fn completion_rate(&self) -> f64 {
        let attempts = self.committed + self.aborted();
        if attempts == 0 {
            0.0
        } else {
            self.committed as f64 / attempts as f64
        }
    }

    pub fn merge(&mut self, o: &GroupStats) {
        self.offered += o.offered;
        self.committed += o.committed;
        for (a, b) in self.aborts.iter_mut().zip(o.aborts) {
            *a += b;
        }
        self.retries += o.retries;
        self.alarms += o.alarms;
        self.tracked_reads += o.tracked_reads;
        self.untracked_reads += o.untracked_reads;
    }

    fn fields(&self, elapsed: Duration) -> String {
        let mut s = format!(
            "threads={} offered={} committed={} aborted={}",
            self.threads,
            self.offered,
            self.committed,
            self.aborted()
        );
        for r in AbortReason::ALL {
            let _ = write!(s, " {}={}", r.as_str(), self.aborts_for(r));
        }
        let secs = elapsed.as_secs_f64();
        let tput = if secs > 0.0 { self.committed as f64 / secs } else { 0.0 };
        let _ = write!(
            s,
            " retries={} alarms={} tracked_reads={} untracked_reads={} completion={:.4} throughput={tput:.1}",
            self.retries,
            self.alarms,
            self.tracked_reads,
            self.untracked_reads,
            self.completion_rate(),
        );
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub groups: Vec<GroupStats>,
    pub elapsed: Duration,
}

impl RunStats {
    pub fn total(&self) -> GroupStats {
        let mut t = GroupStats::default();
        for g in &self.groups {
            t.threads += g.threads;
            t.merge(g);
        }
        t
    }

    pub fn throughput(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.total().committed as f64 / secs
        } else {
            0.0
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# ssnbench stats v1\n");
        for (i, g) in self.groups.iter().enumerate() {
            let _ = writeln!(out, "group id={i} {}", g.fields(self.elapsed));
        }
        let _ = writeln!(
            out,
            "total {} elapsed_ms={}",
            self.total().fields(self.elapsed),
            self.elapsed.as_millis()
        );
        out
    }
}
