//! Workload description and per-thread transaction generation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::engine::CommitPath;
use crate::error::{Error, Result};
use crate::schedulers::{Certifier, Scheme};

/// A set of identical closed-loop clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub threads: usize,
    pub footprint_min: usize,
    pub footprint_max: usize,
    /// The last `writes` accesses of each transaction are writes.
    pub writes: usize,
    pub read_only: bool,
    pub read_mostly: bool,
    /// Read-only clients running on the latest safe snapshot.
    pub snapshot: bool,
    /// Replace the reads with one full-table scan.
    pub scan: bool,
}

impl Default for Group {
    fn default() -> Self {
        Group {
            threads: 4,
            footprint_min: 8,
            footprint_max: 12,
            writes: 3,
            read_only: false,
            read_mostly: false,
            snapshot: false,
            scan: false,
        }
    }
}

impl Group {
    pub fn writes_per_txn(&self) -> usize {
        if self.read_only || self.snapshot {
            0
        } else {
            self.writes
        }
    }
}

fn range(v: &str) -> Option<(usize, usize)> {
    match v.split_once('-') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => v.parse().ok().map(|n| (n, n)),
    }
}

/// `threads=8,footprint=8-12,writes=3[,read-only][,read-mostly][,snapshot][,scan]`;
/// omitted keys keep their defaults.
impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut g = Group::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || format!("bad group field `{part}`");
            match part.split_once('=') {
                Some(("threads", v)) => g.threads = v.parse().map_err(|_| bad())?,
                Some(("footprint", v)) => (g.footprint_min, g.footprint_max) = range(v).ok_or_else(bad)?,
                Some(("writes", v)) => g.writes = v.parse().map_err(|_| bad())?,
                None if part == "read-only" => g.read_only = true,
                None if part == "read-mostly" => g.read_mostly = true,
                None if part == "snapshot" => g.snapshot = true,
                None if part == "scan" => g.scan = true,
                _ => return Err(bad()),
            }
        }
        Ok(g)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "threads={},footprint={}-{},writes={}",
            self.threads, self.footprint_min, self.footprint_max, self.writes
        )?;
        for (on, name) in [
            (self.read_only, "read-only"),
            (self.read_mostly, "read-mostly"),
            (self.snapshot, "snapshot"),
            (self.scan, "scan"),
        ] {
            if on {
                write!(f, ",{name}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadConfig {
    pub db_size: usize,
    pub groups: Vec<Group>,
    /// Offered transactions, shared by all clients.
    pub txns: u64,
    pub retry: bool,
    /// Attempts of one transaction after which the run raises an alarm and
    /// gives up on it.
    pub retry_cap: u64,
    pub seed: u64,
    pub scheme: Scheme,
    pub certifier: Certifier,
    pub commit_path: CommitPath,
    pub safe_snapshot_interval: u64,
    pub staleness_threshold: u64,
    /// Draw write targets only among records the transaction did not read.
    pub no_rewrite: bool,
    pub capture_trace: bool,
    /// Yield the CPU between operations so clients interleave even on a
    /// single core.
    pub yield_between_ops: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            db_size: 100,
            groups: vec![Group::default()],
            txns: 1000,
            retry: true,
            retry_cap: 10_000,
            seed: 1,
            scheme: Scheme::Si,
            certifier: Certifier::Ssn,
            commit_path: CommitPath::Parallel,
            safe_snapshot_interval: 0,
            staleness_threshold: 0,
            no_rewrite: false,
            capture_trace: false,
            yield_between_ops: true,
        }
    }
}

impl WorkloadConfig {
    pub fn threads(&self) -> usize {
        self.groups.iter().map(|g| g.threads).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.groups.is_empty() {
            return bad("at least one client group is required".into());
        }
        if self.db_size == 0 {
            return bad("db size must be positive".into());
        }
        for g in &self.groups {
            if g.threads == 0 {
                return bad(format!("group `{g}` has no threads"));
            }
            if g.footprint_min == 0 || g.footprint_min > g.footprint_max {
                return bad(format!("group `{g}` needs 1 <= footprint min <= max"));
            }
            if g.writes_per_txn() > g.footprint_min {
                return bad(format!("group `{g}` writes more than its smallest footprint"));
            }
            if self.no_rewrite && !g.scan && g.footprint_max - g.writes_per_txn() >= self.db_size {
                return bad(format!("group `{g}` cannot avoid rewrites with {} records", self.db_size));
            }
            if g.snapshot && (self.scheme != Scheme::Si || self.certifier != Certifier::Ssn) {
                return bad("snapshot clients need si with ssn".into());
            }
        }
        if self.retry_cap == 0 {
            return bad("retry cap must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read(usize),
    Write(usize),
    Scan,
}

/// One drawn transaction; retries replay the same accesses.
pub fn draw_program(g: &Group, db: usize, no_rewrite: bool, rng: &mut impl Rng) -> Vec<Access> {
    let n = rng.gen_range(g.footprint_min..=g.footprint_max);
    let m = g.writes_per_txn();
    let mut prog = Vec::with_capacity(n);
    if g.scan {
        prog.push(Access::Scan);
    } else {
        prog.extend((0..n - m).map(|_| Access::Read(rng.gen_range(0..db))));
    }
    if no_rewrite && m > 0 {
        let read: std::collections::HashSet<usize> = prog
            .iter()
            .filter_map(|a| match a {
                Access::Read(k) => Some(*k),
                _ => None,
            })
            .collect();
        let free: Vec<usize> = (0..db).filter(|k| !read.contains(k)).collect();
        if free.is_empty() {
            return prog;
        }
        prog.extend((0..m).map(|_| Access::Write(*free.choose(rng).expect("non-empty"))));
    } else {
        prog.extend((0..m).map(|_| Access::Write(rng.gen_range(0..db))));
    }
    prog
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_spec_round_trip() {
        let g: Group = "threads=2,footprint=100-200,writes=1,read-mostly".parse().unwrap();
        assert_eq!((g.threads, g.footprint_min, g.footprint_max, g.writes), (2, 100, 200, 1));
        assert!(g.read_mostly && !g.read_only);
        assert_eq!(g.to_string().parse::<Group>().unwrap(), g);
        let g: Group = "footprint=20".parse().unwrap();
        assert_eq!((g.footprint_min, g.footprint_max), (20, 20));
        assert!("threads=x".parse::<Group>().is_err());
        assert!("bogus".parse::<Group>().is_err());
    }

    #[test]
    fn validation() {
        let mut c = WorkloadConfig::default();
        c.validate().unwrap();
        c.groups[0].writes = 9;
        assert!(c.validate().is_err());
        c.groups[0] = Group { read_only: true, ..c.groups[0] };
        c.validate().unwrap();
        c.groups[0].footprint_min = 20;
        assert!(c.validate().is_err());
        let c = WorkloadConfig {
            groups: vec![Group { snapshot: true, ..Group::default() }],
            scheme: Scheme::Rc,
            ..WorkloadConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn programs_read_then_write() {
        let g = Group::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = draw_program(&g, 100, false, &mut rng);
            assert!((8..=12).contains(&p.len()));
            let split = p.len() - 3;
            assert!(p[..split].iter().all(|a| matches!(a, Access::Read(_))));
            assert!(p[split..].iter().all(|a| matches!(a, Access::Write(_))));
        }
    }

    #[test]
    fn no_rewrite_avoids_read_records() {
        let g = Group { footprint_min: 5, footprint_max: 5, writes: 2, ..Group::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = draw_program(&g, 6, true, &mut rng);
            let reads: Vec<usize> = p.iter().filter_map(|a| match a { Access::Read(k) => Some(*k), _ => None }).collect();
            for a in &p {
                if let Access::Write(k) = a {
                    assert!(!reads.contains(k));
                }
            }
        }
    }
}
