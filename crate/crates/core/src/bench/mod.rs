//! Closed-loop microbenchmark over a single table.
//!
//! Every record holds the tid of its last writer. Clients draw a footprint
//! size, read that many random records minus `m`, then write `m` more, and
//! either retry the same accesses on abort or move on.

pub mod stats;
pub mod workload;

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Engine, EngineConfig, TxnOptions};
use crate::error::{Error, Result};
use crate::oracle::capture;
use crate::oracle::trace::TraceEvent;
use crate::schedulers::{Certifier, Scheme};

pub use stats::{GroupStats, RunStats};
pub use workload::{draw_program, Access, Group, WorkloadConfig};

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub stats: RunStats,
    /// Present when [`WorkloadConfig::capture_trace`] is set.
    pub trace: Option<Vec<TraceEvent>>,
}

/// Merge key of one attempt's events. Commits sort by commit stamp; an abort
/// sorts after every commit whose stamp was drawn before it, which covers
/// all versions it could have read.
type OrderKey = (u64, u8, u64);

struct Worker<'a> {
    eng: &'a Engine,
    cfg: &'a WorkloadConfig,
    group: &'a Group,
    slot: usize,
    opts: TxnOptions,
    stats: GroupStats,
    trace: Vec<(OrderKey, Vec<TraceEvent>)>,
}

impl Worker<'_> {
    fn pause(&self) {
        if self.cfg.yield_between_ops {
            thread::yield_now();
        }
    }

    /// `Ok(true)` on commit, `Ok(false)` on abort.
    fn attempt(&mut self, prog: &[Access]) -> Result<bool> {
        let mut log = Vec::with_capacity(prog.len() + 2);
        let mut t = capture::begin(self.eng, self.slot, self.opts, &mut log)?;
        let tid = t.tid().0;
        let mut failed = None;
        for a in prog {
            self.pause();
            let r = match *a {
                Access::Read(k) => capture::read(&mut t, k, &mut log).map(drop),
                Access::Write(k) => capture::write(&mut t, k, &mut log).map(drop),
                Access::Scan => capture::scan(&mut t, &mut log).map(drop),
            };
            if let Err(e) = r {
                failed = Some(e);
                break;
            }
        }
        self.stats.tracked_reads += t.tracked_reads();
        self.stats.untracked_reads += t.untracked_reads();
        let outcome = match failed {
            Some(e) => {
                drop(t);
                Err(e)
            }
            None => {
                self.pause();
                capture::commit(t, &mut log)
            }
        };
        let (key, committed) = match outcome {
            Ok(info) => ((info.cstamp, 0, tid), true),
            Err(e) => {
                let r = e.abort_reason().ok_or(e)?;
                self.stats.record_abort(r);
                ((self.eng.clock().current(), 1, tid), false)
            }
        };
        if self.cfg.capture_trace {
            self.trace.push((key, log));
        }
        Ok(committed)
    }

    fn run(&mut self, budget: &AtomicU64, mut rng: ChaCha8Rng) -> Result<()> {
        while budget.fetch_add(1, SeqCst) < self.cfg.txns {
            let prog = draw_program(self.group, self.cfg.db_size, self.cfg.no_rewrite, &mut rng);
            self.stats.offered += 1;
            let mut attempts = 0;
            loop {
                attempts += 1;
                if self.attempt(&prog)? {
                    self.stats.committed += 1;
                    break;
                }
                if !self.cfg.retry {
                    break;
                }
                if attempts >= self.cfg.retry_cap {
                    self.stats.alarms += 1;
                    break;
                }
                self.stats.retries += 1;
            }
        }
        Ok(())
    }
}

fn options(cfg: &WorkloadConfig, g: &Group) -> TxnOptions {
    let mut o = TxnOptions::new(cfg.scheme);
    if g.read_mostly {
        o = o.read_mostly();
    }
    if g.read_only {
        o = o.read_only();
    }
    if g.snapshot {
        o = o.on_safe_snapshot();
    }
    o
}

pub fn run_bench(cfg: &WorkloadConfig) -> Result<BenchOutput> {
    cfg.validate()?;
    if cfg.certifier == Certifier::Ssi && cfg.scheme != Scheme::Si {
        return Err(Error::InvalidConfig("ssi runs over si only".into()));
    }
    let mut ecfg = EngineConfig::new(cfg.db_size, cfg.threads(), cfg.certifier);
    ecfg.commit_path = cfg.commit_path;
    ecfg.staleness_threshold = cfg.staleness_threshold;
    ecfg.safe_snapshot_interval = cfg.safe_snapshot_interval;
    ecfg.hierarchical = cfg.certifier == Certifier::Ssn && cfg.groups.iter().any(|g| g.scan);
    let eng = Engine::new(ecfg)?;
    let budget = AtomicU64::new(0);
    let start = Instant::now();
    let results: Vec<Result<(usize, Worker<'_>)>> = thread::scope(|s| {
        let mut handles = Vec::new();
        let mut slot = 0;
        for (gi, g) in cfg.groups.iter().enumerate() {
            for _ in 0..g.threads {
                let mut w = Worker {
                    eng: &eng,
                    cfg,
                    group: g,
                    slot,
                    opts: options(cfg, g),
                    stats: GroupStats::default(),
                    trace: Vec::new(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(slot as u64);
                let budget = &budget;
                handles.push(s.spawn(move || w.run(budget, rng).map(|_| (gi, w))));
                slot += 1;
            }
        }
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("worker panicked".into()))))
            .collect()
    });
    let elapsed = start.elapsed();
    let mut groups: Vec<GroupStats> = cfg
        .groups
        .iter()
        .map(|g| GroupStats { threads: g.threads, ..Default::default() })
        .collect();
    let mut pieces = Vec::new();
    for r in results {
        let (gi, w) = r?;
        groups[gi].merge(&w.stats);
        pieces.extend(w.trace);
    }
    let trace = cfg.capture_trace.then(|| {
        pieces.sort_by_key(|(k, _)| *k);
        pieces.into_iter().flat_map(|(_, evs)| evs).collect()
    });
    Ok(BenchOutput {
        stats: RunStats { groups, elapsed },
        trace,
    })
}
