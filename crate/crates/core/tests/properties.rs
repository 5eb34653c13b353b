mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssn_core::kernel::Tid;
use ssn_core::mvstore::{Creator, VersionStamps};
use ssn_core::oracle::enumerate::{enumerate_interleavings, family, EnumConfig};
use ssn_core::oracle::script::{replay_with, Op, ReplayConfig, ScheduleScript, Step};
use ssn_core::oracle::trace::{EventKind, TraceEvent};
use ssn_core::{AbortReason, Certifier, CommitPath, Engine, EngineConfig, Scheme, TxnOptions};

const RECORDS: usize = 16;

fn hammer(eng: &Engine, slot: usize, scheme: Scheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1500 {
        let Ok(mut t) = eng.begin(slot, TxnOptions::new(scheme)) else { continue };
        let tid = t.tid().0;
        let mut ok = true;
        for _ in 0..rng.gen_range(1..=5) {
            let k = rng.gen_range(0..RECORDS);
            let r = if rng.gen_bool(0.5) { t.read(k).map(drop) } else { t.write(k, tid).map(drop) };
            if r.is_err() {
                ok = false;
                break;
            }
            thread::yield_now();
        }
        if ok {
            let _ = t.commit();
        }
    }
}

/// Every version below a chain's head has a committed creator.
fn sample_chains(eng: &Engine) {
    for k in 0..RECORDS {
        let mut v = eng.store().record(k).unwrap().head().prev();
        while let Some(x) = v {
            let c = eng.store().creator(x, eng.table(), Tid(0));
            assert!(matches!(c, Creator::Committed(_)), "record {k}: non-head version {c:?}");
            v = x.prev();
        }
    }
}

fn assert_quiescent_chain(key: usize, chain: &[VersionStamps]) {
    assert!(chain[0].sstamp.is_infinity(), "record {key}: head overwritten");
    for v in chain {
        assert!(!v.cstamp.is_tid() && !v.sstamp.is_tid(), "record {key}: tid left behind");
        assert!(!v.sstamp.is_locked());
    }
    for w in chain.windows(2) {
        let (newer, older) = (&w[0], &w[1]);
        assert!(newer.cstamp.value() > older.cstamp.value(), "record {key}: cstamps not increasing");
        // the overwriter's pi never exceeds its commit stamp
        assert!(older.sstamp.value() <= newer.cstamp.value(), "record {key}: pi above c");
    }
}

#[test]
fn chains_stay_well_formed_under_stress() {
    for (scheme, cert) in [
        (Scheme::Si, Certifier::Ssn),
        (Scheme::Rc, Certifier::Ssn),
        (Scheme::Si, Certifier::Ssi),
        (Scheme::Rc, Certifier::None),
    ] {
        let eng = Engine::new(EngineConfig::new(RECORDS, 4, cert)).unwrap();
        let stop = AtomicBool::new(false);
        thread::scope(|s| {
            let sampler = s.spawn(|| {
                while !stop.load(Ordering::SeqCst) {
                    sample_chains(&eng);
                    thread::yield_now();
                }
            });
            let workers: Vec<_> = (0..4)
                .map(|w| {
                    let eng = &eng;
                    s.spawn(move || hammer(eng, w, scheme, w as u64))
                })
                .collect();
            for h in workers {
                h.join().unwrap();
            }
            stop.store(true, Ordering::SeqCst);
            sampler.join().unwrap();
        });
        for k in 0..RECORDS {
            assert_quiescent_chain(k, &eng.chain(k));
        }
        assert!(eng.commits() > 0);
    }
}

/// Expected pstamp of every version, from the trace alone. A reader raises
/// the pstamp of a version it read at commit unless the version's overwrite
/// had already committed before the read.
fn expected_pstamps(trace: &[TraceEvent]) -> HashMap<(usize, u64), u64> {
    let mut cstamp = HashMap::new();
    for e in trace.iter().filter(|e| e.kind == EventKind::Commit) {
        cstamp.insert(e.tid, e.final_cstamp.unwrap());
    }
    let mut overwritten_at: HashMap<(usize, u64), usize> = HashMap::new();
    let mut writes: HashMap<u64, Vec<(usize, u64)>> = HashMap::new();
    for e in trace.iter().filter(|e| e.kind == EventKind::Write) {
        writes.entry(e.tid).or_default().push((e.key.unwrap(), e.creator.unwrap()));
    }
    for (i, e) in trace.iter().enumerate() {
        if e.kind == EventKind::Commit {
            for id in writes.get(&e.tid).into_iter().flatten() {
                overwritten_at.entry(*id).or_insert(i);
            }
        }
    }
    let mut out: HashMap<(usize, u64), u64> = HashMap::new();
    for (tid, ws) in &writes {
        if let Some(&c) = cstamp.get(tid) {
            for (k, _) in ws {
                out.insert((*k, *tid), c);
            }
        }
    }
    for (i, e) in trace.iter().enumerate() {
        if e.kind != EventKind::Read {
            continue;
        }
        let id = (e.key.unwrap(), e.creator.unwrap());
        let tracked = overwritten_at.get(&id).is_none_or(|&j| j > i);
        if let (true, Some(&c)) = (tracked, cstamp.get(&e.tid)) {
            let p = out.entry(id).or_insert(0);
            *p = (*p).max(c);
        }
    }
    out
}

#[test]
fn pstamps_match_trace_recomputation() {
    let mut raised = 0;
    for seed in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = common::random_script(&mut rng, 4, 3, 4);
        let scheme = if seed % 2 == 0 { Scheme::Si } else { Scheme::Rc };
        for path in [CommitPath::Serial, CommitPath::Parallel] {
            let cfg = ReplayConfig {
                commit_path: path,
                strict: false,
                ..ReplayConfig::new(scheme, Certifier::Ssn)
            };
            let r = replay_with(&s, &cfg).unwrap();
            let expect = expected_pstamps(&r.trace);
            for (k, chain) in r.chains.iter().enumerate() {
                for v in chain {
                    let id = (k, v.payload.unwrap_or(0));
                    let want = expect.get(&id).copied().unwrap_or(0);
                    assert_eq!(v.pstamp, want, "seed {seed} {path} record {k}:\n{s}");
                    raised += u64::from(v.pstamp > v.cstamp.value());
                }
            }
        }
    }
    assert!(raised > 100, "only {raised} versions had a reader raise");
}

#[test]
fn watermarks_move_one_way_and_freeze() {
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scheme = if seed % 2 == 0 { Scheme::Si } else { Scheme::Rc };
        let eng = Engine::new(EngineConfig::new(3, 3, Certifier::Ssn)).unwrap();
        let mut live: Vec<Option<ssn_core::Transaction<'_>>> = (0..3).map(|_| None).collect();
        // first timestamp seen per (key, creator, is_sstamp)
        let mut frozen: HashMap<(usize, Option<u64>, bool), u64> = HashMap::new();
        for step in 0..40 {
            let i = rng.gen_range(0..3);
            let mut t = match live[i].take() {
                Some(t) => t,
                None => eng.begin(i, TxnOptions::new(scheme)).unwrap(),
            };
            let (s0, p0) = (t.sstamp(), t.pstamp());
            let k = rng.gen_range(0..3);
            let r = match rng.gen_range(0..5) {
                0 => {
                    let _ = t.commit();
                    None
                }
                1 | 2 => t.read(k).ok().map(|_| t),
                _ => {
                    let tid = t.tid().0;
                    t.write(k, tid).ok().map(|_| t)
                }
            };
            if let Some(t) = r {
                assert!(t.sstamp() <= s0, "seed {seed} step {step}: sstamp rose");
                assert!(t.pstamp() >= p0, "seed {seed} step {step}: pstamp fell");
                live[i] = Some(t);
            }
            for k in 0..3 {
                for v in eng.chain(k) {
                    for (is_s, w) in [(false, v.cstamp), (true, v.sstamp)] {
                        if !w.is_tid() && !w.is_infinity() {
                            let seen = *frozen.entry((k, v.payload, is_s)).or_insert(w.value());
                            assert_eq!(seen, w.value(), "seed {seed} step {step}: record {k} stamp changed");
                        }
                    }
                }
            }
        }
    }
}

fn certification_aborts(s: &ScheduleScript, cert: Certifier, reason: AbortReason) -> u64 {
    let cfg = EnumConfig {
        scheme: Scheme::Si,
        certifier: cert,
        enforce: true,
    };
    let mut n = 0;
    enumerate_interleavings(s, cfg, |h| {
        n += h.outcomes.iter().filter(|(_, o)| o.reason() == Some(reason)).count() as u64;
        assert!(!h.cyclic(), "{cert} admitted a cycle:\n{}", h.script);
    })
    .unwrap();
    n
}

#[test]
fn ssi_aborts_at_least_as_often_as_ssn_on_three_party() {
    let s = family("three-party").unwrap();
    let ssi = certification_aborts(&s, Certifier::Ssi, AbortReason::SsiDangerous);
    let ssn = certification_aborts(&s, Certifier::Ssn, AbortReason::SsnExclusion);
    assert!(ssi >= ssn, "ssi {ssi} < ssn {ssn}");
    assert!(ssn > 0);
}

#[test]
fn random_small_programs_have_every_cycle_caught() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let progs = common::random_programs(&mut rng, 3, 3, 3);
        let steps: Vec<Step> = progs
            .iter()
            .enumerate()
            .flat_map(|(t, p)| p.iter().map(move |&op| Step { txn: t, op }))
            .collect();
        let s = ScheduleScript::from_steps(
            (0..3).map(|t| format!("T{t}")).collect(),
            (0..3).map(|k| format!("r{k}")).collect(),
            steps,
        );
        let sum = enumerate_interleavings(&s, EnumConfig::default(), |_| {}).unwrap();
        assert!(sum.sound(), "seed {seed}: {sum:?}\n{s}");
    }
}

#[test]
fn write_skew_under_plain_si_commits_both() {
    let s = family("write-skew").unwrap();
    let serial: Vec<Step> = {
        // T1 and T2 read before either writes
        let p: Vec<Vec<Op>> = (0..2)
            .map(|t| s.steps().iter().filter(|st| st.txn == t).map(|st| st.op).collect())
            .collect();
        [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (1, 2), (0, 3), (1, 3)]
            .iter()
            .map(|&(t, i)| Step { txn: t, op: p[t][i] })
            .collect()
    };
    let h = ScheduleScript::from_steps(s.txns().to_vec(), s.records().to_vec(), serial);
    let r = replay_with(&h, &ReplayConfig::new(Scheme::Si, Certifier::None)).unwrap();
    assert!(r.outcomes.iter().all(|(_, o)| o.committed()));
    let g = ssn_core::oracle::build_graph(&r.trace).unwrap();
    let v = g.find_violations();
    assert_eq!(v.sccs.len(), 1);
    assert_eq!(v.sccs[0].members.len(), 2);
}
