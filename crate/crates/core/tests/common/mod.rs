#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ssn_core::oracle::script::{Op, ScheduleScript, Step};

/// 2..=`max_txns` transactions over 2..=`max_records` records, each running
/// 1..=`max_ops` random reads and writes before committing (or, rarely,
/// aborting), randomly interleaved.
pub fn random_script(rng: &mut ChaCha8Rng, max_txns: usize, max_records: usize, max_ops: usize) -> ScheduleScript {
    let ntx = rng.gen_range(2..=max_txns);
    let mut progs = random_programs(rng, ntx, max_records, max_ops);
    let mut steps = Vec::new();
    while progs.iter().any(|p| !p.is_empty()) {
        let live: Vec<usize> = (0..ntx).filter(|&t| !progs[t].is_empty()).collect();
        let t = live[rng.gen_range(0..live.len())];
        steps.push(Step { txn: t, op: progs[t].remove(0) });
    }
    let nrec = steps
        .iter()
        .filter_map(|s| match s.op {
            Op::Read(k) | Op::Write(k) => Some(k + 1),
            _ => None,
        })
        .max()
        .unwrap_or(1);
    ScheduleScript::from_steps(
        (0..ntx).map(|t| format!("T{t}")).collect(),
        (0..nrec).map(|k| format!("r{k}")).collect(),
        steps,
    )
}

pub fn random_programs(rng: &mut ChaCha8Rng, ntx: usize, max_records: usize, max_ops: usize) -> Vec<Vec<Op>> {
    let nrec = rng.gen_range(2..=max_records);
    (0..ntx)
        .map(|_| {
            let mut p: Vec<Op> = (0..rng.gen_range(1..=max_ops))
                .map(|_| {
                    let k = rng.gen_range(0..nrec);
                    if rng.gen_bool(0.5) {
                        Op::Read(k)
                    } else {
                        Op::Write(k)
                    }
                })
                .collect();
            p.push(if rng.gen_bool(0.9) { Op::Commit } else { Op::Abort });
            p
        })
        .collect()
}
