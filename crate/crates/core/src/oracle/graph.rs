//! Offline dependency graph over committed transactions.
//!
//! Built from a trace alone: w:r and w:w edges come straight from the
//! version identities logged by reads and writes, r:w edges are derived by
//! matching each read against the committed overwriter of the same version.
//! π and η are recomputed from the edges, never taken from the engine.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};

use super::trace::{EventKind, TraceEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Wr,
    Ww,
    Rw,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Wr => "w:r",
            EdgeKind::Ww => "w:w",
            EdgeKind::Rw => "r:w",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `from` must serialize before `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: u64,
    pub to: u64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub tid: u64,
    pub cstamp: u64,
    /// Event index of the commit; breaks cstamp ties between read-only
    /// transactions.
    pub position: usize,
    pub pi: u64,
    /// `None` when the node has no earlier-committed predecessor.
    pub eta: Option<u64>,
}

impl Node {
    pub fn flagged(&self) -> bool {
        self.eta.is_some_and(|eta| self.pi <= eta)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DependencyGraph {
    nodes: Vec<Node>,
    index: HashMap<u64, usize>,
    edges: BTreeSet<Edge>,
    aborted: usize,
    anomalies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scc {
    /// Member tids in commit order.
    pub members: Vec<u64>,
    pub flagged: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Violations {
    pub sccs: Vec<Scc>,
}

impl Violations {
    pub fn is_empty(&self) -> bool {
        self.sccs.is_empty()
    }

    pub fn scc_members(&self) -> usize {
        self.sccs.iter().map(|s| s.members.len()).sum()
    }

    pub fn flagged(&self) -> usize {
        self.sccs.iter().map(|s| s.flagged.len()).sum()
    }

    /// SCCs with no flagged member. Always empty unless the attribution
    /// rule itself is broken.
    pub fn unattributed(&self) -> impl Iterator<Item = &Scc> {
        self.sccs.iter().filter(|s| s.flagged.is_empty())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Open,
    Committed,
    Aborted,
}

struct Access {
    tid: u64,
    key: usize,
    creator: u64,
    cstamp: u64,
    event: usize,
}

fn malformed(event: usize, msg: String) -> Error {
    Error::MalformedTrace { event, msg }
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a committed transaction. Call [`DependencyGraph::recompute`]
    /// after the last edge.
    pub fn add_node(&mut self, tid: u64, cstamp: u64) {
        let position = self.nodes.len();
        self.index.insert(tid, position);
        self.nodes.push(Node {
            tid,
            cstamp,
            position,
            pi: cstamp,
            eta: None,
        });
    }

    pub fn add_edge(&mut self, from: u64, to: u64, kind: EdgeKind) {
        debug_assert!(self.index.contains_key(&from) && self.index.contains_key(&to));
        if from != to {
            self.edges.insert(Edge { from, to, kind });
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, tid: u64) -> Option<&Node> {
        self.index.get(&tid).map(|&i| &self.nodes[i])
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, from: u64, to: u64, kind: EdgeKind) -> bool {
        self.edges.contains(&Edge { from, to, kind })
    }

    pub fn aborted(&self) -> usize {
        self.aborted
    }

    /// Dirty reads, lost writes and other histories a certifiable scheduler
    /// must never produce.
    pub fn anomalies(&self) -> &[String] {
        &self.anomalies
    }

    fn rank(&self, i: usize) -> (u64, usize) {
        (self.nodes[i].cstamp, self.nodes[i].position)
    }

    /// Recomputes π and η for every node in commit order.
    pub fn recompute(&mut self) {
        let n = self.nodes.len();
        let mut outs = vec![Vec::new(); n];
        let mut ins = vec![Vec::new(); n];
        for e in &self.edges {
            let (a, b) = (self.index[&e.from], self.index[&e.to]);
            outs[a].push(b);
            ins[b].push(a);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| self.rank(i));
        for &t in &order {
            let rt = self.rank(t);
            let mut pi = self.nodes[t].cstamp;
            for &u in outs[t].iter().filter(|&&u| self.rank(u) < rt) {
                pi = pi.min(self.nodes[u].pi);
            }
            let eta = ins[t]
                .iter()
                .filter(|&&u| self.rank(u) < rt)
                .map(|&u| self.nodes[u].cstamp)
                .max();
            self.nodes[t].pi = pi;
            self.nodes[t].eta = eta;
        }
    }

    /// All nodes failing the exclusion test, inside an SCC or not.
    pub fn flagged(&self) -> Vec<u64> {
        self.nodes.iter().filter(|n| n.flagged()).map(|n| n.tid).collect()
    }

    pub fn find_violations(&self) -> Violations {
        let mut g = DiGraph::<u64, ()>::with_capacity(self.nodes.len(), self.edges.len());
        let idx: Vec<NodeIndex> = self.nodes.iter().map(|n| g.add_node(n.tid)).collect();
        for e in &self.edges {
            g.add_edge(idx[self.index[&e.from]], idx[self.index[&e.to]], ());
        }
        let mut sccs: Vec<Scc> = tarjan_scc(&g)
            .into_iter()
            .filter(|c| c.len() >= 2)
            .map(|c| {
                let mut members: Vec<usize> = c.into_iter().map(|ni| ni.index()).collect();
                members.sort_by_key(|&i| self.rank(i));
                Scc {
                    flagged: members
                        .iter()
                        .filter(|&&i| self.nodes[i].flagged())
                        .map(|&i| self.nodes[i].tid)
                        .collect(),
                    members: members.into_iter().map(|i| self.nodes[i].tid).collect(),
                }
            })
            .collect();
        sccs.sort_by_key(|s| self.rank(self.index[&s.members[0]]));
        Violations { sccs }
    }
}

/// Builds the graph from a trace, validating its shape.
pub fn build_graph(events: &[TraceEvent]) -> Result<DependencyGraph> {
    let mut state: HashMap<u64, State> = HashMap::new();
    let mut created: HashMap<(usize, u64), usize> = HashMap::new();
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    let mut commits = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let ev_no = i + 1;
        let st = state.get(&ev.tid).copied();
        match ev.kind {
            EventKind::Begin => {
                if st.is_some() {
                    return Err(malformed(ev_no, format!("transaction {} began twice", ev.tid)));
                }
                state.insert(ev.tid, State::Open);
                continue;
            }
            _ if st != Some(State::Open) => {
                return Err(malformed(
                    ev_no,
                    format!("{} by transaction {} outside begin..end", ev.kind.as_str(), ev.tid),
                ));
            }
            EventKind::Read | EventKind::Write => {
                let key = ev.key.expect("validated by parser");
                let creator = ev.creator.expect("validated by parser");
                if creator != 0 && creator != ev.tid && !created.contains_key(&(key, creator)) {
                    return Err(malformed(
                        ev_no,
                        format!("version of record {key} by {creator} used before it was written"),
                    ));
                }
                let acc = Access {
                    tid: ev.tid,
                    key,
                    creator,
                    cstamp: ev.version_cstamp.expect("validated by parser"),
                    event: ev_no,
                };
                if ev.kind == EventKind::Write {
                    created.entry((key, ev.tid)).or_insert(ev_no);
                    writes.push(acc);
                } else {
                    reads.push(acc);
                }
            }
            EventKind::Commit => {
                state.insert(ev.tid, State::Committed);
                commits.push((ev.tid, ev.final_cstamp.expect("validated by parser")));
            }
            EventKind::Abort => {
                state.insert(ev.tid, State::Aborted);
            }
        }
    }
    if let Some((tid, _)) = state.iter().find(|(_, s)| **s == State::Open) {
        return Err(malformed(events.len(), format!("transaction {tid} never finished")));
    }

    let mut g = DependencyGraph::new();
    g.aborted = state.values().filter(|s| **s == State::Aborted).count();
    for &(tid, c) in &commits {
        g.add_node(tid, c);
    }
    let committed = |tid: u64| state.get(&tid) == Some(&State::Committed);

    // A version's committed overwriters; more than one is a lost write.
    let mut overwriters: HashMap<(usize, u64), Vec<u64>> = HashMap::new();
    for w in writes.iter().filter(|w| committed(w.tid) && w.creator != w.tid) {
        if w.creator != 0 {
            if !committed(w.creator) {
                g.anomalies.push(format!(
                    "event {}: {} overwrote uncommitted version of record {} by {}",
                    w.event, w.tid, w.key, w.creator
                ));
                continue;
            }
            g.add_edge(w.creator, w.tid, EdgeKind::Ww);
        }
        let list = overwriters.entry((w.key, w.creator)).or_default();
        if !list.contains(&w.tid) {
            list.push(w.tid);
        }
    }
    for ((key, creator), list) in &overwriters {
        if list.len() > 1 {
            g.anomalies.push(format!(
                "lost write: version of record {key} by {creator} overwritten by {list:?}"
            ));
        }
    }
    for r in reads.iter().filter(|r| committed(r.tid) && r.creator != r.tid) {
        if r.creator != 0 {
            if !committed(r.creator) {
                g.anomalies.push(format!(
                    "event {}: dirty read of record {} by {} from {}",
                    r.event, r.key, r.tid, r.creator
                ));
                continue;
            }
            let c = g.node(r.creator).expect("committed node").cstamp;
            if c != r.cstamp {
                g.anomalies.push(format!(
                    "event {}: read of record {} names stamp {} but {} committed at {c}",
                    r.event, r.key, r.cstamp, r.creator
                ));
            }
            g.add_edge(r.creator, r.tid, EdgeKind::Wr);
        }
        if let Some(list) = overwriters.get(&(r.key, r.creator)) {
            for &o in list {
                g.add_edge(r.tid, o, EdgeKind::Rw);
            }
        }
    }
    g.recompute();
    Ok(g)
}

/// Oracle verdict for one trace.
#[derive(Debug, Clone)]
pub struct Report {
    pub graph: DependencyGraph,
    pub violations: Violations,
}

impl Report {
    pub fn new(graph: DependencyGraph) -> Self {
        let violations = graph.find_violations();
        Report { graph, violations }
    }

    pub fn check(events: &[TraceEvent]) -> Result<Self> {
        Ok(Self::new(build_graph(events)?))
    }

    pub fn serializable(&self) -> bool {
        self.violations.is_empty() && self.graph.anomalies.is_empty()
    }

    /// Structured text report. Edges are listed for SCC members only.
    pub fn render(&self) -> String {
        let g = &self.graph;
        let v = &self.violations;
        let mut out = String::from("# ssn-check v1\n");
        let _ = writeln!(
            out,
            "graph committed={} aborted={} edges={}",
            g.nodes.len(),
            g.aborted,
            g.edges.len()
        );
        for (i, scc) in v.sccs.iter().enumerate() {
            let join = |xs: &[u64]| xs.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                out,
                "scc id={i} size={} members={} flagged={}",
                scc.members.len(),
                join(&scc.members),
                if scc.flagged.is_empty() { "-".into() } else { join(&scc.flagged) },
            );
            let members: BTreeSet<u64> = scc.members.iter().copied().collect();
            for e in g.edges.iter().filter(|e| members.contains(&e.from) && members.contains(&e.to)) {
                let _ = writeln!(out, "edge scc={i} from={} to={} kind={}", e.from, e.to, e.kind);
            }
            for tid in &scc.flagged {
                let n = g.node(*tid).expect("member");
                let _ = writeln!(
                    out,
                    "flagged scc={i} tid={tid} cstamp={} pi={} eta={}",
                    n.cstamp,
                    n.pi,
                    n.eta.expect("flagged nodes have eta")
                );
            }
        }
        for a in &g.anomalies {
            let _ = writeln!(out, "anomaly {a}");
        }
        let _ = writeln!(
            out,
            "summary sccs={} scc_members={} flagged={} unattributed={} anomalies={}",
            v.sccs.len(),
            v.scc_members(),
            v.flagged(),
            v.unattributed().count(),
            g.anomalies.len()
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AbortReason;
    use proptest::prelude::*;

    fn ev_begin(t: u64) -> TraceEvent {
        TraceEvent::begin(t, 0)
    }

    #[test]
    fn read_of_created_version_is_wr() {
        let trace = [
            ev_begin(1),
            TraceEvent::write(1, 0, 0, 0, 0),
            TraceEvent::commit(1, 0, 2),
            ev_begin(2),
            TraceEvent::read(2, 0, 0, 2, 1),
            TraceEvent::commit(2, 0, 3),
        ];
        let g = build_graph(&trace).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert!(g.has_edge(1, 2, EdgeKind::Wr));
        assert!(g.find_violations().is_empty());
    }

    #[test]
    fn read_of_overwritten_version_is_rw() {
        let trace = [
            ev_begin(1),
            ev_begin(2),
            TraceEvent::read(1, 0, 0, 0, 0),
            TraceEvent::write(2, 1, 0, 0, 0),
            TraceEvent::commit(2, 1, 3),
            TraceEvent::commit(1, 0, 4),
        ];
        let g = build_graph(&trace).unwrap();
        assert!(g.has_edge(1, 2, EdgeKind::Rw));
        // T2 committed first, so T1's π drops to c(T2) but nothing precedes T1.
        assert_eq!(g.node(1).unwrap().pi, 3);
        assert!(g.flagged().is_empty());
    }

    pub(crate) fn write_skew() -> Vec<TraceEvent> {
        vec![
            ev_begin(1),
            ev_begin(2),
            TraceEvent::read(1, 0, 0, 0, 0),
            TraceEvent::read(1, 0, 1, 0, 0),
            TraceEvent::read(2, 1, 0, 0, 0),
            TraceEvent::read(2, 1, 1, 0, 0),
            TraceEvent::write(1, 0, 0, 0, 0),
            TraceEvent::write(2, 1, 1, 0, 0),
            TraceEvent::commit(1, 0, 3),
            TraceEvent::commit(2, 1, 4),
        ]
    }

    #[test]
    fn write_skew_is_one_flagged_two_cycle() {
        let g = build_graph(&write_skew()).unwrap();
        let kinds: Vec<_> = g.edges().iter().map(|e| (e.from, e.to, e.kind)).collect();
        assert_eq!(kinds, vec![(1, 2, EdgeKind::Rw), (2, 1, EdgeKind::Rw)]);
        let v = g.find_violations();
        assert_eq!(v.sccs.len(), 1);
        assert_eq!(v.sccs[0].members, vec![1, 2]);
        // T2: π = c(T1) = 3 through the back edge, η = c(T1) via the forward one.
        assert_eq!(v.sccs[0].flagged, vec![2]);
        let n = g.node(2).unwrap();
        assert_eq!((n.pi, n.eta), (3, Some(3)));
        let report = Report::new(g).render();
        assert!(report.contains("scc id=0 size=2 members=1,2 flagged=2"));
        assert!(report.contains("edge scc=0 from=1 to=2 kind=r:w"));
        assert!(report.contains("summary sccs=1 scc_members=2 flagged=1 unattributed=0 anomalies=0"));
    }

    #[test]
    fn five_transaction_cycle_flags_only_t2() {
        // Serial order T1 T2 T3 T4 T5 T1; commit order T5 T4 T3 T1 T2.
        let mut g = DependencyGraph::new();
        for (t, c) in [(5, 10), (4, 20), (3, 30), (1, 40), (2, 50)] {
            g.add_node(t, c);
        }
        g.add_edge(5, 1, EdgeKind::Wr);
        g.add_edge(1, 2, EdgeKind::Wr);
        g.add_edge(2, 3, EdgeKind::Rw);
        g.add_edge(3, 4, EdgeKind::Rw);
        g.add_edge(4, 5, EdgeKind::Rw);
        g.recompute();
        let t2 = g.node(2).unwrap();
        assert_eq!((t2.pi, t2.eta), (10, Some(40)));
        assert_eq!(g.flagged(), vec![2]);
        let v = g.find_violations();
        assert_eq!(v.sccs.len(), 1);
        assert_eq!(v.sccs[0].members, vec![5, 4, 3, 1, 2]);
        assert_eq!(v.sccs[0].flagged, vec![2]);
    }

    #[test]
    fn aborted_transactions_are_excluded() {
        let mut trace = write_skew();
        trace[9] = TraceEvent::abort(2, 1, AbortReason::SsnExclusion);
        let g = build_graph(&trace).unwrap();
        assert_eq!(g.nodes().len(), 1);
        assert!(g.edges().is_empty());
        assert_eq!(g.aborted(), 1);
    }

    #[test]
    fn dirty_read_and_lost_write_are_anomalies() {
        let trace = [
            ev_begin(1),
            TraceEvent::write(1, 0, 0, 0, 0),
            ev_begin(2),
            TraceEvent::read(2, 1, 0, 7, 1),
            TraceEvent::abort(1, 0, AbortReason::User),
            TraceEvent::commit(2, 1, 3),
        ];
        let r = Report::check(&trace).unwrap();
        assert!(!r.serializable());
        assert!(r.graph.anomalies()[0].contains("dirty read"));

        let trace = [
            ev_begin(1),
            ev_begin(2),
            TraceEvent::write(1, 0, 0, 0, 0),
            TraceEvent::write(2, 1, 0, 0, 0),
            TraceEvent::commit(1, 0, 2),
            TraceEvent::commit(2, 1, 3),
        ];
        let r = Report::check(&trace).unwrap();
        assert!(r.graph.anomalies()[0].contains("lost write"));
    }

    #[test]
    fn malformed_traces() {
        let err = |t: &[TraceEvent]| match build_graph(t) {
            Err(Error::MalformedTrace { event, .. }) => event,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(err(&[TraceEvent::read(1, 0, 0, 0, 0)]), 1);
        assert_eq!(err(&[ev_begin(1), ev_begin(1)]), 2);
        assert_eq!(err(&[ev_begin(1), TraceEvent::read(1, 0, 0, 5, 9)]), 2);
        assert_eq!(err(&[ev_begin(1)]), 1);
        let done = [ev_begin(1), TraceEvent::commit(1, 0, 2), TraceEvent::read(1, 0, 0, 0, 0)];
        assert_eq!(err(&done), 3);
    }

    /// T1 creates x; Tn reads it; then each Ti reads a version T(i-1) later
    /// overwrites, ending with T1 overwriting what T2 read.
    fn long_chain(n: u64) -> Vec<TraceEvent> {
        let mut t = vec![ev_begin(1), TraceEvent::write(1, 0, 0, 0, 0)];
        for i in 2..=n {
            t.push(ev_begin(i));
            t.push(TraceEvent::read(i, 0, i as usize, 0, 0));
        }
        t.push(TraceEvent::write(1, 0, 2, 0, 0));
        t.push(TraceEvent::commit(1, 0, 1));
        t.push(TraceEvent::read(n, 0, 0, 1, 1));
        for i in (2..n).rev() {
            t.push(TraceEvent::write(i, 0, (i + 1) as usize, 0, 0));
        }
        // Tn commits before T(n-1), ..., T2 last.
        t.push(TraceEvent::commit(n, 0, 2));
        for (k, i) in (2..n).rev().enumerate() {
            t.push(TraceEvent::commit(i, 0, 3 + k as u64));
        }
        t
    }

    #[test]
    fn long_chain_detected_at_any_length() {
        for n in [3, 10, 200] {
            let g = build_graph(&long_chain(n)).unwrap();
            let v = g.find_violations();
            assert_eq!(v.sccs.len(), 1, "n = {n}");
            assert_eq!(v.sccs[0].members.len(), n as usize);
            assert_eq!(v.unattributed().count(), 0);
        }
    }

    fn reachable(n: usize, adj: &[Vec<usize>], from: usize) -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen
    }

    proptest! {
        // Parallel edges of different kinds collapse in SCC terms, so the
        // brute-force oracle works on plain reachability.
        #[test]
        fn scc_membership_matches_brute_force(
            n in 1usize..9,
            raw in proptest::collection::vec((0usize..9, 0usize..9), 0..20),
        ) {
            let mut g = DependencyGraph::new();
            for i in 0..n {
                g.add_node(i as u64 + 1, i as u64 + 1);
            }
            let mut adj = vec![Vec::new(); n];
            for (a, b) in raw {
                let (a, b) = (a % n, b % n);
                if a != b {
                    g.add_edge(a as u64 + 1, b as u64 + 1, EdgeKind::Rw);
                    adj[a].push(b);
                }
            }
            g.recompute();
            let v = g.find_violations();
            let in_cycle: Vec<bool> = (0..n).map(|i| reachable(n, &adj, i)[i]).collect();
            let mut members: Vec<u64> = v.sccs.iter().flat_map(|s| s.members.clone()).collect();
            members.sort();
            let expect: Vec<u64> = (0..n).filter(|&i| in_cycle[i]).map(|i| i as u64 + 1).collect();
            prop_assert_eq!(members, expect);
            prop_assert_eq!(v.unattributed().count(), 0);
        }
    }
}
