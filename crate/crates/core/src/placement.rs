//! Greedy relay placement over the peer graph of customer-free ASes.
//!
//! Each round admits only candidates peering with at least `min(k, selected)`
//! already chosen relays and picks the one adding the most client-weighted
//! scenarios. The k-core filter is only a heuristic for membership in a
//! k-connected subgraph, so the final plan is verified independently by
//! max-flow.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::attack_analysis::{covered_scenarios_many, AttackScenario, CoverageMethod, ScenarioSet};
use crate::routing::TieBreak;
use crate::topology::{candidate_relays, AsGraph, Asn, PeerGraph};

/// Nodes of `pg` that survive the k-core peel and sit in a component of at
/// least `n` nodes.
pub fn k_core_candidates(pg: &PeerGraph, k: usize, n: usize) -> BTreeSet<Asn> {
    let mut alive: BTreeSet<Asn> = pg.nodes().clone();
    if k >= 1 {
        let mut degree: BTreeMap<Asn, usize> = alive.iter().map(|&a| (a, pg.degree(a))).collect();
        let mut queue: VecDeque<Asn> = degree
            .iter()
            .filter(|(_, &d)| d < k)
            .map(|(&a, _)| a)
            .collect();
        while let Some(a) = queue.pop_front() {
            if !alive.remove(&a) {
                continue;
            }
            for b in pg.neighbors(a) {
                if alive.contains(&b) {
                    let d = degree.get_mut(&b).unwrap();
                    *d -= 1;
                    if *d + 1 == k {
                        queue.push_back(b);
                    }
                }
            }
        }
    }
    let core = pg.induced(&alive);
    let mut keep = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for &start in core.nodes() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            for b in core.neighbors(comp[i]) {
                if seen.insert(b) {
                    comp.push(b);
                }
            }
            i += 1;
        }
        if comp.len() >= n.max(1) {
            keep.extend(comp);
        }
    }
    keep
}

/// Largest `c` such that removing any `c - 1` nodes leaves the graph
/// connected. A complete graph on `m` nodes has connectivity `m - 1`.
pub fn vertex_connectivity(pg: &PeerGraph) -> usize {
    let nodes: Vec<Asn> = pg.nodes().iter().copied().collect();
    let m = nodes.len();
    if m <= 1 {
        return 0;
    }
    let index: BTreeMap<Asn, usize> = nodes.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let adj: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&a| pg.neighbors(a).map(|b| index[&b]).collect())
        .collect();
    let mut best = m - 1;
    for s in 0..m {
        for t in (s + 1)..m {
            if pg.has_edge(nodes[s], nodes[t]) {
                continue;
            }
            best = best.min(disjoint_paths(&adj, s, t, best));
            if best == 0 {
                return 0;
            }
        }
    }
    best
}

/// Internally vertex-disjoint s-t paths (s, t non-adjacent), stopping early
/// once `cap` paths are found.
fn disjoint_paths(adj: &[Vec<usize>], s: usize, t: usize, cap: usize) -> usize {
    // node v splits into v_in = 2v and v_out = 2v + 1 joined by capacity 1
    // (unbounded for s and t); graph edges become out -> in with capacity 1.
    let m = adj.len();
    let size = 2 * m;
    let mut cap_map: Vec<BTreeMap<usize, i32>> = vec![BTreeMap::new(); size];
    let add = |cap_map: &mut Vec<BTreeMap<usize, i32>>, u: usize, v: usize, c: i32| {
        *cap_map[u].entry(v).or_insert(0) += c;
        cap_map[v].entry(u).or_insert(0);
    };
    for v in 0..m {
        let c = if v == s || v == t { m as i32 } else { 1 };
        add(&mut cap_map, 2 * v, 2 * v + 1, c);
        for &w in &adj[v] {
            add(&mut cap_map, 2 * v + 1, 2 * w, 1);
        }
    }
    let (src, dst) = (2 * s + 1, 2 * t);
    let mut flow = 0;
    while flow < cap {
        let mut prev = vec![usize::MAX; size];
        prev[src] = src;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            if u == dst {
                break;
            }
            for (&v, &c) in &cap_map[u] {
                if c > 0 && prev[v] == usize::MAX {
                    prev[v] = u;
                    q.push_back(v);
                }
            }
        }
        if prev[dst] == usize::MAX {
            break;
        }
        let mut v = dst;
        while v != src {
            let u = prev[v];
            *cap_map[u].get_mut(&v).unwrap() -= 1;
            *cap_map[v].get_mut(&u).unwrap() += 1;
            v = u;
        }
        flow += 1;
    }
    flow
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementRound {
    pub asn: Asn,
    pub marginal_coverage: u64,
    pub cumulative_coverage: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayPlan {
    /// Relays in selection order.
    pub relays: Vec<Asn>,
    pub n: usize,
    pub k: usize,
    pub rounds: Vec<PlacementRound>,
    pub achieved_coverage: u64,
    /// Vertex connectivity of the induced peer subgraph, recomputed from
    /// scratch after selection.
    pub connectivity_certificate: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlacementError {
    #[error("no eligible candidate in round {round} after selecting {selected:?}")]
    Infeasible { round: usize, selected: Vec<Asn> },
    #[error("selected relays are only {achieved}-connected, {required} required")]
    ConnectivityShortfall {
        required: usize,
        achieved: usize,
        relays: Vec<Asn>,
    },
}

/// Connectivity a plan of `n` relays must reach: `k`, capped at `n - 1`
/// since no graph on `n` nodes is more than `(n - 1)`-connected.
pub fn required_connectivity(n: usize, k: usize) -> usize {
    k.min(n.saturating_sub(1))
}

/// Greedy selection of `n` relays among `candidates`. `scenarios` supplies
/// each candidate's covered set; candidates without an entry cover nothing.
pub fn locate_relays(
    pg: &PeerGraph,
    candidates: &BTreeSet<Asn>,
    scenarios: &BTreeMap<Asn, ScenarioSet>,
    weight: impl Fn(Asn) -> u64 + Sync,
    n: usize,
    k: usize,
) -> Result<RelayPlan, PlacementError> {
    let mut selected: Vec<Asn> = Vec::new();
    let mut union: HashSet<AttackScenario> = HashSet::new();
    let mut rounds = Vec::new();
    let mut cumulative = 0u64;
    let empty = BTreeSet::new();

    while selected.len() < n {
        let need = k.min(selected.len());
        let eligible: Vec<Asn> = candidates
            .iter()
            .copied()
            .filter(|c| !selected.contains(c))
            .filter(|&c| selected.iter().filter(|&&s| pg.has_edge(c, s)).count() >= need)
            .collect();
        let gains: Vec<(Asn, u64)> = eligible
            .par_iter()
            .map(|&c| {
                let set = scenarios.get(&c).map_or(&empty, |s| &s.covered);
                let gain = set
                    .iter()
                    .filter(|s| !union.contains(s))
                    .map(|s| weight(s.victim))
                    .sum();
                (c, gain)
            })
            .collect();
        // highest gain, then lowest ASN (eligible is ascending)
        let Some(&(pick, gain)) = gains
            .iter()
            .fold(None, |best: Option<&(Asn, u64)>, x| match best {
                Some(b) if b.1 >= x.1 => Some(b),
                _ => Some(x),
            })
        else {
            return Err(PlacementError::Infeasible {
                round: selected.len() + 1,
                selected,
            });
        };
        if let Some(s) = scenarios.get(&pick) {
            union.extend(s.covered.iter().copied());
        }
        cumulative += gain;
        selected.push(pick);
        rounds.push(PlacementRound {
            asn: pick,
            marginal_coverage: gain,
            cumulative_coverage: cumulative,
        });
    }

    let chosen: BTreeSet<Asn> = selected.iter().copied().collect();
    let certificate = vertex_connectivity(&pg.induced(&chosen));
    let required = required_connectivity(n, k);
    if certificate < required {
        return Err(PlacementError::ConnectivityShortfall {
            required,
            achieved: certificate,
            relays: selected,
        });
    }
    Ok(RelayPlan {
        relays: selected,
        n,
        k,
        rounds,
        achieved_coverage: cumulative,
        connectivity_certificate: certificate,
    })
}

/// Client weight of every possible scenario: each victim against every
/// other AS.
pub fn scenario_universe_weight(g: &AsGraph) -> u64 {
    let others = g.len().saturating_sub(1) as u64;
    g.total_weight() * others
}

/// Candidate extraction, k-core filtering, coverage and greedy selection in
/// one call.
pub fn plan_relays(
    g: &AsGraph,
    n: usize,
    k: usize,
    tb: TieBreak,
    method: CoverageMethod,
) -> Result<RelayPlan, PlacementError> {
    let pg = candidate_relays(g);
    let candidates = k_core_candidates(&pg, k, n);
    let list: Vec<Asn> = candidates.iter().copied().collect();
    let scenarios: BTreeMap<Asn, ScenarioSet> = covered_scenarios_many(g, &list, tb, method)
        .into_iter()
        .map(|s| (s.relay, s))
        .collect();
    locate_relays(&pg, &candidates, &scenarios, |a| g.weight(a), n, k)
}

/// Monte-Carlo estimate of the chance that an attacker peering with the
/// relays in `attacker_peers` cuts a relay off from the rest by announcing
/// its prefix: every relay adjacent to the target that also peers with the
/// attacker faces a tie and switches to the attacker with probability 1/2.
/// The attacker targets a relay of minimum degree (lowest ASN on ties).
pub fn tie_break_disconnect_probability<R: Rng>(
    relays: &PeerGraph,
    attacker_peers: &BTreeSet<Asn>,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let Some(target) = relays
        .nodes()
        .iter()
        .copied()
        .min_by_key(|&a| (relays.degree(a), a))
    else {
        return 0.0;
    };
    if trials == 0 || relays.nodes().len() < 2 {
        return 0.0;
    }
    let contested: Vec<Asn> = relays
        .neighbors(target)
        .filter(|u| attacker_peers.contains(u))
        .collect();
    let mut wins = 0usize;
    for _ in 0..trials {
        let cut: BTreeSet<Asn> = contested.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if !reaches_all(relays, target, &cut) {
            wins += 1;
        }
    }
    wins as f64 / trials as f64
}

/// Whether every relay can still reach `target` when the links between
/// `target` and the relays in `cut` are lost.
fn reaches_all(g: &PeerGraph, target: Asn, cut: &BTreeSet<Asn>) -> bool {
    let mut seen = BTreeSet::from([target]);
    let mut stack = vec![target];
    while let Some(u) = stack.pop() {
        for v in g.neighbors(u) {
            if u == target && cut.contains(&v) {
                continue;
            }
            if seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen.len() == g.nodes().len()
}
