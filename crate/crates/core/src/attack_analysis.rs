//! Which (attacker, victim) pairs a relay protects, and the evaluation
//! curves built from them.
//!
//! A relay AS `r` covers scenario `(m, v)` when the victim AS `v`, faced with
//! the relay's legitimate announcement and an equally specific announcement
//! originated by `m`, keeps routing towards `r`.
//!
//! Coverage is derived from single-origin routing trees. For every AS whose
//! two candidate routes are not both provider-learned, [`more_preferred`]
//! applied to the two tree paths is exact: the last AS the paths share picks
//! one and exports only that one. Where both routes are provider-learned the
//! shared AS may pick a longer route for class reasons while the victim still
//! holds an alternative, so [`CoverageMethod::Exact`] re-resolves that
//! downstream region by a length-ordered sweep. [`CoverageMethod::PathComparison`]
//! applies the path comparison everywhere; it is cheaper and approximate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use thiserror::Error;

use crate::routing::{routing_tree, Origin, OriginRole, RouteClass, RoutingOutcome, TieBreak};
use crate::topology::{AsGraph, Asn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttackScenario {
    pub attacker: Asn,
    pub victim: Asn,
}

/// Scenarios protected by one relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSet {
    pub relay: Asn,
    pub covered: BTreeSet<AttackScenario>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.covered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covered.is_empty()
    }

    pub fn contains(&self, attacker: Asn, victim: Asn) -> bool {
        self.covered.contains(&AttackScenario { attacker, victim })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("paths start at different ASes ({0} vs {1})")]
    DifferentStart(Asn, Asn),
    #[error("empty path")]
    EmptyPath,
    #[error("path of {hops} hops needs {hops} classes, got {classes}")]
    ClassCount { hops: usize, classes: usize },
}

/// A route as seen from its holder: `path[0]` is the holder, the last element
/// the origin, and `classes[i]` the class of the route held by `path[i]`.
#[derive(Debug, Clone, Copy)]
pub struct ClassedPath<'a> {
    pub path: &'a [Asn],
    pub classes: &'a [RouteClass],
    pub role: OriginRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preferred {
    A,
    B,
}

/// Decides which of two routes the holder ends up using.
///
/// Strips the shared prefix, then lets the last shared AS decide: a path
/// that ends there wins (that AS is its origin), otherwise the better class
/// of the next hop wins, then the shorter remainder, then the tie-break side,
/// then the lower next-hop ASN.
pub fn more_preferred(
    a: &ClassedPath<'_>,
    b: &ClassedPath<'_>,
    tb: TieBreak,
) -> Result<Preferred, AnalysisError> {
    for p in [a, b] {
        if p.path.is_empty() {
            return Err(AnalysisError::EmptyPath);
        }
        if p.classes.len() + 1 != p.path.len() {
            return Err(AnalysisError::ClassCount {
                hops: p.path.len() - 1,
                classes: p.classes.len(),
            });
        }
    }
    if a.path[0] != b.path[0] {
        return Err(AnalysisError::DifferentStart(a.path[0], b.path[0]));
    }
    let shared = a
        .path
        .iter()
        .zip(b.path)
        .take_while(|(x, y)| x == y)
        .count();
    let a_ends = shared == a.path.len();
    let b_ends = shared == b.path.len();
    match (a_ends, b_ends) {
        (true, false) => return Ok(Preferred::A),
        (false, true) => return Ok(Preferred::B),
        (true, true) => {
            return Ok(if tb.rank(a.role) <= tb.rank(b.role) {
                Preferred::A
            } else {
                Preferred::B
            })
        }
        (false, false) => {}
    }
    let d = shared - 1;
    let (ca, cb) = (a.classes[d], b.classes[d]);
    if ca != cb {
        return Ok(if ca > cb { Preferred::A } else { Preferred::B });
    }
    let (la, lb) = (a.path.len() - shared, b.path.len() - shared);
    if la != lb {
        return Ok(if la < lb { Preferred::A } else { Preferred::B });
    }
    let key_a = (tb.rank(a.role), a.path[shared]);
    let key_b = (tb.rank(b.role), b.path[shared]);
    Ok(if key_a <= key_b {
        Preferred::A
    } else {
        Preferred::B
    })
}

/// How scenario coverage is derived from routing trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageMethod {
    /// Path comparison plus re-resolution of provider-learned regions.
    #[default]
    Exact,
    /// Path comparison at every victim.
    PathComparison,
}

const UNSET: u32 = u32::MAX;

fn classed<'a>(
    t: &RoutingOutcome<'_>,
    idx: usize,
    path: &'a mut Vec<Asn>,
    classes: &'a mut Vec<RouteClass>,
) {
    path.clear();
    classes.clear();
    let g = t.graph();
    let mut cur = idx;
    loop {
        path.push(g.asn(cur));
        match t.next_idx(cur) {
            Some(nx) => {
                classes.push(t.class_idx(cur).expect("routed hop has class"));
                cur = nx;
            }
            None => break,
        }
    }
}

fn compare_at(
    relay_tree: &RoutingOutcome<'_>,
    attacker_tree: &RoutingOutcome<'_>,
    idx: usize,
    tb: TieBreak,
    scratch: &mut Scratch,
) -> OriginRole {
    classed(relay_tree, idx, &mut scratch.pa, &mut scratch.ca);
    classed(attacker_tree, idx, &mut scratch.pb, &mut scratch.cb);
    let a = ClassedPath {
        path: &scratch.pa,
        classes: &scratch.ca,
        role: OriginRole::Legitimate,
    };
    let b = ClassedPath {
        path: &scratch.pb,
        classes: &scratch.cb,
        role: OriginRole::Attacker,
    };
    match more_preferred(&a, &b, tb).expect("tree paths share their holder") {
        Preferred::A => OriginRole::Legitimate,
        Preferred::B => OriginRole::Attacker,
    }
}

#[derive(Default)]
struct Scratch {
    pa: Vec<Asn>,
    pb: Vec<Asn>,
    ca: Vec<RouteClass>,
    cb: Vec<RouteClass>,
}

/// Winner at every AS when `relay_tree`'s origin competes with
/// `attacker_tree`'s origin.
fn resolve_contest(
    relay_tree: &RoutingOutcome<'_>,
    attacker_tree: &RoutingOutcome<'_>,
    tb: TieBreak,
    method: CoverageMethod,
    only: Option<&[usize]>,
    scratch: &mut Scratch,
) -> Vec<Option<OriginRole>> {
    let g = relay_tree.graph();
    let n = g.len();
    let mut label: Vec<Option<OriginRole>> = vec![None; n];

    if method == CoverageMethod::PathComparison {
        let all: Vec<usize>;
        let targets = match only {
            Some(t) => t,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        for &x in targets {
            label[x] = match (relay_tree.is_routed_idx(x), attacker_tree.is_routed_idx(x)) {
                (false, false) => None,
                (true, false) => Some(OriginRole::Legitimate),
                (false, true) => Some(OriginRole::Attacker),
                (true, true) => Some(compare_at(relay_tree, attacker_tree, x, tb, scratch)),
            };
        }
        return label;
    }

    let mut len = vec![UNSET; n];
    let mut pending = Vec::new();
    for x in 0..n {
        let (r, a) = (relay_tree.route_idx(x), attacker_tree.route_idx(x));
        match (r, a) {
            (None, None) => {}
            (Some(r), None) => {
                label[x] = Some(OriginRole::Legitimate);
                len[x] = r.len;
            }
            (None, Some(a)) => {
                label[x] = Some(OriginRole::Attacker);
                len[x] = a.len;
            }
            (Some(r), Some(a)) => {
                if r.class == Some(RouteClass::Provider) && a.class == Some(RouteClass::Provider) {
                    pending.push(x);
                } else {
                    let win = compare_at(relay_tree, attacker_tree, x, tb, scratch);
                    label[x] = Some(win);
                    len[x] = if win == OriginRole::Legitimate { r.len } else { a.len };
                }
            }
        }
    }
    if pending.is_empty() {
        return label;
    }

    // Provider-learned region: offers flow down customer links in order of
    // joint path length.
    let mut is_pending = vec![false; n];
    for &x in &pending {
        is_pending[x] = true;
    }
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for x in 0..n {
        if len[x] != UNSET {
            let l = len[x] as usize;
            if buckets.len() <= l {
                buckets.resize(l + 1, Vec::new());
            }
            buckets[l].push(x);
        }
    }
    let mut best: Vec<usize> = vec![usize::MAX; n];
    let mut l = 0;
    while l < buckets.len() {
        let mut touched = Vec::new();
        for &u in &buckets[l] {
            let role = label[u].expect("bucketed AS is resolved");
            for &c in g.customers(u) {
                if !is_pending[c] || label[c].is_some() {
                    continue;
                }
                let cur = best[c];
                if cur == usize::MAX {
                    best[c] = u;
                    touched.push(c);
                } else {
                    let cur_role = label[cur].unwrap();
                    if (tb.rank(role), g.asn(u)) < (tb.rank(cur_role), g.asn(cur)) {
                        best[c] = u;
                    }
                }
            }
        }
        if !touched.is_empty() && buckets.len() <= l + 1 {
            buckets.resize(l + 2, Vec::new());
        }
        touched.sort_unstable();
        for c in touched {
            let u = std::mem::replace(&mut best[c], usize::MAX);
            label[c] = label[u];
            len[c] = l as u32 + 1;
            buckets[l + 1].push(c);
        }
        l += 1;
    }
    label
}

/// Scenario sets for several relays at once, sharing one attacker tree per
/// attacker. Output order follows `relays`.
pub fn covered_scenarios_many(
    g: &AsGraph,
    relays: &[Asn],
    tb: TieBreak,
    method: CoverageMethod,
) -> Vec<ScenarioSet> {
    let victims = g.weighted_indices();
    let relay_trees: Vec<(Asn, RoutingOutcome<'_>)> = relays
        .iter()
        .filter(|r| g.contains(**r))
        .map(|&r| (r, routing_tree(g, &[Origin::legitimate(r)], tb)))
        .collect();

    // (relay position, scenario) pairs per attacker, computed in parallel
    // and merged in attacker order.
    let per_attacker: Vec<Vec<(usize, AttackScenario)>> = (0..g.len())
        .into_par_iter()
        .map(|m| {
            let attacker = g.asn(m);
            let tree = routing_tree(g, &[Origin::attacker(attacker)], tb);
            let mut scratch = Scratch::default();
            let mut out = Vec::new();
            for (pos, (relay, rtree)) in relay_trees.iter().enumerate() {
                if *relay == attacker {
                    continue;
                }
                let labels = resolve_contest(rtree, &tree, tb, method, Some(&victims), &mut scratch);
                for &v in &victims {
                    if v == m {
                        continue;
                    }
                    if labels[v] == Some(OriginRole::Legitimate) {
                        out.push((
                            pos,
                            AttackScenario {
                                attacker,
                                victim: g.asn(v),
                            },
                        ));
                    }
                }
            }
            out
        })
        .collect();

    let mut sets: Vec<ScenarioSet> = relay_trees
        .iter()
        .map(|(r, _)| ScenarioSet {
            relay: *r,
            covered: BTreeSet::new(),
        })
        .collect();
    for list in per_attacker {
        for (pos, s) in list {
            sets[pos].covered.insert(s);
        }
    }
    sets
}

/// Scenarios `(m, v)` protected by a relay hosted in `relay`, over every
/// client-hosting victim `v` and every attacker `m` other than `v` and the
/// relay AS. Victims without a route to the relay contribute nothing.
pub fn covered_scenarios(g: &AsGraph, relay: Asn, tb: TieBreak) -> ScenarioSet {
    covered_scenarios_with(g, relay, tb, CoverageMethod::Exact)
}

pub fn covered_scenarios_with(
    g: &AsGraph,
    relay: Asn,
    tb: TieBreak,
    method: CoverageMethod,
) -> ScenarioSet {
    covered_scenarios_many(g, &[relay], tb, method)
        .pop()
        .unwrap_or(ScenarioSet {
            relay,
            covered: BTreeSet::new(),
        })
}

/// Client weight of the union of the given scenario sets.
pub fn coverage_weight<'a>(sets: impl IntoIterator<Item = &'a ScenarioSet>, g: &AsGraph) -> u64 {
    let union: BTreeSet<AttackScenario> = sets
        .into_iter()
        .flat_map(|s| s.covered.iter().copied())
        .collect();
    union.iter().map(|s| g.weight(s.victim)).sum()
}

/// A step function sampled at each distinct value: `points[i] = (x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurve {
    pub points: Vec<(f64, f64)>,
}

/// Per-attacker partition power: share of all clients the attacker can cut
/// off from every relay.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCdf {
    pub per_attacker: Vec<(Asn, f64)>,
    /// `(f, share of ASes able to disconnect at least f)`.
    pub curve: StepCurve,
}

impl PartitionCdf {
    /// Share of ASes able to disconnect at least `f` of the clients.
    pub fn ases_disconnecting_at_least(&self, f: f64) -> f64 {
        if self.per_attacker.is_empty() {
            return 0.0;
        }
        let k = self.per_attacker.iter().filter(|(_, d)| *d >= f).count();
        k as f64 / self.per_attacker.len() as f64
    }
}

/// Per-victim exposure: share of all ASes able to cut the victim off from
/// every relay.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCdf {
    pub per_victim: Vec<(Asn, u64, f64)>,
    /// `(a, share of clients disconnectable by at most a of the ASes)`.
    pub curve: StepCurve,
}

impl ClientCdf {
    pub fn clients_vulnerable_to_at_most(&self, a: f64) -> f64 {
        let total: u64 = self.per_victim.iter().map(|(_, w, _)| w).sum();
        if total == 0 {
            return 0.0;
        }
        let w: u64 = self
            .per_victim
            .iter()
            .filter(|(_, _, x)| *x <= a)
            .map(|(_, w, _)| w)
            .sum();
        w as f64 / total as f64
    }
}

/// Union of the scenarios protected by a relay set, evaluated once and
/// queried for both curves.
#[derive(Debug, Clone)]
pub struct RelayEvaluation<'g> {
    g: &'g AsGraph,
    covered: BTreeSet<AttackScenario>,
}

impl<'g> RelayEvaluation<'g> {
    pub fn new(g: &'g AsGraph, relays: &[Asn], tb: TieBreak, method: CoverageMethod) -> Self {
        Self::from_sets(g, &covered_scenarios_many(g, relays, tb, method))
    }

    pub fn from_sets(g: &'g AsGraph, sets: &[ScenarioSet]) -> Self {
        RelayEvaluation {
            g,
            covered: sets.iter().flat_map(|s| s.covered.iter().copied()).collect(),
        }
    }

    pub fn is_covered(&self, attacker: Asn, victim: Asn) -> bool {
        self.covered.contains(&AttackScenario { attacker, victim })
    }

    /// Victims an attacker can cut off from all relays. Victims with no
    /// route to any relay are counted for every attacker.
    pub fn disconnectable_by(&self, attacker: Asn) -> Vec<Asn> {
        self.g
            .weighted_indices()
            .into_iter()
            .map(|v| self.g.asn(v))
            .filter(|&v| v != attacker && !self.is_covered(attacker, v))
            .collect()
    }

    pub fn partition_cdf(&self) -> PartitionCdf {
        let total = self.g.total_weight().max(1) as f64;
        let per_attacker: Vec<(Asn, f64)> = self
            .g
            .asns()
            .iter()
            .map(|&m| {
                let w: u64 = self
                    .disconnectable_by(m)
                    .iter()
                    .map(|&v| self.g.weight(v))
                    .sum();
                (m, w as f64 / total)
            })
            .collect();
        let n = per_attacker.len().max(1) as f64;
        let mut values: Vec<f64> = per_attacker.iter().map(|(_, d)| *d).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let points = values
            .into_iter()
            .map(|f| {
                let k = per_attacker.iter().filter(|(_, d)| *d >= f).count();
                (f, k as f64 / n)
            })
            .collect();
        PartitionCdf {
            per_attacker,
            curve: StepCurve { points },
        }
    }

    pub fn client_cdf(&self) -> ClientCdf {
        let n = self.g.len().max(1) as f64;
        let mut count: BTreeMap<Asn, usize> = BTreeMap::new();
        for &m in self.g.asns() {
            for v in self.disconnectable_by(m) {
                *count.entry(v).or_default() += 1;
            }
        }
        let per_victim: Vec<(Asn, u64, f64)> = self
            .g
            .weighted_indices()
            .into_iter()
            .map(|v| {
                let asn = self.g.asn(v);
                let c = count.get(&asn).copied().unwrap_or(0);
                (asn, self.g.weight_at(v), c as f64 / n)
            })
            .collect();
        let total: u64 = per_victim.iter().map(|(_, w, _)| w).sum();
        let mut values: Vec<f64> = per_victim.iter().map(|(_, _, a)| *a).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let points = values
            .into_iter()
            .map(|a| {
                let w: u64 = per_victim
                    .iter()
                    .filter(|(_, _, x)| *x <= a)
                    .map(|(_, w, _)| w)
                    .sum();
                (a, w as f64 / total.max(1) as f64)
            })
            .collect();
        ClientCdf {
            per_victim,
            curve: StepCurve { points },
        }
    }
}

pub fn partition_cdf(g: &AsGraph, relays: &[Asn], tb: TieBreak) -> PartitionCdf {
    RelayEvaluation::new(g, relays, tb, CoverageMethod::Exact).partition_cdf()
}

pub fn client_vulnerability_cdf(g: &AsGraph, relays: &[Asn], tb: TieBreak) -> ClientCdf {
    RelayEvaluation::new(g, relays, tb, CoverageMethod::Exact).client_cdf()
}

/// Preference of a destination as seen from a fixed source: route class
/// first, then AS-path length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PreferenceKey {
    /// 0 = customer, 1 = peer, 2 = provider.
    pub tier: u8,
    pub len: u32,
}

/// Every AS reachable from `from` keyed by how much `from` prefers routes
/// towards it. Customer cone first (by depth), then peer-reachable cones,
/// then everything behind providers by shortest valley-free length.
pub fn preference_order(g: &AsGraph, from: Asn) -> Vec<(Asn, PreferenceKey)> {
    let Some(src) = g.index_of(from) else {
        return Vec::new();
    };
    let n = g.len();
    let mut key: Vec<Option<PreferenceKey>> = vec![None; n];

    let down_bfs = |seeds: Vec<(usize, u32)>, tier: u8, key: &mut Vec<Option<PreferenceKey>>| {
        let mut dist = vec![u32::MAX; n];
        let mut q = VecDeque::new();
        for (s, d) in seeds {
            if d < dist[s] {
                dist[s] = d;
                q.push_back(s);
            }
        }
        while let Some(u) = q.pop_front() {
            for &c in g.customers(u) {
                if dist[c] == u32::MAX {
                    dist[c] = dist[u] + 1;
                    q.push_back(c);
                }
            }
        }
        for (i, &d) in dist.iter().enumerate() {
            if d != u32::MAX && key[i].is_none() && i != src {
                key[i] = Some(PreferenceKey { tier, len: d });
            }
        }
    };

    down_bfs(vec![(src, 0)], 0, &mut key);
    down_bfs(g.peers(src).iter().map(|&p| (p, 1)).collect(), 1, &mut key);

    // provider tier: states (as, may still climb)
    let mut dist = vec![[u32::MAX; 2]; n];
    let mut q = VecDeque::new();
    for &p in g.providers(src) {
        dist[p][1] = 1;
        q.push_back((p, 1usize));
    }
    while let Some((u, up)) = q.pop_front() {
        let d = dist[u][up] + 1;
        let mut visit = |v: usize, s: usize, q: &mut VecDeque<(usize, usize)>| {
            if dist[v][s] == u32::MAX {
                dist[v][s] = d;
                q.push_back((v, s));
            }
        };
        if up == 1 {
            for &p in g.providers(u) {
                visit(p, 1, &mut q);
            }
            for &p in g.peers(u) {
                visit(p, 0, &mut q);
            }
        }
        for &c in g.customers(u) {
            visit(c, 0, &mut q);
        }
    }
    for i in 0..n {
        let d = dist[i][0].min(dist[i][1]);
        if d != u32::MAX && key[i].is_none() && i != src {
            key[i] = Some(PreferenceKey { tier: 2, len: d });
        }
    }

    let mut out: Vec<(Asn, PreferenceKey)> = key
        .into_iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (g.asn(i), k)))
        .collect();
    out.sort_by_key(|&(a, k)| (k, a));
    out
}

/// ASes able to isolate a client-hosting AS if every client sat in a /24:
/// those the victim prefers over its most preferred other client-hosting AS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct P24Baseline {
    pub victim: Asn,
    /// Strictly preferred over the first other client-hosting AS.
    pub strict: BTreeSet<Asn>,
    /// `strict` plus ASes tied with it in class and length.
    pub inclusive: BTreeSet<Asn>,
}

impl P24Baseline {
    /// Attacker set under a tie-break convention: ties go to the attacker
    /// when it is favored.
    pub fn attackers(&self, tb: TieBreak) -> &BTreeSet<Asn> {
        match tb.side {
            crate::routing::TieSide::FavorAttacker => &self.inclusive,
            crate::routing::TieSide::FavorLegitimate => &self.strict,
        }
    }
}

pub fn p24_baseline_attackers(g: &AsGraph, victim: Asn, bitcoin_ases: &BTreeSet<Asn>) -> P24Baseline {
    let order = preference_order(g, victim);
    let frontier = order
        .iter()
        .find(|(a, _)| *a != victim && bitcoin_ases.contains(a))
        .map(|(_, k)| *k);
    let mut strict = BTreeSet::new();
    let mut inclusive = BTreeSet::new();
    for (a, k) in order {
        if bitcoin_ases.contains(&a) {
            continue;
        }
        match frontier {
            Some(f) if k > f => break,
            Some(f) if k == f => {
                inclusive.insert(a);
            }
            _ => {
                strict.insert(a);
                inclusive.insert(a);
            }
        }
    }
    P24Baseline {
        victim,
        strict,
        inclusive,
    }
}
