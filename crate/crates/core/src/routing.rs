//! Policy-compliant route computation and the exact hijack oracles.
//!
//! Routes follow the usual economic model: customer-learned routes beat
//! peer-learned ones, which beat provider-learned ones; within a class the
//! shorter AS path wins; remaining ties go to the [`TieBreak`]. Export rules
//! are valley-free: an AS exports everything to its customers, but only its
//! own and customer-learned routes to peers and providers.
//!
//! [`routing_tree`] computes all best routes towards one or more origins in
//! three sweeps (customer routes upwards, one peer hop, provider routes
//! downwards in order of length). Several origins are handled jointly, so
//! every AS applies its tie-break exactly once.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::topology::{AsGraph, Asn, NeighborKind};

/// Relationship through which an AS learned its selected route. Ordered from
/// least to most preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RouteClass {
    Provider,
    Peer,
    Customer,
}

impl RouteClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteClass::Provider => "provider",
            RouteClass::Peer => "peer",
            RouteClass::Customer => "customer",
        }
    }

    /// Class of a route learned from a neighbor of the given kind.
    pub fn learned_from(kind: NeighborKind) -> Self {
        match kind {
            NeighborKind::Customer => RouteClass::Customer,
            NeighborKind::Peer => RouteClass::Peer,
            NeighborKind::Provider => RouteClass::Provider,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OriginRole {
    Legitimate,
    Attacker,
}

/// Which origin wins when two routes are equal in class and length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TieSide {
    /// Worst case for the defender: attacker routes win ties.
    #[default]
    FavorAttacker,
    FavorLegitimate,
}

/// Deterministic tie-break: the favored side first, then the lowest
/// next-hop ASN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TieBreak {
    pub side: TieSide,
}

impl TieBreak {
    pub const FAVOR_ATTACKER: TieBreak = TieBreak {
        side: TieSide::FavorAttacker,
    };
    pub const FAVOR_LEGITIMATE: TieBreak = TieBreak {
        side: TieSide::FavorLegitimate,
    };

    /// 0 for the favored role, 1 otherwise.
    pub fn rank(self, role: OriginRole) -> u8 {
        match (self.side, role) {
            (TieSide::FavorAttacker, OriginRole::Attacker)
            | (TieSide::FavorLegitimate, OriginRole::Legitimate) => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Origin {
    pub asn: Asn,
    pub role: OriginRole,
}

impl Origin {
    pub fn legitimate(asn: Asn) -> Self {
        Origin {
            asn,
            role: OriginRole::Legitimate,
        }
    }

    pub fn attacker(asn: Asn) -> Self {
        Origin {
            asn,
            role: OriginRole::Attacker,
        }
    }
}

const NONE: usize = usize::MAX;

/// Selected route of every AS towards a set of origins.
#[derive(Debug, Clone)]
pub struct RoutingOutcome<'g> {
    graph: &'g AsGraph,
    origins: Vec<Origin>,
    // per graph index
    next: Vec<usize>,
    len: Vec<u32>,
    class: Vec<Option<RouteClass>>,
    origin: Vec<usize>,
}

/// Read-only view on one AS's route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteInfo {
    /// `None` for the origin itself.
    pub class: Option<RouteClass>,
    pub len: u32,
    pub next_hop: Option<Asn>,
    pub origin: Origin,
}

impl<'g> RoutingOutcome<'g> {
    pub fn graph(&self) -> &'g AsGraph {
        self.graph
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn is_routed_idx(&self, idx: usize) -> bool {
        self.origin[idx] != NONE
    }

    pub fn route_idx(&self, idx: usize) -> Option<RouteInfo> {
        if !self.is_routed_idx(idx) {
            return None;
        }
        Some(RouteInfo {
            class: self.class[idx],
            len: self.len[idx],
            next_hop: (self.next[idx] != NONE).then(|| self.graph.asn(self.next[idx])),
            origin: self.origins[self.origin[idx]],
        })
    }

    pub fn route(&self, asn: Asn) -> Option<RouteInfo> {
        self.graph.index_of(asn).and_then(|i| self.route_idx(i))
    }

    pub fn next_idx(&self, idx: usize) -> Option<usize> {
        (self.next[idx] != NONE).then_some(self.next[idx])
    }

    pub fn len_idx(&self, idx: usize) -> u32 {
        self.len[idx]
    }

    pub fn class_idx(&self, idx: usize) -> Option<RouteClass> {
        self.class[idx]
    }

    pub fn role_idx(&self, idx: usize) -> Option<OriginRole> {
        self.is_routed_idx(idx).then(|| self.origins[self.origin[idx]].role)
    }

    /// Path as graph indices, from `idx` to its origin.
    pub fn path_idx(&self, idx: usize) -> Option<Vec<usize>> {
        if !self.is_routed_idx(idx) {
            return None;
        }
        let mut path = vec![idx];
        let mut cur = idx;
        while self.next[cur] != NONE {
            cur = self.next[cur];
            path.push(cur);
        }
        Some(path)
    }

    /// AS path from `asn` to its origin, or `None` when unreachable.
    pub fn path(&self, asn: Asn) -> Option<Vec<Asn>> {
        let idx = self.graph.index_of(asn)?;
        self.path_idx(idx)
            .map(|p| p.into_iter().map(|i| self.graph.asn(i)).collect())
    }

    /// Route class held by every AS on `path(asn)` except the origin.
    pub fn hop_classes(&self, asn: Asn) -> Option<Vec<RouteClass>> {
        let idx = self.graph.index_of(asn)?;
        let path = self.path_idx(idx)?;
        Some(
            path[..path.len() - 1]
                .iter()
                .map(|&i| self.class[i].expect("non-origin hop has a class"))
                .collect(),
        )
    }
}

/// Scratch for collecting the best offer per receiving AS within one sweep.
struct Offers {
    best: Vec<usize>,
    touched: Vec<usize>,
}

impl Offers {
    fn new(n: usize) -> Self {
        Offers {
            best: vec![NONE; n],
            touched: Vec::new(),
        }
    }

    /// Keeps `from` as the offer to `to` if it beats the current one.
    fn offer(&mut self, to: usize, from: usize, better: impl Fn(usize, usize) -> bool) {
        let cur = self.best[to];
        if cur == NONE {
            self.best[to] = from;
            self.touched.push(to);
        } else if better(from, cur) {
            self.best[to] = from;
        }
    }

    fn drain(&mut self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .touched
            .drain(..)
            .map(|t| (t, self.best[t]))
            .collect();
        for &(t, _) in &out {
            self.best[t] = NONE;
        }
        out.sort_unstable();
        out
    }
}

/// Computes the routing tree towards `origins`. Duplicate origin ASNs keep
/// their first entry. ASes with no policy-compliant path stay unrouted.
pub fn routing_tree<'g>(g: &'g AsGraph, origins: &[Origin], tb: TieBreak) -> RoutingOutcome<'g> {
    let n = g.len();
    let mut out = RoutingOutcome {
        graph: g,
        origins: Vec::new(),
        next: vec![NONE; n],
        len: vec![0; n],
        class: vec![None; n],
        origin: vec![NONE; n],
    };
    let mut level = Vec::new();
    for o in origins {
        let Some(idx) = g.index_of(o.asn) else { continue };
        if out.origin[idx] != NONE {
            continue;
        }
        out.origin[idx] = out.origins.len();
        out.origins.push(*o);
        level.push(idx);
    }
    level.sort_unstable();

    // Offer `a` beats offer `b` (same class and length) under the tie-break.
    let prefer = |out: &RoutingOutcome, a: usize, b: usize| -> bool {
        let ka = (tb.rank(out.origins[out.origin[a]].role), g.asn(a));
        let kb = (tb.rank(out.origins[out.origin[b]].role), g.asn(b));
        ka < kb
    };

    let mut offers = Offers::new(n);

    // Customer routes: breadth-first up provider links.
    while !level.is_empty() {
        for &u in &level {
            for &p in g.providers(u) {
                if out.origin[p] == NONE {
                    offers.offer(p, u, |a, b| prefer(&out, a, b));
                }
            }
        }
        let mut next_level = Vec::new();
        for (p, u) in offers.drain() {
            out.next[p] = u;
            out.len[p] = out.len[u] + 1;
            out.class[p] = Some(RouteClass::Customer);
            out.origin[p] = out.origin[u];
            next_level.push(p);
        }
        level = next_level;
    }

    // Peer routes: one hop from any AS holding an origin or customer route.
    let exporters: Vec<usize> = (0..n).filter(|&i| out.origin[i] != NONE).collect();
    for &u in &exporters {
        for &q in g.peers(u) {
            if out.origin[q] == NONE {
                offers.offer(q, u, |a, b| {
                    out.len[a] < out.len[b] || (out.len[a] == out.len[b] && prefer(&out, a, b))
                });
            }
        }
    }
    for (q, u) in offers.drain() {
        out.next[q] = u;
        out.len[q] = out.len[u] + 1;
        out.class[q] = Some(RouteClass::Peer);
        out.origin[q] = out.origin[u];
    }

    // Provider routes: downwards, in increasing path length.
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if out.origin[i] != NONE {
            let l = out.len[i] as usize;
            if buckets.len() <= l {
                buckets.resize(l + 1, Vec::new());
            }
            buckets[l].push(i);
        }
    }
    let mut l = 0;
    while l < buckets.len() {
        let bucket = std::mem::take(&mut buckets[l]);
        for &u in &bucket {
            for &c in g.customers(u) {
                if out.origin[c] == NONE {
                    offers.offer(c, u, |a, b| prefer(&out, a, b));
                }
            }
        }
        let assigned = offers.drain();
        if !assigned.is_empty() && buckets.len() <= l + 1 {
            buckets.resize(l + 2, Vec::new());
        }
        for (c, u) in assigned {
            out.next[c] = u;
            out.len[c] = out.len[u] + 1;
            out.class[c] = Some(RouteClass::Provider);
            out.origin[c] = out.origin[u];
            buckets[l + 1].push(c);
        }
        buckets[l] = bucket;
        l += 1;
    }
    out
}

/// Per-AS winner of a same-prefix hijack.
#[derive(Debug, Clone)]
pub struct HijackOutcome {
    asns: Vec<Asn>,
    winners: Vec<Option<OriginRole>>,
    attacker: Asn,
}

impl HijackOutcome {
    pub fn winner(&self, asn: Asn) -> Option<OriginRole> {
        self.asns
            .binary_search(&asn)
            .ok()
            .and_then(|i| self.winners[i])
    }

    pub fn winner_idx(&self, idx: usize) -> Option<OriginRole> {
        self.winners[idx]
    }

    /// ASes other than the attacker whose traffic goes to the attacker.
    pub fn diverted(&self) -> BTreeSet<Asn> {
        self.asns
            .iter()
            .zip(&self.winners)
            .filter(|(&a, w)| a != self.attacker && **w == Some(OriginRole::Attacker))
            .map(|(&a, _)| a)
            .collect()
    }

    /// ASes with no route to either origin.
    pub fn unreachable(&self) -> BTreeSet<Asn> {
        self.asns
            .iter()
            .zip(&self.winners)
            .filter(|(_, w)| w.is_none())
            .map(|(&a, _)| a)
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("attacker and legitimate origin are the same AS{0}")]
    SameOrigin(Asn),
    #[error("prefix length /{0} outside 8..=32")]
    PrefixLength(u8),
}

/// Attacker originates the victim's exact prefix; both announcements compete
/// under normal route preference. The legitimate origin always keeps its own
/// route. An interception attack diverts the same set of ASes.
pub fn simulate_same_prefix_hijack(
    g: &AsGraph,
    legit_origin: Asn,
    attacker: Asn,
    tb: TieBreak,
) -> Result<HijackOutcome, RoutingError> {
    if legit_origin == attacker {
        return Err(RoutingError::SameOrigin(attacker));
    }
    let tree = routing_tree(
        g,
        &[Origin::legitimate(legit_origin), Origin::attacker(attacker)],
        tb,
    );
    Ok(HijackOutcome {
        asns: g.asns().to_vec(),
        winners: (0..g.len()).map(|i| tree.role_idx(i)).collect(),
        attacker,
    })
}

/// Attacker originates a more-specific prefix. Longest-prefix match sends
/// every AS with any route to the attacker its way, unless announcements
/// longer than /24 are filtered.
pub fn simulate_more_specific_hijack(
    g: &AsGraph,
    legit_origin: Asn,
    attacker: Asn,
    prefix_len: u8,
    filter_over_24: bool,
) -> Result<BTreeSet<Asn>, RoutingError> {
    if legit_origin == attacker {
        return Err(RoutingError::SameOrigin(attacker));
    }
    if !(8..=32).contains(&prefix_len) {
        return Err(RoutingError::PrefixLength(prefix_len));
    }
    if filter_over_24 && prefix_len > 24 {
        return Ok(BTreeSet::new());
    }
    let tree = routing_tree(g, &[Origin::attacker(attacker)], TieBreak::default());
    Ok((0..g.len())
        .filter(|&i| tree.is_routed_idx(i))
        .map(|i| g.asn(i))
        .filter(|&a| a != attacker && a != legit_origin)
        .collect())
}

/// True when `path` (holder first, origin last) is valley-free: zero or more
/// customer-to-provider steps, at most one peer step, then only
/// provider-to-customer steps.
pub fn is_valley_free(g: &AsGraph, path: &[Asn]) -> bool {
    let mut descending = false;
    for w in path.windows(2) {
        let (Some(a), Some(b)) = (g.index_of(w[0]), g.index_of(w[1])) else {
            return false;
        };
        match g.neighbor_kind(a, b) {
            None => return false,
            // a learned from its provider b: traffic goes up
            Some(NeighborKind::Provider) => {
                if descending {
                    return false;
                }
            }
            Some(NeighborKind::Peer) => {
                if descending {
                    return false;
                }
                descending = true;
            }
            Some(NeighborKind::Customer) => descending = true,
        }
    }
    true
}
