//! AS-level topology with business relationships and per-AS client weights.
//!
//! Relationship files follow the CAIDA serial-2 convention: one link per
//! line, `<asn>|<asn>|<rel>[|<source>]`, where `-1` means the first AS is a
//! provider of the second and `0` means the two ASes peer. Lines starting
//! with `#` are comments. Any other relationship code is rejected; sibling
//! links must be filtered out before ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

/// An autonomous system number.
pub type Asn = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relationship {
    /// `a` is a provider of `b`.
    ProviderCustomer,
    PeerPeer,
}

/// A single economic link. For provider-customer links `a` is the provider;
/// peer links are stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub a: Asn,
    pub b: Asn,
    pub rel: Relationship,
}

impl Link {
    pub fn provider_customer(provider: Asn, customer: Asn) -> Self {
        Link {
            a: provider,
            b: customer,
            rel: Relationship::ProviderCustomer,
        }
    }

    pub fn peer(x: Asn, y: Asn) -> Self {
        Link {
            a: x.min(y),
            b: x.max(y),
            rel: Relationship::PeerPeer,
        }
    }

    fn unordered(&self) -> (Asn, Asn) {
        (self.a.min(self.b), self.a.max(self.b))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("self-loop on AS{0}")]
    SelfLoop(Asn),
    #[error("conflicting relationships between AS{0} and AS{1}")]
    ConflictingEdge(Asn, Asn),
    #[error("weights reference ASes missing from the topology: {0:?}")]
    UnknownAsns(Vec<Asn>),
    #[error("duplicate weight entry for AS{0}")]
    DuplicateWeight(Asn),
}

/// How to treat weight entries whose AS is not part of the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownAsnPolicy {
    #[default]
    Reject,
    /// Add the AS as an isolated node.
    AddIsolated,
}

/// Immutable AS-level topology. Node indices are dense and follow ascending
/// ASN order, so iterating indices is iterating ASNs in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsGraph {
    asns: Vec<Asn>,
    index: HashMap<Asn, usize>,
    providers: Vec<Vec<usize>>,
    customers: Vec<Vec<usize>>,
    peers: Vec<Vec<usize>>,
    weights: Vec<u64>,
    links: Vec<Link>,
}

impl AsGraph {
    /// Builds a graph from links plus optional isolated ASes. Identical
    /// duplicate links are merged; two different relationships on the same
    /// AS pair are an error.
    pub fn from_links(
        links: impl IntoIterator<Item = Link>,
        isolated: impl IntoIterator<Item = Asn>,
    ) -> Result<Self, TopologyError> {
        let mut by_pair: BTreeMap<(Asn, Asn), Link> = BTreeMap::new();
        let mut nodes: BTreeSet<Asn> = isolated.into_iter().collect();
        for link in links {
            if link.a == link.b {
                return Err(TopologyError::SelfLoop(link.a));
            }
            let link = match link.rel {
                Relationship::PeerPeer => Link::peer(link.a, link.b),
                Relationship::ProviderCustomer => link,
            };
            match by_pair.get(&link.unordered()) {
                Some(existing) if *existing != link => {
                    let (x, y) = link.unordered();
                    return Err(TopologyError::ConflictingEdge(x, y));
                }
                Some(_) => {}
                None => {
                    by_pair.insert(link.unordered(), link);
                }
            }
            nodes.insert(link.a);
            nodes.insert(link.b);
        }

        let asns: Vec<Asn> = nodes.into_iter().collect();
        let index: HashMap<Asn, usize> = asns.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let n = asns.len();
        let mut providers = vec![Vec::new(); n];
        let mut customers = vec![Vec::new(); n];
        let mut peers = vec![Vec::new(); n];
        for link in by_pair.values() {
            let (a, b) = (index[&link.a], index[&link.b]);
            match link.rel {
                Relationship::ProviderCustomer => {
                    customers[a].push(b);
                    providers[b].push(a);
                }
                Relationship::PeerPeer => {
                    peers[a].push(b);
                    peers[b].push(a);
                }
            }
        }
        for list in providers
            .iter_mut()
            .chain(customers.iter_mut())
            .chain(peers.iter_mut())
        {
            list.sort_unstable();
        }
        let mut links: Vec<Link> = by_pair.into_values().collect();
        links.sort();
        Ok(AsGraph {
            asns,
            index,
            providers,
            customers,
            peers,
            weights: vec![0; n],
            links,
        })
    }

    pub fn len(&self) -> usize {
        self.asns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.asns.is_empty()
    }

    pub fn asns(&self) -> &[Asn] {
        &self.asns
    }

    pub fn asn(&self, idx: usize) -> Asn {
        self.asns[idx]
    }

    pub fn index_of(&self, asn: Asn) -> Option<usize> {
        self.index.get(&asn).copied()
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.index.contains_key(&asn)
    }

    pub fn providers(&self, idx: usize) -> &[usize] {
        &self.providers[idx]
    }

    pub fn customers(&self, idx: usize) -> &[usize] {
        &self.customers[idx]
    }

    pub fn peers(&self, idx: usize) -> &[usize] {
        &self.peers[idx]
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Relationship of `other` as seen from `idx`, if they are adjacent.
    pub fn neighbor_kind(&self, idx: usize, other: usize) -> Option<NeighborKind> {
        if self.customers[idx].binary_search(&other).is_ok() {
            Some(NeighborKind::Customer)
        } else if self.peers[idx].binary_search(&other).is_ok() {
            Some(NeighborKind::Peer)
        } else if self.providers[idx].binary_search(&other).is_ok() {
            Some(NeighborKind::Provider)
        } else {
            None
        }
    }

    pub fn weight(&self, asn: Asn) -> u64 {
        self.index_of(asn).map_or(0, |i| self.weights[i])
    }

    pub fn weight_at(&self, idx: usize) -> u64 {
        self.weights[idx]
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn total_weight(&self) -> u64 {
        self.weights.iter().sum()
    }

    /// Indices of ASes hosting at least one client.
    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0).collect()
    }

    /// Replaces all weights. Entries for unknown ASes are handled per `policy`.
    pub fn with_weights(
        mut self,
        weights: &BTreeMap<Asn, u64>,
        policy: UnknownAsnPolicy,
    ) -> Result<Self, TopologyError> {
        let unknown: Vec<Asn> = weights
            .keys()
            .copied()
            .filter(|a| !self.contains(*a))
            .collect();
        if !unknown.is_empty() {
            match policy {
                UnknownAsnPolicy::Reject => return Err(TopologyError::UnknownAsns(unknown)),
                UnknownAsnPolicy::AddIsolated => {
                    let links = std::mem::take(&mut self.links);
                    let isolated: Vec<Asn> =
                        self.asns.iter().copied().chain(unknown.iter().copied()).collect();
                    self = AsGraph::from_links(links, isolated)?;
                }
            }
        }
        self.weights = vec![0; self.len()];
        for (&asn, &w) in weights {
            let i = self.index[&asn];
            self.weights[i] = w;
        }
        Ok(self)
    }

    /// Serializes back to the relationship file format.
    pub fn to_relationships(&self) -> String {
        let mut out = String::from("# <provider-as>|<customer-as>|-1\n# <peer-as>|<peer-as>|0\n");
        for link in &self.links {
            let code = match link.rel {
                Relationship::ProviderCustomer => -1,
                Relationship::PeerPeer => 0,
            };
            let _ = writeln!(out, "{}|{}|{}", link.a, link.b, code);
        }
        out
    }

    /// Re-scans the structure and reports each invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut seen = BTreeSet::new();
        let mut unique_pairs = true;
        let mut no_self_loops = true;
        for l in &self.links {
            no_self_loops &= l.a != l.b;
            unique_pairs &= seen.insert(l.unordered());
        }
        let symmetric = (0..self.len()).all(|i| {
            self.customers[i]
                .iter()
                .all(|&c| self.providers[c].binary_search(&i).is_ok())
                && self.peers[i]
                    .iter()
                    .all(|&p| self.peers[p].binary_search(&i).is_ok())
        });
        let weights_known = self.weights.len() == self.asns.len();
        ValidationReport {
            ases: self.len(),
            provider_customer_links: self
                .links
                .iter()
                .filter(|l| l.rel == Relationship::ProviderCustomer)
                .count(),
            peer_links: self
                .links
                .iter()
                .filter(|l| l.rel == Relationship::PeerPeer)
                .count(),
            weighted_ases: self.weights.iter().filter(|&&w| w > 0).count(),
            total_weight: self.total_weight(),
            checks: vec![
                ("no_self_loops", no_self_loops),
                ("one_relationship_per_pair", unique_pairs),
                ("adjacency_symmetric", symmetric),
                ("weights_reference_known_ases", weights_known),
            ],
        }
    }
}

/// Which side of a link a neighbor sits on, from the viewpoint of one AS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborKind {
    Customer,
    Peer,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub ases: usize,
    pub provider_customer_links: usize,
    pub peer_links: usize,
    pub weighted_ases: usize,
    pub total_weight: u64,
    pub checks: Vec<(&'static str, bool)>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Parses a relationship file into a graph with all weights zero.
pub fn parse_relationships(text: &str) -> Result<AsGraph, TopologyError> {
    let mut links = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(TopologyError::Parse {
                line: line_no,
                msg: format!("expected <asn>|<asn>|<rel>, got {line:?}"),
            });
        }
        let parse_asn = |s: &str| {
            s.trim().parse::<Asn>().map_err(|e| TopologyError::Parse {
                line: line_no,
                msg: format!("bad ASN {s:?}: {e}"),
            })
        };
        let a = parse_asn(fields[0])?;
        let b = parse_asn(fields[1])?;
        let link = match fields[2].trim() {
            "-1" => Link::provider_customer(a, b),
            "0" => Link::peer(a, b),
            other => {
                return Err(TopologyError::Parse {
                    line: line_no,
                    msg: format!("unsupported relationship code {other:?}"),
                })
            }
        };
        if a == b {
            return Err(TopologyError::SelfLoop(a));
        }
        links.push(link);
    }
    AsGraph::from_links(links, std::iter::empty())
}

/// Parses an `asn,count` CSV. A leading `asn,count` header row is allowed.
pub fn parse_client_weights(text: &str) -> Result<BTreeMap<Asn, u64>, TopologyError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if n == 0 && line.eq_ignore_ascii_case("asn,count") {
            continue;
        }
        let (asn, count) = line.split_once(',').ok_or_else(|| TopologyError::Parse {
            line: line_no,
            msg: format!("expected asn,count, got {line:?}"),
        })?;
        let asn: Asn = asn.trim().parse().map_err(|e| TopologyError::Parse {
            line: line_no,
            msg: format!("bad ASN {asn:?}: {e}"),
        })?;
        let count: u64 = count.trim().parse().map_err(|e| TopologyError::Parse {
            line: line_no,
            msg: format!("bad client count {count:?}: {e}"),
        })?;
        if out.insert(asn, count).is_some() {
            return Err(TopologyError::DuplicateWeight(asn));
        }
    }
    Ok(out)
}

/// Parses a weights CSV and merges it into `graph`.
pub fn load_client_weights(
    graph: AsGraph,
    text: &str,
    policy: UnknownAsnPolicy,
) -> Result<AsGraph, TopologyError> {
    let weights = parse_client_weights(text)?;
    graph.with_weights(&weights, policy)
}

/// Customer-free ASes and the peer links among them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeerGraph {
    nodes: BTreeSet<Asn>,
    adjacency: BTreeMap<Asn, BTreeSet<Asn>>,
}

impl PeerGraph {
    pub fn new(
        nodes: impl IntoIterator<Item = Asn>,
        edges: impl IntoIterator<Item = (Asn, Asn)>,
    ) -> Self {
        let nodes: BTreeSet<Asn> = nodes.into_iter().collect();
        let mut adjacency: BTreeMap<Asn, BTreeSet<Asn>> =
            nodes.iter().map(|&n| (n, BTreeSet::new())).collect();
        for (a, b) in edges {
            if a == b || !nodes.contains(&a) || !nodes.contains(&b) {
                continue;
            }
            adjacency.get_mut(&a).unwrap().insert(b);
            adjacency.get_mut(&b).unwrap().insert(a);
        }
        PeerGraph { nodes, adjacency }
    }

    pub fn nodes(&self) -> &BTreeSet<Asn> {
        &self.nodes
    }

    pub fn contains(&self, asn: Asn) -> bool {
        self.nodes.contains(&asn)
    }

    pub fn neighbors(&self, asn: Asn) -> impl Iterator<Item = Asn> + '_ {
        self.adjacency.get(&asn).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, a: Asn, b: Asn) -> bool {
        self.adjacency.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn degree(&self, asn: Asn) -> usize {
        self.adjacency.get(&asn).map_or(0, BTreeSet::len)
    }

    /// Unordered edges with `a < b`.
    pub fn edges(&self) -> Vec<(Asn, Asn)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    /// Subgraph induced by `keep`.
    pub fn induced(&self, keep: &BTreeSet<Asn>) -> PeerGraph {
        let nodes: BTreeSet<Asn> = self.nodes.intersection(keep).copied().collect();
        let edges = self
            .edges()
            .into_iter()
            .filter(|(a, b)| nodes.contains(a) && nodes.contains(b));
        PeerGraph::new(nodes.clone(), edges)
    }
}

/// ASes with zero customers, joined by the peer links between them.
pub fn candidate_relays(g: &AsGraph) -> PeerGraph {
    let nodes: Vec<Asn> = (0..g.len())
        .filter(|&i| g.customers(i).is_empty())
        .map(|i| g.asn(i))
        .collect();
    let set: BTreeSet<Asn> = nodes.iter().copied().collect();
    let edges = g
        .links()
        .iter()
        .filter(|l| l.rel == Relationship::PeerPeer && set.contains(&l.a) && set.contains(&l.b))
        .map(|l| (l.a, l.b));
    PeerGraph::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_provider_and_peer_links() {
        let g = parse_relationships("1|2|-1\n2|3|0").unwrap();
        assert_eq!(g.asns(), &[1, 2, 3]);
        assert_eq!(
            g.links(),
            &[Link::provider_customer(1, 2), Link::peer(2, 3)]
        );
        let (i1, i2, i3) = (0, 1, 2);
        assert_eq!(g.customers(i1), &[i2]);
        assert_eq!(g.providers(i2), &[i1]);
        assert_eq!(g.peers(i3), &[i2]);
        assert_eq!(g.total_weight(), 0);
    }

    #[test]
    fn conflicting_edges_rejected() {
        assert_eq!(
            parse_relationships("1|2|-1\n1|2|0"),
            Err(TopologyError::ConflictingEdge(1, 2))
        );
        assert_eq!(
            parse_relationships("1|2|-1\n2|1|-1"),
            Err(TopologyError::ConflictingEdge(1, 2))
        );
        // exact duplicates are merged
        assert_eq!(parse_relationships("1|2|-1\n1|2|-1").unwrap().links().len(), 1);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        match parse_relationships("# c\n1|2|-1\n3|x|0") {
            Err(TopologyError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_relationships("1|2|1") {
            Err(TopologyError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_relationships("4|4|0"), Err(TopologyError::SelfLoop(4)));
    }

    #[test]
    fn caida_source_column_accepted() {
        let g = parse_relationships("1|2|-1|bgp\n2|3|0|mlp").unwrap();
        assert_eq!(g.links().len(), 2);
    }

    #[test]
    fn weights_merge_and_sum() {
        let g = parse_relationships("7|9|0").unwrap();
        let g = load_client_weights(g, "7,3\n9,1", UnknownAsnPolicy::Reject).unwrap();
        assert_eq!(g.weight(7), 3);
        assert_eq!(g.weight(9), 1);
        assert_eq!(g.total_weight(), 4);
    }

    #[test]
    fn weight_errors() {
        let g = parse_relationships("7|9|0").unwrap();
        assert!(matches!(
            load_client_weights(g.clone(), "7,-1", UnknownAsnPolicy::Reject),
            Err(TopologyError::Parse { line: 1, .. })
        ));
        assert_eq!(
            load_client_weights(g.clone(), "7,1\n11,2\n12,1", UnknownAsnPolicy::Reject),
            Err(TopologyError::UnknownAsns(vec![11, 12]))
        );
        let g = load_client_weights(g, "asn,count\n11,2", UnknownAsnPolicy::AddIsolated).unwrap();
        assert_eq!(g.asns(), &[7, 9, 11]);
        assert_eq!(g.weight(11), 2);
    }

    #[test]
    fn ten_as_weights_total_hundred() {
        let rel: String = (1..10).map(|i| format!("{}|{}|0\n", i, i + 1)).collect();
        let csv: String = (1..=10).map(|i| format!("{},{}\n", i, i * 2 - 1)).collect();
        let g = load_client_weights(
            parse_relationships(&rel).unwrap(),
            &csv,
            UnknownAsnPolicy::Reject,
        )
        .unwrap();
        assert_eq!(g.total_weight(), 100);
    }

    #[test]
    fn candidates_have_no_customers() {
        let g = parse_relationships("1|2|-1\n2|3|0\n3|4|0\n1|4|0").unwrap();
        let pg = candidate_relays(&g);
        assert_eq!(pg.nodes().iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(pg.edges(), vec![(2, 3), (3, 4)]);
    }

    #[test]
    fn candidates_degenerate_cases() {
        let g = parse_relationships("1|2|-1\n2|1|-1").err();
        assert!(g.is_some());
        // cycle of providers: every AS has a customer
        let g = parse_relationships("1|2|-1\n2|3|-1\n3|1|-1").unwrap();
        assert!(candidate_relays(&g).nodes().is_empty());
        let g = AsGraph::from_links(vec![], vec![42]).unwrap();
        let pg = candidate_relays(&g);
        assert_eq!(pg.nodes().len(), 1);
        assert!(pg.edges().is_empty());
    }

    #[test]
    fn validate_reports_counts() {
        let g = parse_relationships("1|2|-1\n2|3|0").unwrap();
        let r = g.validate();
        assert!(r.all_ok());
        assert_eq!((r.ases, r.provider_customer_links, r.peer_links), (3, 1, 1));
    }
}
