//! Seeded random AS topologies with a provider hierarchy and lateral peering.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::topology::{AsGraph, Asn, Link, UnknownAsnPolicy};

#[derive(Debug, Clone)]
pub struct TopologyParams {
    pub ases: usize,
    /// Upper bound on providers drawn per non-root AS.
    pub max_providers: usize,
    /// Share of ASes at the top of the hierarchy (no providers).
    pub root_share: f64,
    /// Probability that two ASes without a relationship peer.
    pub peer_prob: f64,
    /// Probability that an AS hosts clients.
    pub client_prob: f64,
    pub max_clients: u64,
}

impl Default for TopologyParams {
    fn default() -> Self {
        TopologyParams {
            ases: 40,
            max_providers: 2,
            root_share: 0.1,
            peer_prob: 0.06,
            client_prob: 0.5,
            max_clients: 20,
        }
    }
}

/// Builds a topology whose provider links form a DAG. ASNs are drawn at
/// random so that numbering is unrelated to position in the hierarchy.
pub fn random_topology(seed: u64, p: &TopologyParams) -> AsGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.ases.max(1);
    let mut pool: Vec<Asn> = (1..=(n as Asn * 20)).collect();
    pool.shuffle(&mut rng);
    let asns: Vec<Asn> = pool[..n].to_vec();

    let roots = ((n as f64 * p.root_share).ceil() as usize).clamp(1, n);
    let mut links = Vec::new();
    let mut related: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in roots..n {
        let k = rng.gen_range(1..=p.max_providers.max(1)).min(i);
        let mut choices: Vec<usize> = (0..i).collect();
        choices.shuffle(&mut rng);
        for &j in &choices[..k] {
            links.push(Link::provider_customer(asns[j], asns[i]));
            related.insert((j, i));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let tier_roots = i < roots && j < roots;
            if !related.contains(&(i, j)) && (tier_roots || rng.gen_bool(p.peer_prob)) {
                links.push(Link::peer(asns[i], asns[j]));
            }
        }
    }
    let g = AsGraph::from_links(links, asns.iter().copied()).expect("generated links are consistent");

    let mut weights: BTreeMap<Asn, u64> = BTreeMap::new();
    for &a in &asns {
        if rng.gen_bool(p.client_prob) {
            weights.insert(a, rng.gen_range(1..=p.max_clients.max(1)));
        }
    }
    g.with_weights(&weights, UnknownAsnPolicy::Reject)
        .expect("weights only name generated ASes")
}
