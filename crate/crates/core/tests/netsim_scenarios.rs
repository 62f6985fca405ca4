use sabre_core::netsim::{
    ddos_scenario, run_scenario, Adversary, DdosConfig, Direction, Metrics, ScenarioConfig, Simulation,
};

fn fixture(name: &str) -> ScenarioConfig {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    ScenarioConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn conserved(m: &Metrics) {
    for l in &m.links {
        let c = l.counters;
        assert_eq!(
            c.sent,
            c.delivered + c.lost + c.blocked + c.unroutable + c.in_flight,
            "{} -> {}",
            l.from,
            l.to
        );
    }
}

#[test]
fn crossing_drop_partitions_without_relays() {
    let m = run_scenario(fixture("split_no_relays.toml")).unwrap();
    assert!(m.partitioned());
    let learned: Vec<&str> = m.arrivals.iter().map(|a| a.node.as_str()).collect();
    for s in ["b1", "d1", "d2", "d3"] {
        assert!(!learned.contains(&s), "{s} learned the block");
    }
    for n in ["h1", "g1", "g2", "g3"] {
        assert!(learned.contains(&n));
    }
    conserved(&m);
}

#[test]
fn relays_keep_the_halves_connected() {
    for seed in 0..5 {
        let mut cfg = fixture("split_with_relays.toml");
        cfg.seed = seed;
        let m = run_scenario(cfg).unwrap();
        assert!(m.connected, "seed {seed}");
        assert_eq!(m.checksum_mismatches, 0);
        conserved(&m);
    }
}

#[test]
fn crossing_drop_leaves_same_side_traffic_alone() {
    let m = run_scenario(fixture("split_no_relays.toml")).unwrap();
    for l in &m.links {
        let side = |n: &str| n.starts_with('b') || n.starts_with('d');
        if side(&l.from) == side(&l.to) {
            assert_eq!(l.counters.blocked, 0, "{} -> {}", l.from, l.to);
        }
    }
}

#[test]
fn handoff_follows_the_expected_sequence() {
    let m = run_scenario(fixture("handoff.toml")).unwrap();
    assert!(m.connected);
    let first = |node: &str, prefix: &str| {
        m.trace
            .iter()
            .position(|t| t.node == node && t.event.starts_with(prefix))
            .unwrap_or_else(|| panic!("no {prefix} at {node}"))
    };
    let steps = [
        first("A", "mine"),
        first("A", "gossip to B"),
        first("B", "gossip from A"),
        first("B", "send ADV"),
        first("R", "send CTR"),
        first("B", "upload"),
        first("R", "controller receives upload"),
        first("R", "valid"),
        first("R", "UPD"),
        first("R", "send INV to C"),
        first("C", "send GET_SEG"),
        first("R", "send BLK"),
        first("C", "learned"),
    ];
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
}

#[test]
fn same_seed_same_trace() {
    let mut cfg = fixture("split_with_relays.toml");
    cfg.trace = true;
    cfg.link.loss = 0.1;
    let a = run_scenario(cfg.clone()).unwrap();
    let b = run_scenario(cfg.clone()).unwrap();
    assert_eq!(a, b);
    cfg.seed += 1;
    let c = run_scenario(cfg).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn megabyte_block_under_loss() {
    let cfg = fixture("lossy_megabyte.toml");
    let sim = Simulation::new(cfg).unwrap();
    let block = sim.blocks()[0].to_bytes();
    let (m, sim) = sim.run_keep();
    assert!(m.connected);
    assert!(m.end_ms <= 30_000);
    let fetcher = sim.client(sim.node_id("fetcher").unwrap()).unwrap();
    assert_eq!(fetcher.block_bytes(&sim.block_hashes()[0]).unwrap(), &block[..]);
    assert!(m.checksums_verified >= 1024);
    assert_eq!(m.checksum_mismatches, 0);
    assert!(m.links.iter().any(|l| l.counters.lost > 0));
    conserved(&m);
}

fn relay_ip_filter(rotation: u32) -> Metrics {
    let mut cfg = fixture("handoff.toml");
    cfg.trace = false;
    cfg.stop_ms = 20_000;
    cfg.source_rotation = rotation;
    cfg.adversary = Adversary::DropByRelayIp {
        relays: vec!["R".into()],
        direction: Direction::Source,
        victims: vec!["C".into()],
    };
    run_scenario(cfg).unwrap()
}

#[test]
fn source_rotation_defeats_source_address_filtering() {
    let blocked = relay_ip_filter(0);
    assert!(blocked.partitioned());
    assert!(!blocked.arrivals.iter().any(|a| a.node == "C"));
    let rotated = relay_ip_filter(8);
    assert!(rotated.connected);
    assert!(rotated.links.iter().all(|l| l.counters.blocked == 0));
}

#[test]
fn spoofed_syn_flood_leaves_the_peerlist_alone() {
    let cfg = DdosConfig {
        benign: 5,
        connected_abusers: 0,
        spoofed: 10_000,
        loss: 0.0,
        ..DdosConfig::default()
    };
    let mut sc = cfg.scenario();
    sc.flood.as_mut().unwrap().per_source = vec![sabre_core::netsim::FloodKind::Syn];
    let (m, sim) = Simulation::new(sc).unwrap().run_keep();
    let relay = sim.switch(0).unwrap();
    assert_eq!(relay.peer_admissions(), 5);
    assert_eq!(sim.controller(0).unwrap().peers().len(), 5);
    assert_eq!(relay.stats().synacks, 10_000 + 5);
    assert!(m.connected);
}

#[test]
fn unhandshaken_sources_get_no_segments() {
    let r = ddos_scenario(&DdosConfig {
        benign: 3,
        connected_abusers: 0,
        spoofed: 5_000,
        loss: 0.0,
        ..DdosConfig::default()
    })
    .unwrap();
    let outside = r.metrics.links.iter().find(|l| l.from == "relay" && l.to == "outside").unwrap();
    // only SYNACKs leave toward spoofed addresses
    assert_eq!(outside.counters.sent, 5_000);
    assert_eq!(r.benign_complete, 3);
}

#[test]
fn repeated_downloads_get_banned() {
    let r = ddos_scenario(&DdosConfig {
        benign: 5,
        connected_abusers: 1,
        repeat: 10,
        spoofed: 0,
        loss: 0.0,
        ..DdosConfig::default()
    })
    .unwrap();
    assert_eq!(r.abusers_banned, 1);
    assert_eq!(r.benign_banned, 0);
    let row = &r.metrics.relays[0];
    assert!(row.dropped_blacklisted > 0);
    assert!(r.metrics.end_ms < 10 * 60_000);
    assert_eq!(r.benign_complete, 5);
}

#[test]
fn csv_outputs_have_headers() {
    let m = run_scenario(fixture("handoff.toml")).unwrap();
    let mut buf = Vec::new();
    m.arrivals_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("node,block,at_ms\n"));
    let mut buf = Vec::new();
    m.links_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf)
        .unwrap()
        .starts_with("from,to,sent,delivered,lost,blocked,unroutable,in_flight\n"));
    let mut buf = Vec::new();
    Metrics::default().occupancy_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "at_ms,relay,whitelist,blacklist,peers\n");
}
