use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use sabre_core::attack_analysis::{p24_baseline_attackers, CoverageMethod, RelayEvaluation};
use sabre_core::netsim::{ddos_scenario, run_scenario, DdosConfig, Metrics, ScenarioConfig};
use sabre_core::placement::{plan_relays, scenario_universe_weight};
use sabre_core::routing::{routing_tree, Origin, TieBreak};
use sabre_core::topology::{load_client_weights, parse_relationships, AsGraph, Asn, UnknownAsnPolicy};
use sabre_core::wire::WIRE_VERSION;

#[derive(Parser)]
#[command(name = "sabre", about = "Relay placement, routing-attack analysis and relay-network simulation")]
struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Topology ingestion.
    #[command(subcommand)]
    Topo(Topo),
    /// Routing trees.
    #[command(subcommand)]
    Route(Route),
    /// Greedy relay placement.
    Plan(PlanArgs),
    /// Evaluation of a relay plan.
    #[command(subcommand)]
    Eval(Eval),
    /// Packet-level simulation.
    #[command(subcommand)]
    Sim(Sim),
}

#[derive(Args)]
struct Topology {
    /// AS relationship file (`a|b|-1` provider-customer, `a|b|0` peers).
    relationships: PathBuf,
    /// Client count per AS, CSV `asn,count`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Add weighted ASes missing from the relationships as isolated nodes
    /// instead of rejecting them.
    #[arg(long)]
    add_unknown: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tie {
    Attacker,
    Legit,
}

impl From<Tie> for TieBreak {
    fn from(t: Tie) -> Self {
        match t {
            Tie::Attacker => TieBreak::FAVOR_ATTACKER,
            Tie::Legit => TieBreak::FAVOR_LEGITIMATE,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    PathComparison,
}

impl From<Method> for CoverageMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Exact => CoverageMethod::Exact,
            Method::PathComparison => CoverageMethod::PathComparison,
        }
    }
}

#[derive(Subcommand)]
enum Topo {
    /// Parse a topology and report its consistency checks.
    Validate(Topology),
}

#[derive(Subcommand)]
enum Route {
    /// Route of every AS towards an origin, optionally competing with an
    /// attacker announcing the same prefix.
    Tree {
        #[command(flatten)]
        topo: Topology,
        #[arg(long)]
        origin: Asn,
        #[arg(long)]
        attacker: Option<Asn>,
        #[arg(long, value_enum, default_value = "attacker")]
        tie: Tie,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    topo: Topology,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "attacker")]
    tie: Tie,
    #[arg(long, value_enum, default_value = "exact")]
    method: Method,
    /// Plan CSV, one row per greedy round.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    topo: Topology,
    /// Plan CSV written by `plan`.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_enum, default_value = "attacker")]
    tie: Tie,
    #[arg(long, value_enum, default_value = "exact")]
    method: Method,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Eval {
    /// Share of ASes able to disconnect at least a given share of clients.
    PartitionCdf(EvalArgs),
    /// Share of clients disconnectable by at most a given share of ASes.
    ClientCdf(EvalArgs),
    /// Attackers able to isolate each client-hosting AS when clients sit
    /// in /24 prefixes and no relays exist.
    P24Baseline {
        #[command(flatten)]
        topo: Topology,
        #[arg(long, value_enum, default_value = "attacker")]
        tie: Tie,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Sim {
    /// Run a TOML scenario.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// One relay under spoofed floods and over-requesting clients.
    Ddos {
        /// TOML overrides of the default flood setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load(t: &Topology) -> Result<AsGraph> {
    let g = parse_relationships(&read(&t.relationships)?)
        .with_context(|| format!("parsing {}", t.relationships.display()))?;
    let Some(w) = &t.weights else { return Ok(g) };
    let policy = if t.add_unknown { UnknownAsnPolicy::AddIsolated } else { UnknownAsnPolicy::Reject };
    load_client_weights(g, &read(w)?, policy).with_context(|| format!("loading {}", w.display()))
}

fn csv_file(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn topo_validate(t: &Topology) -> Result<bool> {
    let g = load(t)?;
    let r = g.validate();
    println!("ases: {}", r.ases);
    println!("provider-customer links: {}", r.provider_customer_links);
    println!("peer links: {}", r.peer_links);
    println!("weighted ases: {} ({} clients)", r.weighted_ases, r.total_weight);
    for (name, ok) in &r.checks {
        println!("{}: {name}", if *ok { "ok" } else { "FAILED" });
    }
    Ok(r.all_ok())
}

fn route_tree(topo: &Topology, origin: Asn, attacker: Option<Asn>, tie: Tie, out: &Path) -> Result<()> {
    let g = load(topo)?;
    for a in std::iter::once(origin).chain(attacker) {
        if !g.contains(a) {
            bail!("AS{a} is not in the topology");
        }
    }
    if attacker == Some(origin) {
        bail!("origin and attacker are both AS{origin}");
    }
    let mut origins = vec![Origin::legitimate(origin)];
    origins.extend(attacker.map(Origin::attacker));
    let tree = routing_tree(&g, &origins, tie.into());
    let mut w = csv_file(out)?;
    w.write_record(["asn", "origin", "class", "length", "next_hop", "path"])?;
    let mut routed = 0;
    let mut diverted = 0;
    for &a in g.asns() {
        let Some(r) = tree.route(a) else {
            w.write_record([a.to_string().as_str(), "", "", "", "", ""])?;
            continue;
        };
        routed += 1;
        if attacker == Some(r.origin.asn) {
            diverted += 1;
        }
        let path: Vec<String> = tree.path(a).unwrap_or_default().iter().map(|x| x.to_string()).collect();
        w.write_record([
            a.to_string(),
            r.origin.asn.to_string(),
            r.class.map_or("origin", |c| c.as_str()).to_string(),
            r.len.to_string(),
            r.next_hop.map_or(String::new(), |n| n.to_string()),
            path.join(" "),
        ])?;
    }
    w.flush()?;
    println!("ases: {}", g.len());
    println!("routed: {routed}");
    if let Some(m) = attacker {
        println!("routing to AS{m}: {diverted}");
    }
    Ok(())
}

fn plan(a: &PlanArgs) -> Result<()> {
    let g = load(&a.topo)?;
    let plan = plan_relays(&g, a.n, a.k, a.tie.into(), a.method.into())?;
    let mut w = csv_file(&a.out)?;
    w.write_record(["round", "asn", "marginal_coverage", "cumulative_coverage"])?;
    for (i, r) in plan.rounds.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.asn.to_string(),
            r.marginal_coverage.to_string(),
            r.cumulative_coverage.to_string(),
        ])?;
    }
    w.flush()?;
    let universe = scenario_universe_weight(&g);
    let relays: Vec<String> = plan.relays.iter().map(|r| r.to_string()).collect();
    println!("relays: {}", relays.join(" "));
    println!("rounds: {}", plan.rounds.len());
    println!(
        "coverage: {} of {universe} ({:.4})",
        plan.achieved_coverage,
        plan.achieved_coverage as f64 / universe.max(1) as f64
    );
    println!("connectivity: {} (required {})", plan.connectivity_certificate, a.k.min(a.n.saturating_sub(1)));
    Ok(())
}

fn plan_relays_from(path: &Path) -> Result<Vec<Asn>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "asn")
        .with_context(|| format!("{} has no asn column", path.display()))?;
    let mut relays = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec.get(col).unwrap_or_default();
        relays.push(v.parse().with_context(|| format!("bad ASN {v:?} in {}", path.display()))?);
    }
    if relays.is_empty() {
        bail!("{} lists no relays", path.display());
    }
    Ok(relays)
}

fn evaluation<'g>(g: &'g AsGraph, a: &EvalArgs) -> Result<RelayEvaluation<'g>> {
    let relays = plan_relays_from(&a.plan)?;
    if let Some(r) = relays.iter().find(|&&r| !g.contains(r)) {
        bail!("relay AS{r} from {} is not in the topology", a.plan.display());
    }
    Ok(RelayEvaluation::new(g, &relays, a.tie.into(), a.method.into()))
}

fn partition_cdf(a: &EvalArgs) -> Result<()> {
    let g = load(&a.topo)?;
    let cdf = evaluation(&g, a)?.partition_cdf();
    let mut w = csv_file(&a.out)?;
    w.write_record(["disconnected_client_share", "as_share"])?;
    for (x, y) in &cdf.curve.points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    let worst = cdf.per_attacker.iter().fold(0.0f64, |m, p| m.max(p.1));
    println!("attackers: {}", cdf.per_attacker.len());
    println!("ases disconnecting any clients: {:.4}", cdf.ases_disconnecting_at_least(f64::MIN_POSITIVE));
    println!("largest disconnected share: {worst:.4}");
    Ok(())
}

fn client_cdf(a: &EvalArgs) -> Result<()> {
    let g = load(&a.topo)?;
    let cdf = evaluation(&g, a)?.client_cdf();
    let mut w = csv_file(&a.out)?;
    w.write_record(["attacker_share", "client_share"])?;
    for (x, y) in &cdf.curve.points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    println!("victims: {}", cdf.per_victim.len());
    println!("clients safe from every attacker: {:.4}", cdf.clients_vulnerable_to_at_most(0.0));
    Ok(())
}

fn p24_baseline(topo: &Topology, tie: Tie, out: &Path) -> Result<()> {
    let g = load(topo)?;
    let hosting: BTreeSet<Asn> = g.weighted_indices().into_iter().map(|i| g.asn(i)).collect();
    if hosting.is_empty() {
        bail!("no AS hosts clients; pass --weights");
    }
    let others = g.len().saturating_sub(1).max(1) as f64;
    let mut w = csv_file(out)?;
    w.write_record(["victim", "clients", "attackers", "attacker_share"])?;
    let mut exposed = 0.0;
    for &v in &hosting {
        let b = p24_baseline_attackers(&g, v, &hosting);
        let n = b.attackers(tie.into()).len();
        exposed += n as f64 / others;
        w.write_record([v.to_string(), g.weight(v).to_string(), n.to_string(), (n as f64 / others).to_string()])?;
    }
    w.flush()?;
    println!("victims: {}", hosting.len());
    println!("mean attacker share: {:.4}", exposed / hosting.len() as f64);
    Ok(())
}

fn write_metrics(m: &Metrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    type Writer = fn(&Metrics, &mut BufWriter<File>) -> csv::Result<()>;
    let files: [(&str, Writer); 5] = [
        ("arrivals.csv", |m, w| m.arrivals_csv(w)),
        ("links.csv", |m, w| m.links_csv(w)),
        ("occupancy.csv", |m, w| m.occupancy_csv(w)),
        ("relays.csv", |m, w| m.relays_csv(w)),
        ("trace.csv", |m, w| m.trace_csv(w)),
    ];
    for (name, write) in files {
        let path = dir.join(name);
        let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write(m, &mut f).with_context(|| format!("writing {}", path.display()))?;
        f.flush()?;
    }
    Ok(())
}

fn sim_run(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = ScenarioConfig::from_toml(&read(scenario)?).with_context(|| format!("loading {}", scenario.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let m = run_scenario(cfg)?;
    write_metrics(&m, out)?;
    print!("{}", m.summary());
    Ok(())
}

fn sim_ddos(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => DdosConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let r = ddos_scenario(&cfg)?;
    write_metrics(&r.metrics, out)?;
    print!("{}", r.metrics.summary());
    println!("benign complete: {}/{} ({:.4})", r.benign_complete, r.benign_total, r.benign_completion());
    println!("abusers banned: {}/{}", r.abusers_banned, cfg.connected_abusers);
    println!("benign banned: {}", r.benign_banned);
    println!("peer admissions: {}", r.peer_admissions);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.cmd {
        Command::Topo(Topo::Validate(t)) => return topo_validate(&t),
        Command::Route(Route::Tree { topo, origin, attacker, tie, out }) => route_tree(&topo, origin, attacker, tie, &out)?,
        Command::Plan(a) => plan(&a)?,
        Command::Eval(Eval::PartitionCdf(a)) => partition_cdf(&a)?,
        Command::Eval(Eval::ClientCdf(a)) => client_cdf(&a)?,
        Command::Eval(Eval::P24Baseline { topo, tie, out }) => p24_baseline(&topo, tie, &out)?,
        Command::Sim(Sim::Run { scenario, seed, out }) => sim_run(&scenario, seed, &out)?,
        Command::Sim(Sim::Ddos { config, seed, out }) => sim_ddos(config.as_deref(), seed, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let version = format!("{} (wire format {WIRE_VERSION})", env!("CARGO_PKG_VERSION"));
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
