use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use deltagossip::experiment::{run_experiment, write_outputs, ExperimentConfig};
use deltagossip::netmodel::{
    scenario_table, table_csv, ThroughputScenario, REFERENCE_BASELINE, REFERENCE_CONNECTIVITY,
    REFERENCE_NODES,
};
use deltagossip::topology::{generate_semi_random, save_topology, stats, TopologyConstraints};
use deltagossip::StrategyKind;

#[derive(Parser)]
#[command(name = "deltagossip", version)]
#[command(about = "Deterministic gossip learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a connected topology with bounded degree and save it
    GenTopology {
        #[arg(long, short)]
        nodes: usize,

        /// Average degree to aim for (accepted within 0.5)
        #[arg(long, default_value_t = 3.3)]
        target_avg_degree: f64,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Directory for `<stem>.edges` and `<stem>.json`
        #[arg(long)]
        out: PathBuf,

        /// File stem; defaults to `<nodes>nodes`
        #[arg(long)]
        stem: Option<String>,
    },

    /// Run an experiment config and write CSVs plus summary.json
    Run {
        #[arg(long)]
        config: PathBuf,

        /// Output directory; overrides `output_dir` in the config
        #[arg(long)]
        out: Option<PathBuf>,

        /// Restrict to these strategies (repeatable)
        #[arg(long = "strategy", value_parser = parse_strategy)]
        strategies: Vec<StrategyKind>,

        #[arg(long)]
        seed: Option<u64>,

        /// Training threads. Results are identical for any value.
        #[arg(long, env = "DELTAGOSSIP_THREADS")]
        threads: Option<usize>,

        /// Add 5th/95th percentile columns to the CSVs
        #[arg(long)]
        percentiles: bool,
    },

    /// Print gossip traffic scenarios next to the FedAvg baseline
    Netmodel {
        /// Per-node updates per second on the reference topology
        #[arg(long, default_value_t = REFERENCE_BASELINE)]
        baseline: f64,

        #[arg(long, default_value_t = REFERENCE_CONNECTIVITY)]
        reference_conn: f64,

        #[arg(long, default_value_t = REFERENCE_NODES)]
        reference_nodes: usize,

        /// Topology sizes
        #[arg(long = "nodes", value_delimiter = ',', default_values_t = [10, 25, 50])]
        nodes: Vec<usize>,

        /// Average connectivity per size; a single value applies to all
        #[arg(long = "conn", value_delimiter = ',', default_values_t = [3.3, 3.2, 4.2])]
        conns: Vec<f64>,

        #[arg(long, default_value_t = 1.0)]
        density_exponent: f64,

        /// Seconds between FedAvg client updates
        #[arg(long, default_value_t = 5.0)]
        update_interval: f64,

        /// FedAvg client updates per global synchronisation
        #[arg(long, default_value_t = 20.0)]
        sync_every: f64,

        /// Also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
        format!(
            "unknown strategy {s:?}; expected one of {}",
            names.join(", ")
        )
    })
}

fn gen_topology(
    nodes: usize,
    target: f64,
    seed: u64,
    out: &Path,
    stem: Option<String>,
) -> Result<()> {
    let constraints = TopologyConstraints::with_target(target);
    let graph = generate_semi_random(nodes, &constraints, seed)
        .with_context(|| format!("generating a {nodes}-node topology"))?;
    let stem = stem.unwrap_or_else(|| format!("{nodes}nodes"));
    let path = save_topology(&graph, seed, &constraints, out, &stem)?;
    let s = stats(&graph)?;
    println!("wrote {}", path.display());
    println!(
        "nodes={} edges={} avg_degree={:.3} min_degree={} max_degree={} diameter={} bridges={}",
        nodes,
        graph.edge_count(),
        s.avg_degree,
        s.min_degree,
        s.max_degree,
        s.diameter,
        s.bridges
    );
    Ok(())
}

fn run(
    config_path: &Path,
    out: Option<PathBuf>,
    strategies: Vec<StrategyKind>,
    seed: Option<u64>,
    threads: Option<usize>,
    percentiles: bool,
) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if !strategies.is_empty() {
        config.strategies = strategies;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(threads) = threads {
        config.threads = threads;
    }
    let out_dir = out
        .or_else(|| config.output_dir.clone())
        .context("no output directory: pass --out or set output_dir in the config")?;

    let report = run_experiment(&config)?;
    let written = write_outputs(&report, &out_dir, percentiles || config.percentiles)?;
    for run in &report.runs {
        println!(
            "{:>4} nodes  {:<20} median={:.4} min={:.4} max={:.4}",
            run.nodes,
            run.strategy.name(),
            run.final_median,
            run.final_min,
            run.final_max
        );
    }
    for (strategy, ratio) in &report.accuracy_drop_ratio {
        println!("accuracy drop ratio vs standard_averaging: {strategy} {ratio:.4}");
    }
    println!("wrote {} files to {}", written.len(), out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn netmodel(
    baseline: f64,
    reference_conn: f64,
    reference_nodes: usize,
    nodes: Vec<usize>,
    conns: Vec<f64>,
    density_exponent: f64,
    update_interval: f64,
    sync_every: f64,
    csv: Option<PathBuf>,
) -> Result<()> {
    let conns = match conns.len() {
        1 => vec![conns[0]; nodes.len()],
        n if n == nodes.len() => conns,
        n => bail!("{n} connectivity values for {} topology sizes", nodes.len()),
    };
    let scenario = ThroughputScenario {
        baseline_rate: baseline,
        reference_n: reference_nodes,
        reference_avg_conn: reference_conn,
        density_exponent,
        update_interval_s: update_interval,
        sync_every_updates: sync_every,
    };
    let sizes: Vec<(usize, f64)> = nodes.into_iter().zip(conns).collect();
    let rows = scenario_table(&scenario, &sizes)?;

    println!(
        "{:>6} {:>6} {:>10} {:>10} {:>10} {:>8} {:>10}",
        "nodes", "conn", "expected", "constant", "increase", "fedavg", "gl/fl"
    );
    for r in &rows {
        println!(
            "{:>6} {:>6.2} {:>10.5} {:>10.5} {:>10.5} {:>8.3} {:>10.3}",
            r.nodes,
            r.avg_conn,
            r.expected,
            r.constant_connectivity,
            r.connectivity_increase,
            r.fedavg,
            r.gossip_to_fedavg()
        );
    }
    println!("rates are model updates per second per node");
    if let Some(path) = csv {
        fs::write(&path, table_csv(&rows))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Joins the error chain, skipping causes whose text the previous message
/// already includes.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTopology {
            nodes,
            target_avg_degree,
            seed,
            out,
            stem,
        } => gen_topology(nodes, target_avg_degree, seed, &out, stem),
        Command::Run {
            config,
            out,
            strategies,
            seed,
            threads,
            percentiles,
        } => run(&config, out, strategies, seed, threads, percentiles),
        Command::Netmodel {
            baseline,
            reference_conn,
            reference_nodes,
            nodes,
            conns,
            density_exponent,
            update_interval,
            sync_every,
            csv,
        } => netmodel(
            baseline,
            reference_conn,
            reference_nodes,
            nodes,
            conns,
            density_exponent,
            update_interval,
            sync_every,
            csv,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
