use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use treeres_cli::commands::{cmd_bench, cmd_simulate, cmd_sweep, cmd_train, cmd_via, exit_code, SimulateArgs};
use treeres_cli::config::{ExperimentConfig, FrameSpec, InitKind, ProtocolKind};

#[derive(Parser)]
#[command(name = "treeres", version, about = "Tree-splitting reservation: solve, train, simulate and compare")]
struct Cli {
    /// TOML experiment configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run offered loads with lambda * rho above one.
    #[arg(long, global = true)]
    allow_unstable: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the genie-aided MDP and export its value table.
    Via {
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        d: Option<u32>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        max_sweeps: Option<usize>,
        /// Output file (default: <output.dir>/genie.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a belief value table and write its learning curve.
    Train {
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        q: Option<u32>,
        #[arg(long)]
        d: Option<u32>,
        #[arg(long, value_enum)]
        init: Option<Init>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Default: <output.dir>/table.json.
        #[arg(long)]
        table_out: Option<PathBuf>,
        /// Default: <output.dir>/learning_curve.csv.
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
    /// Run one simulation and write its metrics row.
    Simulate {
        #[arg(long, value_enum, default_value = "proposed")]
        protocol: Proto,
        /// Default: the first configured arrival rate.
        #[arg(long)]
        lambda: Option<f64>,
        /// "dynamic" or "fixed:<T>"; default: the first configured frame mode.
        #[arg(long)]
        frame: Option<FrameSpec>,
        /// Default: the first configured rho.
        #[arg(long)]
        rho: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from a trained table instead of a fresh one.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Do not update the table during the run.
        #[arg(long)]
        freeze: bool,
        /// Use the genie policy on the true state (a lower bound).
        #[arg(long)]
        genie_policy: bool,
        /// Write the slot-level event log here.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Default: <output.dir>/simulate.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured grid of protocols, rates, frame modes, rho and seeds.
    Sweep(GridArgs),
    /// Like sweep, restricted to the baseline protocols.
    Bench(GridArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Replace the configured arrival rates.
    #[arg(long = "lambda")]
    lambdas: Vec<f64>,
    /// Replace the configured rho values.
    #[arg(long = "rho")]
    rhos: Vec<u64>,
    /// Replace the configured frame modes.
    #[arg(long = "frame")]
    frames: Vec<FrameSpec>,
    /// Replace the configured seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Replace the configured protocols.
    #[arg(long = "protocol", value_enum)]
    protocols: Vec<Proto>,
    /// Default: <output.dir>/sweep.csv (or bench.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Genie,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum Proto {
    Proposed,
    Aloha,
    Stack,
    CsmaCa,
}

impl From<Proto> for ProtocolKind {
    fn from(p: Proto) -> Self {
        match p {
            Proto::Proposed => ProtocolKind::Proposed,
            Proto::Aloha => ProtocolKind::Aloha,
            Proto::Stack => ProtocolKind::Stack,
            Proto::CsmaCa => ProtocolKind::CsmaCa,
        }
    }
}

fn apply_grid(cfg: &mut ExperimentConfig, g: &GridArgs) {
    if !g.lambdas.is_empty() {
        cfg.traffic.lambdas = g.lambdas.clone();
    }
    if !g.rhos.is_empty() {
        cfg.accounting.rho = g.rhos.clone();
    }
    if !g.frames.is_empty() {
        cfg.traffic.frames = g.frames.clone();
    }
    if !g.seeds.is_empty() {
        cfg.run.seeds = g.seeds.clone();
    }
    if !g.protocols.is_empty() {
        cfg.run.protocols = g.protocols.iter().map(|&p| p.into()).collect();
    }
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.run.allow_unstable |= cli.allow_unstable;
    let dir = cfg.output.dir.clone();

    match cli.command {
        Command::Via { n_max, d, epsilon, max_sweeps, out } => {
            if let Some(n) = n_max {
                cfg.model.n_max = n;
            }
            if let Some(d) = d {
                cfg.solver.d = d;
            }
            if let Some(e) = epsilon {
                cfg.solver.epsilon = e;
            }
            if let Some(s) = max_sweeps {
                cfg.solver.max_sweeps = s;
            }
            let out = out.unwrap_or_else(|| dir.join("genie.json"));
            let g = cmd_via(&cfg, &out)?;
            println!("solved {} states in {} sweeps -> {}", g.values().len(), g.sweeps(), out.display());
        }
        Command::Train { trials, q, d, init, seed, table_out, curve_out } => {
            if let Some(t) = trials {
                cfg.solver.trials = t;
            }
            if let Some(q) = q {
                cfg.solver.q = q;
            }
            if let Some(d) = d {
                cfg.solver.d = d;
            }
            if let Some(i) = init {
                cfg.solver.init = match i {
                    Init::Genie => InitKind::Genie,
                    Init::Zero => InitKind::Zero,
                };
            }
            let table_out = table_out.unwrap_or_else(|| dir.join("table.json"));
            let curve_out = curve_out.unwrap_or_else(|| dir.join("learning_curve.csv"));
            if let Some(curve) = cmd_train(&cfg, seed, &table_out, &curve_out)? {
                println!(
                    "{} trials, mean {:.3} slots, table {} entries -> {}, {}",
                    curve.len(),
                    curve.mean().unwrap_or(f64::NAN),
                    curve.table_sizes.last().copied().unwrap_or(0),
                    table_out.display(),
                    curve_out.display()
                );
            }
        }
        Command::Simulate { protocol, lambda, frame, rho, seed, table, freeze, genie_policy, events, out } => {
            let lambda = lambda.or(cfg.traffic.lambdas.first().copied()).unwrap_or(0.1);
            let frame = frame.or(cfg.traffic.frames.first().copied()).unwrap_or("dynamic".parse()?);
            let rho = rho.or(cfg.accounting.rho.first().copied()).unwrap_or(3);
            // validate exactly what runs
            cfg.traffic.lambdas = vec![lambda];
            cfg.traffic.frames = vec![frame];
            cfg.accounting.rho = vec![rho];
            cfg.run.seeds = vec![seed];
            let out = out.unwrap_or_else(|| dir.join("simulate.csv"));
            let args = SimulateArgs {
                protocol: protocol.into(),
                lambda,
                frame,
                rho,
                seed,
                table,
                freeze,
                genie_policy,
                events,
                out: out.clone(),
            };
            let row = cmd_simulate(&cfg, args)?;
            println!(
                "{} lambda={} frame={} rho={} seed={}: gamma={:.4} tau={} -> {}",
                row.protocol,
                row.lambda,
                row.frame,
                row.rho,
                row.seed,
                row.gamma,
                row.tau.map_or("n/a".to_string(), |t| format!("{t:.2}")),
                out.display()
            );
        }
        Command::Sweep(g) => {
            apply_grid(&mut cfg, &g);
            let out = g.out.clone().unwrap_or_else(|| dir.join("sweep.csv"));
            let rows = cmd_sweep(&cfg, workers(g.workers), &out)?;
            println!("{} runs -> {}", rows.len(), out.display());
        }
        Command::Bench(g) => {
            apply_grid(&mut cfg, &g);
            let out = g.out.clone().unwrap_or_else(|| dir.join("bench.csv"));
            let rows = cmd_bench(&cfg, workers(g.workers), &out)?;
            println!("{} runs -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
