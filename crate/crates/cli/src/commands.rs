use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use treeres::belief::build_initial_belief;
use treeres::bench::{run_benchmark, BenchConfig};
use treeres::genie::{solve_via, GenieError, GenieValueFunction};
use treeres::rtdp::{train, InitMode, LearningCurve, RtdpError, ValueTable};
use treeres::sim::{
    run_simulation, write_event_log, FramePlan, Metrics, ReservationPolicy, SimConfig, SimError, TrafficConfig,
};

use crate::config::{ConfigError, ExperimentConfig, FrameSpec, InitKind, ProtocolKind};

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    fn genie(e: &GenieError) -> Option<u8> {
        matches!(e, GenieError::NonConvergence { .. }).then_some(3)
    }
    fn rtdp(e: &RtdpError) -> Option<u8> {
        match e {
            RtdpError::Genie(g) => genie(g),
            RtdpError::QuantizationMismatch { .. } => Some(2),
            _ => None,
        }
    }
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        let code = if let Some(e) = cause.downcast_ref::<GenieError>() {
            genie(e)
        } else if let Some(e) = cause.downcast_ref::<RtdpError>() {
            rtdp(e)
        } else if let Some(e) = cause.downcast_ref::<SimError>() {
            match e {
                SimError::Config(_) => Some(2),
                SimError::Inconsistent { .. } => Some(4),
                SimError::Genie(g) => genie(g),
                SimError::Rtdp(r) => rtdp(r),
                _ => None,
            }
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    1
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn solve_genie(cfg: &ExperimentConfig) -> Result<GenieValueFunction> {
    Ok(solve_via(&cfg.model_config(), &cfg.genie_params())?)
}

fn init_mode(cfg: &ExperimentConfig, genie: Option<&GenieValueFunction>) -> Result<InitMode> {
    Ok(match cfg.solver.init {
        InitKind::Zero => InitMode::Zero,
        InitKind::Genie => InitMode::Genie(match genie {
            Some(g) => g.clone(),
            None => solve_genie(cfg)?,
        }),
    })
}

pub fn cmd_via(cfg: &ExperimentConfig, out: &Path) -> Result<GenieValueFunction> {
    cfg.validate()?;
    let g = solve_genie(cfg)?;
    g.write_json(create(out)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(g)
}

#[derive(Serialize)]
struct CurveRow<'a> {
    config_hash: &'a str,
    seed: u64,
    trial_index: usize,
    slots_used: usize,
    moving_avg_40: f64,
    table_size: usize,
}

/// Trains a table from the configured prior. Returns `None` (and writes
/// nothing) when zero trials are requested.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, table_out: &Path, curve_out: &Path) -> Result<Option<LearningCurve>> {
    cfg.validate()?;
    cfg.validate_prior()?;
    if cfg.solver.trials == 0 {
        eprintln!("warning: solver.trials = 0, nothing to train");
        return Ok(None);
    }
    let b0 = build_initial_belief(&cfg.solver.prior, false).map_err(|e| ConfigError::new(e.to_string()))?;
    let mut table = ValueTable::new(cfg.solver.q, init_mode(cfg, None)?);
    let params = cfg.rtdp_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curve = train(&mut table, &b0, cfg.solver.trials, &mut rng, &params, &cfg.model_config())?;

    table.write_json(create(table_out)?, &params).with_context(|| format!("writing {}", table_out.display()))?;
    let hash = cfg.hash();
    let mut w = csv::Writer::from_writer(create(curve_out)?);
    for (i, (slots, ma)) in curve.slots.iter().zip(curve.moving_average(40)).enumerate() {
        w.serialize(CurveRow {
            config_hash: &hash,
            seed,
            trial_index: i,
            slots_used: *slots,
            moving_avg_40: ma,
            table_size: curve.table_sizes[i],
        })?;
    }
    w.flush()?;
    Ok(Some(curve))
}

/// One row of metrics output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub config_hash: String,
    pub seed: u64,
    pub protocol: &'static str,
    pub lambda: f64,
    pub frame: String,
    pub rho: u64,
    pub gamma: f64,
    pub packets_per_slot: f64,
    pub tau: Option<f64>,
    pub generated: usize,
    pub delivered: usize,
    pub mean_reservation_slots: Option<f64>,
}

impl MetricsRow {
    fn new(hash: &str, job: &Job, m: &Metrics) -> Self {
        MetricsRow {
            config_hash: hash.to_string(),
            seed: job.seed,
            protocol: job.protocol.name(),
            lambda: job.lambda,
            frame: job.frame.map_or_else(|| "-".to_string(), |f| f.to_string()),
            rho: job.rho,
            gamma: m.gamma,
            packets_per_slot: m.packets_per_slot,
            tau: m.tau,
            generated: m.generated_packets,
            delivered: m.delivered_packets,
            mean_reservation_slots: m.mean_reservation_slots(),
        }
    }
}

/// One simulation in a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub protocol: ProtocolKind,
    pub lambda: f64,
    /// Frame strategy; baselines have none.
    pub frame: Option<FrameSpec>,
    pub rho: u64,
    pub seed: u64,
}

/// Grid in output order: protocol, λ, frame mode, ρ, seed.
pub fn sweep_jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &protocol in &cfg.run.protocols {
        let frames: Vec<Option<FrameSpec>> = match protocol {
            ProtocolKind::Proposed => cfg.traffic.frames.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        for &lambda in &cfg.traffic.lambdas {
            for &frame in &frames {
                for &rho in &cfg.accounting.rho {
                    for &seed in &cfg.run.seeds {
                        jobs.push(Job { protocol, lambda, frame, rho, seed });
                    }
                }
            }
        }
    }
    jobs
}

/// Configuration and learning policy for one reservation-protocol run.
pub struct ProposedSetup<'a> {
    pub genie: Option<&'a GenieValueFunction>,
    pub table: Option<ValueTable>,
    pub learn: bool,
    pub use_genie_policy: bool,
    pub events: Option<PathBuf>,
}

pub fn run_job(cfg: &ExperimentConfig, job: &Job, setup: ProposedSetup<'_>) -> Result<Metrics> {
    let traffic = TrafficConfig { lambda: job.lambda, n_terminals: cfg.traffic.n_terminals };
    let accounting = cfg.accounting_for(job.rho);
    match job.protocol.baseline() {
        Some(p) => {
            let bench = BenchConfig {
                traffic,
                accounting,
                span_slots: cfg.traffic.span_slots,
                w_max: cfg.accounting.w_max,
                unit_failures: cfg.accounting.unit_failures,
            };
            Ok(run_benchmark(p, &bench, job.seed)?.0)
        }
        None => {
            let sim = SimConfig {
                traffic,
                frames: job.frame.map_or(FramePlan::Dynamic, |f| f.0),
                accounting,
                span_slots: cfg.traffic.span_slots,
                model: cfg.model_config(),
                record_events: setup.events.is_some(),
            };
            let mut policy = if setup.use_genie_policy {
                ReservationPolicy::Genie(match setup.genie {
                    Some(g) => g.clone(),
                    None => solve_genie(cfg)?,
                })
            } else {
                let table = match setup.table {
                    Some(t) => t,
                    None => ValueTable::new(cfg.solver.q, init_mode(cfg, setup.genie)?),
                };
                ReservationPolicy::rtdp(table, cfg.rtdp_params(), setup.learn, cfg.model.n_max)
            };
            let out = run_simulation(&sim, &mut policy, job.seed)?;
            if let Some(path) = &setup.events {
                write_event_log(&out.events, create(path)?).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(out.metrics)
        }
    }
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Options for a single `simulate` run.
pub struct SimulateArgs {
    pub protocol: ProtocolKind,
    pub lambda: f64,
    pub frame: FrameSpec,
    pub rho: u64,
    pub seed: u64,
    pub table: Option<PathBuf>,
    pub freeze: bool,
    pub genie_policy: bool,
    pub events: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, args: SimulateArgs) -> Result<MetricsRow> {
    cfg.validate()?;
    cfg.validate_traffic()?;
    let job = Job {
        protocol: args.protocol,
        lambda: args.lambda,
        frame: (args.protocol == ProtocolKind::Proposed).then_some(args.frame),
        rho: args.rho,
        seed: args.seed,
    };
    let genie = match (args.protocol, cfg.solver.init, args.genie_policy) {
        (ProtocolKind::Proposed, InitKind::Genie, _) | (ProtocolKind::Proposed, _, true) => Some(solve_genie(cfg)?),
        _ => None,
    };
    let table = match &args.table {
        None => None,
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let (table, _) = ValueTable::read_json(BufReader::new(file), init_mode(cfg, genie.as_ref())?)?;
            if table.q() != cfg.solver.q {
                return Err(RtdpError::QuantizationMismatch { table: table.q(), requested: cfg.solver.q }.into());
            }
            Some(table)
        }
    };
    let setup = ProposedSetup {
        genie: genie.as_ref(),
        table,
        learn: !args.freeze,
        use_genie_policy: args.genie_policy,
        events: args.events,
    };
    let metrics = run_job(cfg, &job, setup)?;
    let row = MetricsRow::new(&cfg.hash(), &job, &metrics);
    write_rows(&args.out, std::slice::from_ref(&row))?;
    Ok(row)
}

/// Runs every job of the grid on `workers` threads; rows come back in grid
/// order whatever the completion order.
pub fn cmd_sweep(cfg: &ExperimentConfig, workers: usize, out: &Path) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    cfg.validate_traffic()?;
    let jobs = sweep_jobs(cfg);
    let needs_genie = cfg.solver.init == InitKind::Genie && jobs.iter().any(|j| j.protocol == ProtocolKind::Proposed);
    let genie = if needs_genie { Some(solve_genie(cfg)?) } else { None };
    let hash = cfg.hash();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let setup = ProposedSetup { genie: genie.as_ref(), table: None, learn: true, use_genie_policy: false, events: None };
                run_job(cfg, job, setup).map(|m| MetricsRow::new(&hash, job, &m))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_rows(out, &rows)?;
    Ok(rows)
}

/// Baselines only: the sweep grid restricted to the benchmark protocols.
pub fn cmd_bench(cfg: &ExperimentConfig, workers: usize, out: &Path) -> Result<Vec<MetricsRow>> {
    let mut only = cfg.clone();
    only.run.protocols.retain(|p| p.baseline().is_some());
    if only.run.protocols.is_empty() {
        return Err(ConfigError::new("run.protocols lists no benchmark protocol").into());
    }
    cmd_sweep(&only, workers, out)
}
