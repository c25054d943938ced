//! Closed-loop simulation of the reservation protocol on a slotted channel.
//!
//! Time is counted in reservation slots (one short packet plus feedback); a
//! data packet occupies `rho` slots. Each frame opens with a reservation
//! cycle among the terminals that received packets since the previous frame
//! start; the winners then send their whole batch in winning order, after
//! everything queued by earlier frames.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{build_initial_belief, BeliefError, BeliefState};
use crate::genie::{lift, GenieError, GenieValueFunction};
use crate::model::{apply_leavers, binomial, ClusterOccupancy, ModelConfig, ModelError, Observation};
use crate::rtdp::{rtdp_backup_with, BackupWorkspace, RtdpError, RtdpParams, ValueTable};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Genie(#[from] GenieError),
    #[error(transparent)]
    Rtdp(#[from] RtdpError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistency at slot {slot}: {detail}")]
    Inconsistent { slot: u64, detail: String },
    #[error("reservation cycle exceeded {0} slots")]
    SlotCap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    /// Aggregate packet arrival rate per slot.
    pub lambda: f64,
    pub n_terminals: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig { lambda: 0.1, n_terminals: 5 }
    }
}

impl TrafficConfig {
    /// Per-terminal rate λ / N.
    pub fn lambda_prime(&self) -> f64 {
        self.lambda / self.n_terminals as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SimError::Config(format!("arrival rate must be non-negative, got {}", self.lambda)));
        }
        if self.n_terminals == 0 || self.n_terminals > u8::MAX as usize {
            return Err(SimError::Config(format!("terminal count must be in 1..=255, got {}", self.n_terminals)));
        }
        Ok(())
    }

    /// Offered load λρ does not exceed the channel.
    pub fn is_stable(&self, rho: u64) -> bool {
        self.lambda * rho as f64 <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FramePlan {
    /// A frame every `T` slots; the reservation pre-empts data in progress.
    Fixed(u64),
    /// A new frame as soon as the transmission queue drains.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishMode {
    /// Completion flag rides on the last data slot.
    Piggyback,
    /// One extra slot after every packet.
    DedicatedSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAccounting {
    pub rho: u64,
    pub finish_mode: FinishMode,
}

impl Default for SlotAccounting {
    fn default() -> Self {
        SlotAccounting { rho: 3, finish_mode: FinishMode::Piggyback }
    }
}

impl SlotAccounting {
    fn slots_per_packet(&self) -> u64 {
        match self.finish_mode {
            FinishMode::Piggyback => self.rho,
            FinishMode::DedicatedSlot => self.rho + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Slot during which the packet was generated; it can contend from the next slot on.
    pub arrival_slot: u64,
    pub owner_terminal: usize,
    /// Frame whose reservation cycle covered the packet.
    pub frame_of_arrival: Option<usize>,
    /// Exclusive end of the packet's last data slot.
    pub departure_slot: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub generated_packets: usize,
    pub delivered_packets: usize,
    pub total_slots: u64,
    /// ρ · delivered / slots (channel utilization).
    pub gamma: f64,
    /// delivered / slots.
    pub packets_per_slot: f64,
    /// Mean delay over delivered packets.
    pub tau: Option<f64>,
    pub reservation_slots: Vec<usize>,
}

impl Metrics {
    pub fn mean_reservation_slots(&self) -> Option<f64> {
        (!self.reservation_slots.is_empty())
            .then(|| self.reservation_slots.iter().sum::<usize>() as f64 / self.reservation_slots.len() as f64)
    }
}

/// Independent streams for traffic and protocol randomness under one seed,
/// so that different protocols see identical arrivals.
pub fn traffic_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

pub fn protocol_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Poisson arrivals at rate λ' per terminal per slot, ordered by slot and
/// then terminal.
pub fn generate_arrivals<R: Rng + ?Sized>(cfg: &TrafficConfig, span_slots: u64, rng: &mut R) -> Vec<PacketRecord> {
    let lp = cfg.lambda_prime();
    if lp <= 0.0 {
        return Vec::new();
    }
    let poisson = Poisson::new(lp).expect("positive rate");
    let mut out = Vec::new();
    for slot in 0..span_slots {
        for terminal in 0..cfg.n_terminals {
            let k = poisson.sample(rng) as usize;
            for _ in 0..k {
                out.push(PacketRecord { arrival_slot: slot, owner_terminal: terminal, frame_of_arrival: None, departure_slot: None });
            }
        }
    }
    out
}

/// Distribution of the number of terminals (out of `n_max`) that received
/// at least one packet during `t` slots.
pub fn gamma_t_distribution(lambda_prime: f64, t: u64, n_max: usize) -> Vec<f64> {
    let busy = 1.0 - (-lambda_prime * t as f64).exp();
    let quiet = 1.0 - busy;
    (0..=n_max)
        .map(|k| binomial(n_max as u64, k as u64) as f64 * busy.powi(k as i32) * quiet.powi((n_max - k) as i32))
        .collect()
}

/// Initial belief of a reservation cycle after an arrival window of `t` slots.
pub fn initial_belief_for_interval(lambda_prime: f64, t: u64, n_max: usize) -> Result<BeliefState, BeliefError> {
    let dist = gamma_t_distribution(lambda_prime, t, n_max);
    build_initial_belief(&dist[1..], true)
}

/// How the reservation actions are chosen.
pub enum ReservationPolicy {
    /// Belief planner with its value table; `learn` keeps updating the table.
    Rtdp { table: ValueTable, params: RtdpParams, learn: bool, workspace: Box<BackupWorkspace> },
    /// Reference policy that sees the true occupancy.
    Genie(GenieValueFunction),
}

impl ReservationPolicy {
    pub fn rtdp(table: ValueTable, params: RtdpParams, learn: bool, n_max: usize) -> Self {
        let workspace = Box::new(BackupWorkspace::new(params.d, n_max));
        ReservationPolicy::Rtdp { table, params, learn, workspace }
    }

    pub fn table(&self) -> Option<&ValueTable> {
        match self {
            ReservationPolicy::Rtdp { table, .. } => Some(table),
            ReservationPolicy::Genie(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    pub winner_order: Vec<usize>,
    /// Slot offset (within the cycle) of each win.
    pub win_slots: Vec<usize>,
    pub slots_used: usize,
}

/// Runs one reservation cycle among the terminals flagged in `active`.
///
/// Every active terminal tracks its own status (cluster count and cluster
/// index) and draws its own decisions; the shared belief is computed once
/// since all terminals see identical feedback. The cycle ends when the
/// belief reaches the target (for the genie policy: when the true occupancy
/// does).
pub fn run_reservation_cycle<R: Rng + ?Sized>(
    active: &[bool],
    policy: &mut ReservationPolicy,
    b0: &BeliefState,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<CycleOutcome, SimError> {
    let ids: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    if b0.clusters() != 1 {
        return Err(SimError::Config("a reservation cycle starts from a single-cluster belief".into()));
    }
    let mut s = ClusterOccupancy::single(ids.len() as u8);
    // per-terminal status: (terminal, cluster index); the cluster count is shared
    let mut theta: Vec<(usize, usize)> = ids.iter().map(|&i| (i, 0)).collect();
    let mut m_local = 1usize;
    let mut b = b0.clone();
    let mut winners = Vec::new();
    let mut win_slots = Vec::new();
    let mut slots = 0usize;
    let cap = match policy {
        ReservationPolicy::Rtdp { params, .. } => params.max_slots,
        ReservationPolicy::Genie(_) => crate::rtdp::DEFAULT_SLOT_CAP,
    };
    loop {
        let done = match policy {
            ReservationPolicy::Rtdp { .. } => b.is_target(),
            ReservationPolicy::Genie(_) => s.is_target(),
        };
        if done {
            break;
        }
        if slots >= cap {
            return Err(SimError::SlotCap(cap));
        }
        let a = match policy {
            ReservationPolicy::Rtdp { table, params, learn, workspace } => {
                if b.prob(&s) <= 0.0 {
                    return Err(SimError::Inconsistent {
                        slot: slots as u64,
                        detail: format!("true state {s} outside belief support {b}"),
                    });
                }
                let (a, v) = rtdp_backup_with(&b, table, params, cfg, workspace)?;
                if *learn {
                    table.write(b.quantize(table.q()), v);
                }
                a
            }
            ReservationPolicy::Genie(g) => lift(&s, g)?.1,
        };

        let mut leavers = vec![0u8; s.clusters()];
        let mut transmitted = Vec::new();
        for (k, &(_, j)) in theta.iter().enumerate() {
            if rng.random::<f64>() < a.probs()[j] {
                leavers[j] += 1;
                transmitted.push(k);
            }
        }
        let (next, o) = apply_leavers(&s, &leavers, cfg);
        match o {
            Observation::Idle => {}
            Observation::Success => {
                let (id, _) = theta.remove(transmitted[0]);
                winners.push(id);
                win_slots.push(slots);
            }
            Observation::Collision => {
                if cfg.collision_splits(m_local) {
                    for &k in &transmitted {
                        theta[k].1 = m_local;
                    }
                    m_local += 1;
                }
            }
        }
        check_statuses(&theta, m_local, &next, slots as u64)?;
        if let ReservationPolicy::Rtdp { .. } = policy {
            b = b.update(&a, o, cfg)?;
        }
        s = next;
        slots += 1;
    }
    Ok(CycleOutcome { winner_order: winners, win_slots, slots_used: slots })
}

fn check_statuses(theta: &[(usize, usize)], m_local: usize, s: &ClusterOccupancy, slot: u64) -> Result<(), SimError> {
    let mut counts = vec![0u8; m_local];
    for &(_, j) in theta {
        counts[j] += 1;
    }
    if counts != s.counts() {
        return Err(SimError::Inconsistent {
            slot,
            detail: format!("terminal statuses give {counts:?}, shared state is {s}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Reserve,
    Data,
    Finish,
    Idle,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Reserve => "reserve",
            EventKind::Data => "data",
            EventKind::Finish => "finish",
            EventKind::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub slot: u64,
    pub kind: EventKind,
    pub frame_id: Option<usize>,
    pub terminal_id: Option<usize>,
}

/// `slot,event_type,frame_id,terminal_id`
pub fn write_event_log<W: Write>(events: &[Event], mut w: W) -> std::io::Result<()> {
    writeln!(w, "slot,event_type,frame_id,terminal_id")?;
    for e in events {
        let frame = e.frame_id.map(|f| f.to_string()).unwrap_or_default();
        let term = e.terminal_id.map(|t| t.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{frame},{term}", e.slot, e.kind.as_str())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub traffic: TrafficConfig,
    pub frames: FramePlan,
    pub accounting: SlotAccounting,
    pub span_slots: u64,
    pub model: ModelConfig,
    pub record_events: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.traffic.validate()?;
        self.model.validate()?;
        if self.accounting.rho == 0 {
            return Err(SimError::Config("rho must be at least 1".into()));
        }
        if self.span_slots == 0 {
            return Err(SimError::Config("span must be at least one slot".into()));
        }
        if let FramePlan::Fixed(0) = self.frames {
            return Err(SimError::Config("fixed frame length must be at least 1".into()));
        }
        if self.traffic.n_terminals > self.model.n_max {
            return Err(SimError::Config(format!(
                "{} terminals exceed the planner's n_max = {}",
                self.traffic.n_terminals, self.model.n_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub metrics: Metrics,
    pub packets: Vec<PacketRecord>,
    pub events: Vec<Event>,
}

struct InFlight {
    packet: usize,
    done: u64,
}

/// Simulates `span_slots` slots. Traffic and protocol draws come from
/// separate streams of `seed`.
pub fn run_simulation(cfg: &SimConfig, policy: &mut ReservationPolicy, seed: u64) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut packets = generate_arrivals(&cfg.traffic, cfg.span_slots, &mut traffic_rng(seed));
    let mut rng = protocol_rng(seed);
    let n = cfg.traffic.n_terminals;
    let lp = cfg.traffic.lambda_prime();
    let per_packet = cfg.accounting.slots_per_packet();
    let rho = cfg.accounting.rho;

    let mut events = Vec::new();
    let mut log = |slot: u64, kind: EventKind, frame_id: Option<usize>, terminal_id: Option<usize>| {
        if cfg.record_events {
            events.push(Event { slot, kind, frame_id, terminal_id });
        }
    };

    let mut queue: VecDeque<InFlight> = VecDeque::new();
    let mut next_arrival = 0usize; // packets[..next_arrival] have been covered by a frame
    let mut last_start = 0u64;
    let mut next_nominal = 0u64;
    let mut frame_id = 0usize;
    let mut reservation_slots = Vec::new();
    let mut completed = 0usize;
    let mut t = 0u64;

    while t < cfg.span_slots {
        let frame_due = match cfg.frames {
            FramePlan::Dynamic => queue.is_empty(),
            FramePlan::Fixed(_) => t >= next_nominal,
        };
        if frame_due {
            let start = t;
            let window = start - last_start;
            last_start = start;
            if let FramePlan::Fixed(len) = cfg.frames {
                next_nominal += len;
            }
            let first = next_arrival;
            while next_arrival < packets.len() && packets[next_arrival].arrival_slot < start {
                next_arrival += 1;
            }
            let mut active = vec![false; n];
            for p in &packets[first..next_arrival] {
                active[p.owner_terminal] = true;
            }
            let b0 = initial_belief_for_interval(lp, window, n)?;
            let outcome = if b0.is_target() {
                CycleOutcome { winner_order: Vec::new(), win_slots: Vec::new(), slots_used: 0 }
            } else {
                run_reservation_cycle(&active, policy, &b0, &cfg.model, &mut rng)?
            };
            if outcome.winner_order.len() != active.iter().filter(|&&a| a).count() {
                return Err(SimError::Inconsistent { slot: t, detail: "cycle ended with contenders left".into() });
            }
            let mut wins = outcome.win_slots.iter().zip(&outcome.winner_order).peekable();
            for k in 0..outcome.slots_used {
                let winner = wins.next_if(|(&slot, _)| slot == k).map(|(_, &w)| w);
                log(start + k as u64, EventKind::Reserve, Some(frame_id), winner);
            }
            t += outcome.slots_used as u64;
            reservation_slots.push(outcome.slots_used);
            // winners send their whole batch, in arrival order, in winning order
            for &w in &outcome.winner_order {
                for (i, p) in packets.iter_mut().enumerate().take(next_arrival).skip(first) {
                    if p.owner_terminal == w {
                        p.frame_of_arrival = Some(frame_id);
                        queue.push_back(InFlight { packet: i, done: 0 });
                    }
                }
            }
            frame_id += 1;
            if outcome.slots_used == 0 && cfg.frames == FramePlan::Dynamic && queue.is_empty() {
                log(t, EventKind::Idle, None, None);
                t += 1;
            }
            continue;
        }

        match queue.front_mut() {
            Some(f) => {
                let owner = packets[f.packet].owner_terminal;
                let frame = packets[f.packet].frame_of_arrival;
                f.done += 1;
                if f.done <= rho {
                    log(t, EventKind::Data, frame, Some(owner));
                }
                if f.done == rho {
                    packets[f.packet].departure_slot = Some(t + 1);
                    if cfg.accounting.finish_mode == FinishMode::Piggyback {
                        log(t, EventKind::Finish, frame, Some(owner));
                    }
                } else if f.done > rho {
                    log(t, EventKind::Finish, frame, Some(owner));
                }
                if f.done == per_packet {
                    queue.pop_front();
                    completed += 1;
                }
            }
            None => log(t, EventKind::Idle, None, None),
        }
        t += 1;

        // every generated packet is completed, queued, or still awaiting a frame
        let generated = packets.partition_point(|p| p.arrival_slot < t);
        if completed + queue.len() != next_arrival || generated < next_arrival {
            return Err(SimError::Inconsistent { slot: t, detail: "packet conservation violated".into() });
        }
    }

    let metrics = compute_metrics(&packets, cfg.span_slots, &cfg.accounting, reservation_slots);
    Ok(SimOutput { metrics, packets, events })
}

/// γ and τ over packets whose transmission completed within `total_slots`.
pub fn compute_metrics(
    packets: &[PacketRecord],
    total_slots: u64,
    accounting: &SlotAccounting,
    reservation_slots: Vec<usize>,
) -> Metrics {
    let done: Vec<&PacketRecord> =
        packets.iter().filter(|p| p.departure_slot.is_some_and(|d| d <= total_slots)).collect();
    let delivered = done.len();
    let tau = (delivered > 0).then(|| {
        done.iter().map(|p| (p.departure_slot.unwrap() - p.arrival_slot) as f64).sum::<f64>() / delivered as f64
    });
    let per_slot = if total_slots > 0 { delivered as f64 / total_slots as f64 } else { 0.0 };
    Metrics {
        generated_packets: packets.len(),
        delivered_packets: delivered,
        total_slots,
        gamma: accounting.rho as f64 * per_slot,
        packets_per_slot: per_slot,
        tau,
        reservation_slots,
    }
}

/// Pairs of delivered packets served out of frame order.
pub fn fifo_violations(packets: &[PacketRecord]) -> usize {
    let mut served: Vec<(usize, u64)> =
        packets.iter().filter_map(|p| Some((p.frame_of_arrival?, p.departure_slot?))).collect();
    served.sort_unstable();
    // a violation is a packet finishing before some packet of an earlier frame
    let mut violations = 0;
    let mut latest_earlier = None::<u64>;
    let mut i = 0;
    while i < served.len() {
        let frame = served[i].0;
        let mut j = i;
        let mut latest_here = 0;
        while j < served.len() && served[j].0 == frame {
            if latest_earlier.is_some_and(|l| served[j].1 <= l) {
                violations += 1;
            }
            latest_here = latest_here.max(served[j].1);
            j += 1;
        }
        latest_earlier = Some(latest_earlier.map_or(latest_here, |l| l.max(latest_here)));
        i = j;
    }
    violations
}
