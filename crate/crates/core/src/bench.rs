//! Baseline random-access protocols on the same traffic and slot accounting.
//!
//! Slotted ALOHA and the stack algorithm send data directly, so every attempt
//! occupies `rho` unit slots. ALOHA runs on unit slots with no carrier sense;
//! the stack algorithm needs per-attempt feedback and therefore advances in
//! data-sized slots. CSMA/CA uses a one-unit RTS/CTS exchange and only the
//! CTS holder sends data.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Observation;
use crate::sim::{compute_metrics, generate_arrivals, protocol_rng, traffic_rng, Metrics, PacketRecord, SimError, SlotAccounting, TrafficConfig};

pub const DEFAULT_W_MAX: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Aloha,
    Stack,
    CsmaCa,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Aloha, Protocol::Stack, Protocol::CsmaCa];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Aloha => "aloha",
            Protocol::Stack => "stack",
            Protocol::CsmaCa => "csma_ca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub traffic: TrafficConfig,
    pub accounting: SlotAccounting,
    pub span_slots: u64,
    pub w_max: u64,
    /// Collided ALOHA attempts are aborted after one unit, and failed or idle
    /// stack slots last one unit instead of `rho`.
    pub unit_failures: bool,
}

impl BenchConfig {
    pub fn new(traffic: TrafficConfig, accounting: SlotAccounting, span_slots: u64) -> Self {
        BenchConfig { traffic, accounting, span_slots, w_max: DEFAULT_W_MAX, unit_failures: false }
    }
}

/// Largest backoff of slotted ALOHA after `k` collisions: min(2^k, W) - 1.
pub fn aloha_window(k: u32, w_max: u64) -> u64 {
    pow2_capped(k, w_max) - 1
}

/// Largest backoff of CSMA/CA after `k` collisions: min(2^(k+2), W).
pub fn csma_window(k: u32, w_max: u64) -> u64 {
    pow2_capped(k.saturating_add(2), w_max)
}

fn pow2_capped(e: u32, cap: u64) -> u64 {
    if e >= 63 {
        cap
    } else {
        (1u64 << e).min(cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackoffState {
    pub collisions: u32,
    pub pending: u64,
}

/// What happened in one protocol slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEvent {
    pub start: u64,
    pub len: u64,
    pub outcome: Observation,
    pub transmitters: Vec<usize>,
}

/// An ALOHA attempt in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Airtime {
    end: u64,
    collided: bool,
}

/// Shared state of a benchmark run: arrivals, per-terminal queues and
/// per-protocol contention state.
pub struct World {
    pub t: u64,
    pub packets: Vec<PacketRecord>,
    queues: Vec<VecDeque<usize>>,
    next_arrival: usize,
    pub backoff: Vec<BackoffState>,
    pub levels: Vec<u64>,
    airtime: Vec<Option<Airtime>>,
    rho: u64,
    w_max: u64,
    unit_failures: bool,
}

impl World {
    pub fn new(packets: Vec<PacketRecord>, n_terminals: usize, rho: u64, w_max: u64, unit_failures: bool) -> Self {
        World {
            t: 0,
            packets,
            queues: vec![VecDeque::new(); n_terminals],
            next_arrival: 0,
            backoff: vec![BackoffState::default(); n_terminals],
            levels: vec![0; n_terminals],
            airtime: vec![None; n_terminals],
            rho,
            w_max,
            unit_failures,
        }
    }

    pub fn backlogged(&self, terminal: usize) -> bool {
        !self.queues[terminal].is_empty()
    }

    /// Moves packets generated before `self.t` into their owners' queues;
    /// returns the terminals that just became backlogged.
    fn admit(&mut self) -> Vec<usize> {
        let mut fresh = Vec::new();
        while self.next_arrival < self.packets.len() && self.packets[self.next_arrival].arrival_slot < self.t {
            let owner = self.packets[self.next_arrival].owner_terminal;
            if self.queues[owner].is_empty() {
                fresh.push(owner);
            }
            self.queues[owner].push_back(self.next_arrival);
            self.next_arrival += 1;
        }
        fresh
    }

    fn deliver(&mut self, terminal: usize, departure: u64) {
        let p = self.queues[terminal].pop_front().expect("transmitter has a packet");
        self.packets[p].departure_slot = Some(departure);
    }

    fn failure_len(&self) -> u64 {
        if self.unit_failures {
            1
        } else {
            self.rho
        }
    }

    /// One unit slot of slotted ALOHA with binary exponential backoff.
    ///
    /// An attempt occupies `rho` consecutive unit slots and there is no
    /// carrier sense, so it fails if any other attempt overlaps it. Backoff
    /// counters keep running while others are on the air.
    pub fn step_slotted_aloha<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SlotEvent {
        for i in self.admit() {
            self.backoff[i] = BackoffState { collisions: 0, pending: 0 };
        }
        let start = self.t;
        for i in 0..self.queues.len() {
            if self.backlogged(i) && self.airtime[i].is_none() {
                if self.backoff[i].pending == 0 {
                    self.airtime[i] = Some(Airtime { end: start + self.rho, collided: false });
                } else {
                    self.backoff[i].pending -= 1;
                }
            }
        }
        let tx: Vec<usize> = (0..self.queues.len()).filter(|&i| self.airtime[i].is_some()).collect();
        let outcome = Observation::from_transmitters(tx.len());
        if outcome == Observation::Collision {
            for &i in &tx {
                let a = self.airtime[i].as_mut().expect("on air");
                a.collided = true;
                if self.unit_failures {
                    a.end = start + 1;
                }
            }
        }
        for &i in &tx {
            let a = self.airtime[i].expect("on air");
            if a.end != start + 1 {
                continue;
            }
            self.airtime[i] = None;
            if a.collided {
                let b = &mut self.backoff[i];
                b.collisions += 1;
                b.pending = rng.random_range(0..=aloha_window(b.collisions, self.w_max));
            } else {
                self.deliver(i, a.end);
                self.backoff[i] = BackoffState { collisions: 0, pending: 0 };
            }
        }
        self.t += 1;
        SlotEvent { start, len: 1, outcome, transmitters: tx }
    }

    /// One slot of the non-blocked stack algorithm.
    pub fn step_stack_algorithm<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SlotEvent {
        for i in self.admit() {
            self.levels[i] = 0;
        }
        let backlogged: Vec<bool> = (0..self.queues.len()).map(|i| self.backlogged(i)).collect();
        let tx: Vec<usize> = (0..self.queues.len()).filter(|&i| backlogged[i] && self.levels[i] == 0).collect();
        let start = self.t;
        let outcome = Observation::from_transmitters(tx.len());
        stack_feedback(&mut self.levels, &backlogged, &tx, outcome, || rng.random::<bool>());
        let len = match outcome {
            Observation::Success => {
                self.deliver(tx[0], start + self.rho);
                // a further packet of the winner enters like a new arrival
                self.levels[tx[0]] = 0;
                self.rho
            }
            _ => self.failure_len(),
        };
        self.t += len;
        SlotEvent { start, len, outcome, transmitters: tx }
    }

    /// One CSMA/CA contention slot (plus the data burst after a clean RTS).
    pub fn step_csma_ca<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SlotEvent {
        for i in self.admit() {
            self.backoff[i] = BackoffState { collisions: 0, pending: rng.random_range(0..=csma_window(0, self.w_max)) };
        }
        let tx: Vec<usize> =
            (0..self.queues.len()).filter(|&i| self.backlogged(i) && self.backoff[i].pending == 0).collect();
        let start = self.t;
        let outcome = Observation::from_transmitters(tx.len());
        let len = match outcome {
            Observation::Success => {
                // others hear the exchange and freeze through the data burst
                let i = tx[0];
                self.deliver(i, start + 1 + self.rho);
                self.backoff[i] = BackoffState { collisions: 0, pending: 0 };
                if self.backlogged(i) {
                    self.backoff[i].pending = rng.random_range(0..=csma_window(0, self.w_max));
                }
                1 + self.rho
            }
            _ => {
                for i in 0..self.queues.len() {
                    if self.backlogged(i) && !tx.contains(&i) {
                        self.backoff[i].pending = self.backoff[i].pending.saturating_sub(1);
                    }
                }
                for &i in &tx {
                    let b = &mut self.backoff[i];
                    b.collisions += 1;
                    b.pending = rng.random_range(0..=csma_window(b.collisions, self.w_max));
                }
                1
            }
        };
        self.t += len;
        SlotEvent { start, len, outcome, transmitters: tx }
    }
}

/// Level update of the stack algorithm. After a collision each transmitter
/// stays at level 0 when `stay()` is true and otherwise moves to level 1,
/// while every other backlogged terminal moves one level up. After an idle
/// or successful slot every positive level moves down.
pub fn stack_feedback<F: FnMut() -> bool>(
    levels: &mut [u64],
    backlogged: &[bool],
    transmitters: &[usize],
    outcome: Observation,
    mut stay: F,
) {
    match outcome {
        Observation::Collision => {
            for i in 0..levels.len() {
                if !backlogged[i] {
                    continue;
                }
                if transmitters.contains(&i) {
                    levels[i] = if stay() { 0 } else { 1 };
                } else {
                    levels[i] += 1;
                }
            }
        }
        Observation::Idle | Observation::Success => {
            for (i, l) in levels.iter_mut().enumerate() {
                if backlogged[i] && *l > 0 {
                    *l -= 1;
                }
            }
        }
    }
}

/// Runs a benchmark protocol over the traffic generated from `seed`; the
/// arrivals are identical to those of the reservation simulator.
pub fn run_benchmark(protocol: Protocol, cfg: &BenchConfig, seed: u64) -> Result<(Metrics, Vec<PacketRecord>), SimError> {
    cfg.traffic.validate()?;
    if cfg.accounting.rho == 0 || cfg.span_slots == 0 || cfg.w_max == 0 {
        return Err(SimError::Config("rho, span and w_max must be positive".into()));
    }
    let packets = generate_arrivals(&cfg.traffic, cfg.span_slots, &mut traffic_rng(seed));
    let mut rng = protocol_rng(seed);
    let mut world = World::new(packets, cfg.traffic.n_terminals, cfg.accounting.rho, cfg.w_max, cfg.unit_failures);
    while world.t < cfg.span_slots {
        match protocol {
            Protocol::Aloha => world.step_slotted_aloha(&mut rng),
            Protocol::Stack => world.step_stack_algorithm(&mut rng),
            Protocol::CsmaCa => world.step_csma_ca(&mut rng),
        };
    }
    let metrics = compute_metrics(&world.packets, cfg.span_slots, &cfg.accounting, Vec::new());
    Ok((metrics, world.packets))
}
