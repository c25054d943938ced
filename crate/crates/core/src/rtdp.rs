//! Trial-based dynamic programming over quantized beliefs.
//!
//! Values live in a hash table keyed by the quantized belief. A backup
//! evaluates every grid action exactly (successor beliefs are not rounded)
//! and only rounds when reading or writing the table. Keys never seen before
//! are valued by the initializer: zero, or the belief-weighted genie values.

use std::io::{Read, Write};

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::belief::{BeliefError, BeliefState, QuantizedBelief, PRUNE_THRESHOLD};
use crate::genie::{grid_actions, to_action_vector, GenieError, GenieValueFunction, GridAction, TIE_TOLERANCE};
use crate::model::{apply_leavers, sample_step, ActionVector, BinomialTable, ClusterOccupancy, ModelConfig, ModelError};

pub const TABLE_VERSION: u32 = 1;

/// Trials longer than this are treated as runaway.
pub const DEFAULT_SLOT_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum RtdpError {
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Genie(#[from] GenieError),
    #[error("backup requested at a target belief")]
    TargetBackup,
    #[error("trial exceeded {0} slots")]
    SlotCap(usize),
    #[error("table was built with q = {table}, got q = {requested}")]
    QuantizationMismatch { table: u32, requested: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported table version {0}")]
    Version(u32),
}

/// How values of unseen keys are initialized.
#[derive(Debug, Clone)]
pub enum InitMode {
    Zero,
    Genie(GenieValueFunction),
}

impl InitMode {
    fn name(&self) -> &'static str {
        match self {
            InitMode::Zero => "zero",
            InitMode::Genie(_) => "genie",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub value: f64,
    pub visits: u64,
}

#[derive(Debug, Clone)]
pub struct ValueTable {
    q: u32,
    init: InitMode,
    entries: FxHashMap<QuantizedBelief, TableEntry>,
    backups: u64,
}

impl ValueTable {
    pub fn new(q: u32, init: InitMode) -> Self {
        assert!(q > 0, "quantization parameter must be positive");
        ValueTable { q, init, entries: FxHashMap::default(), backups: 0 }
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn init_mode(&self) -> &InitMode {
        &self.init
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total writes performed; never less than [`len`](Self::len).
    pub fn backups(&self) -> u64 {
        self.backups
    }

    pub fn get(&self, key: &QuantizedBelief) -> Option<&TableEntry> {
        self.entries.get(key)
    }

    /// Overwrites the value at `key`.
    pub fn write(&mut self, key: QuantizedBelief, value: f64) {
        self.backups += 1;
        let e = self.entries.entry(key).or_insert(TableEntry { value, visits: 0 });
        e.value = value;
        e.visits += 1;
    }

    /// Table value at the quantized key, else the initializer.
    pub fn lookup(&self, b: &BeliefState) -> Result<f64, RtdpError> {
        if b.is_target() {
            return Ok(0.0);
        }
        match self.entries.get(&b.quantize(self.q)) {
            Some(e) => Ok(e.value),
            None => init_value(b, self),
        }
    }

    /// Entries in canonical key order.
    pub fn sorted_entries(&self) -> Vec<(&QuantizedBelief, &TableEntry)> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn write_json<W: Write>(&self, w: W, params: &RtdpParams) -> Result<(), RtdpError> {
        let export = TableExport {
            version: TABLE_VERSION,
            q: self.q,
            d: params.d,
            support_limit: params.support_limit,
            init_mode: self.init.name().to_string(),
            entries: self
                .sorted_entries()
                .into_iter()
                .map(|(k, e)| TableExportEntry {
                    key: k.entries().iter().map(|(s, n)| (s.counts().to_vec(), *n)).collect(),
                    value: e.value,
                    visits: e.visits,
                })
                .collect(),
        };
        serde_json::to_writer(w, &export)?;
        Ok(())
    }

    /// Loads a table. The initializer is not stored in the file, so the
    /// caller supplies it (a genie table for `"genie"` files).
    pub fn read_json<R: Read>(r: R, init: InitMode) -> Result<(Self, RtdpParams), RtdpError> {
        let export: TableExport = serde_json::from_reader(r)?;
        if export.version != TABLE_VERSION {
            return Err(RtdpError::Version(export.version));
        }
        let mut table = ValueTable::new(export.q, init);
        for e in export.entries {
            let entries = e
                .key
                .into_iter()
                .map(|(c, n)| Ok((ClusterOccupancy::new(&c)?, n)))
                .collect::<Result<Vec<_>, ModelError>>()?;
            let key = QuantizedBelief::from_entries(export.q, entries)?;
            table.backups += e.visits;
            table.entries.insert(key, TableEntry { value: e.value, visits: e.visits });
        }
        let params = RtdpParams { d: export.d, support_limit: export.support_limit, ..RtdpParams::default() };
        Ok((table, params))
    }
}

#[derive(Serialize, Deserialize)]
struct TableExport {
    version: u32,
    q: u32,
    d: u32,
    support_limit: Option<usize>,
    init_mode: String,
    entries: Vec<TableExportEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableExportEntry {
    key: Vec<(Vec<u8>, u32)>,
    value: f64,
    visits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtdpParams {
    pub d: u32,
    pub support_limit: Option<usize>,
    pub max_slots: usize,
}

impl Default for RtdpParams {
    fn default() -> Self {
        RtdpParams { d: 10, support_limit: Some(2), max_slots: DEFAULT_SLOT_CAP }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub slots_used: usize,
    pub trajectory_length: usize,
    pub actions_taken: Vec<ActionVector>,
    pub terminal_reached: bool,
}

/// Initial value of an unseen belief.
pub fn init_value(b: &BeliefState, table: &ValueTable) -> Result<f64, RtdpError> {
    match &table.init {
        InitMode::Zero => Ok(0.0),
        InitMode::Genie(g) => {
            let mut total = 0.0;
            for (s, p) in b.support() {
                total += p * g.state_value(s)?;
            }
            Ok(total)
        }
    }
}

/// Reusable scratch space for backups: leaver tables for the current grid,
/// per-subset successor structures, and accumulators.
pub struct BackupWorkspace {
    table: BinomialTable,
    kernels: FxHashMap<SmallVec<[usize; 4]>, SubsetKernel>,
    acc: [Vec<f64>; 3],
    key: Option<QuantizedBelief>,
}

impl BackupWorkspace {
    pub fn new(d: u32, n_max: usize) -> Self {
        BackupWorkspace {
            table: BinomialTable::new(d, n_max),
            kernels: FxHashMap::default(),
            acc: Default::default(),
            key: None,
        }
    }

    fn ensure(&mut self, d: u32, n_max: usize) {
        if self.table.d() != d || self.table.n_max() < n_max {
            self.table = BinomialTable::new(d, n_max.max(self.table.n_max()));
        }
    }
}

/// One support state paired with one leaver pattern over the transmitting
/// clusters of a subset.
struct Term {
    weight: f64,
    etas: SmallVec<[u8; 4]>,
    leavers: SmallVec<[u8; 4]>,
    obs: usize,
    id: usize,
}

/// Successor structure of a belief when a fixed set of clusters transmits.
/// The successor states do not depend on the probabilities, only the
/// weights do, so every grid point over the subset reuses this.
struct SubsetKernel {
    terms: Vec<Term>,
    /// Distinct successors per observation, canonically ordered.
    states: [Vec<ClusterOccupancy>; 3],
    /// Initializer value of each successor state.
    init: [Vec<f64>; 3],
}

impl SubsetKernel {
    fn build(b: &BeliefState, clusters: &[usize], vt: &ValueTable, cfg: &ModelConfig) -> Result<Self, RtdpError> {
        let mut interned: [FxHashMap<ClusterOccupancy, usize>; 3] = Default::default();
        let mut states: [Vec<ClusterOccupancy>; 3] = Default::default();
        let mut terms = Vec::new();
        let mut full = vec![0u8; b.clusters()];
        for (s, w) in b.support() {
            let etas: SmallVec<[u8; 4]> = clusters.iter().map(|&c| s.counts()[c]).collect();
            let mut leavers: SmallVec<[u8; 4]> = SmallVec::from_elem(0, clusters.len());
            loop {
                for (&c, &l) in clusters.iter().zip(&leavers) {
                    full[c] = l;
                }
                let (next, o) = apply_leavers(s, &full, cfg);
                let o = o as usize;
                let id = *interned[o].entry(next).or_insert_with_key(|k| {
                    states[o].push(k.clone());
                    states[o].len() - 1
                });
                terms.push(Term { weight: *w, etas: etas.clone(), leavers: leavers.clone(), obs: o, id });
                // odometer over 0..=eta per transmitting cluster
                let mut i = 0;
                while i < leavers.len() && leavers[i] == etas[i] {
                    leavers[i] = 0;
                    i += 1;
                }
                if i == leavers.len() {
                    break;
                }
                leavers[i] += 1;
            }
        }
        for c in clusters {
            full[*c] = 0;
        }
        // renumber successors into canonical order
        let mut init: [Vec<f64>; 3] = Default::default();
        let mut remap: [Vec<usize>; 3] = Default::default();
        for o in 0..3 {
            let mut order: Vec<usize> = (0..states[o].len()).collect();
            order.sort_by(|&x, &y| states[o][x].cmp(&states[o][y]));
            remap[o] = vec![0; order.len()];
            for (rank, &old) in order.iter().enumerate() {
                remap[o][old] = rank;
            }
            let sorted: Vec<ClusterOccupancy> = order.iter().map(|&i| states[o][i].clone()).collect();
            init[o] = match &vt.init {
                InitMode::Zero => vec![0.0; sorted.len()],
                InitMode::Genie(g) => sorted.iter().map(|s| g.state_value(s)).collect::<Result<_, _>>()?,
            };
            states[o] = sorted;
        }
        for t in &mut terms {
            t.id = remap[t.obs][t.id];
        }
        Ok(SubsetKernel { terms, states, init })
    }

    /// Unnormalized successor weights for grid numerators `ks` (aligned with
    /// the subset's clusters); returns the observation masses.
    fn accumulate(&self, ks: &[u32], table: &BinomialTable, acc: &mut [Vec<f64>; 3]) -> [f64; 3] {
        for o in 0..3 {
            acc[o].clear();
            acc[o].resize(self.states[o].len(), 0.0);
        }
        let mut mass = [0.0; 3];
        for t in &self.terms {
            let mut w = t.weight;
            for (c, &k) in ks.iter().enumerate() {
                w *= table.row(k, t.etas[c])[t.leavers[c] as usize];
            }
            if w == 0.0 {
                continue;
            }
            acc[t.obs][t.id] += w;
            mass[t.obs] += w;
        }
        mass
    }

    /// Value of the posterior after observation `o`, normalized and pruned
    /// the same way as a Bayes update. `None` when nothing survives pruning.
    fn successor_value(
        &self,
        o: usize,
        acc: &[f64],
        mass: f64,
        vt: &ValueTable,
        key: &mut QuantizedBelief,
    ) -> Option<f64> {
        let mut kept = 0.0;
        let mut dropped = false;
        let mut all_target = true;
        for (id, &w) in acc.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = w / mass;
            if p < PRUNE_THRESHOLD {
                dropped = true;
            } else {
                kept += p;
                all_target &= self.states[o][id].is_target();
            }
        }
        if kept == 0.0 {
            return None;
        }
        if all_target {
            return Some(0.0);
        }
        let renorm = if dropped { kept } else { 1.0 };
        let qf = vt.q as f64;
        let entries = key.entries_mut();
        entries.clear();
        let mut init = 0.0;
        for (id, &w) in acc.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut p = w / mass;
            if p < PRUNE_THRESHOLD {
                continue;
            }
            if dropped {
                p /= renorm;
            }
            init += p * self.init[o][id];
            let k = (p * qf).round() as u32;
            if k > 0 {
                entries.push((self.states[o][id].clone(), k));
            }
        }
        Some(vt.entries.get(key).map_or(init, |e| e.value))
    }
}

/// One backup at `b`: B1 beliefs resolve in closed form (transmit in every
/// cluster, value 1); otherwise the grid is searched.
pub fn rtdp_backup(
    b: &BeliefState,
    table: &ValueTable,
    params: &RtdpParams,
    cfg: &ModelConfig,
) -> Result<(ActionVector, f64), RtdpError> {
    let mut ws = BackupWorkspace::new(params.d, cfg.n_max.max(b.max_active()));
    rtdp_backup_with(b, table, params, cfg, &mut ws)
}

pub fn rtdp_backup_with(
    b: &BeliefState,
    table: &ValueTable,
    params: &RtdpParams,
    cfg: &ModelConfig,
    ws: &mut BackupWorkspace,
) -> Result<(ActionVector, f64), RtdpError> {
    if b.is_target() {
        return Err(RtdpError::TargetBackup);
    }
    if b.is_b1() {
        return Ok((ActionVector::all_ones(b.clusters()), 1.0));
    }
    grid_search_backup(b, table, params, cfg, ws)
}

/// Grid minimization without the B1 shortcut. Actions that transmit in a
/// cluster empty under every support state are skipped: they act exactly
/// like the same action with that entry zeroed, which sorts first.
pub fn grid_search_backup(
    b: &BeliefState,
    table: &ValueTable,
    params: &RtdpParams,
    cfg: &ModelConfig,
    ws: &mut BackupWorkspace,
) -> Result<(ActionVector, f64), RtdpError> {
    if b.is_target() {
        return Err(RtdpError::TargetBackup);
    }
    ws.ensure(params.d, cfg.n_max.max(b.max_active()));
    ws.kernels.clear();
    let mut key = match ws.key.take() {
        Some(k) if k.q() == table.q => k,
        _ => QuantizedBelief::scratch(table.q),
    };
    let live = b.live_clusters();
    let mut best: Option<(f64, GridAction)> = None;
    let mut ks: SmallVec<[u32; 4]> = SmallVec::new();
    for a in grid_actions(&live, params.d, params.support_limit) {
        let subset: SmallVec<[usize; 4]> = a.iter().map(|&(c, _)| c).collect();
        ks.clear();
        ks.extend(a.iter().map(|&(_, k)| k));
        let kernel = match ws.kernels.entry(subset) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                let k = SubsetKernel::build(b, e.key(), table, cfg)?;
                e.insert(k)
            }
        };
        let mass = kernel.accumulate(&ks, &ws.table, &mut ws.acc);
        let mut value = 1.0;
        for (o, &m) in mass.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            if let Some(v) = kernel.successor_value(o, &ws.acc[o], m, table, &mut key) {
                value += m * v;
            }
        }
        if best.as_ref().is_none_or(|(v, _)| value < v - TIE_TOLERANCE) {
            best = Some((value, a));
        }
    }
    ws.key = Some(key);
    let (value, a) = best.expect("a non-target belief has a live cluster");
    Ok((to_action_vector(&a, b.clusters(), params.d, params.support_limit), value))
}

/// One reservation process from `b0` with hidden state `true_state`,
/// updating the table along the way.
pub fn run_trial<R: Rng + ?Sized>(
    table: &mut ValueTable,
    b0: &BeliefState,
    true_state: &ClusterOccupancy,
    rng: &mut R,
    params: &RtdpParams,
    cfg: &ModelConfig,
) -> Result<TrialResult, RtdpError> {
    let mut ws = BackupWorkspace::new(params.d, cfg.n_max.max(b0.max_active()));
    run_trial_with(table, b0, true_state, rng, params, cfg, &mut ws)
}

pub fn run_trial_with<R: Rng + ?Sized>(
    table: &mut ValueTable,
    b0: &BeliefState,
    true_state: &ClusterOccupancy,
    rng: &mut R,
    params: &RtdpParams,
    cfg: &ModelConfig,
    ws: &mut BackupWorkspace,
) -> Result<TrialResult, RtdpError> {
    let mut b = b0.clone();
    let mut s = true_state.clone();
    let mut actions = Vec::new();
    while !b.is_target() {
        if actions.len() >= params.max_slots {
            return Err(RtdpError::SlotCap(params.max_slots));
        }
        let (a, value) = rtdp_backup_with(&b, table, params, cfg, ws)?;
        table.write(b.quantize(table.q), value);
        let (next, o) = sample_step(&s, &a, cfg, rng)?;
        debug_assert!(next.active() <= s.active() && next.clusters() >= s.clusters());
        b = b.update(&a, o, cfg)?;
        s = next;
        actions.push(a);
    }
    Ok(TrialResult {
        slots_used: actions.len(),
        trajectory_length: actions.len(),
        actions_taken: actions,
        terminal_reached: true,
    })
}

/// Draws a support state of `b` with its probability.
pub fn sample_state<R: Rng + ?Sized>(b: &BeliefState, rng: &mut R) -> ClusterOccupancy {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, p) in b.support() {
        acc += p;
        if u < acc {
            return s.clone();
        }
    }
    b.support().last().expect("beliefs are non-empty").0.clone()
}

/// Per-trial costs and table sizes from a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub slots: Vec<usize>,
    pub table_sizes: Vec<usize>,
}

impl LearningCurve {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Trailing mean over the last `window` trials (fewer at the start).
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.slots, window)
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.slots.is_empty()).then(|| self.slots.iter().sum::<usize>() as f64 / self.slots.len() as f64)
    }

    /// `trial_index,slots_used,moving_avg_40,table_size`
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "trial_index,slots_used,moving_avg_40,table_size")?;
        for (i, (s, ma)) in self.slots.iter().zip(self.moving_average(40)).enumerate() {
            writeln!(w, "{i},{s},{ma},{}", self.table_sizes[i])?;
        }
        Ok(())
    }
}

pub fn moving_average(xs: &[usize], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0usize;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum as f64 / (i + 1).min(window) as f64);
    }
    out
}

/// Runs `n_trials` trials from `b0`, each against a hidden state sampled
/// from `b0`; the table carries over between trials.
pub fn train<R: Rng + ?Sized>(
    table: &mut ValueTable,
    b0: &BeliefState,
    n_trials: usize,
    rng: &mut R,
    params: &RtdpParams,
    cfg: &ModelConfig,
) -> Result<LearningCurve, RtdpError> {
    let mut ws = BackupWorkspace::new(params.d, cfg.n_max.max(b0.max_active()));
    let mut curve = LearningCurve::default();
    for _ in 0..n_trials {
        let s = sample_state(b0, rng);
        let r = run_trial_with(table, b0, &s, rng, params, cfg, &mut ws)?;
        curve.slots.push(r.slots_used);
        curve.table_sizes.push(table.len());
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::build_initial_belief;
    use crate::genie::{solve_via, GenieParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn occ(c: &[u8]) -> ClusterOccupancy {
        ClusterOccupancy::new(c).unwrap()
    }

    fn belief(entries: &[(&[u8], f64)]) -> BeliefState {
        BeliefState::new(entries.iter().map(|(c, p)| (occ(c), *p)).collect()).unwrap()
    }

    fn genie_table(q: u32, n_max: usize, d: u32) -> ValueTable {
        let g = solve_via(&ModelConfig::new(n_max), &GenieParams { d, ..Default::default() }).unwrap();
        ValueTable::new(q, InitMode::Genie(g))
    }

    #[test]
    fn init_values() {
        let t = genie_table(10, 3, 10);
        assert_eq!(init_value(&belief(&[(&[1], 1.0)]), &t).unwrap(), 1.0);
        let v = init_value(&belief(&[(&[1], 0.5), (&[2], 0.5)]), &t).unwrap();
        assert!((v - 2.0).abs() < 1e-6);
        let z = ValueTable::new(10, InitMode::Zero);
        assert_eq!(init_value(&belief(&[(&[1], 0.5), (&[2], 0.5)]), &z).unwrap(), 0.0);
        assert!(init_value(&belief(&[(&[4], 1.0)]), &t).is_err());
    }

    #[test]
    fn backup_examples() {
        let cfg = ModelConfig::new(3);
        let t = genie_table(10, 3, 10);
        let p = RtdpParams::default();

        let (a, v) = rtdp_backup(&belief(&[(&[1, 0], 0.5), (&[0, 1], 0.5)]), &t, &p, &cfg).unwrap();
        assert_eq!((a.probs().to_vec(), v), (vec![1.0, 1.0], 1.0));

        let (a, v) = rtdp_backup(&belief(&[(&[1], 1.0)]), &t, &p, &cfg).unwrap();
        assert_eq!((a.probs().to_vec(), v), (vec![1.0], 1.0));

        let (a, v) = rtdp_backup(&belief(&[(&[2], 1.0)]), &t, &p, &cfg).unwrap();
        assert!((v - 3.0).abs() < 1e-6, "{v}");
        assert_eq!(a.probs(), &[0.5]);

        assert!(matches!(rtdp_backup(&belief(&[(&[0], 1.0)]), &t, &p, &cfg), Err(RtdpError::TargetBackup)));
    }

    #[test]
    fn b1_shortcut_matches_search() {
        let cfg = ModelConfig::new(3);
        // a zero initializer would score every action at 1
        let t = genie_table(10, 3, 4);
        let p = RtdpParams { d: 4, support_limit: None, ..Default::default() };
        let b = belief(&[(&[0, 1, 0], 0.3), (&[1, 0, 0], 0.2), (&[0, 0, 0], 0.5)]);
        let mut ws = BackupWorkspace::new(4, 3);
        let (a, v) = grid_search_backup(&b, &t, &p, &cfg, &mut ws).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(a.probs(), &[1.0, 1.0, 0.0]);
    }

    /// Straightforward backup through the public Bayes update, one action at a time.
    fn reference_backup(b: &BeliefState, t: &ValueTable, p: &RtdpParams, cfg: &ModelConfig) -> (Vec<f64>, f64) {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for ga in grid_actions(&b.live_clusters(), p.d, p.support_limit) {
            let a = to_action_vector(&ga, b.clusters(), p.d, p.support_limit);
            let lik = b.observation_likelihoods(&a, cfg).unwrap();
            let mut value = 1.0;
            for o in crate::model::Observation::ALL {
                if lik[o as usize] > 0.0 {
                    if let Ok(next) = b.update(&a, o, cfg) {
                        value += lik[o as usize] * t.lookup(&next).unwrap();
                    }
                }
            }
            if best.as_ref().map_or(true, |(v, _)| value < v - 1e-9) {
                best = Some((value, a.probs().to_vec()));
            }
        }
        let (v, a) = best.unwrap();
        (a, v)
    }

    #[test]
    fn fast_backup_matches_reference() {
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = genie_table(10, 5, 6);
        let p = RtdpParams { d: 6, ..Default::default() };
        let b0 = build_initial_belief(&[0.1, 0.1, 0.3, 0.3, 0.2], false).unwrap();
        // populate some table entries so both lookup branches are exercised
        train(&mut t, &b0, 20, &mut rng, &p, &cfg).unwrap();
        let mut ws = BackupWorkspace::new(6, 5);
        let mut checked = 0;
        for _ in 0..20 {
            let mut b = b0.clone();
            let mut s = sample_state(&b0, &mut rng);
            while !b.is_target() && !b.is_b1() {
                let (a, v) = grid_search_backup(&b, &t, &p, &cfg, &mut ws).unwrap();
                let (ra, rv) = reference_backup(&b, &t, &p, &cfg);
                assert!((v - rv).abs() < 1e-9, "{b}: {v} vs {rv}");
                assert_eq!(a.probs(), ra.as_slice(), "{b}");
                checked += 1;
                let (next, o) = sample_step(&s, &a, &cfg, &mut rng).unwrap();
                b = b.update(&a, o, &cfg).unwrap();
                s = next;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn pruned_clusters_receive_no_mass() {
        let cfg = ModelConfig::new(3);
        let t = ValueTable::new(10, InitMode::Zero);
        let b = belief(&[(&[0, 2], 0.5), (&[0, 3], 0.5)]);
        let (a, _) = rtdp_backup(&b, &t, &RtdpParams::default(), &cfg).unwrap();
        assert_eq!(a.probs()[0], 0.0);
    }

    #[test]
    fn trial_examples() {
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = genie_table(10, 5, 10);
        let r = run_trial(&mut t, &belief(&[(&[1], 1.0)]), &occ(&[1]), &mut rng, &RtdpParams::default(), &cfg).unwrap();
        assert_eq!(r.slots_used, 1);
        assert!(r.terminal_reached);
        assert_eq!(t.len(), 1);

        // nobody is there, but the belief must still be driven to the target
        let b0 = build_initial_belief(&[0.3, 0.2], true).unwrap();
        let r = run_trial(&mut t, &b0, &occ(&[0]), &mut rng, &RtdpParams::default(), &cfg).unwrap();
        assert!(r.slots_used >= 1);
        assert_eq!(r.slots_used, r.trajectory_length);
        assert!(t.len() as u64 <= t.backups());
    }

    #[test]
    fn slot_cap_is_enforced() {
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = ValueTable::new(10, InitMode::Zero);
        let p = RtdpParams { max_slots: 1, ..Default::default() };
        let err = run_trial(&mut t, &belief(&[(&[3], 1.0)]), &occ(&[3]), &mut rng, &p, &cfg).unwrap_err();
        assert!(matches!(err, RtdpError::SlotCap(1)));
    }

    #[test]
    fn training_curve() {
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = genie_table(10, 5, 10);
        let curve = train(&mut t, &belief(&[(&[1], 1.0)]), 1, &mut rng, &RtdpParams::default(), &cfg).unwrap();
        assert_eq!(curve.slots, vec![1]);

        let b0 = build_initial_belief(&[0.1, 0.1, 0.3, 0.3, 0.2], false).unwrap();
        let curve = train(&mut t, &b0, 30, &mut rng, &RtdpParams::default(), &cfg).unwrap();
        assert_eq!(curve.len(), 30);
        assert!(curve.table_sizes.windows(2).all(|w| w[0] <= w[1]));
        let mut csv = Vec::new();
        curve.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert!(text.starts_with("trial_index,slots_used,moving_avg_40,table_size\n0,"));
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[2, 4, 6, 8], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[], 40), Vec::<f64>::new());
    }

    #[test]
    fn table_round_trip() {
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = ValueTable::new(10, InitMode::Zero);
        let b0 = build_initial_belief(&[0.2, 0.3, 0.5], false).unwrap();
        let p = RtdpParams::default();
        train(&mut t, &b0, 10, &mut rng, &p, &cfg).unwrap();
        let mut buf = Vec::new();
        t.write_json(&mut buf, &p).unwrap();
        let (back, bp) = ValueTable::read_json(buf.as_slice(), InitMode::Zero).unwrap();
        assert_eq!(bp.d, p.d);
        assert_eq!(back.len(), t.len());
        for (k, e) in t.sorted_entries() {
            assert_eq!(back.get(k), Some(e));
        }
    }

    #[test]
    fn sampling_follows_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = belief(&[(&[1], 0.25), (&[2], 0.75)]);
        let n = 20_000;
        let ones = (0..n).filter(|_| sample_state(&b, &mut rng) == occ(&[1])).count();
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        assert!((ones as f64 - 0.25 * n as f64).abs() < 4.0 * sigma);
    }
}
