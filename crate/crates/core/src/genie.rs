//! Value iteration for the genie-aided (fully observed) model.
//!
//! The solve runs on reduced occupancies only: empty clusters are dropped
//! and cluster order is forgotten, which leaves the value function unchanged.
//! States whose clusters are all singletons are solved in closed form (serve
//! one singleton per slot) and stay pinned during the sweeps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::model::{
    enumerate_reduced_states, for_each_outcome, reduce, reduce_with_permutation, ActionVector, BinomialTable,
    ClusterOccupancy, ModelConfig, ModelError, ReducedOccupancy,
};

pub const EXPORT_VERSION: u32 = 1;

/// Sparse grid action: (cluster, k) pairs meaning p = k/d.
pub(crate) type GridAction = SmallVec<[(usize, u32); 4]>;

/// Candidate values closer than this count as a tie.
pub(crate) const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GenieError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("value iteration did not converge within {sweeps} sweeps (last delta {delta:e})")]
    NonConvergence { sweeps: usize, delta: f64 },
    #[error("no value for successor {0}")]
    MissingSuccessor(ReducedOccupancy),
    #[error("state has {active} active terminals but the table was solved for n_max = {n_max}")]
    BeyondTable { active: usize, n_max: usize },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("backup requested at the target state")]
    TargetBackup,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported export version {0}")]
    Version(u32),
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenieParams {
    pub d: u32,
    /// Maximum number of transmitting clusters; `None` searches the whole grid.
    pub support_limit: Option<usize>,
    pub epsilon: f64,
    pub max_sweeps: usize,
}

impl Default for GenieParams {
    fn default() -> Self {
        GenieParams { d: 10, support_limit: Some(2), epsilon: 1e-6, max_sweeps: 10_000 }
    }
}

/// Converged values and greedy actions for every reduced state up to `n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenieValueFunction {
    pub n_max: usize,
    pub params: GenieParams,
    values: BTreeMap<ReducedOccupancy, f64>,
    policy: BTreeMap<ReducedOccupancy, ActionVector>,
    /// Hash index over `values` for the hot lookup path.
    index: FxHashMap<ReducedOccupancy, f64>,
    /// Sup-norm change of each sweep.
    pub sweep_deltas: Vec<f64>,
    /// Bellman optimizations solved per sweep.
    pub updates_per_sweep: usize,
}

impl GenieValueFunction {
    /// V⁻ at a reduced state; zero at the target.
    pub fn value(&self, s: &ReducedOccupancy) -> Option<f64> {
        if s.is_target() {
            return Some(0.0);
        }
        self.index.get(s).copied()
    }

    pub fn action(&self, s: &ReducedOccupancy) -> Option<&ActionVector> {
        self.policy.get(s)
    }

    pub fn values(&self) -> &BTreeMap<ReducedOccupancy, f64> {
        &self.values
    }

    pub fn sweeps(&self) -> usize {
        self.sweep_deltas.len()
    }

    /// V(s) = V⁻(reduce(s)) for a full occupancy.
    pub fn state_value(&self, s: &ClusterOccupancy) -> Result<f64, GenieError> {
        let r = reduce(s);
        self.value(&r).ok_or(GenieError::BeyondTable { active: r.active(), n_max: self.n_max })
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), GenieError> {
        let export = GenieExport {
            version: EXPORT_VERSION,
            n_max: self.n_max,
            d: self.params.d,
            support_limit: self.params.support_limit,
            epsilon: self.params.epsilon,
            max_sweeps: self.params.max_sweeps,
            sweeps: self.sweeps(),
            entries: self
                .values
                .iter()
                .map(|(s, &value)| GenieEntry {
                    state: s.counts().to_vec(),
                    value,
                    action: self.policy[s].probs().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer_pretty(w, &export)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self, GenieError> {
        let export: GenieExport = serde_json::from_reader(r)?;
        if export.version != EXPORT_VERSION {
            return Err(GenieError::Version(export.version));
        }
        let mut values = BTreeMap::new();
        let mut policy = BTreeMap::new();
        for e in export.entries {
            let s = ReducedOccupancy::from_counts(&e.state);
            let mut a = ActionVector::new(e.action)?;
            if a.len() != s.clusters() {
                return Err(ModelError::DimensionMismatch { expected: s.clusters(), got: a.len() }.into());
            }
            if let Some(limit) = export.support_limit.filter(|&l| a.nonzero() <= l) {
                a = a.with_support_limit(limit)?;
            }
            values.insert(s.clone(), e.value);
            policy.insert(s, a);
        }
        let updates_per_sweep = values.keys().filter(|s| !s.all_singletons()).count();
        Ok(GenieValueFunction {
            index: values.iter().map(|(s, v)| (s.clone(), *v)).collect(),
            n_max: export.n_max,
            params: GenieParams {
                d: export.d,
                support_limit: export.support_limit,
                epsilon: export.epsilon,
                max_sweeps: export.max_sweeps,
            },
            values,
            policy,
            sweep_deltas: Vec::new(),
            updates_per_sweep,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GenieExport {
    version: u32,
    n_max: usize,
    d: u32,
    support_limit: Option<usize>,
    epsilon: f64,
    max_sweeps: usize,
    sweeps: usize,
    entries: Vec<GenieEntry>,
}

#[derive(Serialize, Deserialize)]
struct GenieEntry {
    state: Vec<u8>,
    value: f64,
    action: Vec<f64>,
}

/// Grid actions over `positions` with 1..=limit transmitting clusters, in
/// ascending lexicographic order of the full probability vector.
pub(crate) fn grid_actions(positions: &[usize], d: u32, limit: Option<usize>) -> Vec<GridAction> {
    let limit = limit.unwrap_or(positions.len()).min(positions.len());
    let mut out = Vec::new();
    let mut buf = GridAction::new();
    lex_rec(positions, 0, d, limit, &mut buf, &mut out);
    out
}

fn lex_rec(positions: &[usize], at: usize, d: u32, limit: usize, buf: &mut GridAction, out: &mut Vec<GridAction>) {
    if at == positions.len() {
        if !buf.is_empty() {
            out.push(buf.clone());
        }
        return;
    }
    // zero first: a zero here sorts before any nonzero value at this position
    lex_rec(positions, at + 1, d, limit, buf, out);
    if buf.len() < limit {
        for k in 1..=d {
            buf.push((positions[at], k));
            lex_rec(positions, at + 1, d, limit, buf, out);
            buf.pop();
        }
    }
}

pub(crate) fn to_action_vector(a: &GridAction, clusters: usize, d: u32, limit: Option<usize>) -> ActionVector {
    let mut k = vec![0u32; clusters];
    for &(i, v) in a {
        k[i] = v;
    }
    let av = ActionVector::on_grid(&k, d).expect("grid numerators within range");
    match limit {
        Some(l) => av.with_support_limit(l).expect("enumerated within limit"),
        None => av,
    }
}

/// Closed-form solution when every cluster is a singleton: serve the first
/// cluster surely, one terminal per slot. `Some((0, None))` at the target.
pub fn theorem3_shortcut(s: &ReducedOccupancy) -> Option<(f64, Option<ActionVector>)> {
    if s.is_target() {
        return Some((0.0, None));
    }
    if !s.all_singletons() {
        return None;
    }
    Some((s.active() as f64, Some(ActionVector::indicator(s.clusters(), 0))))
}

/// Dense value store over the reduced states solved so far.
struct ReducedValues {
    index: FxHashMap<ReducedOccupancy, usize>,
}

impl ReducedValues {
    fn lookup(&self, values: &[f64], s: &ReducedOccupancy) -> Result<f64, GenieError> {
        if s.is_target() {
            return Ok(0.0);
        }
        self.index.get(s).map(|&i| values[i]).ok_or_else(|| GenieError::MissingSuccessor(s.clone()))
    }
}

fn backup_indexed(
    s: &ReducedOccupancy,
    store: &ReducedValues,
    values: &[f64],
    table: &BinomialTable,
    limit: Option<usize>,
    cfg: &ModelConfig,
) -> Result<(f64, GridAction), GenieError> {
    if s.is_target() {
        return Err(GenieError::TargetBackup);
    }
    let occ = s.to_occupancy();
    let positions: Vec<usize> = (0..s.clusters()).collect();
    let mut best: Option<(f64, GridAction)> = None;
    for a in grid_actions(&positions, table.d(), limit) {
        let rows: SmallVec<[(usize, &[f64]); 4]> = a.iter().map(|&(i, k)| (i, table.row(k, occ.counts()[i]))).collect();
        let mut expected = 0.0;
        let mut missing = None;
        for_each_outcome(&occ, &rows, cfg, &mut |_, next, p| match store.lookup(values, &reduce(&next)) {
            Ok(v) => expected += p * v,
            Err(e) => missing = Some(e),
        });
        if let Some(e) = missing {
            return Err(e);
        }
        let q = 1.0 + expected;
        if best.as_ref().is_none_or(|(b, _)| q < b - TIE_TOLERANCE) {
            best = Some((q, a));
        }
    }
    Ok(best.expect("at least one grid action"))
}

/// One Bellman backup at reduced state `s` against the values in `v`.
/// Ties go to the lexicographically smallest action.
pub fn bellman_backup(
    s: &ReducedOccupancy,
    v: &GenieValueFunction,
    d: u32,
    support_limit: Option<usize>,
    cfg: &ModelConfig,
) -> Result<(f64, ActionVector), GenieError> {
    let index: FxHashMap<ReducedOccupancy, usize> = v.values.keys().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let values: Vec<f64> = v.values.values().copied().collect();
    let store = ReducedValues { index };
    let table = BinomialTable::new(d, cfg.n_max.max(s.active()));
    let (value, a) = backup_indexed(s, &store, &values, &table, support_limit, cfg)?;
    Ok((value, to_action_vector(&a, s.clusters(), d, support_limit)))
}

/// Modified value iteration over the reduced states with at most `cfg.n_max`
/// terminals; all-singleton states are pinned to their closed form.
pub fn solve_via(cfg: &ModelConfig, params: &GenieParams) -> Result<GenieValueFunction, GenieError> {
    cfg.validate()?;
    if !(params.epsilon > 0.0) {
        return Err(GenieError::InvalidEpsilon(params.epsilon));
    }
    if params.d == 0 {
        return Err(ModelError::InvalidConfig("grid denominator must be positive".into()).into());
    }
    let states = enumerate_reduced_states(cfg.n_max);
    let index: FxHashMap<ReducedOccupancy, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let store = ReducedValues { index };
    let table = BinomialTable::new(params.d, cfg.n_max);

    let pinned: Vec<bool> = states.iter().map(|s| s.all_singletons()).collect();
    let mut values: Vec<f64> =
        states.iter().zip(&pinned).map(|(s, &p)| if p { s.active() as f64 } else { 0.0 }).collect();
    let free: Vec<usize> = (0..states.len()).filter(|&i| !pinned[i]).collect();

    let mut deltas = Vec::new();
    loop {
        if deltas.len() >= params.max_sweeps {
            return Err(GenieError::NonConvergence { sweeps: deltas.len(), delta: *deltas.last().unwrap_or(&f64::NAN) });
        }
        let mut next = values.clone();
        for &i in &free {
            next[i] = backup_indexed(&states[i], &store, &values, &table, params.support_limit, cfg)?.0;
        }
        let delta = free.iter().map(|&i| (next[i] - values[i]).abs()).fold(0.0, f64::max);
        values = next;
        deltas.push(delta);
        if delta <= params.epsilon {
            break;
        }
    }

    let mut value_map = BTreeMap::new();
    let mut policy = BTreeMap::new();
    for (i, s) in states.iter().enumerate() {
        let action = if pinned[i] {
            let (_, a) = theorem3_shortcut(s).expect("pinned states are all singletons");
            let a = a.expect("non-target");
            match params.support_limit {
                Some(l) => a.with_support_limit(l)?,
                None => a,
            }
        } else {
            let (_, a) = backup_indexed(s, &store, &values, &table, params.support_limit, cfg)?;
            to_action_vector(&a, s.clusters(), params.d, params.support_limit)
        };
        value_map.insert(s.clone(), values[i]);
        policy.insert(s.clone(), action);
    }
    Ok(GenieValueFunction {
        index: value_map.iter().map(|(s, v)| (s.clone(), *v)).collect(),
        n_max: cfg.n_max,
        params: *params,
        values: value_map,
        policy,
        sweep_deltas: deltas,
        updates_per_sweep: free.len(),
    })
}

/// Value and action for a full occupancy, scattering the reduced action back
/// onto the original cluster indices (zero on empty clusters).
pub fn lift(s: &ClusterOccupancy, v: &GenieValueFunction) -> Result<(f64, ActionVector), GenieError> {
    let (r, perm) = reduce_with_permutation(s);
    if r.active() > v.n_max {
        return Err(GenieError::BeyondTable { active: r.active(), n_max: v.n_max });
    }
    if r.is_target() {
        return Ok((0.0, ActionVector::new(vec![0.0; s.clusters()])?));
    }
    let value = v.value(&r).ok_or_else(|| GenieError::MissingSuccessor(r.clone()))?;
    let reduced_action = v.action(&r).ok_or_else(|| GenieError::MissingSuccessor(r.clone()))?;
    let mut probs = vec![0.0; s.clusters()];
    for (k, &orig) in perm.iter().enumerate() {
        probs[orig] = reduced_action.probs()[k];
    }
    let mut a = ActionVector::new(probs)?;
    if let crate::model::Grid::Steps(d) = reduced_action.grid() {
        a = a.with_grid(d)?;
    }
    if let Some(l) = reduced_action.support_limit() {
        a = a.with_support_limit(l)?;
    }
    Ok((value, a))
}

/// Transmission rate for [`expected_slots_uniform_policy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UniformRate {
    /// Same p at every stage.
    Fixed(f64),
    /// p = 1/k while k terminals remain.
    PerStage,
}

/// Expected slots to clear `n` terminals when every remaining terminal sends
/// with a common probability: sum over k of 1 / (k p (1-p)^(k-1)).
pub fn expected_slots_uniform_policy(n: usize, rate: UniformRate) -> Result<f64, ModelError> {
    if let UniformRate::Fixed(p) = rate {
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::InvalidProbability(p));
        }
    }
    Ok((1..=n)
        .map(|k| {
            let p = match rate {
                UniformRate::Fixed(p) => p,
                UniformRate::PerStage => 1.0 / k as f64,
            };
            1.0 / (k as f64 * p * (1.0 - p).powi(k as i32 - 1))
        })
        .sum())
}
