//! Belief states over cluster occupancies: Bayes update, quantized table keys,
//! and recognition of the beliefs whose optimal action is known in closed form.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    for_each_outcome, leaver_pmf, ActionVector, ClusterOccupancy, ModelConfig, ModelError, Observation,
};

/// Posterior entries below this are treated as numerical dust.
pub const PRUNE_THRESHOLD: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("belief has no support")]
    Empty,
    #[error("support states disagree on the cluster count ({0} vs {1})")]
    MixedClusters(usize, usize),
    #[error("invalid probability mass: {0}")]
    InvalidMass(String),
    #[error("observation {observation} has zero likelihood under the current belief")]
    Inconsistent { observation: Observation },
}

/// Sparse distribution over occupancies that all share one cluster count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    /// Canonically ordered, strictly positive entries.
    support: Vec<(ClusterOccupancy, f64)>,
    clusters: usize,
}

impl BeliefState {
    pub fn new(entries: Vec<(ClusterOccupancy, f64)>) -> Result<Self, BeliefError> {
        let first = entries.first().ok_or(BeliefError::Empty)?;
        let clusters = first.0.clusters();
        let mut sum = 0.0;
        for (s, p) in &entries {
            if s.clusters() != clusters {
                return Err(BeliefError::MixedClusters(clusters, s.clusters()));
            }
            if !(*p >= 0.0) {
                return Err(BeliefError::InvalidMass(format!("negative or NaN probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(BeliefError::InvalidMass(format!("probabilities sum to {sum}")));
        }
        let mut support = merge_sorted(entries);
        support.retain(|(_, p)| *p > 0.0);
        if support.is_empty() {
            return Err(BeliefError::Empty);
        }
        Ok(BeliefState { support, clusters })
    }

    pub fn point(s: ClusterOccupancy) -> Self {
        let clusters = s.clusters();
        BeliefState { support: vec![(s, 1.0)], clusters }
    }

    pub fn support(&self) -> &[(ClusterOccupancy, f64)] {
        &self.support
    }

    /// Cluster count shared by every support state (b_M).
    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn prob(&self, s: &ClusterOccupancy) -> f64 {
        self.support.binary_search_by(|(t, _)| t.cmp(s)).map(|i| self.support[i].1).unwrap_or(0.0)
    }

    /// Largest active-terminal count with positive probability.
    pub fn max_active(&self) -> usize {
        self.support.iter().map(|(s, _)| s.active()).max().unwrap_or(0)
    }

    /// Clusters that hold a terminal in at least one support state.
    pub fn live_clusters(&self) -> Vec<usize> {
        (0..self.clusters).filter(|&i| self.support.iter().any(|(s, _)| s.counts()[i] > 0)).collect()
    }

    /// Every support state has no active terminal.
    pub fn is_target(&self) -> bool {
        self.support.iter().all(|(s, _)| s.is_target())
    }

    /// At most one terminal remains, and possibly exactly one.
    pub fn is_b1(&self) -> bool {
        self.support.iter().all(|(s, _)| s.active() <= 1) && self.support.iter().any(|(s, _)| s.active() == 1)
    }

    /// Probability of each observation after applying `a`.
    pub fn observation_likelihoods(&self, a: &ActionVector, cfg: &ModelConfig) -> Result<[f64; 3], BeliefError> {
        let rows = DenseRows::new(a, cfg.n_max.max(self.max_active()));
        self.check_action(a)?;
        let mut buckets = Buckets::default();
        Ok(propagate(self, &rows, cfg, &mut buckets))
    }

    pub fn observation_likelihood(&self, a: &ActionVector, o: Observation, cfg: &ModelConfig) -> Result<f64, BeliefError> {
        Ok(self.observation_likelihoods(a, cfg)?[o as usize])
    }

    /// Bayes update after applying `a` and observing `o`.
    pub fn update(&self, a: &ActionVector, o: Observation, cfg: &ModelConfig) -> Result<BeliefState, BeliefError> {
        self.check_action(a)?;
        let rows = DenseRows::new(a, cfg.n_max.max(self.max_active()));
        let mut buckets = Buckets::default();
        let mass = propagate(self, &rows, cfg, &mut buckets);
        let bucket = std::mem::take(&mut buckets.0[o as usize]);
        posterior(bucket, mass[o as usize]).ok_or(BeliefError::Inconsistent { observation: o })
    }

    fn check_action(&self, a: &ActionVector) -> Result<(), BeliefError> {
        if a.len() != self.clusters {
            return Err(ModelError::DimensionMismatch { expected: self.clusters, got: a.len() }.into());
        }
        Ok(())
    }

    pub fn quantize(&self, q: u32) -> QuantizedBelief {
        QuantizedBelief::from_sorted(&self.support, q)
    }

    /// Expected value of a per-state function.
    pub fn expect<F: FnMut(&ClusterOccupancy) -> f64>(&self, mut f: F) -> f64 {
        self.support.iter().map(|(s, p)| p * f(s)).sum()
    }
}

impl fmt::Display for BeliefState {
    /// `{(1,2):0.3,(3):0.7}`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (s, p)) in self.support.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}:{p}")?;
        }
        f.write_str("}")
    }
}

/// Belief-update entry point mirroring the free-function form.
pub fn belief_update(
    b: &BeliefState,
    a: &ActionVector,
    o: Observation,
    cfg: &ModelConfig,
) -> Result<BeliefState, BeliefError> {
    b.update(a, o, cfg)
}

pub fn observation_likelihood(
    b: &BeliefState,
    a: &ActionVector,
    o: Observation,
    cfg: &ModelConfig,
) -> Result<f64, BeliefError> {
    b.observation_likelihood(a, o, cfg)
}

pub fn quantize(b: &BeliefState, q: u32) -> QuantizedBelief {
    b.quantize(q)
}

pub fn is_b1(b: &BeliefState) -> bool {
    b.is_b1()
}

pub fn is_target(b: &BeliefState) -> bool {
    b.is_target()
}

/// Single-cluster belief with `dist[i]` on i+1 active terminals. With
/// `include_zero` the remaining mass goes to the empty cluster; otherwise
/// `dist` must sum to one.
pub fn build_initial_belief(dist: &[f64], include_zero: bool) -> Result<BeliefState, BeliefError> {
    if dist.len() > u8::MAX as usize {
        return Err(BeliefError::InvalidMass(format!("{} terminal counts exceed the 255 limit", dist.len())));
    }
    let mut entries = Vec::with_capacity(dist.len() + 1);
    let mut sum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(BeliefError::InvalidMass(format!("entry {i} is {p}")));
        }
        sum += p;
        entries.push((ClusterOccupancy::single(i as u8 + 1), p));
    }
    if sum > 1.0 + SUM_TOLERANCE {
        return Err(BeliefError::InvalidMass(format!("distribution sums to {sum} > 1")));
    }
    if include_zero {
        let rest = (1.0 - sum).max(0.0);
        if rest > 0.0 {
            entries.push((ClusterOccupancy::single(0), rest));
        }
    }
    BeliefState::new(entries)
}

/// Belief whose probabilities are rounded to multiples of 1/q; used as a
/// value-table key. Entries are canonically ordered with zeros dropped, so
/// they need not sum to one.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuantizedBelief {
    q: u32,
    entries: Vec<(ClusterOccupancy, u32)>,
}

impl QuantizedBelief {
    fn from_sorted(support: &[(ClusterOccupancy, f64)], q: u32) -> Self {
        let qf = q as f64;
        let entries = support
            .iter()
            .filter_map(|(s, p)| {
                // f64::round ties away from zero
                let k = (p * qf).round() as u32;
                (k > 0).then(|| (s.clone(), k))
            })
            .collect();
        QuantizedBelief { q, entries }
    }

    /// Rebuilds a key from stored (state, numerator) pairs, restoring the
    /// canonical order. Zero numerators and mixed cluster counts are rejected.
    pub fn from_entries(q: u32, mut entries: Vec<(ClusterOccupancy, u32)>) -> Result<Self, BeliefError> {
        let first = entries.first().ok_or(BeliefError::Empty)?;
        let clusters = first.0.clusters();
        if let Some((s, _)) = entries.iter().find(|(s, _)| s.clusters() != clusters) {
            return Err(BeliefError::MixedClusters(clusters, s.clusters()));
        }
        if q == 0 || entries.iter().any(|&(_, k)| k == 0) {
            return Err(BeliefError::InvalidMass("zero numerator or denominator in quantized key".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(BeliefError::InvalidMass("duplicate state in quantized key".into()));
        }
        Ok(QuantizedBelief { q, entries })
    }

    /// Empty key to be filled in place by hot loops.
    pub(crate) fn scratch(q: u32) -> Self {
        QuantizedBelief { q, entries: Vec::new() }
    }

    /// Callers must keep entries canonical: sorted, unique, nonzero.
    pub(crate) fn entries_mut(&mut self) -> &mut Vec<(ClusterOccupancy, u32)> {
        &mut self.entries
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    /// (state, numerator) pairs; each probability is numerator / q.
    pub fn entries(&self) -> &[(ClusterOccupancy, u32)] {
        &self.entries
    }

    pub fn probs(&self) -> impl Iterator<Item = (&ClusterOccupancy, f64)> + '_ {
        self.entries.iter().map(move |(s, k)| (s, *k as f64 / self.q as f64))
    }
}

impl fmt::Display for QuantizedBelief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (s, k)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}:{k}/{}", self.q)?;
        }
        f.write_str("}")
    }
}

/// Per-observation joint (successor, weight) accumulators, indexed by `Observation as usize`.
#[derive(Debug, Default)]
pub(crate) struct Buckets(pub(crate) [Vec<(ClusterOccupancy, f64)>; 3]);

/// Supplies leaver distributions for the transmitting clusters of one action.
pub(crate) trait LeaverRows {
    fn entries(&self) -> usize;
    fn cluster(&self, entry: usize) -> usize;
    fn row(&self, entry: usize, eta: u8) -> &[f64];
}

/// Rows computed directly from a dense action vector.
pub(crate) struct DenseRows {
    clusters: Vec<usize>,
    // [entry][eta][l]
    rows: Vec<Vec<Vec<f64>>>,
}

impl DenseRows {
    pub(crate) fn new(a: &ActionVector, n_max: usize) -> Self {
        let active = a.active_entries();
        let clusters = active.iter().map(|&(i, _)| i).collect();
        let rows = active
            .iter()
            .map(|&(_, p)| {
                (0..=n_max as u8).map(|eta| (0..=eta).map(|l| leaver_pmf(eta, l, p)).collect()).collect()
            })
            .collect();
        DenseRows { clusters, rows }
    }
}

impl LeaverRows for DenseRows {
    fn entries(&self) -> usize {
        self.clusters.len()
    }
    fn cluster(&self, entry: usize) -> usize {
        self.clusters[entry]
    }
    fn row(&self, entry: usize, eta: u8) -> &[f64] {
        &self.rows[entry][eta as usize]
    }
}

/// Pushes `b` through the joint kernel, filling one bucket per observation
/// with unnormalized successor weights. Returns the observation likelihoods.
pub(crate) fn propagate<R: LeaverRows>(
    b: &BeliefState,
    rows: &R,
    cfg: &ModelConfig,
    buckets: &mut Buckets,
) -> [f64; 3] {
    for bucket in buckets.0.iter_mut() {
        bucket.clear();
    }
    let mut mass = [0.0; 3];
    let mut active: smallvec::SmallVec<[(usize, &[f64]); 4]> = smallvec::SmallVec::new();
    for (s, w) in &b.support {
        active.clear();
        for e in 0..rows.entries() {
            let c = rows.cluster(e);
            let eta = s.counts()[c];
            if eta > 0 {
                active.push((c, rows.row(e, eta)));
            }
        }
        for_each_outcome(s, &active, cfg, &mut |o, next, p| {
            let weight = w * p;
            mass[o as usize] += weight;
            buckets.0[o as usize].push((next, weight));
        });
    }
    mass
}

/// Normalizes one bucket into a belief, pruning dust. `None` when the
/// observation is impossible.
pub(crate) fn posterior(bucket: Vec<(ClusterOccupancy, f64)>, mass: f64) -> Option<BeliefState> {
    if !(mass > 0.0) {
        return None;
    }
    let mut support = merge_sorted(bucket);
    for (_, p) in support.iter_mut() {
        *p /= mass;
    }
    let before = support.len();
    support.retain(|(_, p)| *p >= PRUNE_THRESHOLD);
    if support.is_empty() {
        return None;
    }
    if support.len() != before {
        let kept: f64 = support.iter().map(|(_, p)| p).sum();
        for (_, p) in support.iter_mut() {
            *p /= kept;
        }
    }
    let clusters = support[0].0.clusters();
    Some(BeliefState { support, clusters })
}

fn merge_sorted(entries: Vec<(ClusterOccupancy, f64)>) -> Vec<(ClusterOccupancy, f64)> {
    // decorate with the active count so the sort does not re-sum per comparison
    let mut keyed: Vec<(usize, ClusterOccupancy, f64)> = entries.into_iter().map(|(s, p)| (s.active(), s, p)).collect();
    keyed.sort_unstable_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.counts().cmp(b.1.counts())));
    let mut out: Vec<(ClusterOccupancy, f64)> = Vec::with_capacity(keyed.len());
    for (_, s, p) in keyed {
        match out.last_mut() {
            Some(last) if last.0 == s => last.1 += p,
            _ => out.push((s, p)),
        }
    }
    out
}
