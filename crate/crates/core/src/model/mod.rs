//! Probabilistic model of the reservation channel.
//!
//! A reservation cycle is described by the occupancy of each cluster
//! (terminals that share a decision history). Every slot the protocol
//! assigns one transmission probability per cluster, each active terminal
//! draws independently, and the channel broadcasts idle / success / collision.

mod kernel;
mod partitions;

pub use kernel::{
    binomial, observation_probability, outcomes, sample_step, transition_probability,
    BinomialTable, Outcome,
};
pub(crate) use kernel::{apply_leavers, for_each_outcome, leaver_pmf};
pub use partitions::{
    count_via_updates, enumerate_reduced_states, full_state_count, partition_count,
};

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

/// Inline storage for per-cluster counts; the default cluster cap fits without spilling.
pub(crate) type Counts = SmallVec<[u8; 16]>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("action has {got} entries but the state has {expected} clusters")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("entry {value} is not on the 1/{d} grid")]
    OffGrid { value: f64, d: u32 },
    #[error("action has {nonzero} transmitting clusters, limit is {limit}")]
    SupportLimitExceeded { nonzero: usize, limit: usize },
    #[error("an occupancy needs at least one cluster")]
    NoClusters,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

/// Channel feedback for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Observation {
    Idle,
    Success,
    Collision,
}

impl Observation {
    pub const ALL: [Observation; 3] = [Observation::Idle, Observation::Success, Observation::Collision];

    /// Feedback produced when `transmitters` terminals send in the same slot.
    pub fn from_transmitters(transmitters: usize) -> Self {
        match transmitters {
            0 => Observation::Idle,
            1 => Observation::Success,
            _ => Observation::Collision,
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Observation::Idle => "0",
            Observation::Success => "1",
            Observation::Collision => "e",
        };
        f.write_str(c)
    }
}

/// Number of active terminals in each cluster; index is the cluster id.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct ClusterOccupancy(Counts);

impl ClusterOccupancy {
    pub fn new(counts: &[u8]) -> Result<Self, ModelError> {
        if counts.is_empty() {
            return Err(ModelError::NoClusters);
        }
        Ok(ClusterOccupancy(Counts::from_slice(counts)))
    }

    /// Initial state of a reservation cycle: every active terminal in one cluster.
    pub fn single(active: u8) -> Self {
        ClusterOccupancy(smallvec::smallvec![active])
    }

    pub fn counts(&self) -> &[u8] {
        &self.0
    }

    /// Active terminals (s_N).
    pub fn active(&self) -> usize {
        self.0.iter().map(|&c| c as usize).sum()
    }

    /// Number of clusters (s_M).
    pub fn clusters(&self) -> usize {
        self.0.len()
    }

    pub fn is_target(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub(crate) fn counts_mut(&mut self) -> &mut Counts {
        &mut self.0
    }
}

impl Ord for ClusterOccupancy {
    /// Canonical order: active terminals first, then lexicographic counts.
    fn cmp(&self, other: &Self) -> Ordering {
        self.active()
            .cmp(&other.active())
            .then_with(|| self.0.as_slice().cmp(other.0.as_slice()))
    }
}

impl PartialOrd for ClusterOccupancy {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ClusterOccupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_tuple(f, &self.0)
    }
}

fn write_tuple(f: &mut fmt::Formatter<'_>, counts: &[u8]) -> fmt::Result {
    f.write_str("(")?;
    for (i, c) in counts.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{c}")?;
    }
    f.write_str(")")
}

/// Canonical representative of an occupancy under empty-cluster removal and
/// cluster permutation: positive counts in ascending order. The empty
/// sequence is the target class.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct ReducedOccupancy(Counts);

impl ReducedOccupancy {
    pub fn target() -> Self {
        ReducedOccupancy(Counts::new())
    }

    /// Builds from arbitrary counts, canonicalizing as it goes.
    pub fn from_counts(counts: &[u8]) -> Self {
        let mut c: Counts = counts.iter().copied().filter(|&c| c > 0).collect();
        c.sort_unstable();
        ReducedOccupancy(c)
    }

    pub fn counts(&self) -> &[u8] {
        &self.0
    }

    pub fn active(&self) -> usize {
        self.0.iter().map(|&c| c as usize).sum()
    }

    pub fn clusters(&self) -> usize {
        self.0.len()
    }

    pub fn is_target(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of clusters holding exactly one terminal.
    pub fn singletons(&self) -> usize {
        self.0.iter().filter(|&&c| c == 1).count()
    }

    /// Every cluster is a singleton (the closed-form class); includes the target.
    pub fn all_singletons(&self) -> bool {
        self.singletons() >= self.active()
    }

    /// The same counts as a full occupancy; the target maps to a single empty cluster.
    pub fn to_occupancy(&self) -> ClusterOccupancy {
        if self.0.is_empty() {
            ClusterOccupancy::single(0)
        } else {
            ClusterOccupancy(self.0.clone())
        }
    }
}

impl Ord for ReducedOccupancy {
    fn cmp(&self, other: &Self) -> Ordering {
        self.active()
            .cmp(&other.active())
            .then_with(|| self.0.as_slice().cmp(other.0.as_slice()))
    }
}

impl PartialOrd for ReducedOccupancy {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ReducedOccupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_tuple(f, &self.0)
    }
}

/// Drops empty clusters and sorts the rest ascending.
pub fn reduce(s: &ClusterOccupancy) -> ReducedOccupancy {
    ReducedOccupancy::from_counts(s.counts())
}

/// Same as [`reduce`] but also returns, for each reduced position, the
/// original cluster index it came from. Ties keep their original order.
pub fn reduce_with_permutation(s: &ClusterOccupancy) -> (ReducedOccupancy, Vec<usize>) {
    let mut idx: Vec<usize> = (0..s.clusters()).filter(|&i| s.counts()[i] > 0).collect();
    idx.sort_by_key(|&i| s.counts()[i]);
    let counts = idx.iter().map(|&i| s.counts()[i]).collect();
    (ReducedOccupancy(counts), idx)
}

/// Transmission-probability resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    Continuous,
    /// Entries restricted to k/d.
    Steps(u32),
}

/// Per-cluster transmission probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    probs: Vec<f64>,
    grid: Grid,
    support_limit: Option<usize>,
}

impl ActionVector {
    /// Continuous action without a support limit.
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(ModelError::InvalidProbability(p));
            }
        }
        Ok(ActionVector { probs, grid: Grid::Continuous, support_limit: None })
    }

    /// Action on the 1/d grid given numerators k_i.
    pub fn on_grid(numerators: &[u32], d: u32) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::InvalidConfig("grid denominator must be positive".into()));
        }
        let mut probs = Vec::with_capacity(numerators.len());
        for &k in numerators {
            if k > d {
                return Err(ModelError::InvalidProbability(k as f64 / d as f64));
            }
            probs.push(grid_prob(k, d));
        }
        Ok(ActionVector { probs, grid: Grid::Steps(d), support_limit: None })
    }

    /// Snaps the current entries to the 1/d grid, failing if any is off-grid.
    pub fn with_grid(mut self, d: u32) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::InvalidConfig("grid denominator must be positive".into()));
        }
        for p in &mut self.probs {
            let k = (*p * d as f64).round();
            if (k / d as f64 - *p).abs() > 1e-12 {
                return Err(ModelError::OffGrid { value: *p, d });
            }
            *p = grid_prob(k as u32, d);
        }
        self.grid = Grid::Steps(d);
        Ok(self)
    }

    pub fn with_support_limit(mut self, limit: usize) -> Result<Self, ModelError> {
        let nonzero = self.nonzero();
        if nonzero > limit {
            return Err(ModelError::SupportLimitExceeded { nonzero, limit });
        }
        self.support_limit = Some(limit);
        Ok(self)
    }

    pub fn all_ones(clusters: usize) -> Self {
        ActionVector { probs: vec![1.0; clusters], grid: Grid::Continuous, support_limit: None }
    }

    /// Cluster `k` transmits surely, the rest stay silent.
    pub fn indicator(clusters: usize, k: usize) -> Self {
        let mut probs = vec![0.0; clusters];
        probs[k] = 1.0;
        ActionVector { probs, grid: Grid::Continuous, support_limit: None }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn support_limit(&self) -> Option<usize> {
        self.support_limit
    }

    /// Number of clusters with a nonzero probability.
    pub fn nonzero(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// (cluster, probability) pairs with p > 0.
    pub fn active_entries(&self) -> Vec<(usize, f64)> {
        self.probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect()
    }
}

impl fmt::Display for ActionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{p}")?;
        }
        f.write_str(")")
    }
}

/// k/d with exact endpoints.
pub(crate) fn grid_prob(k: u32, d: u32) -> f64 {
    if k == 0 {
        0.0
    } else if k == d {
        1.0
    } else {
        k as f64 / d as f64
    }
}

/// Model-wide limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum active terminals in a cycle.
    pub n_max: usize,
    /// Maximum number of clusters.
    pub m_cap: usize,
    /// At the cap, colliders stay in their own clusters instead of forming a new one.
    pub cap_in_place: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_max: 5, m_cap: 15, cap_in_place: true }
    }
}

impl ModelConfig {
    pub fn new(n_max: usize) -> Self {
        ModelConfig { n_max, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_max == 0 || self.n_max > u8::MAX as usize {
            return Err(ModelError::InvalidConfig(format!("n_max must be in 1..=255, got {}", self.n_max)));
        }
        if self.m_cap == 0 {
            return Err(ModelError::InvalidConfig("m_cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether a collision at `clusters` clusters opens a new cluster.
    pub fn collision_splits(&self, clusters: usize) -> bool {
        !(self.cap_in_place && clusters >= self.m_cap)
    }
}
