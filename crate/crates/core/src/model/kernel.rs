use rand::Rng;
use smallvec::SmallVec;

use super::{ActionVector, ClusterOccupancy, ModelConfig, ModelError, Observation};

/// Exact binomial coefficient; zero when k > n.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as u64
}

/// P(l of `eta` terminals transmit) when each does so with probability p.
pub(crate) fn leaver_pmf(eta: u8, l: u8, p: f64) -> f64 {
    if l > eta {
        return 0.0;
    }
    binomial(eta as u64, l as u64) as f64 * p.powi(l as i32) * (1.0 - p).powi((eta - l) as i32)
}

/// Leaver distributions for every grid probability k/d and cluster size up to `n_max`.
#[derive(Debug, Clone)]
pub struct BinomialTable {
    d: u32,
    n_max: usize,
    // [k][eta][l], flattened
    pmf: Vec<f64>,
}

impl BinomialTable {
    pub fn new(d: u32, n_max: usize) -> Self {
        let w = n_max + 1;
        let mut pmf = vec![0.0; (d as usize + 1) * w * w];
        for k in 0..=d {
            let p = super::grid_prob(k, d);
            for eta in 0..=n_max {
                for l in 0..=eta {
                    pmf[(k as usize * w + eta) * w + l] = leaver_pmf(eta as u8, l as u8, p);
                }
            }
        }
        BinomialTable { d, n_max, pmf }
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Distribution over leaver counts 0..=eta for grid step k.
    pub fn row(&self, k: u32, eta: u8) -> &[f64] {
        debug_assert!(k <= self.d && eta as usize <= self.n_max);
        let w = self.n_max + 1;
        let start = (k as usize * w + eta as usize) * w;
        &self.pmf[start..start + eta as usize + 1]
    }
}

/// One joint (successor, feedback) outcome of a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub next: ClusterOccupancy,
    pub observation: Observation,
    pub probability: f64,
}

/// Enumerates every (observation, successor, probability) reachable from `s`
/// when the clusters in `rows` transmit with the given leaver distributions.
/// Clusters missing from `rows` stay silent. In the capped case several
/// leaver patterns map to the same successor; they are reported separately.
pub(crate) fn for_each_outcome<F>(s: &ClusterOccupancy, rows: &[(usize, &[f64])], cfg: &ModelConfig, f: &mut F)
where
    F: FnMut(Observation, ClusterOccupancy, f64),
{
    let mut leavers: SmallVec<[u8; 16]> = SmallVec::from_elem(0, rows.len());
    recurse(s, rows, 0, &mut leavers, 1.0, 0, cfg, f);
}

#[allow(clippy::too_many_arguments)]
fn recurse<F>(
    s: &ClusterOccupancy,
    rows: &[(usize, &[f64])],
    depth: usize,
    leavers: &mut SmallVec<[u8; 16]>,
    weight: f64,
    total: u32,
    cfg: &ModelConfig,
    f: &mut F,
) where
    F: FnMut(Observation, ClusterOccupancy, f64),
{
    if depth == rows.len() {
        emit(s, rows, leavers, weight, total, cfg, f);
        return;
    }
    let row = rows[depth].1;
    for (l, &p) in row.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        leavers[depth] = l as u8;
        recurse(s, rows, depth + 1, leavers, weight * p, total + l as u32, cfg, f);
    }
    leavers[depth] = 0;
}

fn emit<F>(
    s: &ClusterOccupancy,
    rows: &[(usize, &[f64])],
    leavers: &[u8],
    weight: f64,
    total: u32,
    cfg: &ModelConfig,
    f: &mut F,
) where
    F: FnMut(Observation, ClusterOccupancy, f64),
{
    match total {
        0 => f(Observation::Idle, s.clone(), weight),
        1 => {
            let mut next = s.clone();
            let pos = leavers.iter().position(|&l| l == 1).expect("one leaver");
            next.counts_mut()[rows[pos].0] -= 1;
            f(Observation::Success, next, weight)
        }
        _ => {
            if cfg.collision_splits(s.clusters()) {
                let mut next = s.clone();
                for (i, &l) in leavers.iter().enumerate() {
                    next.counts_mut()[rows[i].0] -= l;
                }
                next.counts_mut().push(total as u8);
                f(Observation::Collision, next, weight)
            } else {
                f(Observation::Collision, s.clone(), weight)
            }
        }
    }
}

fn check_dims(s: &ClusterOccupancy, a: &ActionVector) -> Result<(), ModelError> {
    if a.len() != s.clusters() {
        return Err(ModelError::DimensionMismatch { expected: s.clusters(), got: a.len() });
    }
    Ok(())
}

/// All joint outcomes of applying `a` at `s`, merged per (successor, observation)
/// and sorted by observation then successor.
pub fn outcomes(s: &ClusterOccupancy, a: &ActionVector, cfg: &ModelConfig) -> Result<Vec<Outcome>, ModelError> {
    check_dims(s, a)?;
    let pmfs: Vec<(usize, Vec<f64>)> = a
        .active_entries()
        .into_iter()
        .filter(|&(i, _)| s.counts()[i] > 0)
        .map(|(i, p)| {
            let eta = s.counts()[i];
            (i, (0..=eta).map(|l| leaver_pmf(eta, l, p)).collect())
        })
        .collect();
    let rows: Vec<(usize, &[f64])> = pmfs.iter().map(|(i, r)| (*i, r.as_slice())).collect();
    let mut out: Vec<Outcome> = Vec::new();
    for_each_outcome(s, &rows, cfg, &mut |observation, next, probability| {
        out.push(Outcome { next, observation, probability })
    });
    out.sort_by(|a, b| a.observation.cmp(&b.observation).then_with(|| a.next.cmp(&b.next)));
    out.dedup_by(|later, first| {
        if later.observation == first.observation && later.next == first.next {
            first.probability += later.probability;
            true
        } else {
            false
        }
    });
    Ok(out)
}

/// P(s' | s, a) evaluated from the per-cluster binomial product, restricted
/// to the three structurally admissible successor classes.
pub fn transition_probability(
    s: &ClusterOccupancy,
    next: &ClusterOccupancy,
    a: &ActionVector,
    cfg: &ModelConfig,
) -> Result<f64, ModelError> {
    check_dims(s, a)?;
    let (n, m) = (s.active(), s.clusters());
    let (n2, m2) = (next.active(), next.clusters());
    let p = a.probs();

    let product = |upto: usize| -> f64 {
        (0..upto)
            .map(|i| {
                let (eta, eta2) = (s.counts()[i], next.counts()[i]);
                binomial(eta as u64, eta2 as u64) as f64
                    * (1.0 - p[i]).powi(eta2 as i32)
                    * p[i].powi(eta as i32 - eta2 as i32)
            })
            .product()
    };

    if next == s {
        if cfg.collision_splits(m) {
            return Ok(product(m));
        }
        // capped: idle and every collision leave the state unchanged
        return Ok(1.0 - success_probability(s, p));
    }
    if n2 + 1 == n && m2 == m {
        let moved: usize = (0..m).map(|i| s.counts()[i].saturating_sub(next.counts()[i]) as usize).sum();
        if moved != 1 || (0..m).any(|i| next.counts()[i] > s.counts()[i]) {
            return Ok(0.0);
        }
        return Ok(product(m));
    }
    if n2 == n && m2 == m + 1 && cfg.collision_splits(m) {
        if (0..m).any(|i| next.counts()[i] > s.counts()[i]) {
            return Ok(0.0);
        }
        let moved: usize = (0..m).map(|i| (s.counts()[i] - next.counts()[i]) as usize).sum();
        if moved < 2 || next.counts()[m] as usize != moved {
            return Ok(0.0);
        }
        return Ok(product(m));
    }
    Ok(0.0)
}

fn success_probability(s: &ClusterOccupancy, p: &[f64]) -> f64 {
    let silent: Vec<f64> = s.counts().iter().zip(p).map(|(&eta, &pi)| (1.0 - pi).powi(eta as i32)).collect();
    (0..s.clusters())
        .filter(|&i| s.counts()[i] > 0)
        .map(|i| {
            let eta = s.counts()[i];
            let own = eta as f64 * p[i] * (1.0 - p[i]).powi(eta as i32 - 1);
            let others: f64 = (0..s.clusters()).filter(|&j| j != i).map(|j| silent[j]).product();
            own * others
        })
        .sum()
}

/// Indicator Q(o | s, s'). Independent of the action. At the cluster cap the
/// self-transition is compatible with both Idle and Collision.
pub fn observation_probability(
    o: Observation,
    s: &ClusterOccupancy,
    next: &ClusterOccupancy,
    cfg: &ModelConfig,
) -> f64 {
    let (n, m) = (s.active(), s.clusters());
    let (n2, m2) = (next.active(), next.clusters());
    let hit = match o {
        Observation::Idle => next == s,
        Observation::Success => n2 + 1 == n && m2 == m,
        Observation::Collision => {
            (n2 == n && m2 == m + 1) || (next == s && !cfg.collision_splits(m) && n >= 2)
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Monte Carlo realization of one slot: each terminal draws its own decision.
pub fn sample_step<R: Rng + ?Sized>(
    s: &ClusterOccupancy,
    a: &ActionVector,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<(ClusterOccupancy, Observation), ModelError> {
    check_dims(s, a)?;
    let mut leavers: SmallVec<[u8; 16]> = SmallVec::from_elem(0, s.clusters());
    for (i, (&eta, &p)) in s.counts().iter().zip(a.probs()).enumerate() {
        for _ in 0..eta {
            if rng.random::<f64>() < p {
                leavers[i] += 1;
            }
        }
    }
    Ok(apply_leavers(s, &leavers, cfg))
}

/// Successor and feedback for a given per-cluster transmitter count.
pub(crate) fn apply_leavers(s: &ClusterOccupancy, leavers: &[u8], cfg: &ModelConfig) -> (ClusterOccupancy, Observation) {
    let total: usize = leavers.iter().map(|&l| l as usize).sum();
    let o = Observation::from_transmitters(total);
    let mut next = s.clone();
    match o {
        Observation::Idle => {}
        Observation::Success => {
            let i = leavers.iter().position(|&l| l == 1).expect("one leaver");
            next.counts_mut()[i] -= 1;
        }
        Observation::Collision => {
            if cfg.collision_splits(s.clusters()) {
                for (c, &l) in next.counts_mut().iter_mut().zip(leavers) {
                    *c -= l;
                }
                next.counts_mut().push(total as u8);
            }
        }
    }
    (next, o)
}
