//! State-space counting for the reduced (empty-cluster-free, unordered) model.

use super::{binomial, Counts, ReducedOccupancy};

/// Number of partitions of `n` into exactly `m` positive parts.
///
/// p(n, m) = p(n - m, m) + p(n - 1, m - 1), with p(n, 1) = p(n, n) = 1 for
/// n >= 1 and zero whenever m > n or either argument is zero.
pub fn partition_count(n: usize, m: usize) -> u64 {
    let mut memo = vec![vec![None; m + 1]; n + 1];
    partition_rec(n, m, &mut memo)
}

fn partition_rec(n: usize, m: usize, memo: &mut Vec<Vec<Option<u64>>>) -> u64 {
    if n == 0 || m == 0 || m > n {
        return 0;
    }
    if m == 1 || m == n {
        return 1;
    }
    if let Some(v) = memo[n][m] {
        return v;
    }
    let v = partition_rec(n - m, m, memo) + partition_rec(n - 1, m - 1, memo);
    memo[n][m] = Some(v);
    v
}

/// All non-target reduced states with at most `n_max` active terminals,
/// ordered by terminal count and then lexicographically.
pub fn enumerate_reduced_states(n_max: usize) -> Vec<ReducedOccupancy> {
    let mut out = Vec::new();
    for n in 1..=n_max {
        let mut buf = Counts::new();
        ascending_partitions(n, 1, &mut buf, &mut out);
    }
    out
}

fn ascending_partitions(remaining: usize, min_part: usize, buf: &mut Counts, out: &mut Vec<ReducedOccupancy>) {
    if remaining == 0 {
        out.push(ReducedOccupancy(buf.clone()));
        return;
    }
    for part in min_part..=remaining {
        buf.push(part as u8);
        ascending_partitions(remaining - part, part, buf, out);
        buf.pop();
    }
}

/// Optimization problems per sweep after dropping empty clusters (N1) and
/// after also identifying cluster permutations (N2).
pub fn count_via_updates(n_max: usize) -> (u64, u64) {
    let mut n1 = 0;
    let mut n2 = 0;
    for n in 1..=n_max {
        for m in 1..=n {
            n1 += binomial(n as u64 - 1, m as u64 - 1);
            n2 += partition_count(n, m);
        }
    }
    (n1, n2)
}

/// Size of the full (ordered, empty clusters kept) non-target state space
/// with up to `n_max` terminals spread over up to `m_max` clusters.
pub fn full_state_count(n_max: usize, m_max: usize) -> u64 {
    let mut total = 0;
    for n in 1..=n_max {
        for m in 1..=m_max {
            total += binomial((n + m - 1) as u64, (m - 1) as u64);
        }
    }
    total
}
