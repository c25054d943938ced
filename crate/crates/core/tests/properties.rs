use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use treeres::bench::{aloha_window, csma_window, stack_feedback, World};
use treeres::belief::{BeliefState, QuantizedBelief};
use treeres::genie::{lift, solve_via, GenieParams, GenieValueFunction};
use treeres::model::{
    count_via_updates, enumerate_reduced_states, observation_probability, outcomes, reduce, sample_step,
    transition_probability, ActionVector, ClusterOccupancy, ModelConfig, Observation,
};
use treeres::rtdp::{grid_search_backup, rtdp_backup, train, BackupWorkspace, InitMode, RtdpParams, ValueTable};
use treeres::sim::{
    fifo_violations, generate_arrivals, protocol_rng, run_simulation, traffic_rng, FinishMode, FramePlan,
    ReservationPolicy, SimConfig, SlotAccounting, TrafficConfig,
};

fn occ(c: &[u8]) -> ClusterOccupancy {
    ClusterOccupancy::new(c).unwrap()
}

fn genie() -> &'static GenieValueFunction {
    static G: OnceLock<GenieValueFunction> = OnceLock::new();
    G.get_or_init(|| solve_via(&ModelConfig::new(5), &GenieParams::default()).unwrap())
}

/// Every occupancy vector with `m` clusters and exactly `n` terminals.
fn compositions(n: u8, m: usize) -> Vec<Vec<u8>> {
    if m == 0 {
        return if n == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(n - first, m - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// All structurally plausible successors of `s`: same or one more cluster,
/// same or one fewer terminal.
fn candidate_successors(s: &ClusterOccupancy) -> Vec<ClusterOccupancy> {
    let n = s.active() as u8;
    let m = s.clusters();
    let mut out = Vec::new();
    for m2 in [m, m + 1] {
        for n2 in [n.saturating_sub(1), n] {
            for c in compositions(n2, m2) {
                out.push(occ(&c));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn small_state() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=5, 1..=3).prop_filter("at most five terminals", |c| c.iter().map(|&x| x as u32).sum::<u32>() <= 5)
}

fn state_and_grid_action(d: u32) -> impl Strategy<Value = (Vec<u8>, Vec<u32>)> {
    small_state().prop_flat_map(move |c| {
        let m = c.len();
        (Just(c), prop::collection::vec(0u32..=d, m))
    })
}

/// Belief over 1..=3 states sharing a cluster count, at most `n` terminals.
fn belief_strategy(n: u32) -> impl Strategy<Value = BeliefState> {
    (1usize..=3).prop_flat_map(move |m| {
        prop::collection::vec(
            (prop::collection::vec(0u8..=n as u8, m).prop_filter("bounded", move |c| c.iter().map(|&x| x as u32).sum::<u32>() <= n), 1u32..100),
            1..=3,
        )
        .prop_filter_map("nonempty distinct support", |entries| {
            let mut merged: BTreeMap<Vec<u8>, u32> = BTreeMap::new();
            for (c, w) in entries {
                *merged.entry(c).or_default() += w;
            }
            let total: u32 = merged.values().sum();
            let b = BeliefState::new(merged.into_iter().map(|(c, w)| (occ(&c), w as f64 / total as f64)).collect()).ok()?;
            Some(b)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kernel_rows_sum_to_one((c, k) in state_and_grid_action(4)) {
        let s = occ(&c);
        let a = ActionVector::on_grid(&k, 4).unwrap();
        let cfg = ModelConfig::new(5);
        let mut total = 0.0;
        let mut joint = 0.0;
        for next in candidate_successors(&s) {
            let p = transition_probability(&s, &next, &a, &cfg).unwrap();
            total += p;
            let hits: Vec<f64> = [Observation::Idle, Observation::Success, Observation::Collision]
                .iter()
                .map(|&o| observation_probability(o, &s, &next, &cfg))
                .collect();
            joint += p * hits.iter().sum::<f64>();
            if p > 0.0 {
                prop_assert_eq!(hits.iter().filter(|&&h| h == 1.0).count(), 1, "{} -> {}", s, next);
            }
        }
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        prop_assert!((joint - 1.0).abs() <= 1e-12, "joint {}", joint);
    }

    #[test]
    fn sampled_steps_are_monotone((c, k) in state_and_grid_action(4), seed in any::<u64>()) {
        let s = occ(&c);
        let a = ActionVector::on_grid(&k, 4).unwrap();
        let cfg = ModelConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (next, o) = sample_step(&s, &a, &cfg, &mut rng).unwrap();
        prop_assert!(next.active() <= s.active());
        prop_assert!(next.clusters() >= s.clusters());
        prop_assert!(transition_probability(&s, &next, &a, &cfg).unwrap() > 0.0);
        prop_assert_eq!(observation_probability(o, &s, &next, &cfg), 1.0);
        let clusters_step = next.clusters() - s.clusters();
        prop_assert_eq!(clusters_step, usize::from(o == Observation::Collision));
    }

    #[test]
    fn reduce_ignores_order_and_empty_clusters(c in prop::collection::vec(0u8..=6, 1..=6), zeros in 0usize..3, rot in 0usize..6) {
        let s = occ(&c);
        let r = reduce(&s);
        prop_assert_eq!(reduce(&r.to_occupancy()), r.clone());
        let mut shuffled = c.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        shuffled.extend(std::iter::repeat(0).take(zeros));
        prop_assert_eq!(reduce(&occ(&shuffled)), r);
    }

    #[test]
    fn bayes_chain_rule(b in belief_strategy(4), k in prop::collection::vec(0u32..=4, 3)) {
        let cfg = ModelConfig::new(5);
        let m = b.clusters();
        let a = ActionVector::on_grid(&k[..m], 4).unwrap();
        let lik = b.observation_likelihoods(&a, &cfg).unwrap();
        prop_assert!((lik.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

        let mut pushed: BTreeMap<ClusterOccupancy, f64> = BTreeMap::new();
        for (s, p) in b.support() {
            for out in outcomes(s, &a, &cfg).unwrap() {
                *pushed.entry(out.next).or_default() += p * out.probability;
            }
        }
        let mut mixed: BTreeMap<ClusterOccupancy, f64> = BTreeMap::new();
        for (o, l) in [Observation::Idle, Observation::Success, Observation::Collision].into_iter().zip(lik) {
            if l <= 0.0 {
                continue;
            }
            let post = b.update(&a, o, &cfg).unwrap();
            for (s, p) in post.support() {
                *mixed.entry(s.clone()).or_default() += l * p;
            }
        }
        for (s, p) in &pushed {
            let got = mixed.get(s).copied().unwrap_or(0.0);
            prop_assert!((got - p).abs() <= 1e-9, "{}: {} vs {}", s, got, p);
        }
        for (s, p) in &mixed {
            prop_assert!(pushed.contains_key(s) || *p <= 1e-9);
        }
    }

    #[test]
    fn quantization_is_stable_away_from_boundaries(b in belief_strategy(4), q in 1u32..=20, frac in 0.0f64..0.99) {
        // distance of each scaled entry to its nearest rounding boundary
        let margin = b
            .support()
            .iter()
            .map(|(_, p)| {
                let x = p * q as f64;
                (x - x.floor() - 0.5).abs() / q as f64
            })
            .fold(f64::INFINITY, f64::min);
        prop_assume!(margin > 1e-9 && b.support().len() >= 2);
        let eps = frac * margin;
        let mut entries: Vec<(ClusterOccupancy, f64)> = b.support().to_vec();
        let take_from = entries.iter().position(|(_, p)| *p > eps).unwrap();
        let give_to = (take_from + 1) % entries.len();
        entries[take_from].1 -= eps;
        entries[give_to].1 += eps;
        let b2 = BeliefState::new(entries).unwrap();
        prop_assert_eq!(b.quantize(q), b2.quantize(q));
    }

    #[test]
    fn b1_beliefs_cost_one_slot(m in 1usize..=4, weights in prop::collection::vec(0u32..50, 5)) {
        // support: the empty state and single terminals in any cluster
        let mut entries = Vec::new();
        let mut total = 0u32;
        for (i, &w) in weights.iter().enumerate().take(m + 1) {
            if w == 0 {
                continue;
            }
            let mut c = vec![0u8; m];
            if i > 0 {
                c[i - 1] = 1;
            }
            entries.push((c, w));
            total += w;
        }
        prop_assume!(entries.iter().any(|(c, _)| c.iter().any(|&x| x == 1)));
        let b = BeliefState::new(entries.into_iter().map(|(c, w)| (occ(&c), w as f64 / total as f64)).collect()).unwrap();
        prop_assert!(b.is_b1());
        let cfg = ModelConfig::new(5);
        let table = ValueTable::new(10, InitMode::Genie(genie().clone()));
        let params = RtdpParams::default();
        let (a, v) = rtdp_backup(&b, &table, &params, &cfg).unwrap();
        prop_assert_eq!(v, 1.0);
        prop_assert_eq!(a.probs().to_vec(), vec![1.0; m]);
        let open = RtdpParams { support_limit: None, ..params };
        let mut ws = BackupWorkspace::new(open.d, 5);
        let (_, v_search) = grid_search_backup(&b, &table, &open, &cfg, &mut ws).unwrap();
        prop_assert_eq!(v_search, 1.0);
    }

    #[test]
    fn simulation_is_fifo_and_reproducible(lambda in 0.02f64..0.3, seed in 0u64..1000, fixed in prop::option::of(10u64..200)) {
        let cfg = SimConfig {
            traffic: TrafficConfig { lambda, n_terminals: 5 },
            frames: fixed.map_or(FramePlan::Dynamic, FramePlan::Fixed),
            accounting: SlotAccounting { rho: 3, finish_mode: FinishMode::Piggyback },
            span_slots: 1_500,
            model: ModelConfig::new(5),
            record_events: false,
        };
        let run = || {
            let mut policy = ReservationPolicy::Genie(genie().clone());
            run_simulation(&cfg, &mut policy, seed).unwrap()
        };
        let out = run();
        prop_assert_eq!(fifo_violations(&out.packets), 0);
        prop_assert!(out.metrics.delivered_packets <= out.metrics.generated_packets);
        prop_assert_eq!(out.metrics, run().metrics);
    }

    #[test]
    fn backoff_and_stack_invariants(lambda in 0.05f64..0.4, seed in 0u64..1000) {
        let traffic = TrafficConfig { lambda, n_terminals: 5 };
        let arrivals = generate_arrivals(&traffic, 3_000, &mut traffic_rng(seed));
        let mut rng = protocol_rng(seed);

        let mut w = World::new(arrivals.clone(), 5, 3, 1024, false);
        let mut last_k = vec![0u32; 5];
        while w.t < 3_000 {
            let e = w.step_slotted_aloha(&mut rng);
            for (i, b) in w.backoff.iter().enumerate() {
                prop_assert!(b.pending <= aloha_window(b.collisions, 1024));
                // k only moves up by one or back to zero
                prop_assert!(b.collisions == 0 || b.collisions == last_k[i] || b.collisions == last_k[i] + 1);
                last_k[i] = b.collisions;
            }
            prop_assert!(e.len == 1);
        }

        let mut w = World::new(arrivals.clone(), 5, 3, 1024, false);
        while w.t < 3_000 {
            let e = w.step_csma_ca(&mut rng);
            for b in &w.backoff {
                prop_assert!(b.pending <= csma_window(b.collisions, 1024));
            }
            if e.len > 1 {
                prop_assert_eq!(e.transmitters.len(), 1);
            }
        }

        let mut w = World::new(arrivals, 5, 3, 1024, false);
        while w.t < 3_000 {
            let e = w.step_stack_algorithm(&mut rng);
            for &i in &e.transmitters {
                prop_assert!(w.backlogged(i) || e.outcome == Observation::Success);
            }
        }
    }

    #[test]
    fn stack_feedback_conserves_backlog(levels in prop::collection::vec(0u64..4, 1..6), coins in prop::collection::vec(any::<bool>(), 6), busy in prop::collection::vec(any::<bool>(), 6)) {
        let n = levels.len();
        let backlogged = &busy[..n];
        let tx: Vec<usize> = (0..n).filter(|&i| backlogged[i] && levels[i] == 0).collect();
        let o = Observation::from_transmitters(tx.len());
        let mut after = levels.clone();
        let mut coin = coins.into_iter().cycle();
        stack_feedback(&mut after, backlogged, &tx, o, || coin.next().unwrap());
        for i in 0..n {
            if !backlogged[i] {
                prop_assert_eq!(after[i], levels[i]);
            } else if o == Observation::Collision && tx.contains(&i) {
                prop_assert!(after[i] <= 1);
            } else if o == Observation::Collision {
                prop_assert_eq!(after[i], levels[i] + 1);
            } else {
                prop_assert_eq!(after[i], levels[i].saturating_sub(1));
            }
        }
    }
}

#[test]
fn reduced_state_count_matches_update_count() {
    for n in 1..=8 {
        assert_eq!(enumerate_reduced_states(n).len() as u64, count_via_updates(n).1, "n = {n}");
    }
}

#[test]
fn feedback_matches_transmitter_count() {
    let cfg = ModelConfig::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 0..=5u8 {
        let expected = match n {
            0 => Observation::Idle,
            1 => Observation::Success,
            _ => Observation::Collision,
        };
        assert_eq!(Observation::from_transmitters(n as usize), expected);
        // everyone transmits
        let (_, o) = sample_step(&occ(&[n]), &ActionVector::all_ones(1), &cfg, &mut rng).unwrap();
        assert_eq!(o, expected);
    }
}

#[test]
fn sampling_agrees_with_kernel() {
    let cfg = ModelConfig::new(5);
    let cases: [(&[u8], &[f64]); 4] =
        [(&[3], &[0.5]), (&[2, 3], &[0.25, 0.75]), (&[1, 2, 2], &[1.0, 0.5, 0.25]), (&[5, 0, 0], &[0.4, 0.0, 0.0])];
    let draws = 100_000usize;
    for (idx, (c, p)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(idx as u64);
        let s = occ(c);
        let a = ActionVector::new(p.to_vec()).unwrap();
        let mut counts: BTreeMap<(ClusterOccupancy, Observation), usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(sample_step(&s, &a, &cfg, &mut rng).unwrap()).or_default() += 1;
        }
        for out in outcomes(&s, &a, &cfg).unwrap() {
            let freq = counts.remove(&(out.next.clone(), out.observation)).unwrap_or(0) as f64 / draws as f64;
            let se = (out.probability * (1.0 - out.probability) / draws as f64).sqrt();
            assert!((freq - out.probability).abs() <= 3.0 * se + 1e-12, "{s} -> {}: {freq} vs {}", out.next, out.probability);
        }
        assert!(counts.is_empty(), "sampled outcomes outside the kernel: {counts:?}");
    }
}

#[test]
fn lifted_values_ignore_cluster_layout() {
    let g = genie();
    for m in 1..=4 {
        for n in 0..=4u8 {
            for c in compositions(n, m) {
                let (v, a) = lift(&occ(&c), g).unwrap();
                let mut shuffled: Vec<(u8, f64)> = c.iter().copied().zip(a.probs().iter().copied()).collect();
                shuffled.reverse();
                shuffled.rotate_left(1 % m);
                let perm: Vec<u8> = shuffled.iter().map(|x| x.0).collect();
                let (v2, a2) = lift(&occ(&perm), g).unwrap();
                assert_eq!(v, v2, "{c:?} vs {perm:?}");
                // the lifted action follows the clusters, up to swaps of equal-sized ones
                let key = |cs: &[u8], ps: &[f64]| {
                    let mut k: Vec<(u8, u64)> = cs.iter().zip(ps).map(|(&x, &p)| (x, p.to_bits())).collect();
                    k.sort();
                    k
                };
                assert_eq!(key(&c, a.probs()), key(&perm, a2.probs()), "{c:?} vs {perm:?}");
            }
        }
    }
}

#[test]
fn table_never_outgrows_backups() {
    let b0 = treeres::belief::build_initial_belief(&[0.1, 0.1, 0.3, 0.3, 0.2], false).unwrap();
    let cfg = ModelConfig::new(5);
    for (seed, init) in [(1, InitMode::Zero), (2, InitMode::Genie(genie().clone()))] {
        let mut table = ValueTable::new(10, init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train(&mut table, &b0, 200, &mut rng, &RtdpParams::default(), &cfg).unwrap();
        assert!(table.len() as u64 <= table.backups());
        let keys: Vec<&QuantizedBelief> = table.sorted_entries().into_iter().map(|(k, _)| k).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }
}
