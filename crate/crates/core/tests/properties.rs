//! Property-based invariants.

use adn_count::mmc::{
    initial_node, mmc_round, potential_update, run_mmc, MmcConfig, ParamCache, ProtocolConfig,
    RoundCtx, Wire,
};
use adn_count::netsim::{AdversarySpec, Role, Topology};
use adn_count::params::{derive_epoch_params, update_estimate, EstimateState, Mode, Verdict};
use proptest::prelude::*;

fn connected(t: &Topology) -> bool {
    let adj = t.adjacency();
    let mut seen = vec![false; t.n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in adj.neighbors(v) {
            if !seen[u as usize] {
                seen[u as usize] = true;
                stack.push(u as usize);
            }
        }
    }
    seen.iter().all(|s| *s)
}

fn well_formed(t: &Topology, n: usize) -> bool {
    t.n == n
        && connected(t)
        && t.edges.iter().all(|&(u, v)| u < v && (v as usize) < n)
        && t.edges.windows(2).all(|w| w[0] < w[1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_adversaries_produce_valid_topologies(n in 2usize..40, seed in any::<u64>(), round in 1u64..1_000_000) {
        for spec in [
            AdversarySpec::RandomConnected { seed },
            AdversarySpec::PermutedPath { seed },
            AdversarySpec::RandomTree { seed },
        ] {
            let t = spec.oblivious_topology(n, round).unwrap();
            prop_assert!(well_formed(&t, n), "{:?} gave {:?}", spec, t);
            let max_deg = t.degrees().into_iter().max().unwrap();
            prop_assert!(max_deg <= spec.degree_bound(n));
            match spec {
                AdversarySpec::RandomTree { .. } | AdversarySpec::PermutedPath { .. } => prop_assert_eq!(t.edges.len(), n - 1),
                _ => {}
            }
        }
    }

    #[test]
    fn oblivious_topologies_depend_only_on_seed_and_round(n in 2usize..20, seed in any::<u64>(), round in 1u64..1000) {
        let spec = AdversarySpec::RandomConnected { seed };
        prop_assert_eq!(spec.oblivious_topology(n, round).unwrap(), spec.oblivious_topology(n, round).unwrap());
    }

    #[test]
    fn averaging_stays_within_inbox_hull(phi in 0.0f64..10.0, inbox in prop::collection::vec(0.0f64..10.0, 0..7)) {
        let d = inbox.len() as u64 + 1;
        let out = potential_update(phi, &inbox, d);
        let lo = inbox.iter().copied().fold(phi, f64::min);
        let hi = inbox.iter().copied().fold(phi, f64::max);
        prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
    }

    #[test]
    fn averaging_ignores_inbox_order(phi in 0.0f64..4.0, mut inbox in prop::collection::vec(0.0f64..4.0, 0..8), rot in 0usize..8) {
        let d = 9;
        let a = potential_update(phi, &inbox, d);
        if !inbox.is_empty() {
            let k = rot % inbox.len();
            inbox.rotate_left(k);
            inbox.reverse();
        }
        prop_assert_eq!(a.to_bits(), potential_update(phi, &inbox, d).to_bits());
    }

    #[test]
    fn search_interval_never_inverts(ell in 1u64..5, verdicts in prop::collection::vec(any::<bool>(), 0..20)) {
        let mut s = EstimateState::initial(ell);
        for low in verdicts {
            let v = if low { Verdict::Low } else { Verdict::High };
            match update_estimate(v, s) {
                Ok(next) => {
                    prop_assert!(next.k > ell);
                    prop_assert!(next.min <= next.k);
                    s = next;
                }
                Err(_) => break,
            }
        }
    }

    #[test]
    fn identical_states_and_inboxes_evolve_identically(
        black in any::<bool>(),
        phis in prop::collection::vec(0.0f64..2.0, 0..4),
        steps in 1usize..50,
    ) {
        let cfg = ProtocolConfig { ell: 2, epsilon: 0.5, mode: Mode::Paper, cap: None, trimmed: false };
        let mut cache = ParamCache::default();
        let role = if black { Role::Black } else { Role::White };
        let mut a = initial_node(role, &cfg, &mut cache).unwrap();
        let mut b = a;
        let inbox: Vec<Wire> = phis.iter().map(|&phi| Wire { phi, status: a.status, b: false }).collect();
        let mut ev_a = Vec::new();
        let mut ev_b = Vec::new();
        for round in 1..=steps as u64 {
            let wa = mmc_round(&mut a, &inbox, &mut RoundCtx { cfg: &cfg, cache: &mut cache, round, node: 0, events: &mut ev_a });
            let wb = mmc_round(&mut b, &inbox, &mut RoundCtx { cfg: &cfg, cache: &mut cache, round, node: 7, events: &mut ev_b });
            prop_assert_eq!(wa.is_ok(), wb.is_ok());
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
        prop_assert_eq!(ev_a.len(), ev_b.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameters_grow_with_the_estimate(k in 2u64..256, eps in prop::sample::select(vec![0.25, 0.5, 1.0])) {
        let a = derive_epoch_params(k, 1, eps, Mode::Paper).unwrap();
        let b = derive_epoch_params(k + 1, 1, eps, Mode::Paper).unwrap();
        prop_assert!(a.conditions().all_hold() && b.conditions().all_hold());
        prop_assert!(b.d >= a.d);
        prop_assert!(b.r >= a.r);
        prop_assert!(b.epoch_rounds() >= a.epoch_rounds());
        prop_assert!(b.tau >= a.tau && a.tau < 1.0);
        prop_assert!((a.d as f64) >= (k as f64).powf(1.0 + eps) - 1e-9);
    }

    #[test]
    fn small_runs_count_exactly(n in 2usize..6, ell_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let ell = 1 + ((n - 1) as f64 * ell_frac) as u64 % (n as u64 - 1);
        let cfg = MmcConfig::new(n, ell, 0.5, AdversarySpec::RandomConnected { seed }, Mode::Paper);
        let res = run_mmc(&cfg, &mut []).unwrap();
        prop_assert_eq!(res.agreed_count(), Some(n as u64));
    }
}
