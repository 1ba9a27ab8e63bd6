use std::collections::BTreeSet;

use cfbeam_core::beamspace::{effective_action_space, prune_bs_actions, sweep_narrow, top_k, CandidateSets};
use cfbeam_core::phy::{analog_block, estimated_rate, system_rates, BeamAssignment};
use cfbeam_core::schedulers::{hdlo_select, lbs_select, lcb_select, RateContext};
use cfbeam_core::sim::{EpisodeKey, Env, Scenario};
use cfbeam_core::traffic::queue_update;
use cfbeam_core::{CoreError, ScenarioConfig};
use proptest::prelude::*;

/// Enumerate-then-filter: every tuple, drop conflicts, keep distinct sets.
fn brute_force_sets(cands: &[Vec<usize>]) -> BTreeSet<Vec<usize>> {
    let mut out = BTreeSet::new();
    let mut idx = vec![0usize; cands.len()];
    loop {
        let tuple: Vec<usize> = idx.iter().zip(cands).map(|(&i, c)| c[i]).collect();
        let mut set = tuple.clone();
        set.sort_unstable();
        set.dedup();
        if set.len() == tuple.len() {
            out.insert(set);
        }
        let mut u = cands.len();
        loop {
            if u == 0 {
                return out;
            }
            u -= 1;
            idx[u] += 1;
            if idx[u] < cands[u].len() {
                break;
            }
            idx[u] = 0;
        }
    }
}

fn lists_for(users: usize, m: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::sample::subsequence((0..m).collect::<Vec<_>>(), 1..=m.min(4)).prop_shuffle(), users)
}

fn candidate_lists() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (1usize..=4, 2usize..=10).prop_flat_map(|(users, m)| lists_for(users, m))
}

fn two_bs_lists() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    (1usize..=3, 2usize..=8).prop_flat_map(|(users, m)| (lists_for(users, m), lists_for(users, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn pruning_matches_enumerate_and_filter(cands in candidate_lists()) {
        let oracle = brute_force_sets(&cands);
        match prune_bs_actions(&cands) {
            Ok(space) => {
                let got: BTreeSet<Vec<usize>> = space.sets().iter().map(|s| s.beams().to_vec()).collect();
                prop_assert_eq!(got.len(), space.len(), "duplicate sets survived");
                prop_assert_eq!(got, oracle);
                for (i, &slot) in space.valid_slots().iter().enumerate() {
                    prop_assert_eq!(space.set_for_slot(slot), Some(i));
                }
            }
            Err(CoreError::Infeasible(_)) => prop_assert!(oracle.is_empty()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn cascaded_codecs_round_trip((a, b) in two_bs_lists()) {
        let cands = CandidateSets::new(2, a.len(), a.iter().chain(&b).cloned().collect());
        let Ok(space) = effective_action_space(&cands, 1_000_000) else {
            return Ok(());
        };
        let slots = space.valid_slots();
        for id in 0..space.size() {
            prop_assert_eq!(space.encode(&space.decode(id)), id);
            prop_assert_eq!(space.action_of_slot(slots[id]), Some(id));
        }
        let valid: BTreeSet<usize> = slots.iter().copied().collect();
        for slot in 0..space.slot_size() {
            prop_assert_eq!(space.action_of_slot(slot).is_some(), valid.contains(&slot));
        }
    }
}

#[test]
fn two_user_example_leaves_six_actions() {
    let cands = vec![vec![1, 2, 7], vec![1, 2, 3]];
    let space = prune_bs_actions(&cands).unwrap();
    assert_eq!(space.len(), 6);
    assert_eq!(brute_force_sets(&cands).len(), 6);
    let sets: Vec<Vec<usize>> = space.sets().iter().map(|s| s.beams().to_vec()).collect();
    assert!(!sets.contains(&vec![1, 1]) && !sets.contains(&vec![2, 2]));
    assert_eq!(sets.iter().filter(|s| **s == vec![1, 2]).count(), 1);
}

fn tiny_scenario(seed: u64) -> Scenario {
    let cfg = ScenarioConfig {
        n_bs: 2,
        n_users: 2,
        m_y: 4,
        m_z: 1,
        m_wide: 2,
        lambda: vec![4.5, 5.0],
        q_req: vec![9.0, 10.0],
        q_lim: vec![18.0, 20.0],
        slots_per_episode: 5,
        seed,
        ..ScenarioConfig::default()
    };
    Scenario::new(cfg).unwrap()
}

fn pairs(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            out.push(vec![i, j]);
        }
    }
    out
}

fn objective(queues: &[f64], a: &BeamAssignment, env: &Env, ctx: &RateContext, n_tr: usize) -> f64 {
    match system_rates(a, ctx.codebook, &env.channel, &ctx.power, &ctx.budget, n_tr) {
        Ok(r) => queues.iter().zip(&r.rates).map(|(q, r)| q * r).sum(),
        Err(_) => 0.0,
    }
}

/// Exhaustive argmax over assignments whose BS-`b` set is drawn from
/// `allowed[b]`; first maximum in lexicographic order wins.
fn exhaustive(queues: &[f64], env: &Env, ctx: &RateContext, allowed: &[Vec<Vec<usize>>], n_tr: usize) -> (Vec<Vec<usize>>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for s0 in &allowed[0] {
        for s1 in &allowed[1] {
            let a = BeamAssignment::from_indices(vec![s0.clone(), s1.clone()]).unwrap();
            let v = objective(queues, &a, env, ctx, n_tr);
            if v > best.1 {
                best = (vec![s0.clone(), s1.clone()], v);
            }
        }
    }
    best
}

fn beams(a: &BeamAssignment) -> Vec<Vec<usize>> {
    a.per_bs.iter().map(|s| s.beams().to_vec()).collect()
}

fn allowed_from(cands: &[Vec<usize>]) -> Vec<Vec<usize>> {
    brute_force_sets(cands).into_iter().collect()
}

#[test]
fn queue_weighted_selectors_match_exhaustive_loops() {
    for seed in 0..10 {
        let sc = tiny_scenario(seed);
        let env = Env::new(&sc, EpisodeKey::eval(seed as usize)).unwrap();
        let ctx = env.rate_context();
        let queues = [3.0 + seed as f64, 7.5];
        let m = 4;

        let (lcb, _) = lcb_select(&queues, &env.channel, &ctx, 1_000_000).unwrap();
        let all = vec![pairs(m), pairs(m)];
        let (want, v) = exhaustive(&queues, &env, &ctx, &all, m);
        assert_eq!(beams(&lcb), want, "LCB seed {seed}");
        assert_eq!(objective(&queues, &lcb, &env, &ctx, m), v);

        let full = lbs_select(&queues, &env.channel, &ctx, m, 1_000_000).unwrap();
        assert_eq!(beams(&full.assignment), want, "LBS with K = M equals LCB (seed {seed})");

        let k = 2;
        let grids: Vec<_> = (0..2).map(|u| sweep_narrow(&env.channel, ctx.codebook, u)).collect();
        let mut allowed = Vec::new();
        for b in 0..2 {
            let mut kb = k;
            loop {
                let c: Vec<Vec<usize>> = grids.iter().map(|g| top_k(g.row(b), kb)).collect();
                let a = allowed_from(&c);
                if !a.is_empty() {
                    allowed.push(a);
                    break;
                }
                kb += 1;
            }
        }
        let lbs = lbs_select(&queues, &env.channel, &ctx, k, 1_000_000).unwrap();
        let (want, _) = exhaustive(&queues, &env, &ctx, &allowed, m);
        assert_eq!(beams(&lbs.assignment), want, "LBS seed {seed}");

        let cands = CandidateSets::new(
            2,
            2,
            (0..2).flat_map(|b| grids.iter().map(move |g| top_k(g.row(b), 3))).collect(),
        );
        let space = effective_action_space(&cands, 1_000_000).unwrap();
        let chosen = hdlo_select(&queues, &env.channel, ctx.codebook, &space, sc.power);
        for b in 0..2 {
            let mut best = (Vec::new(), f64::NEG_INFINITY);
            for set in allowed_from(cands.for_bs(b)) {
                let bs = cfbeam_core::phy::BeamSet::new(set.clone()).unwrap();
                let w = analog_block(&bs, ctx.codebook);
                let v: f64 = (0..2)
                    .map(|u| queues[u] * estimated_rate(&w, &env.channel.link(b, u), sc.power))
                    .sum();
                if v > best.1 {
                    best = (set, v);
                }
            }
            assert_eq!(space.per_bs()[b].sets()[chosen[b]].beams(), &best.0[..], "HDLO seed {seed} BS {b}");
        }
    }
}

#[test]
fn queue_recursion_matches_independent_replay() {
    let sc = tiny_scenario(4);
    let mut env = Env::new(&sc, EpisodeKey::train(2)).unwrap();
    let a = BeamAssignment::from_indices(vec![vec![0, 1], vec![2, 3]]).unwrap();
    let mut q = env.queues.clone();
    while !env.done() {
        let out = env.step(&a, 2).unwrap();
        for u in 0..2 {
            q[u] = (q[u] - out.served[u]).max(0.0) + out.arrivals[u];
            assert_eq!(out.queues[u], q[u]);
            assert_eq!(queue_update(0.0, 1.0, 2.0), 2.0);
        }
    }
    for u in 0..2 {
        let tr = &env.trace.users[u];
        let mut q = tr.queue[0];
        for t in 0..tr.slots() {
            q = (q - tr.served[t]).max(0.0) + tr.arrivals[t];
            assert_eq!(tr.queue[t + 1], q);
        }
    }
}
