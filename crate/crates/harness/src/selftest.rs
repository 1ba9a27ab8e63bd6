//! Invariant suites run by `cfbeam selftest` and by the acceptance tests.
//! Every check compares the simulator against an independent oracle.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use cfbeam_core::agents::{double_q_loss, qmix_loss, DuelingNet, Mixer, PlainQNet, QFunction, QmixNets, QmixTransition, Transition};
use cfbeam_core::beamspace::{effective_action_space, prune_bs_actions, sweep_narrow, top_k, CandidateSets};
use cfbeam_core::channel::{array_response, complex_normal, dft_codebook, SmallScaleState};
use cfbeam_core::phy::{analog_block, estimated_rate, system_rates, zf_combiner, BeamAssignment, BeamSet};
use cfbeam_core::rng::stream;
use cfbeam_core::schedulers::{hdlo_select, lbs_select, lcb_select, RateContext};
use cfbeam_core::sim::{EpisodeKey, Env, Scenario};
use cfbeam_core::traffic::{packet_count, sample_packet};
use cfbeam_core::ScenarioConfig;
use cfbeam_nn::{grad_check, max_relative_error, numeric_gradients, Layer, Network, Parameterized, Tensor};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::manifest::Manifest;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (passed, detail) = f();
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Codebook unitarity, unit-norm array responses and the zero-forcing
/// residual over `instances` random well-conditioned channels.
pub fn algebra(instances: usize) -> Check {
    timed("algebra", || {
        let mut worst_unitary = 0.0f64;
        for m in [1, 2, 4, 8, 16, 32, 64] {
            let f = dft_codebook(m);
            let r = f.adjoint() * &f - DMatrix::<Complex64>::identity(m, m);
            worst_unitary = worst_unitary.max(r.norm());
        }
        let mut rng = stream(11, "selftest-algebra", &[]);
        let mut worst_norm = 0.0f64;
        let mut worst_zf = 0.0f64;
        for _ in 0..instances {
            let (my, mz) = (rng.random_range(1..=8), rng.random_range(1..=4));
            let a = array_response(rng.random_range(-3.2..3.2), rng.random_range(0.0..3.2), my, mz);
            worst_norm = worst_norm.max((a.norm() - 1.0).abs());
            let u = rng.random_range(1..=4);
            let rows = u + rng.random_range(0..=6);
            let h = DMatrix::from_fn(rows, u, |_, _| complex_normal(&mut rng));
            let s = h.clone().singular_values();
            let cond = s.max() / s.min();
            if cond > 1e3 {
                continue;
            }
            match zf_combiner(&h) {
                Ok(w) => {
                    let r = &w.matrix * &h - DMatrix::<Complex64>::identity(u, u);
                    worst_zf = worst_zf.max(r.norm());
                }
                Err(_) => worst_zf = f64::INFINITY,
            }
        }
        (
            worst_unitary < 1e-10 && worst_norm < 1e-10 && worst_zf < 1e-8,
            format!("unitarity {worst_unitary:.1e}, response norm {worst_norm:.1e}, zf residual {worst_zf:.1e}"),
        )
    })
}

/// Pareto and Poisson means, and AR(1) lag-1 correlation and variance.
pub fn distributions(samples: usize) -> Check {
    timed("distributions", || {
        let mut rng = stream(12, "selftest-dist", &[]);
        let pareto = (0..samples).map(|_| sample_packet(6.0, 1.0, &mut rng)).sum::<f64>() / samples as f64;
        let pareto_err = (pareto - 1.2).abs() / 1.2;
        let mut poisson_err = 0.0f64;
        for lambda in [4.5, 5.0, 5.5, 6.0] {
            let mean = (0..samples).map(|_| packet_count(lambda, &mut rng) as f64).sum::<f64>() / samples as f64;
            poisson_err = poisson_err.max((mean - lambda).abs() / lambda);
        }
        let mut state = SmallScaleState::stationary(1, 0.91, &mut rng);
        let mut xs = Vec::with_capacity(samples);
        for _ in 0..samples {
            state.evolve(&mut rng);
            xs.push(state.gains[0]);
        }
        let var = xs.iter().map(|z| z.norm_sqr()).sum::<f64>() / samples as f64;
        let lag = xs.windows(2).map(|w| (w[1] * w[0].conj()).re).sum::<f64>() / (samples - 1) as f64 / var;
        (
            pareto_err < 0.01 && poisson_err < 0.01 && (lag - 0.91).abs() < 0.02 && (var - 1.0).abs() < 0.02,
            format!(
                "pareto mean {pareto:.4} ({:.2}%), poisson worst {:.2}%, lag-1 {lag:.4}, variance {var:.4}",
                100.0 * pareto_err,
                100.0 * poisson_err
            ),
        )
    })
}

/// Enumerate every tuple, drop those repeating a beam, keep distinct sets.
pub fn brute_force_sets(cands: &[Vec<usize>]) -> BTreeSet<Vec<usize>> {
    let mut out = BTreeSet::new();
    let total: usize = cands.iter().map(Vec::len).product();
    for code in 0..total {
        let mut rest = code;
        let mut tuple = Vec::with_capacity(cands.len());
        for c in cands.iter().rev() {
            tuple.push(c[rest % c.len()]);
            rest /= c.len();
        }
        let mut set = tuple.clone();
        set.sort_unstable();
        set.dedup();
        if set.len() == tuple.len() {
            out.insert(set);
        }
    }
    out
}

fn pruning_agrees(cands: &[Vec<usize>]) -> bool {
    let oracle = brute_force_sets(cands);
    match prune_bs_actions(cands) {
        Ok(space) => {
            let got: Vec<Vec<usize>> = space.sets().iter().map(|s| s.beams().to_vec()).collect();
            let distinct: BTreeSet<Vec<usize>> = got.iter().cloned().collect();
            distinct.len() == got.len() && distinct == oracle
        }
        Err(_) => oracle.is_empty(),
    }
}

fn tiny_scenario(seed: u64) -> Scenario {
    Scenario::new(ScenarioConfig {
        n_bs: 2,
        n_users: 2,
        m_y: 4,
        m_z: 1,
        m_wide: 2,
        lambda: vec![4.5, 5.0],
        q_req: vec![9.0, 10.0],
        q_lim: vec![18.0, 20.0],
        slots_per_episode: 4,
        seed,
        ..ScenarioConfig::default()
    })
    .expect("tiny scenario is valid")
}

fn weighted(queues: &[f64], a: &BeamAssignment, env: &Env, ctx: &RateContext, n_tr: usize) -> f64 {
    match system_rates(a, ctx.codebook, &env.channel, &ctx.power, &ctx.budget, n_tr) {
        Ok(r) => queues.iter().zip(&r.rates).map(|(q, r)| q * r).sum(),
        Err(_) => 0.0,
    }
}

/// First maximizer in lexicographic order over per-BS set lists.
fn exhaustive(queues: &[f64], env: &Env, ctx: &RateContext, allowed: &[Vec<Vec<usize>>], n_tr: usize) -> Vec<Vec<usize>> {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for s0 in &allowed[0] {
        for s1 in &allowed[1] {
            let a = BeamAssignment::from_indices(vec![s0.clone(), s1.clone()]).expect("distinct beams");
            let v = weighted(queues, &a, env, ctx, n_tr);
            if v > best.1 {
                best = (vec![s0.clone(), s1.clone()], v);
            }
        }
    }
    best.0
}

fn beams(a: &BeamAssignment) -> Vec<Vec<usize>> {
    a.per_bs.iter().map(|s| s.beams().to_vec()).collect()
}

fn schedulers_agree(seed: u64) -> Result<bool, String> {
    let sc = tiny_scenario(seed);
    let env = Env::new(&sc, EpisodeKey::eval(seed as usize)).map_err(|e| e.to_string())?;
    let ctx = env.rate_context();
    let mut rng = stream(seed, "selftest-queues", &[]);
    let queues = [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
    let m = 4;
    let all: Vec<Vec<usize>> = (0..m).flat_map(|i| (i + 1..m).map(move |j| vec![i, j])).collect();
    let want = exhaustive(&queues, &env, &ctx, &[all.clone(), all], m);
    let (lcb, _) = lcb_select(&queues, &env.channel, &ctx, 1_000_000).map_err(|e| e.to_string())?;
    let full = lbs_select(&queues, &env.channel, &ctx, m, 1_000_000).map_err(|e| e.to_string())?;
    let grids: Vec<_> = (0..2).map(|u| sweep_narrow(&env.channel, ctx.codebook, u)).collect();
    let mut allowed = Vec::new();
    for b in 0..2 {
        let mut k = 2;
        loop {
            let c: Vec<Vec<usize>> = grids.iter().map(|g| top_k(g.row(b), k)).collect();
            let a: Vec<Vec<usize>> = brute_force_sets(&c).into_iter().collect();
            if !a.is_empty() {
                allowed.push(a);
                break;
            }
            k += 1;
        }
    }
    let lbs = lbs_select(&queues, &env.channel, &ctx, 2, 1_000_000).map_err(|e| e.to_string())?;
    let lbs_want = exhaustive(&queues, &env, &ctx, &allowed, m);
    let cands = CandidateSets::new(2, 2, (0..2).flat_map(|b| grids.iter().map(move |g| top_k(g.row(b), 3))).collect());
    let space = effective_action_space(&cands, 1_000_000).map_err(|e| e.to_string())?;
    let chosen = hdlo_select(&queues, &env.channel, ctx.codebook, &space, sc.power);
    let mut hdlo_ok = true;
    for b in 0..2 {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for set in brute_force_sets(cands.for_bs(b)) {
            let w = analog_block(&BeamSet::new(set.clone()).expect("distinct"), ctx.codebook);
            let v: f64 = (0..2).map(|u| queues[u] * estimated_rate(&w, &env.channel.link(b, u), sc.power)).sum();
            if v > best.1 {
                best = (set, v);
            }
        }
        hdlo_ok &= space.per_bs()[b].sets()[chosen[b]].beams() == &best.0[..];
    }
    Ok(beams(&lcb) == want && beams(&full.assignment) == want && beams(&lbs.assignment) == lbs_want && hdlo_ok)
}

fn queue_replay_agrees(seed: u64) -> Result<bool, String> {
    let sc = tiny_scenario(seed);
    let mut env = Env::new(&sc, EpisodeKey::train(seed as usize)).map_err(|e| e.to_string())?;
    let a = BeamAssignment::from_indices(vec![vec![0, 1], vec![1, 3]]).map_err(|e| e.to_string())?;
    let mut q = env.queues.clone();
    let mut ok = true;
    while !env.done() {
        let out = env.step(&a, 2).map_err(|e| e.to_string())?;
        for u in 0..2 {
            q[u] = (q[u] - out.served[u]).max(0.0) + out.arrivals[u];
            ok &= out.queues[u] == q[u];
        }
    }
    Ok(ok)
}

/// Pruning against enumerate-and-filter, the two-user worked example,
/// selectors against exhaustive loops, and the queue recursion against a
/// replay.
pub fn oracles(instances: usize, scheduler_instances: usize) -> Check {
    timed("oracles", || {
        let mut rng = stream(13, "selftest-prune", &[]);
        let mut prune_fail = 0;
        for _ in 0..instances {
            let users = rng.random_range(1..=4);
            let m = rng.random_range(2..=10);
            let cands: Vec<Vec<usize>> = (0..users)
                .map(|_| {
                    let k = rng.random_range(1..=m.min(4));
                    rand::seq::index::sample(&mut rng, m, k).into_vec()
                })
                .collect();
            if !pruning_agrees(&cands) {
                prune_fail += 1;
            }
        }
        let example = vec![vec![1, 2, 7], vec![1, 2, 3]];
        let example_size = prune_bs_actions(&example).map(|s| s.len()).unwrap_or(0);
        let mut sched_fail = Vec::new();
        let mut queue_fail = Vec::new();
        for seed in 0..scheduler_instances as u64 {
            if schedulers_agree(seed) != Ok(true) {
                sched_fail.push(seed);
            }
            if queue_replay_agrees(seed) != Ok(true) {
                queue_fail.push(seed);
            }
        }
        (
            prune_fail == 0 && example_size == 6 && sched_fail.is_empty() && queue_fail.is_empty(),
            format!(
                "pruning mismatches {prune_fail}/{instances}, example |A| = {example_size}, selector mismatches {sched_fail:?}, queue mismatches {queue_fail:?}"
            ),
        )
    })
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Moves every parameter off zero so no ReLU input sits on its kink.
fn jitter<P: Parameterized + ?Sized>(model: &mut P, rng: &mut impl Rng) {
    for t in model.parameters_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
}

fn layer_errors(seed: u64) -> f64 {
    let mut rng = stream(seed, "selftest-layers", &[]);
    let mut conv = Network::new(vec![
        Layer::conv2d(1, 3, 2, 2, &mut rng),
        Layer::Relu,
        Layer::conv2d(3, 2, 2, 2, &mut rng),
        Layer::Relu,
        Layer::Flatten,
        Layer::dense(2 * 4 * 5, 4, &mut rng),
        Layer::Relu,
        Layer::dense(4, 3, &mut rng),
    ]);
    jitter(&mut conv, &mut rng);
    let x = Tensor::new(vec![1, 4, 5], random_vec(&mut rng, 20)).expect("shape");
    let mut mlp = Network::mlp(&[5, 6, 4], &mut rng);
    jitter(&mut mlp, &mut rng);
    let y = Tensor::vector(random_vec(&mut rng, 5));
    let a = grad_check(&conv, &x, 1e-6).unwrap_or(f64::INFINITY);
    let b = grad_check(&mlp, &y, 1e-6).unwrap_or(f64::INFINITY);
    a.max(b)
}

fn d3qn_error(seed: u64) -> f64 {
    let mut rng = stream(seed, "selftest-d3qn", &[]);
    let mut online = DuelingNet::new(5, &[7, 6], &[4], 6, &mut rng);
    jitter(&mut online, &mut rng);
    let target = DuelingNet::new(5, &[7, 6], &[4], 6, &mut rng);
    let valid: Arc<Vec<usize>> = Arc::new(vec![0, 2, 3, 5]);
    let data: Vec<Transition> = (0..4)
        .map(|_| Transition {
            state: random_vec(&mut rng, 5),
            action: valid[rng.random_range(0..valid.len())],
            reward: rng.random_range(-3.0..0.0),
            next_state: random_vec(&mut rng, 5),
            valid: valid.clone(),
        })
        .collect();
    let batch: Vec<&Transition> = data.iter().collect();
    let Ok((_, analytic)) = double_q_loss(&online, &target, &batch, 0.9) else {
        return f64::INFINITY;
    };
    let numeric = numeric_gradients(&mut online, 1e-5, |n| {
        double_q_loss(n, &target, &batch, 0.9).map_or(f64::NAN, |l| l.0)
    });
    max_relative_error(&analytic, &numeric)
}

fn qmix_error(seed: u64) -> f64 {
    let mut rng = stream(seed, "selftest-qmix", &[]);
    let hidden: &[usize] = if seed % 2 == 0 { &[4] } else { &[4, 3] };
    fn make(rng: &mut impl Rng, hidden: &[usize]) -> QmixNets {
        QmixNets {
            locals: (0..2).map(|_| PlainQNet::new(3, &[5], 4, rng)).collect(),
            mixer: Mixer::new(2, 6, hidden, 6, rng),
        }
    }
    let mut nets = make(&mut rng, hidden);
    jitter(&mut nets, &mut rng);
    let target = make(&mut rng, hidden);
    let valid: Vec<Arc<Vec<usize>>> = (0..2).map(|_| Arc::new(vec![0, 1, 2, 3])).collect();
    let data: Vec<QmixTransition> = (0..3)
        .map(|_| QmixTransition {
            states: (0..2).map(|_| random_vec(&mut rng, 3)).collect(),
            actions: (0..2).map(|_| rng.random_range(0..4)).collect(),
            reward: rng.random_range(-2.0..0.0),
            next_states: (0..2).map(|_| random_vec(&mut rng, 3)).collect(),
            valid: valid.clone(),
        })
        .collect();
    let batch: Vec<&QmixTransition> = data.iter().collect();
    let Ok((_, analytic)) = qmix_loss(&nets, &target, &batch, 0.9) else {
        return f64::INFINITY;
    };
    let numeric = numeric_gradients(&mut nets, 1e-5, |n| qmix_loss(n, &target, &batch, 0.9).map_or(f64::NAN, |l| l.0));
    max_relative_error(&analytic, &numeric)
}

/// Finite-difference agreement of every layer kind and both learning
/// losses, mixer monotonicity, and the dueling mean-advantage identity.
pub fn gradients(instances: usize, probes: usize) -> Check {
    timed("gradients", || {
        let seeds = 0..instances as u64;
        let layers = seeds.clone().map(layer_errors).fold(0.0, f64::max);
        let d3qn = seeds.clone().map(d3qn_error).fold(0.0, f64::max);
        let qmix = seeds.map(qmix_error).fold(0.0, f64::max);
        let mut rng = stream(14, "selftest-mono", &[]);
        let mixer = Mixer::new(3, 6, &[8, 5], 6, &mut rng);
        let mut worst_slope = f64::INFINITY;
        for _ in 0..probes {
            let s = random_vec(&mut rng, 6);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            for b in 0..3 {
                let (mut up, mut down) = (q.clone(), q.clone());
                up[b] += 1e-5;
                down[b] -= 1e-5;
                let slope = (mixer.mix(&up, &s).unwrap_or(f64::NAN) - mixer.mix(&down, &s).unwrap_or(f64::NAN)) / 2e-5;
                worst_slope = worst_slope.min(slope);
            }
        }
        let net = DuelingNet::new(4, &[6, 6], &[], 7, &mut rng);
        let valid = [0, 2, 3, 6];
        let mut worst_mean = 0.0f64;
        for _ in 0..50 {
            let x = random_vec(&mut rng, 4);
            if let (Ok((v, _)), Ok(q)) = (net.streams(&x), net.q_values(&x, &valid)) {
                let m = valid.iter().map(|&i| q[i] - v).sum::<f64>() / valid.len() as f64;
                worst_mean = worst_mean.max(m.abs());
            } else {
                worst_mean = f64::INFINITY;
            }
        }
        (
            layers < 1e-4 && d3qn < 1e-4 && qmix < 1e-4 && worst_slope >= -1e-9 && worst_mean < 1e-6,
            format!(
                "layers {layers:.1e}, dueling loss {d3qn:.1e}, mixing loss {qmix:.1e}, min mixer slope {worst_slope:.2e}, mean advantage {worst_mean:.1e}"
            ),
        )
    })
}

/// The effective-config echo names every key and parses back to the same
/// manifest.
pub fn config_coverage() -> Check {
    timed("config coverage", || {
        let m = Manifest::default();
        let echo = m.to_toml();
        let back = Manifest::parse(&echo);
        let mut with_options = m.clone();
        with_options.rl.max_grad_norm = Some(1.0);
        let echo_opt = with_options.to_toml();
        let missing: Vec<String> = Manifest::keys()
            .into_iter()
            .filter(|k| {
                let leaf = k.rsplit('.').next().unwrap_or(k);
                !echo_opt.lines().any(|l| l.trim_start().starts_with(&format!("{leaf} =")))
            })
            .collect();
        (
            back.as_ref().ok() == Some(&m) && missing.is_empty(),
            format!("{} keys, missing {missing:?}", Manifest::keys().len()),
        )
    })
}

/// The suite `cfbeam selftest` runs.
pub fn run_all() -> Vec<Check> {
    vec![
        algebra(1000),
        distributions(100_000),
        oracles(500, 10),
        gradients(20, 1000),
        config_coverage(),
    ]
}
