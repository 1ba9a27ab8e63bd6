//! Episode environment, observations and pseudo-states, the three learning
//! loops (centralized dueling double-Q, independent per-BS double-Q and
//! monotone mixing) and parallel evaluation.

use std::collections::VecDeque;
use std::sync::Arc;

use cfbeam_nn::{Parameterized, Sgdm, StepDecay};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    d3qn_train_step, ddqn_train_step, fd_reward, qmix_train_step, select_action, DuelingNet, EpsilonSchedule, Mixer,
    Phase, PlainQNet, QFunction, QmixNets, QmixTransition, ReplayBuffer, TargetSync, Transition,
};
use crate::beamspace::{
    adjacent_candidates, effective_action_space, normalize_per_bs, sweep_narrow, sweep_wide, top_k, BeamPredictor,
    CandidateSets, EffectiveActionSpace,
};
use crate::channel::{
    assemble_channel, place_base_stations, place_users, sample_long_term, ChannelRealization, CodebookSet,
    LongTermState, Position, SmallScaleState, Topology,
};
use crate::phy::{
    analog_combiner, equivalent_csi, estimated_rate, system_rates, BeamAssignment, LinkBudget,
};
use crate::rng::{stream, tag};
use crate::schedulers::{
    hdlo_select, hdlo_training_count, lbs_select, lcb_select, random_select, strongest_select, RateContext,
};
use crate::traffic::{
    episode_metrics, satisfaction_rate, EpisodeTrace, SatisfactionRates, SojournTracker, TrafficConfig, UserMetrics,
    UserTrace,
};
use crate::{CoreError, ScenarioConfig};

// ---------------------------------------------------------------------------
// Schemes and scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// Centralized dueling double-Q over the predicted candidate space.
    WbrD3qn,
    /// Same learner over genie-aided adjacent-beam candidates.
    SbaD3qn,
    /// Independent per-BS double-Q with local rewards.
    DDdqn,
    /// Per-BS local networks trained through a monotone mixer.
    QmixPdbs,
    Lcb,
    Lbs,
    Hdlo,
    Random,
    Strongest,
}

impl Scheme {
    pub const ALL: [Scheme; 9] = [
        Scheme::WbrD3qn,
        Scheme::SbaD3qn,
        Scheme::DDdqn,
        Scheme::QmixPdbs,
        Scheme::Lcb,
        Scheme::Lbs,
        Scheme::Hdlo,
        Scheme::Random,
        Scheme::Strongest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::WbrD3qn => "WBR-D3QN",
            Scheme::SbaD3qn => "SBA-D3QN",
            Scheme::DDdqn => "D-DDQN",
            Scheme::QmixPdbs => "QMIX-PDBS",
            Scheme::Lcb => "LCB",
            Scheme::Lbs => "LBS",
            Scheme::Hdlo => "HDLO",
            Scheme::Random => "random",
            Scheme::Strongest => "strongest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL.into_iter().find(|sc| {
            sc.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase() == key
        })
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Scheme::WbrD3qn | Scheme::SbaD3qn | Scheme::DDdqn | Scheme::QmixPdbs)
    }

    pub fn is_distributed(self) -> bool {
        matches!(self, Scheme::DDdqn | Scheme::QmixPdbs | Scheme::Hdlo)
    }

    /// Candidates per (BS, user) used by this scheme.
    pub fn k(self, cfg: &ScenarioConfig) -> usize {
        match self {
            Scheme::SbaD3qn => 3,
            s if s.is_distributed() => cfg.k_distributed,
            _ => cfg.k_centralized,
        }
    }

    pub fn candidate_mode(self) -> CandidateMode {
        match self {
            Scheme::SbaD3qn => CandidateMode::Adjacent,
            _ => CandidateMode::Predicted,
        }
    }
}

/// Where per-interval candidate beams come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    /// Top-K of the predictor output fed with the wide sweep at slot 1.
    Predicted,
    /// Top-K of the true narrow sweep at slot 1.
    Genie,
    /// Three contiguous beams centred on the true strongest narrow beam.
    Adjacent,
}

/// Fixed infrastructure plus everything derived from the configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub bs: Vec<Position>,
    pub codebooks: CodebookSet,
    pub traffic: TrafficConfig,
    pub budget: LinkBudget,
    pub power: f64,
    pub predictor: Option<BeamPredictor>,
    /// Replaces predicted candidates with the genie top-K (for tests and
    /// scenarios without a trained predictor).
    pub genie_candidates: bool,
}

impl Scenario {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, tag::BS_PLACEMENT, &[]);
        let bs = place_base_stations(&cfg, &mut rng)?;
        Ok(Self {
            codebooks: CodebookSet::new(&cfg),
            traffic: TrafficConfig::from_scenario(&cfg),
            budget: LinkBudget {
                bandwidth_hz: cfg.bandwidth_hz,
                slot_s: cfg.slot_s,
                symbol_s: cfg.symbol_s,
            },
            power: cfg.normalized_power(),
            bs,
            cfg,
            predictor: None,
            genie_candidates: false,
        })
    }

    pub fn with_predictor(mut self, p: BeamPredictor) -> Self {
        self.predictor = Some(p);
        self
    }

    pub fn n_bs(&self) -> usize {
        self.cfg.n_bs
    }

    pub fn n_users(&self) -> usize {
        self.cfg.n_users
    }

    pub fn antennas(&self) -> usize {
        self.cfg.antennas()
    }

    /// Beam-training symbols per slot charged to a scheme, for schemes whose
    /// count does not depend on the slot.
    pub fn fixed_training_symbols(&self, scheme: Scheme) -> Option<usize> {
        match scheme {
            Scheme::Lcb | Scheme::Lbs => Some(self.antennas()),
            Scheme::Hdlo => None,
            _ => Some(self.n_users()),
        }
    }
}

/// Identifies an episode's random streams: `phase` separates training from
/// evaluation, `index` numbers episodes within a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeKey {
    pub phase: u64,
    pub index: u64,
}

impl EpisodeKey {
    pub fn train(index: usize) -> Self {
        Self { phase: 0, index: index as u64 }
    }

    pub fn eval(index: usize) -> Self {
        Self { phase: 1, index: index as u64 }
    }

    fn ids(&self) -> [u64; 2] {
        [self.phase, self.index]
    }
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

/// Reward `r = −Σ_u q_u/q̄_u − δ Σ_u 1(q_u > q̆_u)` split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParts {
    pub backlog: f64,
    pub violations: f64,
    pub total: f64,
}

pub fn reward(queues: &[f64], q_req: &[f64], q_lim: &[f64], delta: f64) -> RewardParts {
    let backlog: f64 = queues.iter().zip(q_req).map(|(q, r)| q / r).sum();
    let count = queues.iter().zip(q_lim).filter(|(q, l)| q > l).count() as f64;
    let violations = delta * count;
    RewardParts {
        backlog,
        violations,
        total: -backlog - violations,
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub rates: Vec<f64>,
    pub served: Vec<f64>,
    pub arrivals: Vec<f64>,
    pub queues: Vec<f64>,
    pub reward: RewardParts,
    /// `W_RF H` for the slot that was just served.
    pub hbar: DMatrix<Complex64>,
    pub degenerate: bool,
    pub loaded: bool,
}

/// One long-timescale interval (episode) of `T` slots.
pub struct Env<'a> {
    pub scenario: &'a Scenario,
    pub key: EpisodeKey,
    pub users: Vec<Position>,
    pub long_term: LongTermState,
    small: SmallScaleState,
    small_rng: ChaCha8Rng,
    arrival_rngs: Vec<ChaCha8Rng>,
    pub channel: ChannelRealization,
    pub queues: Vec<f64>,
    pub trace: EpisodeTrace,
    pub sojourn: Vec<SojournTracker>,
    /// Next slot to be served (1-based).
    pub t: usize,
    pub degenerate_slots: usize,
}

impl<'a> Env<'a> {
    pub fn new(scenario: &'a Scenario, key: EpisodeKey) -> Result<Self, CoreError> {
        let cfg = &scenario.cfg;
        let ids = key.ids();
        let users = place_users(cfg, &mut stream(cfg.seed, tag::USERS, &ids))?;
        let topo = Topology {
            bs: scenario.bs.clone(),
            users: users.clone(),
            region_m: cfg.region_m,
        };
        let long_term = sample_long_term(&topo, cfg, &mut stream(cfg.seed, tag::LONG_TERM, &ids));
        let mut small_rng = stream(cfg.seed, tag::SMALL_SCALE, &ids);
        let small = SmallScaleState::stationary(cfg.n_bs * cfg.n_users * cfg.path_count, cfg.rho, &mut small_rng);
        let channel = assemble_channel(&long_term, &small, cfg.m_y, cfg.m_z, 1);
        let mut qrng = stream(cfg.seed, tag::QUEUE_INIT, &ids);
        let queues: Vec<f64> = cfg
            .q_req
            .iter()
            .map(|&q| {
                let hi = cfg.initial_queue_fraction * q;
                if hi > 0.0 {
                    qrng.random_range(0.0..hi)
                } else {
                    0.0
                }
            })
            .collect();
        let arrival_rngs = (0..cfg.n_users)
            .map(|u| stream(cfg.seed, tag::ARRIVALS, &[ids[0], ids[1], u as u64]))
            .collect();
        Ok(Self {
            scenario,
            key,
            users,
            long_term,
            small,
            small_rng,
            arrival_rngs,
            channel,
            trace: EpisodeTrace {
                users: queues.iter().map(|&q| UserTrace::new(q)).collect(),
            },
            sojourn: queues.iter().map(|&q| SojournTracker::new(q)).collect(),
            queues,
            t: 1,
            degenerate_slots: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.t > self.scenario.cfg.slots_per_episode
    }

    /// Candidate beams for this interval, measured on the slot-1 channel.
    pub fn candidates(&self, mode: CandidateMode, k: usize) -> Result<CandidateSets, CoreError> {
        let sc = self.scenario;
        let n_users = sc.n_users();
        let mut sets = vec![Vec::new(); sc.n_bs() * n_users];
        for u in 0..n_users {
            let per_bs: Vec<Vec<usize>> = match mode {
                CandidateMode::Predicted if !sc.genie_candidates => {
                    let p = sc.predictor.as_ref().ok_or_else(|| {
                        CoreError::Config("predicted candidates need a trained predictor".into())
                    })?;
                    let wide = normalize_per_bs(&sweep_wide(&self.channel, &sc.codebooks.wide, u));
                    let pred = p.predict(&wide.values)?;
                    (0..sc.n_bs()).map(|b| top_k(pred.row(b), k)).collect()
                }
                CandidateMode::Predicted | CandidateMode::Genie => {
                    let g = sweep_narrow(&self.channel, &sc.codebooks.narrow, u);
                    (0..sc.n_bs()).map(|b| top_k(g.row(b), k)).collect()
                }
                CandidateMode::Adjacent => {
                    let g = sweep_narrow(&self.channel, &sc.codebooks.narrow, u);
                    (0..sc.n_bs()).map(|b| adjacent_candidates(g.row(b), k)).collect()
                }
            };
            for (b, c) in per_bs.into_iter().enumerate() {
                sets[b * n_users + u] = c;
            }
        }
        Ok(CandidateSets::new(sc.n_bs(), n_users, sets))
    }

    pub fn rate_context(&self) -> RateContext<'a> {
        RateContext {
            codebook: &self.scenario.codebooks.narrow,
            power: vec![self.scenario.power; self.scenario.n_users()],
            budget: self.scenario.budget,
        }
    }

    /// Serves the current slot with `assignment`, applies arrivals and
    /// advances the channel.
    pub fn step(&mut self, assignment: &BeamAssignment, n_training: usize) -> Result<StepOutcome, CoreError> {
        assert!(!self.done(), "episode already finished");
        let sc = self.scenario;
        let cfg = &sc.cfg;
        let ctx = self.rate_context();
        let blocks = analog_combiner(assignment, &sc.codebooks.narrow)?;
        let hbar = equivalent_csi(&blocks, &self.channel);
        let (rates, degenerate, loaded) =
            match system_rates(assignment, &sc.codebooks.narrow, &self.channel, &ctx.power, &ctx.budget, n_training) {
                Ok(r) => (r.rates, false, r.loaded),
                Err(CoreError::Degenerate(_)) => (vec![0.0; sc.n_users()], true, false),
                Err(e) => return Err(e),
            };
        if degenerate {
            self.degenerate_slots += 1;
        }
        let served: Vec<f64> = rates.iter().map(|r| r * cfg.slot_s * cfg.service_scale).collect();
        let mut arrivals = Vec::with_capacity(sc.n_users());
        for u in 0..sc.n_users() {
            let a = crate::traffic::sample_arrival(&sc.traffic, u, &mut self.arrival_rngs[u]);
            self.queues[u] = self.trace.users[u].push(served[u], a);
            self.sojourn[u].slot(self.t, served[u], a);
            arrivals.push(a);
        }
        let r = reward(&self.queues, &cfg.q_req, &cfg.q_lim, cfg.delta);
        self.t += 1;
        self.small.evolve(&mut self.small_rng);
        self.channel = assemble_channel(&self.long_term, &self.small, cfg.m_y, cfg.m_z, self.t);
        Ok(StepOutcome {
            rates,
            served,
            arrivals,
            queues: self.queues.clone(),
            reward: r,
            hbar,
            degenerate,
            loaded,
        })
    }

    pub fn metrics(&self) -> Vec<UserMetrics> {
        episode_metrics(&self.trace, &self.scenario.traffic)
    }
}

// ---------------------------------------------------------------------------
// Observations and pseudo-states
// ---------------------------------------------------------------------------

/// `sign(x) · ln(1 + |x|)`, keeping large received amplitudes in range.
pub fn compress(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

fn push_complex(out: &mut Vec<f64>, z: Complex64, scale: f64) {
    out.push(compress(z.re * scale));
    out.push(compress(z.im * scale));
}

/// Centralized observation: `q(t+1)/q̄` followed by `√P · H̄(t)` (row-major,
/// real then imaginary part of each entry).
pub fn centralized_obs(queues: &[f64], q_req: &[f64], hbar: &DMatrix<Complex64>, power: f64) -> Vec<f64> {
    let s = power.sqrt();
    let mut out: Vec<f64> = queues.iter().zip(q_req).map(|(q, r)| q / r).collect();
    for i in 0..hbar.nrows() {
        for j in 0..hbar.ncols() {
            push_complex(&mut out, hbar[(i, j)], s);
        }
    }
    out
}

/// Local observation of BS `b`: its own rows of `H̄` (`W_RF,b h_{b,u}` for
/// every `u`), optionally preceded by the normalized queues.
pub fn local_obs(b: usize, n_users: usize, hbar: &DMatrix<Complex64>, power: f64, queues: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let s = power.sqrt();
    let mut out = Vec::new();
    if let Some((q, r)) = queues {
        out.extend(q.iter().zip(r).map(|(q, r)| q / r));
    }
    for i in b * n_users..(b + 1) * n_users {
        for j in 0..hbar.ncols() {
            push_complex(&mut out, hbar[(i, j)], s);
        }
    }
    out
}

pub fn centralized_obs_dim(n_bs: usize, n_users: usize) -> usize {
    n_users + 2 * n_bs * n_users * n_users
}

pub fn local_obs_dim(n_users: usize, with_queues: bool) -> usize {
    2 * n_users * n_users + if with_queues { n_users } else { 0 }
}

/// Window of the most recent `(observation, action, reward)` triples.
#[derive(Debug, Clone)]
pub struct History {
    window: usize,
    obs_dim: usize,
    n_actions: usize,
    entries: VecDeque<(Vec<f64>, usize, f64)>,
}

impl History {
    pub fn new(window: usize, obs_dim: usize, n_actions: usize) -> Self {
        assert!(window >= 1, "history window must be at least 1");
        Self {
            window,
            obs_dim,
            n_actions,
            entries: VecDeque::with_capacity(window),
        }
    }

    pub fn entry_dim(&self) -> usize {
        self.obs_dim + self.n_actions + 1
    }

    pub fn dim(&self) -> usize {
        self.window * self.entry_dim()
    }

    pub fn push(&mut self, obs: Vec<f64>, action: usize, reward: f64) {
        assert_eq!(obs.len(), self.obs_dim, "observation width");
        assert!(action < self.n_actions, "action outside one-hot range");
        if self.entries.len() == self.window {
            self.entries.pop_back();
        }
        self.entries.push_front((obs, action, reward));
    }

    /// Most recent first, zero-padded.
    pub fn state(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, (o, a, r)) in self.entries.iter().enumerate() {
            let base = i * self.entry_dim();
            out[base..base + self.obs_dim].copy_from_slice(o);
            out[base + self.obs_dim + a] = 1.0;
            out[base + self.obs_dim + self.n_actions] = *r;
        }
        out
    }

    /// Inverse of [`History::state`] for the occupied entries.
    pub fn decode(&self, state: &[f64]) -> Vec<(Vec<f64>, usize, f64)> {
        (0..self.entries.len())
            .map(|i| {
                let base = i * self.entry_dim();
                let o = state[base..base + self.obs_dim].to_vec();
                let hot = &state[base + self.obs_dim..base + self.obs_dim + self.n_actions];
                let a = hot.iter().position(|&v| v == 1.0).expect("one-hot action");
                (o, a, state[base + self.obs_dim + self.n_actions])
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Hyper-parameters and policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlHyper {
    pub episodes: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Halve the learning rate after every this many episodes.
    pub lr_halving_episodes: Option<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    /// Target sync period: optimizer steps for the double-Q learners,
    /// episodes for the mixer.
    pub target_every: usize,
    /// Shared trunk of the dueling network.
    pub trunk: Vec<usize>,
    /// Hidden layers of each dueling head.
    pub head_hidden: Vec<usize>,
    /// Hidden layers of per-BS local networks.
    pub local_hidden: Vec<usize>,
    pub mixer_hidden: Vec<usize>,
    pub hyper_hidden: usize,
    /// Environment steps between optimizer steps.
    pub train_every: usize,
    pub max_grad_norm: Option<f64>,
    /// Multiplies rewards before they reach the learner.
    pub reward_scale: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of episodes over which ε decays.
    pub epsilon_decay: f64,
    pub seed: u64,
}

impl RlHyper {
    /// Centralized learner at full-scale sizes.
    pub fn wbr() -> Self {
        Self {
            episodes: 20_000,
            gamma: 0.99,
            learning_rate: 0.005,
            lr_halving_episodes: None,
            momentum: 0.9,
            batch_size: 256,
            buffer_size: 10_000,
            target_every: 4,
            trunk: vec![128, 256, 256],
            head_hidden: Vec::new(),
            local_hidden: vec![128, 128],
            mixer_hidden: vec![256, 256],
            hyper_hidden: 64,
            train_every: 1,
            max_grad_norm: None,
            reward_scale: 1.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.6,
            seed: 1,
        }
    }

    /// Mixing learner at full-scale sizes.
    pub fn qmix() -> Self {
        Self {
            learning_rate: 0.01,
            buffer_size: 50_000,
            target_every: 2,
            ..Self::wbr()
        }
    }

    /// Independent per-BS learners (sizes follow the local networks of the
    /// mixing scheme).
    pub fn ddqn() -> Self {
        Self {
            learning_rate: 0.01,
            ..Self::wbr()
        }
    }

    pub fn for_scheme(scheme: Scheme) -> Self {
        match scheme {
            Scheme::QmixPdbs => Self::qmix(),
            Scheme::DDdqn => Self::ddqn(),
            _ => Self::wbr(),
        }
    }

    fn optimizer<P: Parameterized + ?Sized>(&self, model: &P) -> Sgdm {
        let decay = self.lr_halving_episodes.map_or(StepDecay::NONE, StepDecay::halving_every);
        Sgdm::new(model, self.learning_rate, self.momentum, decay)
    }

    pub fn epsilon(&self) -> EpsilonSchedule {
        let steps = ((self.episodes as f64 * self.epsilon_decay).round() as usize).max(1);
        EpsilonSchedule::new(self.epsilon_start, self.epsilon_end, steps)
    }
}

impl Default for RlHyper {
    fn default() -> Self {
        Self::wbr()
    }
}

/// A policy ready for greedy execution.
#[derive(Debug, Clone)]
pub enum Policy {
    Central { scheme: Scheme, net: DuelingNet },
    Independent { nets: Vec<PlainQNet> },
    /// Local networks only; the mixer is not needed to act.
    Mixed { locals: Vec<PlainQNet> },
    Baseline(Scheme),
}

impl Policy {
    pub fn scheme(&self) -> Scheme {
        match self {
            Policy::Central { scheme, .. } => *scheme,
            Policy::Independent { .. } => Scheme::DDdqn,
            Policy::Mixed { .. } => Scheme::QmixPdbs,
            Policy::Baseline(s) => *s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub metrics: Vec<UserMetrics>,
    pub trace: EpisodeTrace,
    pub mean_reward: f64,
    pub mean_loss: f64,
    /// Per-slot beam-training symbols charged.
    pub training_symbols: Vec<usize>,
    pub degenerate_slots: usize,
    pub widened_slots: usize,
    /// Slots whose action repeats a beam (conflict-tolerant fallback).
    pub conflict_slots: usize,
    pub fingerprint: String,
    /// `(Σ bits × sojourn, Σ bits)` per user, initial backlog excluded.
    pub sojourn: Vec<(f64, f64)>,
    /// Chosen beam set per slot and BS.
    pub decisions: Vec<BeamAssignment>,
}

/// Rank-tuple output count for `k` candidates per user.
pub fn slot_count(k: usize, n_users: usize) -> usize {
    k.pow(n_users as u32)
}

// ---------------------------------------------------------------------------
// Learners
// ---------------------------------------------------------------------------

struct DqLearner<Q> {
    online: Q,
    target: Q,
    opt: Sgdm,
    sync: TargetSync,
    buffer: ReplayBuffer<Transition>,
    rng: ChaCha8Rng,
    steps: usize,
    losses: Vec<f64>,
}

impl<Q: QFunction> DqLearner<Q> {
    fn new(online: Q, hyper: &RlHyper, rng: ChaCha8Rng) -> Self {
        Self {
            target: online.clone(),
            opt: hyper.optimizer(&online),
            sync: TargetSync::new(hyper.target_every),
            buffer: ReplayBuffer::new(hyper.buffer_size),
            online,
            rng,
            steps: 0,
            losses: Vec::new(),
        }
    }

    fn observe(&mut self, t: Transition, hyper: &RlHyper, step: impl Fn(&mut Self) -> Result<f64, CoreError>) -> Result<(), CoreError> {
        self.buffer.push(t);
        self.steps += 1;
        if self.buffer.len() >= hyper.batch_size && self.steps % hyper.train_every == 0 {
            let loss = step(self)?;
            self.losses.push(loss);
            self.sync.tick(&self.online, &mut self.target);
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn outcome(env: &Env, rewards: &[f64], losses: &[f64], symbols: Vec<usize>, widened: usize, fingerprint: String, decisions: Vec<BeamAssignment>) -> EpisodeOutcome {
    let end = env.scenario.cfg.slots_per_episode + 1;
    EpisodeOutcome {
        metrics: env.metrics(),
        trace: env.trace.clone(),
        mean_reward: mean(rewards),
        mean_loss: mean(losses),
        training_symbols: symbols,
        degenerate_slots: env.degenerate_slots,
        widened_slots: widened,
        conflict_slots: decisions.iter().filter(|a| a.per_bs.iter().any(|s| s.has_repeats())).count(),
        fingerprint,
        sojourn: env.sojourn.iter().map(|s| s.clone().finish(end)).collect(),
        decisions,
    }
}

fn centralized_space(env: &Env, scheme: Scheme) -> Result<(EffectiveActionSpace, usize), CoreError> {
    let cfg = &env.scenario.cfg;
    let k = scheme.k(cfg);
    let cands = env.candidates(scheme.candidate_mode(), k)?;
    let space = effective_action_space(&cands, cfg.action_cap)?;
    Ok((space, slot_count(k, cfg.n_users).pow(cfg.n_bs as u32)))
}

/// One episode of the centralized learner. With `learner` present the
/// policy explores and trains; otherwise it acts greedily.
fn central_episode(
    sc: &Scenario,
    scheme: Scheme,
    net: &DuelingNet,
    key: EpisodeKey,
    epsilon: f64,
    hyper: &RlHyper,
    mut learner: Option<&mut DqLearner<DuelingNet>>,
) -> Result<EpisodeOutcome, CoreError> {
    let mut env = Env::new(sc, key)?;
    let (space, n_out) = centralized_space(&env, scheme)?;
    let fingerprint = space.fingerprint();
    let valid = Arc::new(space.valid_slots());
    let n_users = sc.n_users();
    let mut hist = History::new(sc.cfg.history_window, centralized_obs_dim(sc.n_bs(), n_users), n_out);
    let mut rng = stream(sc.cfg.seed ^ hyper.seed, tag::POLICY, &key.ids());
    let phase = if learner.is_some() { Phase::Training } else { Phase::Execution };
    let mut rewards = Vec::new();
    let mut symbols = Vec::new();
    let mut decisions = Vec::new();
    while !env.done() {
        let state = hist.state();
        let slot = if env.t == 1 {
            valid[rng.random_range(0..valid.len())]
        } else {
            let current = learner.as_ref().map_or(net, |l| &l.online);
            let q = current.q_values(&state, &valid)?;
            select_action(&q, &valid, epsilon, &mut rng, phase)
        };
        let id = space.action_of_slot(slot).expect("selected slot is valid");
        decisions.push(space.assignment(id));
        let out = env.step(&space.assignment(id), n_users)?;
        symbols.push(n_users);
        let r = out.reward.total * hyper.reward_scale;
        rewards.push(out.reward.total);
        hist.push(centralized_obs(&out.queues, &sc.cfg.q_req, &out.hbar, sc.power), slot, r);
        if let Some(l) = learner.as_deref_mut() {
            let t = Transition {
                state,
                action: slot,
                reward: r,
                next_state: hist.state(),
                valid: valid.clone(),
            };
            l.observe(t, hyper, |l| {
                let (target, buffer) = (&l.target, &l.buffer);
                d3qn_train_step(buffer, &mut l.online, target, &mut l.opt, hyper.gamma, hyper.batch_size, hyper.max_grad_norm, &mut l.rng)
            })?;
        }
    }
    let losses = learner.as_ref().map_or(Vec::new(), |l| l.losses.clone());
    Ok(outcome(&env, &rewards, &losses, symbols, 0, fingerprint, decisions))
}

fn take_losses<Q>(l: &mut DqLearner<Q>) -> f64 {
    let m = mean(&l.losses);
    l.losses.clear();
    m
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    /// Mixer kept for checkpointing (not used to act).
    pub mixer: Option<Mixer>,
}

/// Trains the centralized dueling double-Q learner (`WbrD3qn` or `SbaD3qn`).
pub fn train_central(sc: &Scenario, scheme: Scheme, hyper: &RlHyper) -> Result<Trained, CoreError> {
    assert!(matches!(scheme, Scheme::WbrD3qn | Scheme::SbaD3qn));
    let cfg = &sc.cfg;
    let n_out = slot_count(scheme.k(cfg), cfg.n_users).pow(cfg.n_bs as u32);
    if n_out > cfg.action_cap {
        return Err(CoreError::Config(format!(
            "network output grid has {n_out} entries, above the cap {}",
            cfg.action_cap
        )));
    }
    let input = cfg.history_window * (centralized_obs_dim(cfg.n_bs, cfg.n_users) + n_out + 1);
    let mut init = stream(hyper.seed, tag::INIT, &[0]);
    let net = DuelingNet::new(input, &hyper.trunk, &hyper.head_hidden, n_out, &mut init);
    let mut learner = DqLearner::new(net, hyper, stream(hyper.seed, tag::REPLAY, &[0]));
    let mut eps = hyper.epsilon();
    let mut curve = Vec::with_capacity(hyper.episodes);
    for e in 0..hyper.episodes {
        let epsilon = eps.value();
        let placeholder = learner.online.clone();
        let out = central_episode(sc, scheme, &placeholder, EpisodeKey::train(e), epsilon, hyper, Some(&mut learner))?;
        curve.push(CurvePoint {
            episode: e + 1,
            mean_reward: out.mean_reward,
            loss: take_losses(&mut learner),
            epsilon,
        });
        learner.opt.end_epoch();
        eps.advance();
    }
    Ok(Trained {
        policy: Policy::Central {
            scheme,
            net: learner.online,
        },
        curve,
        mixer: None,
    })
}

fn local_spaces(env: &Env, k: usize) -> Result<EffectiveActionSpace, CoreError> {
    let cands = env.candidates(CandidateMode::Predicted, k)?;
    effective_action_space(&cands, env.scenario.cfg.action_cap)
}

/// Estimated rates `R̊_{b,u}` of BS `b` under its chosen beam set.
fn bs_estimated_rates(sc: &Scenario, channel: &ChannelRealization, assignment: &BeamAssignment, b: usize) -> Vec<f64> {
    let w = crate::phy::analog_block(&assignment.per_bs[b], &sc.codebooks.narrow);
    (0..sc.n_users()).map(|u| estimated_rate(&w, &channel.link(b, u), sc.power)).collect()
}

/// Per-agent random seeds for the independent learners.
fn agent_seed(hyper: &RlHyper, b: usize, overrides: Option<&[u64]>) -> u64 {
    overrides.and_then(|o| o.get(b).copied()).unwrap_or(hyper.seed.wrapping_add(b as u64 * 0x9e37_79b9))
}

fn independent_episode(
    sc: &Scenario,
    nets: &[PlainQNet],
    key: EpisodeKey,
    epsilon: f64,
    hyper: &RlHyper,
    seeds: &[u64],
    mut learners: Option<&mut [DqLearner<PlainQNet>]>,
) -> Result<EpisodeOutcome, CoreError> {
    let cfg = &sc.cfg;
    let (nb, nu) = (cfg.n_bs, cfg.n_users);
    let k = cfg.k_distributed;
    let mut env = Env::new(sc, key)?;
    let space = local_spaces(&env, k)?;
    let fingerprint = space.fingerprint();
    let n_out = slot_count(k, nu);
    let valid: Vec<Arc<Vec<usize>>> = space.per_bs().iter().map(|s| Arc::new(s.valid_slots().to_vec())).collect();
    let mut hists: Vec<History> = (0..nb).map(|_| History::new(cfg.history_window, local_obs_dim(nu, false), n_out)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..nb).map(|b| stream(seeds[b], tag::POLICY, &key.ids())).collect();
    let phase = if learners.is_some() { Phase::Training } else { Phase::Execution };
    let mut rewards = Vec::new();
    let mut symbols = Vec::new();
    let mut decisions = Vec::new();
    while !env.done() {
        let states: Vec<Vec<f64>> = hists.iter().map(History::state).collect();
        let mut slots = Vec::with_capacity(nb);
        for b in 0..nb {
            let s = if env.t == 1 {
                valid[b][rngs[b].random_range(0..valid[b].len())]
            } else {
                let net = learners.as_ref().map_or(&nets[b], |l| &l[b].online);
                let q = net.q_values(&states[b], &valid[b])?;
                select_action(&q, &valid[b], epsilon, &mut rngs[b], phase)
            };
            slots.push(s);
        }
        let idx: Vec<usize> = slots
            .iter()
            .zip(space.per_bs())
            .map(|(&s, p)| p.set_for_slot(s).expect("valid slot"))
            .collect();
        let assignment = space.assignment(space.encode(&idx));
        decisions.push(assignment.clone());
        let channel = env.channel.clone();
        let out = env.step(&assignment, nu)?;
        symbols.push(nu);
        rewards.push(out.reward.total);
        for b in 0..nb {
            let rb = fd_reward(&bs_estimated_rates(sc, &channel, &assignment, b), &cfg.q_req) * hyper.reward_scale;
            hists[b].push(local_obs(b, nu, &out.hbar, sc.power, None), slots[b], rb);
            if let Some(ls) = learners.as_deref_mut() {
                let t = Transition {
                    state: states[b].clone(),
                    action: slots[b],
                    reward: rb,
                    next_state: hists[b].state(),
                    valid: valid[b].clone(),
                };
                ls[b].observe(t, hyper, |l| {
                    let (target, buffer) = (&l.target, &l.buffer);
                    ddqn_train_step(buffer, &mut l.online, target, &mut l.opt, hyper.gamma, hyper.batch_size, hyper.max_grad_norm, &mut l.rng)
                })?;
            }
        }
    }
    let losses: Vec<f64> = learners
        .as_ref()
        .map_or(Vec::new(), |ls| ls.iter().flat_map(|l| l.losses.clone()).collect());
    Ok(outcome(&env, &rewards, &losses, symbols, 0, fingerprint, decisions))
}

/// Trains one independent double-Q agent per BS on local observations and
/// local rewards. `agent_seeds` overrides each agent's seed.
pub fn train_independent(sc: &Scenario, hyper: &RlHyper, agent_seeds: Option<&[u64]>) -> Result<Trained, CoreError> {
    let cfg = &sc.cfg;
    let n_out = slot_count(cfg.k_distributed, cfg.n_users);
    let input = cfg.history_window * (local_obs_dim(cfg.n_users, false) + n_out + 1);
    let seeds: Vec<u64> = (0..cfg.n_bs).map(|b| agent_seed(hyper, b, agent_seeds)).collect();
    let mut learners: Vec<DqLearner<PlainQNet>> = seeds
        .iter()
        .map(|&s| {
            let net = PlainQNet::new(input, &hyper.local_hidden, n_out, &mut stream(s, tag::INIT, &[]));
            DqLearner::new(net, hyper, stream(s, tag::REPLAY, &[]))
        })
        .collect();
    let mut eps = hyper.epsilon();
    let mut curve = Vec::with_capacity(hyper.episodes);
    for e in 0..hyper.episodes {
        let epsilon = eps.value();
        let snapshot: Vec<PlainQNet> = learners.iter().map(|l| l.online.clone()).collect();
        let out = independent_episode(sc, &snapshot, EpisodeKey::train(e), epsilon, hyper, &seeds, Some(&mut learners))?;
        let loss = mean(&learners.iter_mut().map(take_losses).collect::<Vec<_>>());
        curve.push(CurvePoint {
            episode: e + 1,
            mean_reward: out.mean_reward,
            loss,
            epsilon,
        });
        learners.iter_mut().for_each(|l| l.opt.end_epoch());
        eps.advance();
    }
    Ok(Trained {
        policy: Policy::Independent {
            nets: learners.into_iter().map(|l| l.online).collect(),
        },
        curve,
        mixer: None,
    })
}

struct MixLearner {
    nets: QmixNets,
    target: QmixNets,
    opt: Sgdm,
    buffer: ReplayBuffer<QmixTransition>,
    rng: ChaCha8Rng,
    steps: usize,
    losses: Vec<f64>,
}

fn mixed_episode(
    sc: &Scenario,
    locals: &[PlainQNet],
    key: EpisodeKey,
    epsilon: f64,
    hyper: &RlHyper,
    mut learner: Option<&mut MixLearner>,
) -> Result<EpisodeOutcome, CoreError> {
    let cfg = &sc.cfg;
    let (nb, nu) = (cfg.n_bs, cfg.n_users);
    let k = cfg.k_distributed;
    let mut env = Env::new(sc, key)?;
    let space = local_spaces(&env, k)?;
    let fingerprint = space.fingerprint();
    let n_out = slot_count(k, nu);
    let valid: Vec<Arc<Vec<usize>>> = space.per_bs().iter().map(|s| Arc::new(s.valid_slots().to_vec())).collect();
    let mut hists: Vec<History> = (0..nb).map(|_| History::new(cfg.history_window, local_obs_dim(nu, true), n_out)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..nb)
        .map(|b| stream(cfg.seed ^ hyper.seed, tag::POLICY, &[key.phase, key.index, b as u64]))
        .collect();
    let phase = if learner.is_some() { Phase::Training } else { Phase::Execution };
    let mut rewards = Vec::new();
    let mut symbols = Vec::new();
    let mut decisions = Vec::new();
    while !env.done() {
        let states: Vec<Vec<f64>> = hists.iter().map(History::state).collect();
        let mut slots = Vec::with_capacity(nb);
        for b in 0..nb {
            let s = if env.t == 1 {
                valid[b][rngs[b].random_range(0..valid[b].len())]
            } else {
                let net = learner.as_ref().map_or(&locals[b], |l| &l.nets.locals[b]);
                let q = net.q_values(&states[b], &valid[b])?;
                select_action(&q, &valid[b], epsilon, &mut rngs[b], phase)
            };
            slots.push(s);
        }
        let idx: Vec<usize> = slots
            .iter()
            .zip(space.per_bs())
            .map(|(&s, p)| p.set_for_slot(s).expect("valid slot"))
            .collect();
        let assignment = space.assignment(space.encode(&idx));
        decisions.push(assignment.clone());
        let out = env.step(&assignment, nu)?;
        symbols.push(nu);
        rewards.push(out.reward.total);
        let r = out.reward.total * hyper.reward_scale;
        for (b, h) in hists.iter_mut().enumerate() {
            h.push(local_obs(b, nu, &out.hbar, sc.power, Some((&out.queues, &cfg.q_req))), slots[b], r);
        }
        if let Some(l) = learner.as_deref_mut() {
            l.buffer.push(QmixTransition {
                states,
                actions: slots,
                reward: r,
                next_states: hists.iter().map(History::state).collect(),
                valid: valid.clone(),
            });
            l.steps += 1;
            if l.buffer.len() >= hyper.batch_size && l.steps % hyper.train_every == 0 {
                let loss = qmix_train_step(
                    &l.buffer,
                    &mut l.nets,
                    &l.target,
                    &mut l.opt,
                    hyper.gamma,
                    hyper.batch_size,
                    hyper.max_grad_norm,
                    &mut l.rng,
                )?;
                l.losses.push(loss);
            }
        }
    }
    let losses = learner.as_ref().map_or(Vec::new(), |l| l.losses.clone());
    Ok(outcome(&env, &rewards, &losses, symbols, 0, fingerprint, decisions))
}

/// Centralized training of per-BS local networks through the monotone
/// mixer; the target copy is refreshed every `target_every` episodes.
pub fn train_mixed(sc: &Scenario, hyper: &RlHyper) -> Result<Trained, CoreError> {
    let cfg = &sc.cfg;
    let n_out = slot_count(cfg.k_distributed, cfg.n_users);
    let input = cfg.history_window * (local_obs_dim(cfg.n_users, true) + n_out + 1);
    let mut init = stream(hyper.seed, tag::INIT, &[0]);
    let locals = (0..cfg.n_bs)
        .map(|_| PlainQNet::new(input, &hyper.local_hidden, n_out, &mut init))
        .collect();
    let mixer = Mixer::new(cfg.n_bs, cfg.n_bs * input, &hyper.mixer_hidden, hyper.hyper_hidden, &mut init);
    let nets = QmixNets { locals, mixer };
    let mut learner = MixLearner {
        target: nets.clone(),
        opt: hyper.optimizer(&nets),
        nets,
        buffer: ReplayBuffer::new(hyper.buffer_size),
        rng: stream(hyper.seed, tag::REPLAY, &[0]),
        steps: 0,
        losses: Vec::new(),
    };
    let mut sync = TargetSync::new(hyper.target_every);
    let mut eps = hyper.epsilon();
    let mut curve = Vec::with_capacity(hyper.episodes);
    for e in 0..hyper.episodes {
        let epsilon = eps.value();
        let snapshot = learner.nets.locals.clone();
        let out = mixed_episode(sc, &snapshot, EpisodeKey::train(e), epsilon, hyper, Some(&mut learner))?;
        curve.push(CurvePoint {
            episode: e + 1,
            mean_reward: out.mean_reward,
            loss: mean(&learner.losses),
            epsilon,
        });
        learner.losses.clear();
        learner.opt.end_epoch();
        sync.tick(&learner.nets, &mut learner.target);
        eps.advance();
    }
    Ok(Trained {
        policy: Policy::Mixed {
            locals: learner.nets.locals,
        },
        curve,
        mixer: Some(learner.nets.mixer),
    })
}

/// Trains whichever learner `scheme` names.
pub fn train(sc: &Scenario, scheme: Scheme, hyper: &RlHyper) -> Result<Trained, CoreError> {
    match scheme {
        Scheme::WbrD3qn | Scheme::SbaD3qn => train_central(sc, scheme, hyper),
        Scheme::DDdqn => train_independent(sc, hyper, None),
        Scheme::QmixPdbs => train_mixed(sc, hyper),
        other => Err(CoreError::Config(format!("{} is not a learned scheme", other.name()))),
    }
}

/// Freshly initialized acting networks (and mixer) with the shapes
/// [`train`] produces, ready to receive saved parameters.
pub fn untrained_policy(sc: &Scenario, scheme: Scheme, hyper: &RlHyper) -> Result<(Policy, Option<Mixer>), CoreError> {
    let cfg = &sc.cfg;
    let mut init = stream(hyper.seed, tag::INIT, &[0]);
    match scheme {
        Scheme::WbrD3qn | Scheme::SbaD3qn => {
            let n_out = slot_count(scheme.k(cfg), cfg.n_users).pow(cfg.n_bs as u32);
            let input = cfg.history_window * (centralized_obs_dim(cfg.n_bs, cfg.n_users) + n_out + 1);
            let net = DuelingNet::new(input, &hyper.trunk, &hyper.head_hidden, n_out, &mut init);
            Ok((Policy::Central { scheme, net }, None))
        }
        Scheme::DDdqn | Scheme::QmixPdbs => {
            let mixed = scheme == Scheme::QmixPdbs;
            let n_out = slot_count(cfg.k_distributed, cfg.n_users);
            let input = cfg.history_window * (local_obs_dim(cfg.n_users, mixed) + n_out + 1);
            let nets: Vec<PlainQNet> = (0..cfg.n_bs)
                .map(|_| PlainQNet::new(input, &hyper.local_hidden, n_out, &mut init))
                .collect();
            if mixed {
                let mixer = Mixer::new(cfg.n_bs, cfg.n_bs * input, &hyper.mixer_hidden, hyper.hyper_hidden, &mut init);
                Ok((Policy::Mixed { locals: nets }, Some(mixer)))
            } else {
                Ok((Policy::Independent { nets }, None))
            }
        }
        other => Ok((Policy::Baseline(other), None)),
    }
}

/// Digest of everything that fixes a learned policy's input and output
/// layout: scheme, scenario dimensions, candidate count, window and
/// layer widths.
pub fn layout_fingerprint(sc: &Scenario, scheme: Scheme, hyper: &RlHyper) -> String {
    let cfg = &sc.cfg;
    let text = format!(
        "{}|B{}|U{}|K{}|W{}|trunk{:?}|head{:?}|local{:?}|mixer{:?}|hyper{}",
        scheme.name(),
        cfg.n_bs,
        cfg.n_users,
        scheme.k(cfg),
        cfg.history_window,
        hyper.trunk,
        hyper.head_hidden,
        hyper.local_hidden,
        hyper.mixer_hidden,
        hyper.hyper_hidden
    );
    crate::beamspace::digest_hex(text.as_bytes())
}

// ---------------------------------------------------------------------------
// Baselines and evaluation
// ---------------------------------------------------------------------------

fn baseline_episode(sc: &Scenario, scheme: Scheme, key: EpisodeKey) -> Result<EpisodeOutcome, CoreError> {
    let cfg = &sc.cfg;
    let (nu, m) = (cfg.n_users, cfg.antennas());
    let mut env = Env::new(sc, key)?;
    let k = scheme.k(cfg);
    let needs_space = matches!(scheme, Scheme::Hdlo | Scheme::Random | Scheme::Strongest);
    let (cands, space) = if needs_space {
        let c = env.candidates(CandidateMode::Predicted, k)?;
        let s = effective_action_space(&c, cfg.action_cap)?;
        (Some(c), Some(s))
    } else {
        (None, None)
    };
    let fingerprint = space.as_ref().map_or_else(String::new, |s| s.fingerprint());
    let mut rng = stream(cfg.seed, tag::POLICY, &[key.phase, key.index, 0xba5e]);
    let mut rewards = Vec::new();
    let mut symbols = Vec::new();
    let mut decisions = Vec::new();
    let mut widened = 0;
    while !env.done() {
        let ctx = env.rate_context();
        let (assignment, n_tr) = match scheme {
            Scheme::Lcb => (lcb_select(&env.queues, &env.channel, &ctx, cfg.action_cap)?.0, m),
            Scheme::Lbs => {
                let d = lbs_select(&env.queues, &env.channel, &ctx, k, cfg.action_cap)?;
                widened += usize::from(d.widened);
                (d.assignment, m)
            }
            Scheme::Hdlo => {
                let (c, s) = (cands.as_ref().unwrap(), space.as_ref().unwrap());
                let idx = hdlo_select(&env.queues, &env.channel, &sc.codebooks.narrow, s, sc.power);
                let n = (0..cfg.n_bs).map(|b| hdlo_training_count(c, b, k, m)).max().unwrap_or(0);
                (s.assignment(s.encode(&idx)), n)
            }
            Scheme::Random => {
                let s = space.as_ref().unwrap();
                (s.assignment(random_select(s, &mut rng)), nu)
            }
            Scheme::Strongest => {
                let s = space.as_ref().unwrap();
                (s.assignment(strongest_select(s)), nu)
            }
            other => return Err(CoreError::Config(format!("{} needs a trained policy", other.name()))),
        };
        let out = env.step(&assignment, n_tr)?;
        decisions.push(assignment);
        symbols.push(n_tr);
        rewards.push(out.reward.total);
    }
    Ok(outcome(&env, &rewards, &[], symbols, widened, fingerprint, decisions))
}

/// Greedy rollout of one evaluation (or training-key) episode.
pub fn run_episode(sc: &Scenario, policy: &Policy, key: EpisodeKey) -> Result<EpisodeOutcome, CoreError> {
    let hyper = RlHyper::wbr();
    match policy {
        Policy::Central { scheme, net } => central_episode(sc, *scheme, net, key, 0.0, &RlHyper { seed: 0, ..hyper }, None),
        Policy::Independent { nets } => {
            let seeds: Vec<u64> = (0..nets.len()).map(|b| sc.cfg.seed.wrapping_add(b as u64)).collect();
            independent_episode(sc, nets, key, 0.0, &RlHyper { reward_scale: 1.0, ..hyper }, &seeds, None)
        }
        Policy::Mixed { locals } => mixed_episode(sc, locals, key, 0.0, &RlHyper { seed: 0, ..hyper }, None),
        Policy::Baseline(s) => baseline_episode(sc, *s, key),
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scheme: Scheme,
    pub episodes: Vec<EpisodeOutcome>,
    pub rates: SatisfactionRates,
}

impl EvalReport {
    pub fn per_episode_metrics(&self) -> Vec<Vec<UserMetrics>> {
        self.episodes.iter().map(|e| e.metrics.clone()).collect()
    }

    /// Mean beam-training symbols per slot.
    pub fn mean_training_symbols(&self) -> f64 {
        let all: Vec<f64> = self.episodes.iter().flat_map(|e| e.training_symbols.iter().map(|&s| s as f64)).collect();
        mean(&all)
    }
}

/// Greedy evaluation over `n` episodes with common random numbers (episode
/// `i` sees the same users, channels and arrivals under every policy).
/// Episodes run in parallel; results keep episode order.
pub fn evaluate(sc: &Scenario, policy: &Policy, n: usize) -> Result<EvalReport, CoreError> {
    if n == 0 {
        return Err(CoreError::Config("evaluation needs at least one episode".into()));
    }
    let episodes = (0..n)
        .into_par_iter()
        .map(|i| run_episode(sc, policy, EpisodeKey::eval(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let metrics: Vec<Vec<UserMetrics>> = episodes.iter().map(|e| e.metrics.clone()).collect();
    Ok(EvalReport {
        scheme: policy.scheme(),
        rates: satisfaction_rate(&metrics),
        episodes,
    })
}

/// Places users and draws one long-term state outside an episode (for
/// data generation and diagnostics).
pub fn sample_interval(sc: &Scenario, key: EpisodeKey) -> Result<(Topology, LongTermState), CoreError> {
    let env = Env::new(sc, key)?;
    Ok((
        Topology {
            bs: sc.bs.clone(),
            users: env.users.clone(),
            region_m: sc.cfg.region_m,
        },
        env.long_term.clone(),
    ))
}

/// Parameter count of a policy's acting networks.
pub fn policy_parameters(policy: &Policy) -> usize {
    match policy {
        Policy::Central { net, .. } => net.parameter_count(),
        Policy::Independent { nets } | Policy::Mixed { locals: nets } => nets.iter().map(|n| n.parameter_count()).sum(),
        Policy::Baseline(_) => 0,
    }
}
