//! Replay, exploration and the value-based learners: dueling double-Q,
//! plain double-Q and monotone value mixing over per-BS local networks.

use std::sync::Arc;

use cfbeam_nn::{Gradients, Layer, Network, Parameterized, Sgdm, Tensor};
use rand::Rng;

use crate::CoreError;

// ---------------------------------------------------------------------------
// Replay and exploration
// ---------------------------------------------------------------------------

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stores an item, overwriting the oldest once full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` distinct items drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        assert!(n <= self.items.len(), "batch larger than buffer");
        rand::seq::index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
    step: usize,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, decay_steps: usize) -> Self {
        assert!((0.0..=1.0).contains(&start) && (0.0..=1.0).contains(&end) && end <= start);
        Self {
            start,
            end,
            decay_steps,
            step: 0,
        }
    }

    /// Decay over the first 60% of `episodes`, stepping once per episode.
    pub fn for_episodes(episodes: usize) -> Self {
        Self::new(1.0, 0.05, (episodes * 3 / 5).max(1))
    }

    pub fn value(&self) -> f64 {
        if self.step >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * self.step as f64 / self.decay_steps as f64
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Execution,
}

/// Largest `q[i]` over `valid`; ties go to the lowest id.
pub fn argmax_valid(q: &[f64], valid: &[usize]) -> usize {
    let mut best = usize::MAX;
    for &i in valid {
        if best == usize::MAX || q[i] > q[best] || (q[i] == q[best] && i < best) {
            best = i;
        }
    }
    assert!(best != usize::MAX, "no valid action");
    best
}

/// ε-greedy over the valid ids during training, greedy in execution.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], valid: &[usize], epsilon: f64, rng: &mut R, phase: Phase) -> usize {
    assert!(!valid.is_empty(), "empty action space");
    if phase == Phase::Training && rng.random::<f64>() < epsilon {
        return valid[rng.random_range(0..valid.len())];
    }
    argmax_valid(q, valid)
}

// ---------------------------------------------------------------------------
// Q networks
// ---------------------------------------------------------------------------

/// Dense layers with ReLU after every layer.
pub fn relu_stack<R: Rng + ?Sized>(input: usize, sizes: &[usize], rng: &mut R) -> Network {
    let mut layers = Vec::new();
    let mut width = input;
    for &s in sizes {
        layers.push(Layer::dense(width, s, rng));
        layers.push(Layer::Relu);
        width = s;
    }
    Network::new(layers)
}

fn head<R: Rng + ?Sized>(input: usize, hidden: &[usize], out: usize, rng: &mut R) -> Network {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(out);
    Network::mlp(&sizes, rng)
}

/// A state-action value function over a fixed output grid, of which only
/// the `valid` ids are actions in the current interval.
pub trait QFunction: Parameterized + Clone + Send + Sync {
    fn n_outputs(&self) -> usize;
    fn q_values(&self, x: &[f64], valid: &[usize]) -> Result<Vec<f64>, CoreError>;
    /// Parameter gradients for an upstream gradient `dq` on the outputs.
    fn backward_q(&self, x: &[f64], valid: &[usize], dq: &[f64]) -> Result<Gradients, CoreError>;
}

/// Shared trunk feeding a scalar value head and an advantage head;
/// `Q = V + A − mean_valid(A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelingNet {
    pub trunk: Network,
    pub value: Network,
    pub advantage: Network,
    n_actions: usize,
}

impl DuelingNet {
    pub fn new<R: Rng + ?Sized>(input: usize, trunk: &[usize], head_hidden: &[usize], n_actions: usize, rng: &mut R) -> Self {
        let width = *trunk.last().unwrap_or(&input);
        Self {
            trunk: relu_stack(input, trunk, rng),
            value: head(width, head_hidden, 1, rng),
            advantage: head(width, head_hidden, n_actions, rng),
            n_actions,
        }
    }

    /// `(V, A)` for one input.
    pub fn streams(&self, x: &[f64]) -> Result<(f64, Vec<f64>), CoreError> {
        let f = self.trunk.forward(&Tensor::vector(x.to_vec()))?;
        let v = self.value.forward(&f)?.data()[0];
        let a = self.advantage.forward(&f)?.into_data();
        Ok((v, a))
    }
}

/// `Q_j = V + A_j − mean_{i ∈ valid} A_i` for every output `j`.
pub fn dueling_q(v: f64, a: &[f64], valid: &[usize]) -> Vec<f64> {
    let mean = valid.iter().map(|&i| a[i]).sum::<f64>() / valid.len().max(1) as f64;
    a.iter().map(|&ai| v + ai - mean).collect()
}

impl Parameterized for DuelingNet {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.parameters();
        p.extend(self.value.parameters());
        p.extend(self.advantage.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.parameters_mut();
        p.extend(self.value.parameters_mut());
        p.extend(self.advantage.parameters_mut());
        p
    }
}

impl QFunction for DuelingNet {
    fn n_outputs(&self) -> usize {
        self.n_actions
    }

    fn q_values(&self, x: &[f64], valid: &[usize]) -> Result<Vec<f64>, CoreError> {
        let (v, a) = self.streams(x)?;
        Ok(dueling_q(v, &a, valid))
    }

    fn backward_q(&self, x: &[f64], valid: &[usize], dq: &[f64]) -> Result<Gradients, CoreError> {
        let tt = self.trunk.forward_trace(&Tensor::vector(x.to_vec()))?;
        let feat = tt.output().clone();
        let vt = self.value.forward_trace(&feat)?;
        let at = self.advantage.forward_trace(&feat)?;
        let total: f64 = dq.iter().sum();
        let n = valid.len().max(1) as f64;
        let mut da = dq.to_vec();
        for &i in valid {
            da[i] -= total / n;
        }
        let (gv, fv) = self.value.backward_trace(&vt, &Tensor::vector(vec![total]))?;
        let (ga, fa) = self.advantage.backward_trace(&at, &Tensor::vector(da))?;
        let mut df = fv;
        df.data_mut().iter_mut().zip(fa.data()).for_each(|(x, y)| *x += y);
        let (gt, _) = self.trunk.backward_trace(&tt, &df)?;
        Ok(Gradients::concat(vec![gt, gv, ga]))
    }
}

/// Dense ReLU network with a linear output per action.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainQNet {
    pub net: Network,
    n_actions: usize,
}

impl PlainQNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], n_actions: usize, rng: &mut R) -> Self {
        Self {
            net: head(input, hidden, n_actions, rng),
            n_actions,
        }
    }
}

impl Parameterized for PlainQNet {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl QFunction for PlainQNet {
    fn n_outputs(&self) -> usize {
        self.n_actions
    }

    fn q_values(&self, x: &[f64], _valid: &[usize]) -> Result<Vec<f64>, CoreError> {
        Ok(self.net.forward(&Tensor::vector(x.to_vec()))?.into_data())
    }

    fn backward_q(&self, x: &[f64], _valid: &[usize], dq: &[f64]) -> Result<Gradients, CoreError> {
        Ok(self.net.backward(&Tensor::vector(x.to_vec()), &Tensor::vector(dq.to_vec()))?)
    }
}

// ---------------------------------------------------------------------------
// Double-Q learning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Valid output ids at `state` and `next_state` (one interval, so shared).
    pub valid: Arc<Vec<usize>>,
}

/// Double-Q target `r + γ Q_target(ŝ′, argmax_a′ Q_online(ŝ′, a′))`.
pub fn double_q_target<Q: QFunction>(online: &Q, target: &Q, t: &Transition, gamma: f64) -> Result<f64, CoreError> {
    if gamma == 0.0 {
        return Ok(t.reward);
    }
    let next_online = online.q_values(&t.next_state, &t.valid)?;
    let a = argmax_valid(&next_online, &t.valid);
    let next_target = target.q_values(&t.next_state, &t.valid)?;
    Ok(t.reward + gamma * next_target[a])
}

/// Summed squared TD error over the batch and its gradient with respect to
/// the online parameters (targets held fixed).
pub fn double_q_loss<Q: QFunction>(
    online: &Q,
    target: &Q,
    batch: &[&Transition],
    gamma: f64,
) -> Result<(f64, Gradients), CoreError> {
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(online);
    for t in batch {
        let y = double_q_target(online, target, t, gamma)?;
        let q = online.q_values(&t.state, &t.valid)?;
        let err = y - q[t.action];
        loss += err * err;
        let mut dq = vec![0.0; online.n_outputs()];
        dq[t.action] = -2.0 * err;
        grads.accumulate(&online.backward_q(&t.state, &t.valid, &dq)?);
    }
    Ok((loss, grads))
}

/// Rescales `grads` so its norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients, max_norm: Option<f64>) {
    if let Some(limit) = max_norm {
        let n = grads.norm();
        if n > limit && n > 0.0 {
            grads.scale(limit / n);
        }
    }
}

/// Samples a batch and applies one optimizer step; returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn double_q_train_step<Q: QFunction, R: Rng + ?Sized>(
    buffer: &ReplayBuffer<Transition>,
    online: &mut Q,
    target: &Q,
    opt: &mut Sgdm,
    gamma: f64,
    batch_size: usize,
    max_grad_norm: Option<f64>,
    rng: &mut R,
) -> Result<f64, CoreError> {
    let batch = buffer.sample(batch_size, rng);
    let (loss, mut grads) = double_q_loss(online, target, &batch, gamma)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(CoreError::Numerical(format!("TD loss diverged ({loss})")));
    }
    clip_gradients(&mut grads, max_grad_norm);
    opt.step(online, &grads);
    Ok(loss)
}

/// Dueling double-Q update.
#[allow(clippy::too_many_arguments)]
pub fn d3qn_train_step<R: Rng + ?Sized>(
    buffer: &ReplayBuffer<Transition>,
    online: &mut DuelingNet,
    target: &DuelingNet,
    opt: &mut Sgdm,
    gamma: f64,
    batch_size: usize,
    max_grad_norm: Option<f64>,
    rng: &mut R,
) -> Result<f64, CoreError> {
    double_q_train_step(buffer, online, target, opt, gamma, batch_size, max_grad_norm, rng)
}

/// Plain double-Q update.
#[allow(clippy::too_many_arguments)]
pub fn ddqn_train_step<R: Rng + ?Sized>(
    buffer: &ReplayBuffer<Transition>,
    online: &mut PlainQNet,
    target: &PlainQNet,
    opt: &mut Sgdm,
    gamma: f64,
    batch_size: usize,
    max_grad_norm: Option<f64>,
    rng: &mut R,
) -> Result<f64, CoreError> {
    double_q_train_step(buffer, online, target, opt, gamma, batch_size, max_grad_norm, rng)
}

/// Hard target copy every `every` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSync {
    pub every: usize,
    count: usize,
}

impl TargetSync {
    pub fn new(every: usize) -> Self {
        assert!(every > 0);
        Self { every, count: 0 }
    }

    /// Advances the counter; copies `online` into `target` on rollover and
    /// reports whether it did.
    pub fn tick<P: Parameterized>(&mut self, online: &P, target: &mut P) -> bool {
        self.count += 1;
        if self.count == self.every {
            self.count = 0;
            target.copy_from(online);
            true
        } else {
            false
        }
    }
}

// ---------------------------------------------------------------------------
// Monotone mixing
// ---------------------------------------------------------------------------

/// Mixing network whose weights and biases are generated from the global
/// state by hypernetworks. Weights pass through `abs`, so `Q_tot` is
/// non-decreasing in every local value.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    n_agents: usize,
    hidden: Vec<usize>,
    /// One per mixing layer, the last producing the output weights.
    hyper_w: Vec<Network>,
    /// One per hidden mixing layer.
    hyper_b: Vec<Network>,
    /// Two-layer generator of the final bias.
    hyper_v: Network,
}

struct MixCache {
    w: Vec<Vec<f64>>,
    w_raw: Vec<Vec<f64>>,
    w_traces: Vec<cfbeam_nn::Trace>,
    b_traces: Vec<cfbeam_nn::Trace>,
    v_trace: cfbeam_nn::Trace,
    /// z[0] = q, z[k] = relu(pre[k-1]).
    z: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: f64,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(n_agents: usize, state_dim: usize, hidden: &[usize], hyper_hidden: usize, rng: &mut R) -> Self {
        let mut dims = vec![n_agents];
        dims.extend_from_slice(hidden);
        let mut hyper_w = Vec::new();
        for pair in dims.windows(2) {
            hyper_w.push(Network::mlp(&[state_dim, hyper_hidden, pair[0] * pair[1]], rng));
        }
        hyper_w.push(Network::mlp(&[state_dim, hyper_hidden, *dims.last().unwrap()], rng));
        let hyper_b = hidden
            .iter()
            .map(|&h| Network::new(vec![Layer::dense(state_dim, h, rng)]))
            .collect();
        Self {
            n_agents,
            hidden: hidden.to_vec(),
            hyper_w,
            hyper_b,
            hyper_v: Network::mlp(&[state_dim, hyper_hidden, 1], rng),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.n_agents];
        d.extend_from_slice(&self.hidden);
        d
    }

    fn run(&self, q: &[f64], state: &[f64]) -> Result<MixCache, CoreError> {
        assert_eq!(q.len(), self.n_agents, "one local value per agent");
        let s = Tensor::vector(state.to_vec());
        let dims = self.dims();
        let mut w_traces = Vec::new();
        let mut w_raw = Vec::new();
        let mut w = Vec::new();
        for net in &self.hyper_w {
            let t = net.forward_trace(&s)?;
            let raw = t.output().data().to_vec();
            w.push(raw.iter().map(|v| v.abs()).collect());
            w_raw.push(raw);
            w_traces.push(t);
        }
        let b_traces = self
            .hyper_b
            .iter()
            .map(|n| n.forward_trace(&s))
            .collect::<Result<Vec<_>, _>>()?;
        let v_trace = self.hyper_v.forward_trace(&s)?;
        let mut z = vec![q.to_vec()];
        let mut pre = Vec::new();
        for k in 0..self.hidden.len() {
            let (n_in, n_out) = (dims[k], dims[k + 1]);
            let wk: &Vec<f64> = &w[k];
            let bk = b_traces[k].output().data();
            let p: Vec<f64> = (0..n_out)
                .map(|j| bk[j] + (0..n_in).map(|i| z[k][i] * wk[i * n_out + j]).sum::<f64>())
                .collect();
            z.push(p.iter().map(|v| v.max(0.0)).collect());
            pre.push(p);
        }
        let last = z.last().unwrap();
        let wo = w.last().unwrap();
        let out = v_trace.output().data()[0] + last.iter().zip(wo).map(|(a, b)| a * b).sum::<f64>();
        Ok(MixCache {
            w,
            w_raw,
            w_traces,
            b_traces,
            v_trace,
            z,
            pre,
            out,
        })
    }

    /// `Q_tot(q, s)`.
    pub fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64, CoreError> {
        Ok(self.run(q, state)?.out)
    }

    /// Mixing weights generated for a state (after `abs`), per layer.
    pub fn weights(&self, state: &[f64]) -> Result<Vec<Vec<f64>>, CoreError> {
        Ok(self.run(&vec![0.0; self.n_agents], state)?.w)
    }

    /// Gradients of `g · Q_tot` with respect to the mixer parameters and to
    /// the local values.
    pub fn backward(&self, q: &[f64], state: &[f64], g: f64) -> Result<(Gradients, Vec<f64>), CoreError> {
        let c = self.run(q, state)?;
        let dims = self.dims();
        let nh = self.hidden.len();
        let mut dw: Vec<Vec<f64>> = c.w.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut db: Vec<Vec<f64>> = self.hidden.iter().map(|&h| vec![0.0; h]).collect();
        // Output layer.
        let last = &c.z[nh];
        let wo = &c.w[nh];
        dw[nh] = last.iter().map(|z| g * z).collect();
        let mut dz: Vec<f64> = wo.iter().map(|w| g * w).collect();
        for k in (0..nh).rev() {
            let (n_in, n_out) = (dims[k], dims[k + 1]);
            let dpre: Vec<f64> = dz
                .iter()
                .zip(&c.pre[k])
                .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                .collect();
            db[k] = dpre.clone();
            let mut dprev = vec![0.0; n_in];
            for i in 0..n_in {
                for j in 0..n_out {
                    dw[k][i * n_out + j] = c.z[k][i] * dpre[j];
                    dprev[i] += c.w[k][i * n_out + j] * dpre[j];
                }
            }
            dz = dprev;
        }
        let mut parts = Vec::new();
        for (k, net) in self.hyper_w.iter().enumerate() {
            let draw: Vec<f64> = dw[k]
                .iter()
                .zip(&c.w_raw[k])
                .map(|(d, r)| d * r.signum() * f64::from(*r != 0.0))
                .collect();
            parts.push(net.backward_trace(&c.w_traces[k], &Tensor::vector(draw))?.0);
        }
        for (k, net) in self.hyper_b.iter().enumerate() {
            parts.push(net.backward_trace(&c.b_traces[k], &Tensor::vector(db[k].clone()))?.0);
        }
        parts.push(self.hyper_v.backward_trace(&c.v_trace, &Tensor::vector(vec![g]))?.0);
        Ok((Gradients::concat(parts), dz))
    }
}

impl Parameterized for Mixer {
    fn parameters(&self) -> Vec<&Tensor> {
        self.hyper_w
            .iter()
            .chain(&self.hyper_b)
            .chain(std::iter::once(&self.hyper_v))
            .flat_map(|n| n.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.hyper_w
            .iter_mut()
            .chain(self.hyper_b.iter_mut())
            .chain(std::iter::once(&mut self.hyper_v))
            .flat_map(|n| n.parameters_mut())
            .collect()
    }
}

/// Per-BS local networks plus the mixer, trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct QmixNets {
    pub locals: Vec<PlainQNet>,
    pub mixer: Mixer,
}

impl Parameterized for QmixNets {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.locals.iter().flat_map(|n| n.parameters()).collect();
        p.extend(self.mixer.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.locals.iter_mut().flat_map(|n| n.parameters_mut()).collect();
        p.extend(self.mixer.parameters_mut());
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmixTransition {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_states: Vec<Vec<f64>>,
    pub valid: Vec<Arc<Vec<usize>>>,
}

/// Global state: concatenated local pseudo-states.
pub fn global_state(states: &[Vec<f64>]) -> Vec<f64> {
    states.iter().flatten().copied().collect()
}

/// Chosen local values mixed into `Q_tot`.
pub fn qmix_forward(nets: &QmixNets, states: &[Vec<f64>], actions: &[usize], valid: &[Arc<Vec<usize>>]) -> Result<f64, CoreError> {
    let q = local_values(nets, states, actions, valid)?;
    nets.mixer.mix(&q, &global_state(states))
}

fn local_values(nets: &QmixNets, states: &[Vec<f64>], actions: &[usize], valid: &[Arc<Vec<usize>>]) -> Result<Vec<f64>, CoreError> {
    nets.locals
        .iter()
        .enumerate()
        .map(|(b, n)| Ok(n.q_values(&states[b], &valid[b])?[actions[b]]))
        .collect()
}

/// `r + γ · Mix_target(max_a Q_b^target(ŝ′_b, a), ŝ′)` with each agent's
/// greedy action taken from its own target network.
pub fn qmix_target(target: &QmixNets, t: &QmixTransition, gamma: f64) -> Result<f64, CoreError> {
    if gamma == 0.0 {
        return Ok(t.reward);
    }
    let mut best = Vec::with_capacity(target.locals.len());
    for (b, n) in target.locals.iter().enumerate() {
        let q = n.q_values(&t.next_states[b], &t.valid[b])?;
        best.push(q[argmax_valid(&q, &t.valid[b])]);
    }
    Ok(t.reward + gamma * target.mixer.mix(&best, &global_state(&t.next_states))?)
}

/// Summed squared TD error on `Q_tot` and its gradient over every local
/// and mixer parameter.
pub fn qmix_loss(nets: &QmixNets, target: &QmixNets, batch: &[&QmixTransition], gamma: f64) -> Result<(f64, Gradients), CoreError> {
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(nets);
    let local_counts: Vec<usize> = nets.locals.iter().map(|n| n.parameters().len()).collect();
    for t in batch {
        let y = qmix_target(target, t, gamma)?;
        let q = local_values(nets, &t.states, &t.actions, &t.valid)?;
        let s = global_state(&t.states);
        let err = y - nets.mixer.mix(&q, &s)?;
        loss += err * err;
        let (gm, dq) = nets.mixer.backward(&q, &s, -2.0 * err)?;
        let mut parts = Vec::with_capacity(nets.locals.len() + 1);
        for (b, n) in nets.locals.iter().enumerate() {
            let mut d = vec![0.0; n.n_outputs()];
            d[t.actions[b]] = dq[b];
            parts.push(n.backward_q(&t.states[b], &t.valid[b], &d)?);
        }
        parts.push(gm);
        let g = Gradients::concat(parts);
        debug_assert_eq!(g.0.len(), local_counts.iter().sum::<usize>() + nets.mixer.parameters().len());
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

#[allow(clippy::too_many_arguments)]
pub fn qmix_train_step<R: Rng + ?Sized>(
    buffer: &ReplayBuffer<QmixTransition>,
    nets: &mut QmixNets,
    target: &QmixNets,
    opt: &mut Sgdm,
    gamma: f64,
    batch_size: usize,
    max_grad_norm: Option<f64>,
    rng: &mut R,
) -> Result<f64, CoreError> {
    let batch = buffer.sample(batch_size, rng);
    let (loss, mut grads) = qmix_loss(nets, target, &batch, gamma)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(CoreError::Numerical(format!("mixing TD loss diverged ({loss})")));
    }
    clip_gradients(&mut grads, max_grad_norm);
    opt.step(nets, &grads);
    Ok(loss)
}

/// Distributed per-BS reward `Σ_u R̊_{b,u} / q̄_u`.
pub fn fd_reward(estimated_rates: &[f64], q_req: &[f64]) -> f64 {
    estimated_rates.iter().zip(q_req).map(|(r, q)| r / q).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use cfbeam_nn::StepDecay;

    #[test]
    fn dueling_examples() {
        assert_eq!(dueling_q(1.0, &[1.0, 3.0], &[0, 1]), vec![0.0, 2.0]);
        let q = dueling_q(0.7, &[4.0; 5], &[0, 1, 2, 3, 4]);
        assert!(q.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // Masked entries do not shift the mean.
        assert_eq!(dueling_q(0.0, &[1.0, 100.0, 3.0], &[0, 2]), vec![-1.0, 98.0, 1.0]);
    }

    #[test]
    fn tie_rule_and_greedy() {
        let mut rng = stream(1, "t", &[]);
        assert_eq!(select_action(&[5.0, 5.0, 1.0], &[0, 1, 2], 0.0, &mut rng, Phase::Training), 0);
        assert_eq!(select_action(&[5.0, 9.0, 1.0], &[0, 2], 1.0, &mut rng, Phase::Execution), 0);
    }

    #[test]
    fn epsilon_linear_then_clamped() {
        let mut e = EpsilonSchedule::new(1.0, 0.1, 10);
        let mut last = 2.0;
        for _ in 0..30 {
            let v = e.value();
            assert!(v <= last && v >= 0.1);
            last = v;
            e.advance();
        }
        assert_eq!(e.value(), 0.1);
        assert_eq!(EpsilonSchedule::for_episodes(100).decay_steps, 60);
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        let mut all: Vec<i32> = (0..3).map(|i| *b.get(i)).collect();
        all.sort_unstable();
        assert_eq!(all, vec![2, 3, 4]);
        let mut rng = stream(2, "r", &[]);
        let s = b.sample(3, &mut rng);
        let mut v: Vec<i32> = s.into_iter().copied().collect();
        v.sort_unstable();
        assert_eq!(v, vec![2, 3, 4]);
    }

    #[test]
    fn sync_every_four_over_twenty_ticks() {
        let mut rng = stream(3, "s", &[]);
        let online = PlainQNet::new(3, &[4], 2, &mut rng);
        let mut target = PlainQNet::new(3, &[4], 2, &mut rng);
        let mut sync = TargetSync::new(4);
        let syncs = (0..20).filter(|_| sync.tick(&online, &mut target)).count();
        assert_eq!(syncs, 5);
        assert_eq!(target, online);
    }

    #[test]
    fn fd_reward_examples() {
        assert_eq!(fd_reward(&[0.0, 0.0], &[9.0, 10.0]), 0.0);
        assert_eq!(fd_reward(&[2.0, 3.0], &[1.0, 3.0]), 3.0);
    }

    #[test]
    fn gamma_zero_is_regression_on_reward() {
        let mut rng = stream(4, "g", &[]);
        let online = DuelingNet::new(3, &[5, 5], &[], 2, &mut rng);
        let t = Transition {
            state: vec![0.1, -0.3, 0.5],
            action: 1,
            reward: 2.5,
            next_state: vec![0.0; 3],
            valid: Arc::new(vec![0, 1]),
        };
        let (loss, _) = double_q_loss(&online, &online, &[&t], 0.0).unwrap();
        let q = online.q_values(&t.state, &t.valid).unwrap()[1];
        assert!((loss - (2.5 - q).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn one_action_toy_converges_to_reward() {
        let mut rng = stream(5, "c", &[]);
        let mut online = PlainQNet::new(2, &[4], 1, &mut rng);
        let target = online.clone();
        let t = Transition {
            state: vec![0.5, -0.5],
            action: 0,
            reward: 1.5,
            next_state: vec![0.5, -0.5],
            valid: Arc::new(vec![0]),
        };
        let mut buf = ReplayBuffer::new(4);
        buf.push(t);
        let mut opt = Sgdm::new(&online, 0.02, 0.0, StepDecay::NONE);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let l = ddqn_train_step(&buf, &mut online, &target, &mut opt, 0.0, 1, None, &mut rng).unwrap();
            assert!(l <= last + 1e-12);
            last = l;
        }
        assert!(last < 1e-6);
    }
}
