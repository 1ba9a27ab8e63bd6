//! Beam sweeps, the wide-to-narrow beam strength predictor, candidate
//! selection and effective action spaces.

use std::fmt::Write as _;

use cfbeam_nn::{mse, mse_grad, Gradients, Layer, Network, Parameterized, Sgdm, StepDecay, Tensor};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelRealization, Position, SmallScaleState, Topology};
use crate::phy::{beam_strength, BeamAssignment, BeamSet};
use crate::rng::{stream, tag};
use crate::{CoreError, ScenarioConfig};

/// Beam strengths `η` of one user: `n_bs` rows of `n_beams` values.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamResponseGrid {
    pub n_bs: usize,
    pub n_beams: usize,
    pub values: Vec<f64>,
}

impl BeamResponseGrid {
    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.n_beams..(b + 1) * self.n_beams]
    }
}

/// Narrow-beam sweep of user `u` over the full array of every BS.
pub fn sweep_narrow(channel: &ChannelRealization, codebook: &DMatrix<Complex64>, u: usize) -> BeamResponseGrid {
    let m = codebook.ncols();
    let mut values = Vec::with_capacity(channel.n_bs * m);
    for b in 0..channel.n_bs {
        let h = channel.link(b, u);
        for j in 0..m {
            values.push(beam_strength(codebook.column(j).as_slice(), h.as_slice()));
        }
    }
    BeamResponseGrid {
        n_bs: channel.n_bs,
        n_beams: m,
        values,
    }
}

/// Wide-beam sweep of user `u` using only the first `codebook.nrows()`
/// antennas of each array (the activated sub-array of the first row).
pub fn sweep_wide(channel: &ChannelRealization, codebook: &DMatrix<Complex64>, u: usize) -> BeamResponseGrid {
    let mw = codebook.nrows();
    let mut values = Vec::with_capacity(channel.n_bs * mw);
    for b in 0..channel.n_bs {
        let h = channel.link(b, u);
        let sub = &h.as_slice()[..mw];
        for j in 0..codebook.ncols() {
            values.push(beam_strength(codebook.column(j).as_slice(), sub));
        }
    }
    BeamResponseGrid {
        n_bs: channel.n_bs,
        n_beams: codebook.ncols(),
        values,
    }
}

/// Divides each BS row by its own maximum. All-zero rows stay zero.
pub fn normalize_per_bs(grid: &BeamResponseGrid) -> BeamResponseGrid {
    let mut out = grid.clone();
    for b in 0..grid.n_bs {
        let row = &mut out.values[b * grid.n_beams..(b + 1) * grid.n_beams];
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    out
}

/// Indices of the `k` largest values, strongest first; ties go to the lower
/// index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= row.len(), "k exceeds the number of beams");
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Candidate beams `C_{b,u}` for every BS-user pair, strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSets {
    pub n_bs: usize,
    pub n_users: usize,
    sets: Vec<Vec<usize>>,
}

impl CandidateSets {
    pub fn new(n_bs: usize, n_users: usize, sets: Vec<Vec<usize>>) -> Self {
        assert_eq!(sets.len(), n_bs * n_users);
        Self { n_bs, n_users, sets }
    }

    pub fn get(&self, b: usize, u: usize) -> &[usize] {
        &self.sets[b * self.n_users + u]
    }

    /// Candidate sets of BS `b`, one per user.
    pub fn for_bs(&self, b: usize) -> &[Vec<usize>] {
        &self.sets[b * self.n_users..(b + 1) * self.n_users]
    }

    /// Distinct beams BS `b` must train each slot.
    pub fn union_for_bs(&self, b: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.for_bs(b).iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Top-`k` candidates of one user from a (predicted or measured) grid.
pub fn top_k_candidates(grid: &BeamResponseGrid, k: usize) -> Vec<Vec<usize>> {
    (0..grid.n_bs).map(|b| top_k(grid.row(b), k)).collect()
}

/// Candidate sets from per-user grids (one grid per user).
pub fn candidates_from_grids(grids: &[BeamResponseGrid], k: usize) -> CandidateSets {
    let n_bs = grids[0].n_bs;
    let n_users = grids.len();
    let mut sets = Vec::with_capacity(n_bs * n_users);
    for b in 0..n_bs {
        for g in grids {
            sets.push(top_k(g.row(b), k));
        }
    }
    CandidateSets::new(n_bs, n_users, sets)
}

/// `width` contiguous beams centred on the strongest measured beam
/// (wrapping at the codebook edge), strongest first.
pub fn adjacent_candidates(row: &[f64], width: usize) -> Vec<usize> {
    let m = row.len();
    assert!(width >= 1 && width <= m);
    let best = top_k(row, 1)[0];
    let mut out = vec![best];
    let mut step = 1;
    while out.len() < width {
        out.push((best + m - step) % m);
        if out.len() < width {
            out.push((best + step) % m);
        }
        step += 1;
    }
    out
}

/// Effective action space of one BS.
///
/// Actions are enumerated as rank tuples: slot code `s` assigns user `u`
/// its `r_u`-th candidate, with user 0 as the most significant digit.
/// Tuples that give two users the same beam are conflicts; tuples whose
/// beam set already appeared under a lower code are duplicates. Both are
/// masked, leaving one slot per distinct canonical set.
#[derive(Debug, Clone, PartialEq)]
pub struct BsActionSpace {
    sets: Vec<BeamSet>,
    set_slot: Vec<usize>,
    slot_set: Vec<Option<usize>>,
    radices: Vec<usize>,
}

impl BsActionSpace {
    pub fn sets(&self) -> &[BeamSet] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Size of the rank-tuple slot space (`Π_u |C_{b,u}|`).
    pub fn slot_count(&self) -> usize {
        self.slot_set.len()
    }

    pub fn set_for_slot(&self, slot: usize) -> Option<usize> {
        self.slot_set.get(slot).copied().flatten()
    }

    pub fn slot_for_set(&self, set: usize) -> usize {
        self.set_slot[set]
    }

    pub fn valid_slots(&self) -> &[usize] {
        &self.set_slot
    }

    /// Candidate count per user.
    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    /// Rank tuple of a slot code.
    pub fn ranks(&self, slot: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        let mut rest = slot;
        for (u, &r) in self.radices.iter().enumerate().rev() {
            out[u] = rest % r;
            rest /= r;
        }
        out
    }
}

/// Conflict and duplicate removal for one BS given `C_{b,1..U}`.
pub fn prune_bs_actions(candidates: &[Vec<usize>]) -> Result<BsActionSpace, CoreError> {
    enumerate_bs_actions(candidates, false)
}

/// Fallback when every tuple conflicts: tuples that repeat a beam are kept
/// (combined with diagonal-loaded ZF), only duplicate multisets are masked.
pub fn tolerant_bs_actions(candidates: &[Vec<usize>]) -> Result<BsActionSpace, CoreError> {
    enumerate_bs_actions(candidates, true)
}

fn enumerate_bs_actions(candidates: &[Vec<usize>], allow_repeats: bool) -> Result<BsActionSpace, CoreError> {
    let radices: Vec<usize> = candidates.iter().map(Vec::len).collect();
    let total: usize = radices.iter().product();
    let mut sets: Vec<BeamSet> = Vec::new();
    let mut set_slot = Vec::new();
    let mut slot_set = vec![None; total];
    let mut seen = std::collections::HashMap::new();
    let mut beams = vec![0usize; candidates.len()];
    for (code, slot) in slot_set.iter_mut().enumerate() {
        let mut rest = code;
        for u in (0..candidates.len()).rev() {
            beams[u] = candidates[u][rest % radices[u]];
            rest /= radices[u];
        }
        let set = if allow_repeats {
            BeamSet::with_repeats(beams.clone())
        } else {
            let Ok(set) = BeamSet::new(beams.clone()) else {
                continue;
            };
            set
        };
        if seen.contains_key(&set) {
            continue;
        }
        seen.insert(set.clone(), sets.len());
        *slot = Some(sets.len());
        set_slot.push(code);
        sets.push(set);
    }
    if sets.is_empty() {
        return Err(CoreError::Infeasible(format!(
            "every combination of candidates {candidates:?} repeats a beam"
        )));
    }
    Ok(BsActionSpace {
        sets,
        set_slot,
        slot_set,
        radices,
    })
}

/// Cartesian product of per-BS action spaces with two codecs:
///
/// - compact ids enumerate `Π_b |A_eff,b|` valid actions;
/// - slot ids enumerate the full rank-tuple grid `Π_b slot_count_b`, of
///   which only the valid subset maps to actions (used as network outputs).
///
/// BS 0 is the most significant digit in both.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveActionSpace {
    per_bs: Vec<BsActionSpace>,
    size: usize,
    slot_size: usize,
}

impl EffectiveActionSpace {
    pub fn per_bs(&self) -> &[BsActionSpace] {
        &self.per_bs
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn slot_size(&self) -> usize {
        self.slot_size
    }

    pub fn decode(&self, id: usize) -> Vec<usize> {
        assert!(id < self.size, "action id {id} out of range");
        let mut out = vec![0; self.per_bs.len()];
        let mut rest = id;
        for (b, s) in self.per_bs.iter().enumerate().rev() {
            out[b] = rest % s.len();
            rest /= s.len();
        }
        out
    }

    pub fn encode(&self, per_bs: &[usize]) -> usize {
        per_bs
            .iter()
            .zip(&self.per_bs)
            .fold(0, |acc, (&i, s)| acc * s.len() + i)
    }

    pub fn assignment(&self, id: usize) -> BeamAssignment {
        BeamAssignment {
            per_bs: self
                .decode(id)
                .iter()
                .zip(&self.per_bs)
                .map(|(&i, s)| s.sets[i].clone())
                .collect(),
        }
    }

    /// Slot id of a compact action id.
    pub fn slot_of(&self, id: usize) -> usize {
        self.decode(id)
            .iter()
            .zip(&self.per_bs)
            .fold(0, |acc, (&i, s)| acc * s.slot_count() + s.slot_for_set(i))
    }

    /// Compact action id of a slot id, if the slot is valid.
    pub fn action_of_slot(&self, slot: usize) -> Option<usize> {
        let mut rest = slot;
        let mut idx = vec![0; self.per_bs.len()];
        for (b, s) in self.per_bs.iter().enumerate().rev() {
            idx[b] = s.set_for_slot(rest % s.slot_count())?;
            rest /= s.slot_count();
        }
        Some(self.encode(&idx))
    }

    /// Valid slot ids, in compact-id order.
    pub fn valid_slots(&self) -> Vec<usize> {
        (0..self.size).map(|id| self.slot_of(id)).collect()
    }

    /// Hex digest identifying the exact per-BS set lists.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (b, s) in self.per_bs.iter().enumerate() {
            h.update((b as u64).to_le_bytes());
            for set in &s.sets {
                for &beam in set.beams() {
                    h.update((beam as u64).to_le_bytes());
                }
                h.update([0xff]);
            }
            for slot in &s.set_slot {
                h.update((*slot as u64).to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut out = String::new();
        for byte in &digest[..8] {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// First 8 bytes of the SHA-256 digest, as 16 hex characters.
pub fn digest_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::new();
    for byte in &digest[..8] {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

pub fn cascade(per_bs: Vec<BsActionSpace>, cap: usize) -> Result<EffectiveActionSpace, CoreError> {
    let mut size: usize = 1;
    let mut slot_size: usize = 1;
    for s in &per_bs {
        if s.is_empty() {
            return Err(CoreError::Infeasible("a BS has no feasible action".into()));
        }
        size = size
            .checked_mul(s.len())
            .filter(|&v| v <= cap)
            .ok_or_else(|| CoreError::Config(format!("cascaded action space exceeds cap {cap}")))?;
        slot_size = slot_size
            .checked_mul(s.slot_count())
            .ok_or_else(|| CoreError::Config("slot space overflows".into()))?;
    }
    Ok(EffectiveActionSpace {
        per_bs,
        size,
        slot_size,
    })
}

/// Pruned space of one BS, or the conflict-tolerant one when pruning
/// leaves nothing.
pub fn bs_actions_with_fallback(candidates: &[Vec<usize>]) -> Result<BsActionSpace, CoreError> {
    match prune_bs_actions(candidates) {
        Err(CoreError::Infeasible(_)) => tolerant_bs_actions(candidates),
        other => other,
    }
}

/// Prunes every BS (falling back per BS when infeasible) and cascades the
/// result.
pub fn effective_action_space(candidates: &CandidateSets, cap: usize) -> Result<EffectiveActionSpace, CoreError> {
    let per_bs = (0..candidates.n_bs)
        .map(|b| bs_actions_with_fallback(candidates.for_bs(b)))
        .collect::<Result<Vec<_>, _>>()?;
    cascade(per_bs, cap)
}

// ---------------------------------------------------------------------------
// Predictor data set and network
// ---------------------------------------------------------------------------

/// One training pair: normalized wide grid → normalized narrow grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSample {
    pub wide: Vec<f64>,
    pub narrow: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorDataset {
    pub n_bs: usize,
    pub m_wide: usize,
    pub m: usize,
    pub samples: Vec<PredictorSample>,
}

impl PredictorDataset {
    /// Consecutive train / validation / test partitions.
    pub fn split(&self, train: usize, val: usize) -> (Self, Self, Self) {
        assert!(train + val <= self.samples.len(), "split exceeds data set");
        let part = |r: std::ops::Range<usize>| Self {
            samples: self.samples[r].to_vec(),
            ..self.clone_empty()
        };
        (
            part(0..train),
            part(train..train + val),
            part(train + val..self.samples.len()),
        )
    }

    fn clone_empty(&self) -> Self {
        Self {
            n_bs: self.n_bs,
            m_wide: self.m_wide,
            m: self.m,
            samples: Vec::new(),
        }
    }

    /// Delimited text: one sample per line, inputs then targets.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let mut first = true;
            for v in s.wide.iter().chain(&s.narrow) {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, n_bs: usize, m_wide: usize, m: usize) -> Result<Self, CoreError> {
        let (ni, no) = (n_bs * m_wide, n_bs * m);
        let mut samples = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CoreError::Config(format!("data set line {}: {e}", line_no + 1)))?;
            if vals.len() != ni + no {
                return Err(CoreError::Config(format!(
                    "data set line {}: {} values, expected {}",
                    line_no + 1,
                    vals.len(),
                    ni + no
                )));
            }
            samples.push(PredictorSample {
                wide: vals[..ni].to_vec(),
                narrow: vals[ni..].to_vec(),
            });
        }
        Ok(Self {
            n_bs,
            m_wide,
            m,
            samples,
        })
    }
}

/// Wide and narrow sweeps for one user in one slot, both normalized.
pub fn probe_user(
    channel: &ChannelRealization,
    codebooks: &channel::CodebookSet,
    u: usize,
) -> (BeamResponseGrid, BeamResponseGrid) {
    (
        normalize_per_bs(&sweep_wide(channel, &codebooks.wide, u)),
        normalize_per_bs(&sweep_narrow(channel, &codebooks.narrow, u)),
    )
}

/// Generates `n` samples, each from an independent single-user long-term
/// draw over the fixed base stations. Sample `i` uses its own stream, so
/// the result does not depend on the worker count.
pub fn build_dataset(
    cfg: &ScenarioConfig,
    bs: &[Position],
    n: usize,
    seed: u64,
) -> PredictorDataset {
    let codebooks = channel::CodebookSet::new(cfg);
    let one_user = ScenarioConfig {
        n_users: 1,
        ..cfg.clone()
    };
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, tag::DATASET, &[i as u64]);
            let users = channel::place_users(&one_user, &mut rng).expect("single user always fits");
            let topo = Topology {
                bs: bs.to_vec(),
                users,
                region_m: cfg.region_m,
            };
            let lt = channel::sample_long_term(&topo, cfg, &mut rng);
            let ss = SmallScaleState::stationary(bs.len() * cfg.path_count, cfg.rho, &mut rng);
            let ch = channel::assemble_channel(&lt, &ss, cfg.m_y, cfg.m_z, 1);
            let (wide, narrow) = probe_user(&ch, &codebooks, 0);
            PredictorSample {
                wide: wide.values,
                narrow: narrow.values,
            }
        })
        .collect();
    PredictorDataset {
        n_bs: bs.len(),
        m_wide: cfg.m_wide,
        m: cfg.antennas(),
        samples,
    }
}

/// Convolutional feature extractor over the `B × M_w` wide grid followed by
/// fully connected layers producing `B · M` narrow strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorArch {
    pub conv_layers: usize,
    pub kernels: usize,
    pub kernel_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for PredictorArch {
    fn default() -> Self {
        Self {
            conv_layers: 3,
            kernels: 16,
            kernel_size: 2,
            hidden: vec![256, 256, 256],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamPredictor {
    pub net: Network,
    pub n_bs: usize,
    pub m_wide: usize,
    pub m: usize,
}

impl BeamPredictor {
    pub fn new<R: Rng + ?Sized>(arch: &PredictorArch, n_bs: usize, m_wide: usize, m: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut ch = 1;
        for _ in 0..arch.conv_layers {
            layers.push(Layer::conv2d(ch, arch.kernels, arch.kernel_size, arch.kernel_size, rng));
            layers.push(Layer::Relu);
            ch = arch.kernels;
        }
        layers.push(Layer::Flatten);
        let mut width = ch * n_bs * m_wide;
        for &h in &arch.hidden {
            layers.push(Layer::dense(width, h, rng));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::dense(width, n_bs * m, rng));
        Self {
            net: Network::new(layers),
            n_bs,
            m_wide,
            m,
        }
    }

    fn input(&self, wide: &[f64]) -> Tensor {
        Tensor::new(vec![1, self.n_bs, self.m_wide], wide.to_vec()).expect("wide grid has B × M_w values")
    }

    /// Predicted normalized narrow strengths (`B · M` values).
    pub fn predict(&self, wide: &[f64]) -> Result<BeamResponseGrid, CoreError> {
        let y = self.net.forward(&self.input(wide))?;
        Ok(BeamResponseGrid {
            n_bs: self.n_bs,
            n_beams: self.m,
            values: y.into_data(),
        })
    }

    pub fn dataset_mse(&self, data: &PredictorDataset) -> Result<f64, CoreError> {
        let mut total = 0.0;
        for s in &data.samples {
            let y = self.net.forward(&self.input(&s.wide))?;
            total += mse(&y, &Tensor::vector(s.narrow.clone()))?;
        }
        Ok(total / data.samples.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate halves after this many epochs (`None`: constant).
    pub decay_every: Option<usize>,
    pub seed: u64,
}

impl Default for PredictorTraining {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            decay_every: Some(25),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Mini-batch gradient descent on the per-sample MSE, keeping the
/// parameters with the lowest validation MSE.
pub fn train_predictor(
    train: &PredictorDataset,
    val: &PredictorDataset,
    arch: &PredictorArch,
    opts: &PredictorTraining,
) -> Result<(BeamPredictor, TrainingReport), CoreError> {
    let mut rng = stream(opts.seed, tag::INIT, &[0]);
    let mut model = BeamPredictor::new(arch, train.n_bs, train.m_wide, train.m, &mut rng);
    let schedule = opts.decay_every.map_or(StepDecay::NONE, StepDecay::halving_every);
    let mut opt = Sgdm::new(&model.net, opts.learning_rate, opts.momentum, schedule);
    let mut best = model.clone();
    let mut report = TrainingReport {
        best_val_mse: if val.samples.is_empty() { f64::INFINITY } else { model.dataset_mse(val)? },
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    for epoch in 0..opts.epochs {
        let mut shuffle = stream(opts.seed, tag::SHUFFLE, &[epoch as u64]);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut grads = Gradients::zeros_like(&model.net);
            for &i in batch {
                let s = &train.samples[i];
                let x = model.input(&s.wide);
                let trace = model.net.forward_trace(&x)?;
                let target = Tensor::vector(s.narrow.clone());
                epoch_loss += mse(trace.output(), &target)?;
                let g = mse_grad(trace.output(), &target)?;
                grads.accumulate(&model.net.backward_trace(&trace, &g)?.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(CoreError::Numerical(format!("predictor gradients diverged in epoch {epoch}")));
            }
            opt.step(&mut model.net, &grads);
        }
        opt.end_epoch();
        let train_mse = epoch_loss / train.samples.len().max(1) as f64;
        if !train_mse.is_finite() {
            return Err(CoreError::Numerical(format!("predictor loss is {train_mse} in epoch {epoch}")));
        }
        report.train_mse.push(train_mse);
        let val_mse = if val.samples.is_empty() { train_mse } else { model.dataset_mse(val)? };
        report.val_mse.push(val_mse);
        if val_mse < report.best_val_mse {
            report.best_val_mse = val_mse;
            report.best_epoch = epoch + 1;
            best = model.clone();
        }
    }
    Ok((best, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorAccuracy {
    /// Fraction of rows whose predicted top-k contains the true strongest beam.
    pub contains_strongest: f64,
    /// Fraction of rows whose predicted top-k equals the true top-k set.
    pub exact_set: f64,
    pub rows: usize,
}

/// Per-(sample, BS) candidate quality on a data set. Rows whose true
/// narrow response is all zero (fully blocked links) are skipped.
pub fn predictor_accuracy(model: &BeamPredictor, data: &PredictorDataset, k: usize) -> Result<PredictorAccuracy, CoreError> {
    let (mut rows, mut hit, mut exact) = (0usize, 0usize, 0usize);
    for s in &data.samples {
        let pred = model.predict(&s.wide)?;
        for b in 0..data.n_bs {
            let truth = &s.narrow[b * data.m..(b + 1) * data.m];
            if truth.iter().all(|&v| v == 0.0) {
                continue;
            }
            rows += 1;
            let mut cand = top_k(pred.row(b), k);
            let best = top_k(truth, 1)[0];
            if cand.contains(&best) {
                hit += 1;
            }
            let mut want = top_k(truth, k);
            cand.sort_unstable();
            want.sort_unstable();
            if cand == want {
                exact += 1;
            }
        }
    }
    let denom = rows.max(1) as f64;
    Ok(PredictorAccuracy {
        contains_strongest: hit as f64 / denom,
        exact_set: exact as f64 / denom,
        rows,
    })
}

impl Parameterized for BeamPredictor {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{dft_codebook, LinkClass, LongTermState, Path};
    use std::collections::BTreeSet;

    fn grid(rows: Vec<Vec<f64>>) -> BeamResponseGrid {
        let n_beams = rows[0].len();
        BeamResponseGrid {
            n_bs: rows.len(),
            n_beams,
            values: rows.into_iter().flatten().collect(),
        }
    }

    #[test]
    fn normalization_examples() {
        let g = normalize_per_bs(&grid(vec![vec![2.0, 8.0, 4.0], vec![3.0, 3.0, 3.0], vec![0.0, 0.0, 0.0]]));
        assert_eq!(g.row(0), &[0.25, 1.0, 0.5]);
        assert_eq!(g.row(1), &[1.0, 1.0, 1.0]);
        assert_eq!(g.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(normalize_per_bs(&g), g);
    }

    #[test]
    fn top_k_tie_rule_and_full() {
        assert_eq!(top_k(&[0.1, 0.9, 0.9, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 4], 2), vec![0, 1]);
        let mut all = top_k(&[0.3, 0.1, 0.2], 3);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn figure_three_instance() {
        // C1 = {f1, f2, f7}, C2 = {f1, f2, f3}
        let space = prune_bs_actions(&[vec![1, 2, 7], vec![1, 2, 3]]).unwrap();
        assert_eq!(space.len(), 6);
        let sets: BTreeSet<Vec<usize>> = space.sets().iter().map(|s| s.beams().to_vec()).collect();
        let want: BTreeSet<Vec<usize>> =
            [vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 7], vec![2, 7], vec![3, 7]].into_iter().collect();
        assert_eq!(sets, want);
        // (f1,f1), (f2,f2) conflict; (f2,f1) duplicates (f1,f2).
        assert_eq!(space.set_for_slot(0), None);
        assert_eq!(space.set_for_slot(4), None);
        assert_eq!(space.set_for_slot(3), None);
        assert_eq!(space.slot_count(), 9);
    }

    #[test]
    fn single_user_and_disjoint() {
        let s = prune_bs_actions(&[vec![4, 2, 9]]).unwrap();
        assert_eq!(s.sets().iter().map(|x| x.beams()[0]).collect::<Vec<_>>(), vec![4, 2, 9]);
        assert_eq!(prune_bs_actions(&[vec![0, 1], vec![2, 3]]).unwrap().len(), 4);
        assert!(matches!(prune_bs_actions(&[vec![5], vec![5]]), Err(CoreError::Infeasible(_))));
    }

    #[test]
    fn cascade_codecs() {
        let a = prune_bs_actions(&[vec![1, 2, 7], vec![1, 2, 3]]).unwrap();
        let space = cascade(vec![a.clone(), a.clone(), a.clone()], 1_000_000).unwrap();
        assert_eq!(space.size(), 216);
        assert_eq!(space.slot_size(), 729);
        for id in 0..space.size() {
            assert_eq!(space.encode(&space.decode(id)), id);
            assert_eq!(space.action_of_slot(space.slot_of(id)), Some(id));
        }
        let valid = space.valid_slots().len();
        let masked = (0..space.slot_size()).filter(|&s| space.action_of_slot(s).is_none()).count();
        assert_eq!(valid + masked, 729);
        let one = cascade(vec![a.clone()], 10).unwrap();
        assert_eq!(one.size(), 6);
        assert!(cascade(vec![a.clone(), a.clone()], 30).is_err());
    }

    #[test]
    fn sweeps_match_scalar_loop_and_find_matched_beam() {
        let f = dft_codebook(8);
        // Single path steered at narrow beam 3 of an 8-element line array.
        let theta = (2.0 * 3.0 / 8.0f64).asin();
        let lt = LongTermState {
            n_bs: 1,
            n_users: 1,
            links: vec![vec![Path { azimuth: theta, elevation: std::f64::consts::FRAC_PI_2, amplitude: 1.0, class: LinkClass::Los }]],
        };
        let ss = SmallScaleState { rho: 0.9, gains: vec![Complex64::new(0.3, -0.8)] };
        let ch = channel::assemble_channel(&lt, &ss, 8, 1, 1);
        let g = sweep_narrow(&ch, &f, 0);
        assert_eq!(top_k(g.row(0), 1), vec![3]);
        let h = ch.link(0, 0);
        for j in 0..8 {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..8 {
                acc += f[(m, j)].conj() * h[m];
            }
            assert!((g.row(0)[j] - acc.norm_sqr()).abs() < 1e-12);
        }
        let zero = ChannelRealization { h: DMatrix::zeros(8, 1), n_bs: 1, antennas: 8, slot: 1 };
        assert!(sweep_narrow(&zero, &f, 0).values.iter().all(|&v| v == 0.0));
        let w = sweep_wide(&zero, &dft_codebook(4), 0);
        assert_eq!(w.values.len(), 4);
    }

    #[test]
    fn adjacent_window_wraps() {
        let row = [0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.9];
        assert_eq!(adjacent_candidates(&row, 3), vec![7, 6, 0]);
    }
}
