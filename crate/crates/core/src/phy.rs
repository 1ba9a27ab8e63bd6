//! Hybrid combining: analog beams from the DFT codebook, zero-forcing
//! digital combiner, SINR and rates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::ChannelRealization;
use crate::CoreError;

/// Condition number above which the Gram matrix gets diagonal loading.
pub const LOADING_CONDITION: f64 = 1e10;
const LOADING_FACTOR: f64 = 1e-9;

/// Canonical (ascending, duplicate-free) set of beam indices used by one BS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BeamSet(Vec<usize>);

impl BeamSet {
    /// Sorts the indices; rejects repeated beams.
    pub fn new(mut beams: Vec<usize>) -> Result<Self, CoreError> {
        beams.sort_unstable();
        if beams.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::InvalidAction(format!("beam repeated in {beams:?}")));
        }
        Ok(Self(beams))
    }

    /// Sorted multiset; only the conflict-tolerant fallback builds these.
    pub fn with_repeats(mut beams: Vec<usize>) -> Self {
        beams.sort_unstable();
        Self(beams)
    }

    pub fn has_repeats(&self) -> bool {
        self.0.windows(2).any(|w| w[0] == w[1])
    }

    pub fn beams(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One beam set per BS: the system action.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BeamAssignment {
    pub per_bs: Vec<BeamSet>,
}

impl BeamAssignment {
    pub fn from_indices(per_bs: Vec<Vec<usize>>) -> Result<Self, CoreError> {
        Ok(Self {
            per_bs: per_bs.into_iter().map(BeamSet::new).collect::<Result<_, _>>()?,
        })
    }
}

/// Per-BS analog combiner `W_RF,b` (`U × M`) whose row `u` is `f_{i_{b,u}}^H`.
pub fn analog_block(set: &BeamSet, codebook: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let m = codebook.nrows();
    DMatrix::from_fn(set.len(), m, |r, c| codebook[(c, set.0[r])].conj())
}

pub fn analog_combiner(
    assignment: &BeamAssignment,
    codebook: &DMatrix<Complex64>,
) -> Result<Vec<DMatrix<Complex64>>, CoreError> {
    assignment
        .per_bs
        .iter()
        .map(|s| {
            if let Some(&bad) = s.0.iter().find(|&&i| i >= codebook.ncols()) {
                return Err(CoreError::InvalidAction(format!("beam {bad} outside codebook")));
            }
            Ok(analog_block(s, codebook))
        })
        .collect()
}

/// `blkdiag(W_RF,1, …, W_RF,B)`.
pub fn block_diagonal(blocks: &[DMatrix<Complex64>]) -> DMatrix<Complex64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Equivalent CSI `H̄ = W_RF H` (`B·U × U`).
pub fn equivalent_csi(blocks: &[DMatrix<Complex64>], channel: &ChannelRealization) -> DMatrix<Complex64> {
    let u = channel.n_users();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, u);
    let mut r = 0;
    for (b, w) in blocks.iter().enumerate() {
        let hb = channel.h.view((b * channel.antennas, 0), (channel.antennas, u));
        out.view_mut((r, 0), (w.nrows(), u)).copy_from(&(w * hb));
        r += w.nrows();
    }
    out
}

#[derive(Debug, Clone)]
pub struct ZfCombiner {
    /// `W_BB` (`U × B·U`).
    pub matrix: DMatrix<Complex64>,
    /// Whether diagonal loading was needed.
    pub loaded: bool,
}

/// `W_BB = (H̄^H H̄)^{-1} H̄^H`, with diagonal loading when the Gram matrix
/// is ill-conditioned.
pub fn zf_combiner(hbar: &DMatrix<Complex64>) -> Result<ZfCombiner, CoreError> {
    let u = hbar.ncols();
    if hbar.nrows() < u {
        return Err(CoreError::Degenerate(format!(
            "equivalent channel is {}x{u}; need at least {u} rows",
            hbar.nrows()
        )));
    }
    let mut gram = hbar.adjoint() * hbar;
    let trace: f64 = (0..u).map(|i| gram[(i, i)].re).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(CoreError::Degenerate("equivalent channel is zero".into()));
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    let loaded = !(min > 0.0) || max / min > LOADING_CONDITION;
    if loaded {
        let eps = LOADING_FACTOR * trace / u as f64;
        for i in 0..u {
            gram[(i, i)] += Complex64::new(eps, 0.0);
        }
    }
    let inv = gram
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| CoreError::Degenerate("Gram matrix not invertible after loading".into()))?;
    Ok(ZfCombiner {
        matrix: inv * hbar.adjoint(),
        loaded,
    })
}

/// Hybrid combiner `W = W_BB W_RF` (`U × B·M`).
pub fn hybrid_combiner(w_bb: &DMatrix<Complex64>, blocks: &[DMatrix<Complex64>]) -> DMatrix<Complex64> {
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(w_bb.nrows(), m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        let part = w_bb.columns(r, b.nrows()) * b;
        out.view_mut((0, c), (w_bb.nrows(), b.ncols())).copy_from(&part);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Per-user SINR
/// `ρ_u = P_u |w_u^T h_u|² / (Σ_{v≠u} P_v |w_u^T h_v|² + ‖w_u‖²)`.
pub fn sinr(w: &DMatrix<Complex64>, h: &DMatrix<Complex64>, power: &[f64]) -> Vec<f64> {
    let g = w * h;
    (0..w.nrows())
        .map(|u| {
            let signal = power[u] * g[(u, u)].norm_sqr();
            let interference: f64 = (0..h.ncols())
                .filter(|&v| v != u)
                .map(|v| power[v] * g[(u, v)].norm_sqr())
                .sum();
            let noise: f64 = w.row(u).iter().map(|x| x.norm_sqr()).sum();
            signal / (interference + noise)
        })
        .collect()
}

/// Slot timing and bandwidth shared by every user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub bandwidth_hz: f64,
    pub slot_s: f64,
    pub symbol_s: f64,
}

impl LinkBudget {
    /// Fraction of the slot left for data after `n_training` symbols.
    pub fn overhead_factor(&self, n_training: usize) -> Result<f64, CoreError> {
        let training = n_training as f64 * self.symbol_s;
        if training >= self.slot_s {
            return Err(CoreError::Config(format!(
                "{n_training} training symbols do not fit in a {} s slot",
                self.slot_s
            )));
        }
        Ok((self.slot_s - training) / self.slot_s)
    }
}

/// `R = W (τ − N_tr τ_c)/τ · log2(1 + ρ)` in bits/s.
pub fn achievable_rate(sinr: f64, budget: &LinkBudget, n_training: usize) -> Result<f64, CoreError> {
    Ok(budget.bandwidth_hz * budget.overhead_factor(n_training)? * (1.0 + sinr.max(0.0)).log2())
}

/// Rate a single BS would estimate for a user from analog combining only:
/// `log2(1 + P ‖W_RF,b h‖² / ‖W_RF,b‖_F²)`.
pub fn estimated_rate(w_rf: &DMatrix<Complex64>, h: &DVector<Complex64>, power: f64) -> f64 {
    let denom = w_rf.norm_squared();
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + power * (w_rf * h).norm_squared() / denom).log2()
}

/// Received strength `|f^H h|²`.
pub fn beam_strength(f: &[Complex64], h: &[Complex64]) -> f64 {
    assert_eq!(f.len(), h.len(), "beam and channel lengths differ");
    f.iter().zip(h).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr()
}

/// Outcome of running the full combining pipeline for one slot.
#[derive(Debug, Clone)]
pub struct SlotRates {
    pub sinr: Vec<f64>,
    /// bits/s per user.
    pub rates: Vec<f64>,
    pub equivalent_csi: DMatrix<Complex64>,
    pub loaded: bool,
}

/// Actual user rates for an assignment: analog combining, ZF, SINR and the
/// training-overhead-adjusted rate.
pub fn system_rates(
    assignment: &BeamAssignment,
    codebook: &DMatrix<Complex64>,
    channel: &ChannelRealization,
    power: &[f64],
    budget: &LinkBudget,
    n_training: usize,
) -> Result<SlotRates, CoreError> {
    let blocks = analog_combiner(assignment, codebook)?;
    let hbar = equivalent_csi(&blocks, channel);
    let zf = zf_combiner(&hbar)?;
    let w = hybrid_combiner(&zf.matrix, &blocks);
    let s = sinr(&w, &channel.h, power);
    let rates = s
        .iter()
        .map(|&x| achievable_rate(x, budget, n_training))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SlotRates {
        sinr: s,
        rates,
        equivalent_csi: hbar,
        loaded: zf.loaded,
    })
}
