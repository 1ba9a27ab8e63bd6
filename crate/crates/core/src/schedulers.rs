//! Queue-weighted (Lyapunov) beam selectors and reference policies.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::beamspace::{
    effective_action_space, sweep_narrow, top_k, BsActionSpace, CandidateSets, EffectiveActionSpace,
};
use crate::channel::ChannelRealization;
use crate::phy::{analog_block, estimated_rate, system_rates, BeamAssignment, LinkBudget};
use crate::CoreError;

/// Everything needed to turn an assignment into user rates.
#[derive(Debug, Clone)]
pub struct RateContext<'a> {
    pub codebook: &'a DMatrix<Complex64>,
    /// Normalized transmit power `P` per user.
    pub power: Vec<f64>,
    pub budget: LinkBudget,
}

/// `Σ_u q_u R_u(a)` with actual rates; degenerate slots score zero.
pub fn lyapunov_objective(
    queues: &[f64],
    assignment: &BeamAssignment,
    channel: &ChannelRealization,
    ctx: &RateContext,
    n_training: usize,
) -> Result<f64, CoreError> {
    match system_rates(assignment, ctx.codebook, channel, &ctx.power, &ctx.budget, n_training) {
        Ok(r) => Ok(queues.iter().zip(&r.rates).map(|(q, r)| q * r).sum()),
        Err(CoreError::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Argmax of the Lyapunov objective over a compact action space; ties go
/// to the lowest id.
pub fn lyapunov_argmax(
    queues: &[f64],
    space: &EffectiveActionSpace,
    channel: &ChannelRealization,
    ctx: &RateContext,
    n_training: usize,
) -> Result<usize, CoreError> {
    let mut best = (0, f64::NEG_INFINITY);
    for id in 0..space.size() {
        let v = lyapunov_objective(queues, &space.assignment(id), channel, ctx, n_training)?;
        if v > best.1 {
            best = (id, v);
        }
    }
    Ok(best.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// The unpruned space: every set of `n_users` distinct beams at every BS.
pub fn full_action_space(n_bs: usize, m: usize, n_users: usize, cap: usize) -> Result<EffectiveActionSpace, CoreError> {
    let size = binomial(m, n_users).powi(n_bs as i32);
    if size > cap as f64 {
        return Err(CoreError::Config(format!(
            "full action space has {size:.3e} actions (cap {cap}); use LBS or HDLO instead"
        )));
    }
    if (m as f64).powi(n_users as i32) > 1e7 {
        return Err(CoreError::Config(format!("enumerating {m}^{n_users} beam tuples is too large; use LBS or HDLO")));
    }
    let all: Vec<usize> = (0..m).collect();
    let cands = CandidateSets::new(n_bs, n_users, vec![all; n_bs * n_users]);
    effective_action_space(&cands, cap)
}

/// Exhaustive queue-weighted selection over the whole action space, with a
/// full sweep (`N_tr = M`).
pub fn lcb_select(
    queues: &[f64],
    channel: &ChannelRealization,
    ctx: &RateContext,
    cap: usize,
) -> Result<(BeamAssignment, usize), CoreError> {
    let m = ctx.codebook.ncols();
    let space = full_action_space(channel.n_bs, m, channel.n_users(), cap)?;
    let id = lyapunov_argmax(queues, &space, channel, ctx, m)?;
    Ok((space.assignment(id), id))
}

#[derive(Debug, Clone)]
pub struct LbsDecision {
    pub assignment: BeamAssignment,
    pub space: EffectiveActionSpace,
    pub id: usize,
    /// Candidates had to be widened because the K-strongest sets conflicted.
    pub widened: bool,
}

/// K strongest measured beams per (BS, user), widened one beam at a time
/// for any BS whose candidates admit no conflict-free assignment.
pub fn lbs_candidates(channel: &ChannelRealization, codebook: &DMatrix<Complex64>, k: usize) -> (CandidateSets, bool) {
    let n_users = channel.n_users();
    let grids: Vec<_> = (0..n_users).map(|u| sweep_narrow(channel, codebook, u)).collect();
    let mut sets = Vec::with_capacity(channel.n_bs * n_users);
    let mut widened = false;
    for b in 0..channel.n_bs {
        let mut kb = k;
        loop {
            let per_user: Vec<Vec<usize>> = grids.iter().map(|g| top_k(g.row(b), kb)).collect();
            if crate::beamspace::prune_bs_actions(&per_user).is_ok() || kb >= codebook.ncols() {
                sets.extend(per_user);
                break;
            }
            kb += 1;
            widened = true;
        }
    }
    (CandidateSets::new(channel.n_bs, n_users, sets), widened)
}

/// Lyapunov selection over the space pruned to each pair's K strongest
/// measured beams (full sweep, `N_tr = M`).
pub fn lbs_select(
    queues: &[f64],
    channel: &ChannelRealization,
    ctx: &RateContext,
    k: usize,
    cap: usize,
) -> Result<LbsDecision, CoreError> {
    let m = ctx.codebook.ncols();
    let (cands, widened) = lbs_candidates(channel, ctx.codebook, k);
    let space = effective_action_space(&cands, cap)?;
    let id = lyapunov_argmax(queues, &space, channel, ctx, m)?;
    Ok(LbsDecision {
        assignment: space.assignment(id),
        space,
        id,
        widened,
    })
}

/// Per-BS objective `Σ_u q_u R̊_{b,u}(a_b)` from estimated rates.
pub fn hdlo_objective(
    queues: &[f64],
    channel: &ChannelRealization,
    codebook: &DMatrix<Complex64>,
    b: usize,
    set: &crate::phy::BeamSet,
    power: f64,
) -> f64 {
    let w = analog_block(set, codebook);
    (0..channel.n_users())
        .map(|u| queues[u] * estimated_rate(&w, &channel.link(b, u), power))
        .sum()
}

/// Independent per-BS argmax; returns one set index per BS (ties go to the
/// lowest index within that BS's space).
pub fn hdlo_select(
    queues: &[f64],
    channel: &ChannelRealization,
    codebook: &DMatrix<Complex64>,
    space: &EffectiveActionSpace,
    power: f64,
) -> Vec<usize> {
    space
        .per_bs()
        .iter()
        .enumerate()
        .map(|(b, s)| hdlo_bs_select(queues, channel, codebook, b, s, power))
        .collect()
}

pub fn hdlo_bs_select(
    queues: &[f64],
    channel: &ChannelRealization,
    codebook: &DMatrix<Complex64>,
    b: usize,
    space: &BsActionSpace,
    power: f64,
) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, set) in space.sets().iter().enumerate() {
        let v = hdlo_objective(queues, channel, codebook, b, set, power);
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Beams BS `b` trains per slot under HDLO, checked against `min(K·U, M)`.
pub fn hdlo_training_count(cands: &CandidateSets, b: usize, k: usize, m: usize) -> usize {
    let n = cands.union_for_bs(b).len();
    assert!(
        n <= (k * cands.n_users).min(m),
        "BS {b} trains {n} beams, above min(K·U, M)"
    );
    n
}

pub fn random_select<R: Rng + ?Sized>(space: &EffectiveActionSpace, rng: &mut R) -> usize {
    rng.random_range(0..space.size())
}

/// Per BS, the valid rank tuple with the smallest rank sum (ties: lower
/// slot code); with conflict-free candidates this is every user's
/// strongest beam.
pub fn strongest_select(space: &EffectiveActionSpace) -> usize {
    let per: Vec<usize> = space
        .per_bs()
        .iter()
        .map(|s| {
            let mut best = (0, usize::MAX);
            for (i, &slot) in s.valid_slots().iter().enumerate() {
                let cost: usize = s.ranks(slot).iter().sum();
                if cost < best.1 {
                    best = (i, cost);
                }
            }
            best.0
        })
        .collect();
    space.encode(&per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamspace::prune_bs_actions;
    use crate::beamspace::cascade;

    #[test]
    fn strongest_prefers_rank_zero() {
        let a = prune_bs_actions(&[vec![1, 2], vec![3, 4]]).unwrap();
        let s = cascade(vec![a], 100).unwrap();
        let id = strongest_select(&s);
        assert_eq!(s.assignment(id).per_bs[0].beams(), &[1, 3]);
        // Shared strongest beam: (0,1) and (1,0) tie at rank sum 1; lower code wins.
        let b = prune_bs_actions(&[vec![5, 2], vec![5, 4]]).unwrap();
        let s = cascade(vec![b], 100).unwrap();
        assert_eq!(s.assignment(strongest_select(&s)).per_bs[0].beams(), &[4, 5]);
    }

    #[test]
    fn full_space_size_and_guard() {
        let s = full_action_space(2, 4, 2, 1000).unwrap();
        assert_eq!(s.size(), 36);
        assert!(full_action_space(3, 32, 4, 1_000_000).is_err());
    }
}
