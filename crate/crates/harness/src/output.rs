//! CSV and JSON artifacts. Headers are fixed; floats use Rust's shortest
//! round-trip formatting so re-runs are byte-identical.

use std::fmt::Write as _;

use cfbeam_core::sim::{CurvePoint, EvalReport, Scheme};
use cfbeam_core::traffic::UserMetrics;
use serde::Serialize;

use crate::HarnessError;

pub fn learning_curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("episode,mean_reward,loss,epsilon\n");
    for c in curve {
        let _ = writeln!(out, "{},{},{},{}", c.episode, c.mean_reward, c.loss, c.epsilon);
    }
    out
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("episode,user,q_tilde,satisfied\n");
    for (e, ep) in report.episodes.iter().enumerate() {
        for (u, m) in ep.metrics.iter().enumerate() {
            let _ = writeln!(out, "{e},{u},{},{}", m.avg_queue, u8::from(m.satisfied));
        }
    }
    out
}

/// Per-user histogram of average queue lengths over episodes. Bins split
/// `[0, max]` evenly (`max` defaults to the largest observed value); values
/// on or past the upper edge land in the last bin. Densities are bin
/// probabilities and sum to one per user.
pub fn emit_histogram(episodes: &[Vec<UserMetrics>], bins: usize, max: Option<f64>) -> Result<String, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::Usage("a histogram needs at least one episode".into()));
    }
    if bins == 0 {
        return Err(HarnessError::Usage("a histogram needs at least one bin".into()));
    }
    let n_users = episodes[0].len();
    let observed = episodes.iter().flatten().map(|m| m.avg_queue).fold(0.0, f64::max);
    let hi = match max {
        Some(h) if h > 0.0 => h,
        _ if observed > 0.0 => observed,
        _ => 1.0,
    };
    let width = hi / bins as f64;
    let mut out = String::from("user,bin_lo,bin_hi,density\n");
    for u in 0..n_users {
        let mut counts = vec![0usize; bins];
        for ep in episodes {
            let q = ep[u].avg_queue.max(0.0);
            let i = ((q / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let density = *c as f64 / episodes.len() as f64;
            let _ = writeln!(out, "{u},{},{},{density}", i as f64 * width, (i + 1) as f64 * width);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scheme: String,
    pub episodes: usize,
    pub per_user_satisfaction: Vec<f64>,
    pub system_satisfaction: f64,
    pub mean_q_tilde: Vec<f64>,
    pub training_overhead_symbols: f64,
    pub degenerate_slots: usize,
    pub widened_slots: usize,
    pub conflict_slots: usize,
    pub parameters: usize,
    pub overrides: Vec<String>,
}

impl Summary {
    pub fn new(report: &EvalReport, parameters: usize, overrides: &[String]) -> Self {
        let n_users = report.episodes.first().map_or(0, |e| e.metrics.len());
        let n = report.episodes.len() as f64;
        Self {
            scheme: report.scheme.name().to_string(),
            episodes: report.episodes.len(),
            per_user_satisfaction: report.rates.per_user.clone(),
            system_satisfaction: report.rates.system,
            mean_q_tilde: (0..n_users)
                .map(|u| report.episodes.iter().map(|e| e.metrics[u].avg_queue).sum::<f64>() / n)
                .collect(),
            training_overhead_symbols: report.mean_training_symbols(),
            degenerate_slots: report.episodes.iter().map(|e| e.degenerate_slots).sum(),
            widened_slots: report.episodes.iter().map(|e| e.widened_slots).sum(),
            conflict_slots: report.episodes.iter().map(|e| e.conflict_slots).sum(),
            parameters,
            overrides: overrides.to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}

/// One row per scheme: beam-training symbols per slot, the same overhead in
/// seconds (`symbols × symbol_s`), and system satisfaction rate.
pub fn comparison_csv(rows: &[(Scheme, f64, f64)], symbol_s: f64) -> String {
    let mut out = String::from("scheme,training_overhead_symbols,training_overhead_s,system_satisfaction\n");
    for (s, overhead, sat) in rows {
        let _ = writeln!(out, "{},{overhead},{},{sat}", s.name(), overhead * symbol_s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(q: f64) -> UserMetrics {
        UserMetrics {
            avg_queue: q,
            avg_delay: q,
            satisfied: q < 1.0,
        }
    }

    fn densities(csv: &str, user: usize) -> Vec<f64> {
        csv.lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[0] == user.to_string())
            .map(|f| f[3].parse().unwrap())
            .collect()
    }

    #[test]
    fn single_episode_fills_one_bin_per_user() {
        let csv = emit_histogram(&[vec![m(2.0), m(0.5)]], 4, None).unwrap();
        for u in 0..2 {
            let d = densities(&csv, u);
            assert_eq!(d.iter().filter(|&&x| x > 0.0).count(), 1);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_queues_give_a_spike() {
        let eps: Vec<Vec<UserMetrics>> = (0..1000).map(|_| vec![m(3.0)]).collect();
        let csv = emit_histogram(&eps, 10, Some(10.0)).unwrap();
        let d = densities(&csv, 0);
        assert_eq!(d[3], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn densities_sum_to_one() {
        let eps: Vec<Vec<UserMetrics>> = (0..37).map(|i| vec![m(i as f64 * 0.37), m((i * i) as f64)]).collect();
        let csv = emit_histogram(&eps, 7, None).unwrap();
        for u in 0..2 {
            assert!((densities(&csv, u).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(emit_histogram(&[], 3, None).is_err());
    }
}
