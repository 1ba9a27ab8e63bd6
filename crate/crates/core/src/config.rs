//! Scenario parameters. Defaults reproduce the 4-user deployment: three
//! base stations with 8×4 planar arrays in a 150 m square, 28 GHz carrier,
//! 100 MHz bandwidth.

use serde::{Deserialize, Serialize};

use crate::CoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub region_m: f64,
    pub n_bs: usize,
    pub n_users: usize,
    /// Horizontal antennas per array.
    pub m_y: usize,
    /// Vertical antennas per array.
    pub m_z: usize,
    /// Antennas activated for wide-beam probing (taken from the first row).
    pub m_wide: usize,
    pub bs_height_m: f64,
    pub user_height_m: f64,
    pub min_bs_distance_m: f64,
    pub min_user_distance_m: f64,

    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub path_count: usize,
    pub rho: f64,
    pub pathloss_exponent_los: f64,
    pub pathloss_exponent_nlos: f64,
    pub reference_distance_m: f64,
    pub blockage_prob: f64,
    pub nlos_azimuth_spread_rad: f64,
    pub nlos_elevation_spread_rad: f64,

    pub tx_power_w: f64,
    pub noise_power_w: f64,
    pub slot_s: f64,
    pub symbol_s: f64,
    pub slots_per_episode: usize,

    /// Packet arrival rate per user, packets per slot.
    pub lambda: Vec<f64>,
    pub kappa: f64,
    pub chi_min: f64,
    /// Average-queue requirement per user, bits.
    pub q_req: Vec<f64>,
    /// Instantaneous queue limit per user, bits.
    pub q_lim: Vec<f64>,
    pub delta: f64,
    /// Multiplies the bits served per slot; maps physical rates onto the
    /// queue units of the traffic model.
    pub service_scale: f64,
    /// Initial queues are drawn uniformly from `[0, fraction · q_req]`.
    pub initial_queue_fraction: f64,

    pub k_centralized: usize,
    pub k_distributed: usize,
    pub action_cap: usize,
    pub history_window: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            region_m: 150.0,
            n_bs: 3,
            n_users: 4,
            m_y: 8,
            m_z: 4,
            m_wide: 8,
            bs_height_m: 6.0,
            user_height_m: 2.0,
            min_bs_distance_m: 75.0,
            min_user_distance_m: 10.0,
            carrier_hz: 28e9,
            bandwidth_hz: 1e8,
            path_count: 6,
            rho: 0.91,
            pathloss_exponent_los: 2.0,
            pathloss_exponent_nlos: 3.3,
            reference_distance_m: 1.0,
            blockage_prob: 0.1,
            nlos_azimuth_spread_rad: std::f64::consts::FRAC_PI_3,
            nlos_elevation_spread_rad: std::f64::consts::PI / 12.0,
            tx_power_w: 0.2,
            noise_power_w: 3.18e-12,
            slot_s: 1e-3,
            symbol_s: 5e-6,
            slots_per_episode: 100,
            lambda: vec![4.5, 5.0, 5.5, 6.0],
            kappa: 6.0,
            chi_min: 1.0,
            q_req: vec![9.0, 10.0, 11.0, 12.0],
            q_lim: vec![18.0, 20.0, 22.0, 24.0],
            delta: 10.0,
            service_scale: 1.0,
            initial_queue_fraction: 1.0,
            k_centralized: 2,
            k_distributed: 3,
            action_cap: 1_000_000,
            history_window: 1,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    /// The 8-user deployment (two users per service type).
    pub fn eight_users() -> Self {
        Self {
            n_users: 8,
            lambda: vec![5.5, 5.0, 5.5, 4.5, 6.0, 5.0, 6.0, 4.5],
            q_req: vec![11.0, 10.0, 11.0, 9.0, 12.0, 10.0, 12.0, 9.0],
            q_lim: vec![22.0, 20.0, 22.0, 18.0, 24.0, 20.0, 24.0, 18.0],
            ..Self::default()
        }
    }

    pub fn antennas(&self) -> usize {
        self.m_y * self.m_z
    }

    /// Transmit power normalized by receiver noise power.
    pub fn normalized_power(&self) -> f64 {
        self.tx_power_w / self.noise_power_w
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        let u = self.n_users;
        if self.n_bs == 0 || u == 0 {
            return bad("n_bs and n_users must be positive".into());
        }
        if self.m_y == 0 || self.m_z == 0 {
            return bad("array extents must be positive".into());
        }
        if self.m_wide == 0 || self.m_wide > self.m_y {
            return bad(format!("m_wide must lie in 1..={} (first array row)", self.m_y));
        }
        if u > self.antennas() {
            return bad(format!("{u} users need at least {u} distinct beams per BS"));
        }
        for (name, v) in [("lambda", &self.lambda), ("q_req", &self.q_req), ("q_lim", &self.q_lim)] {
            if v.len() != u {
                return bad(format!("{name} has {} entries, expected n_users = {u}", v.len()));
            }
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return bad("lambda must be non-negative".into());
        }
        if self.kappa <= 1.0 || self.chi_min <= 0.0 {
            return bad("Pareto shape must exceed 1 and chi_min must be positive".into());
        }
        for i in 0..u {
            if !(self.q_req[i] > 0.0 && self.q_lim[i] >= self.q_req[i]) {
                return bad(format!("user {i}: need q_lim >= q_req > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.blockage_prob) {
            return bad("blockage_prob must lie in [0, 1]".into());
        }
        if self.path_count == 0 {
            return bad("path_count must be at least 1".into());
        }
        if self.slot_s <= 0.0 || self.symbol_s <= 0.0 || self.bandwidth_hz <= 0.0 {
            return bad("slot, symbol and bandwidth must be positive".into());
        }
        if self.tx_power_w <= 0.0 || self.noise_power_w <= 0.0 {
            return bad("powers must be positive".into());
        }
        if self.slots_per_episode == 0 || self.history_window == 0 {
            return bad("slots_per_episode and history_window must be positive".into());
        }
        if self.service_scale <= 0.0 || self.delta < 0.0 {
            return bad("service_scale must be positive and delta non-negative".into());
        }
        let m = self.antennas();
        if self.k_centralized == 0 || self.k_centralized > m || self.k_distributed == 0 || self.k_distributed > m {
            return bad(format!("candidate counts must lie in 1..={m}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
        ScenarioConfig::eight_users().validate().unwrap();
        assert_eq!(ScenarioConfig::default().lambda, vec![4.5, 5.0, 5.5, 6.0]);
    }

    #[test]
    fn rejects_inconsistent_thresholds() {
        let cfg = ScenarioConfig {
            q_lim: vec![1.0, 20.0, 22.0, 24.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
