//! Geometry, dual-timescale Saleh-Valenzuela channels, planar-array
//! responses and DFT codebooks.
//!
//! Long-timescale quantities (positions, angles, path classes, path loss)
//! are frozen for an episode; the per-path small-scale gains follow a
//! first-order autoregressive process from slot to slot.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CoreError, ScenarioConfig};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const PLACEMENT_ATTEMPTS: usize = 10_000;

pub type Position = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub bs: Vec<Position>,
    pub users: Vec<Position>,
    pub region_m: f64,
}

fn horizontal_distance(a: &Position, b: &Position) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn distance(a: &Position, b: &Position) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Rejection-samples `count` points at height `z` with pairwise horizontal
/// separation of at least `min_sep`.
fn place<R: Rng + ?Sized>(
    count: usize,
    z: f64,
    min_sep: f64,
    region: f64,
    rng: &mut R,
    what: &str,
) -> Result<Vec<Position>, CoreError> {
    let mut points: Vec<Position> = Vec::with_capacity(count);
    let mut attempts = 0;
    while points.len() < count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(CoreError::Config(format!(
                "could not place {count} {what} {min_sep} m apart in a {region} m region"
            )));
        }
        let p = [rng.random_range(0.0..region), rng.random_range(0.0..region), z];
        if points.iter().all(|q| horizontal_distance(&p, q) >= min_sep) {
            points.push(p);
        }
    }
    Ok(points)
}

pub fn place_base_stations<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<Position>, CoreError> {
    place(cfg.n_bs, cfg.bs_height_m, cfg.min_bs_distance_m, cfg.region_m, rng, "base stations")
}

pub fn place_users<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<Position>, CoreError> {
    place(cfg.n_users, cfg.user_height_m, cfg.min_user_distance_m, cfg.region_m, rng, "users")
}

pub fn generate_topology<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Topology, CoreError> {
    let bs = place_base_stations(cfg, rng)?;
    let users = place_users(cfg, rng)?;
    Ok(Topology {
        bs,
        users,
        region_m: cfg.region_m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkClass {
    Los,
    Nlos,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    /// Azimuth relative to the array boresight, in `[-π, π)`.
    pub azimuth: f64,
    /// Elevation measured from the vertical axis, in `(0, π)`.
    pub elevation: f64,
    /// Large-scale amplitude (square root of the power path gain).
    pub amplitude: f64,
    pub class: LinkClass,
}

/// Long-timescale parameters of every BS-user link, indexed `b * U + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermState {
    pub n_bs: usize,
    pub n_users: usize,
    pub links: Vec<Vec<Path>>,
}

impl LongTermState {
    pub fn link(&self, b: usize, u: usize) -> &[Path] {
        &self.links[b * self.n_users + u]
    }

    pub fn path_count(&self) -> usize {
        self.links.first().map_or(0, Vec::len)
    }

    /// Multiplies every large-scale amplitude by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for p in out.links.iter_mut().flatten() {
            p.amplitude *= c;
        }
        out
    }
}

/// Amplitude path gain `√PL(d)` with `PL(d) = (4π f d0 / c)^-2 (d / d0)^-n`.
pub fn path_amplitude(distance_m: f64, exponent: f64, carrier_hz: f64, reference_m: f64) -> f64 {
    let d = distance_m.max(reference_m);
    let free_space = (4.0 * PI * carrier_hz * reference_m / SPEED_OF_LIGHT).powi(-2);
    (free_space * (d / reference_m).powf(-exponent)).sqrt()
}

/// Distance-decaying line-of-sight probability over horizontal distance.
pub fn los_probability(d2d: f64) -> f64 {
    (18.0 / d2d).min(1.0) * (1.0 - (-d2d / 36.0).exp()) + (-d2d / 36.0).exp()
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Azimuth of the array normal: each array faces the region centre.
pub fn boresight(bs: &Position, region_m: f64) -> f64 {
    let c = region_m / 2.0;
    let (dx, dy) = (c - bs[0], c - bs[1]);
    if dx.abs() < 1e-9 && dy.abs() < 1e-9 {
        0.0
    } else {
        dy.atan2(dx)
    }
}

/// Geometric (azimuth, elevation) of `user` seen from `bs`.
pub fn geometric_angles(bs: &Position, user: &Position, region_m: f64) -> (f64, f64) {
    let d = [user[0] - bs[0], user[1] - bs[1], user[2] - bs[2]];
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
    let az = wrap_angle(d[1].atan2(d[0]) - boresight(bs, region_m));
    let el = (d[2] / r).clamp(-1.0, 1.0).acos();
    (az, el)
}

pub fn sample_long_term<R: Rng + ?Sized>(
    topo: &Topology,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> LongTermState {
    let eps = 1e-6;
    let mut links = Vec::with_capacity(topo.bs.len() * topo.users.len());
    for bs in &topo.bs {
        for user in &topo.users {
            let (az0, el0) = geometric_angles(bs, user, topo.region_m);
            let d3 = distance(bs, user);
            let los = rng.random_bool(los_probability(horizontal_distance(bs, user).max(1e-3)));
            let paths = (0..cfg.path_count)
                .map(|l| {
                    let class = if l == 0 && los { LinkClass::Los } else { LinkClass::Nlos };
                    let (azimuth, elevation) = match class {
                        LinkClass::Los => (az0, el0),
                        _ => {
                            let da = rng.random_range(-1.0..=1.0) * cfg.nlos_azimuth_spread_rad;
                            let de = rng.random_range(-1.0..=1.0) * cfg.nlos_elevation_spread_rad;
                            (wrap_angle(az0 + da), (el0 + de).clamp(eps, PI - eps))
                        }
                    };
                    let exponent = if class == LinkClass::Los {
                        cfg.pathloss_exponent_los
                    } else {
                        cfg.pathloss_exponent_nlos
                    };
                    let blocked = rng.random_bool(cfg.blockage_prob);
                    Path {
                        azimuth,
                        elevation,
                        amplitude: if blocked {
                            0.0
                        } else {
                            path_amplitude(d3, exponent, cfg.carrier_hz, cfg.reference_distance_m)
                        },
                        class: if blocked { LinkClass::Blocked } else { class },
                    }
                })
                .collect();
            links.push(paths);
        }
    }
    LongTermState {
        n_bs: topo.bs.len(),
        n_users: topo.users.len(),
        links,
    }
}

/// Circularly symmetric complex Gaussian sample with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Per-path small-scale gains, indexed `(b * U + u) * L + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallScaleState {
    pub rho: f64,
    pub gains: Vec<Complex64>,
}

impl SmallScaleState {
    /// Draws initial gains from the stationary distribution.
    pub fn stationary<R: Rng + ?Sized>(count: usize, rho: f64, rng: &mut R) -> Self {
        Self {
            rho,
            gains: (0..count).map(|_| complex_normal(rng)).collect(),
        }
    }

    /// `β ← ρ β + √(1 − ρ²) n`.
    pub fn evolve<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let innovation = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        for g in &mut self.gains {
            let n = complex_normal(rng);
            *g = *g * self.rho + n * innovation;
        }
    }
}

/// Unit-norm response of an `m_y × m_z` half-wavelength planar array.
/// Element `m_z * m_y_count + m_y` has phase `π(m_z cos φ + m_y sin θ sin φ)`.
pub fn array_response(azimuth: f64, elevation: f64, m_y: usize, m_z: usize) -> DVector<Complex64> {
    let norm = 1.0 / ((m_y * m_z) as f64).sqrt();
    let vz = elevation.cos();
    let vy = azimuth.sin() * elevation.sin();
    DVector::from_fn(m_y * m_z, |m, _| {
        let (iz, iy) = ((m / m_y) as f64, (m % m_y) as f64);
        Complex64::from_polar(norm, PI * (iz * vz + iy * vy))
    })
}

/// `M × M` DFT matrix with columns `f_k[m] = exp(j2πmk/M)/√M`.
pub fn dft_codebook(m: usize) -> DMatrix<Complex64> {
    assert!(m >= 1, "codebook size must be positive");
    let norm = 1.0 / (m as f64).sqrt();
    DMatrix::from_fn(m, m, |row, col| {
        let phase = 2.0 * PI * ((row * col) % m) as f64 / m as f64;
        Complex64::from_polar(norm, phase)
    })
}

/// Narrow codebook over the full array and wide codebook over the
/// activated sub-array.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    pub narrow: DMatrix<Complex64>,
    pub wide: DMatrix<Complex64>,
}

impl CodebookSet {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            narrow: dft_codebook(cfg.antennas()),
            wide: dft_codebook(cfg.m_wide),
        }
    }
}

/// System channel for one slot: `B·M × U`, column `u` stacks `h_{1,u} … h_{B,u}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: DMatrix<Complex64>,
    pub n_bs: usize,
    pub antennas: usize,
    pub slot: usize,
}

impl ChannelRealization {
    pub fn n_users(&self) -> usize {
        self.h.ncols()
    }

    /// `h_{b,u}`.
    pub fn link(&self, b: usize, u: usize) -> DVector<Complex64> {
        self.h.view((b * self.antennas, u), (self.antennas, 1)).column(0).into_owned()
    }

    /// Rows of BS `b` (`M × U`).
    pub fn bs_block(&self, b: usize) -> DMatrix<Complex64> {
        self.h
            .view((b * self.antennas, 0), (self.antennas, self.n_users()))
            .into_owned()
    }
}

/// `h_{b,u} = √(M/L) Σ_l α_l β_l a(θ_l, φ_l)`, stacked into the system matrix.
pub fn assemble_channel(
    long_term: &LongTermState,
    small: &SmallScaleState,
    m_y: usize,
    m_z: usize,
    slot: usize,
) -> ChannelRealization {
    let m = m_y * m_z;
    let (nb, nu) = (long_term.n_bs, long_term.n_users);
    let l_count = long_term.path_count();
    assert_eq!(small.gains.len(), nb * nu * l_count, "small-scale state does not match paths");
    let scale = (m as f64 / l_count as f64).sqrt();
    let mut h = DMatrix::zeros(nb * m, nu);
    for b in 0..nb {
        for u in 0..nu {
            let link = b * nu + u;
            for (l, p) in long_term.links[link].iter().enumerate() {
                if p.amplitude == 0.0 {
                    continue;
                }
                let g = small.gains[link * l_count + l] * (p.amplitude * scale);
                let a = array_response(p.azimuth, p.elevation, m_y, m_z);
                for i in 0..m {
                    h[(b * m + i, u)] += g * a[i];
                }
            }
        }
    }
    ChannelRealization {
        h,
        n_bs: nb,
        antennas: m,
        slot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn max_unitarity_error(f: &DMatrix<Complex64>) -> f64 {
        let g = f.adjoint() * f;
        let n = f.ncols();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - Complex64::new(target, 0.0)).norm());
            }
        }
        worst
    }

    #[test]
    fn codebooks_are_unitary() {
        assert_eq!(dft_codebook(1)[(0, 0)], Complex64::new(1.0, 0.0));
        assert!(max_unitarity_error(&dft_codebook(4)) < 1e-12);
        for m in [8, 32] {
            assert!(max_unitarity_error(&dft_codebook(m)) < 1e-10);
        }
    }

    #[test]
    fn broadside_response_is_flat() {
        let a = array_response(0.0, PI / 2.0, 8, 4);
        for v in a.iter() {
            assert!((v - Complex64::new(1.0 / 32f64.sqrt(), 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn two_element_endfire() {
        let a = array_response(PI / 2.0, PI / 2.0, 2, 1);
        let s = 1.0 / 2f64.sqrt();
        assert!((a[0] - Complex64::new(s, 0.0)).norm() < 1e-12);
        assert!((a[1] - Complex64::new(-s, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn responses_have_unit_norm() {
        let mut rng = stream(5, "t", &[]);
        for _ in 0..1000 {
            let a = array_response(rng.random_range(-PI..PI), rng.random_range(0.0..PI), 8, 4);
            assert!((a.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_beam_wins_angle_sweep() {
        // For a 32-element line array, beam k is matched to sin θ = 2k/32
        // (mod 2); a fine sweep over θ must peak there.
        let f = dft_codebook(32);
        for k in [0usize, 3, 7, 12] {
            let col = f.column(k);
            let mut best = (f64::MIN, 0.0);
            for i in 0..20001 {
                let theta = -PI / 2.0 + PI * i as f64 / 20000.0;
                let a = array_response(theta, PI / 2.0, 32, 1);
                let g = col.dotc(&a).norm();
                if g > best.0 {
                    best = (g, theta);
                }
            }
            let expected = (2.0 * k as f64 / 32.0).asin();
            assert!((best.1 - expected).abs() < 1e-3, "k={k}: {} vs {expected}", best.1);
            assert!((best.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn topology_respects_separation() {
        let cfg = ScenarioConfig::default();
        for seed in 0..20 {
            let topo = generate_topology(&cfg, &mut stream(seed, "topo", &[])).unwrap();
            for i in 0..topo.bs.len() {
                for j in 0..i {
                    assert!(horizontal_distance(&topo.bs[i], &topo.bs[j]) >= 75.0);
                }
            }
            for i in 0..topo.users.len() {
                for j in 0..i {
                    assert!(horizontal_distance(&topo.users[i], &topo.users[j]) >= 10.0);
                }
            }
            for p in topo.bs.iter().chain(&topo.users) {
                assert!(p[0] >= 0.0 && p[0] < 150.0 && p[1] >= 0.0 && p[1] < 150.0);
            }
            assert!(topo.bs.iter().all(|p| p[2] == 6.0));
            assert!(topo.users.iter().all(|p| p[2] == 2.0));
        }
    }

    #[test]
    fn topology_is_deterministic_and_can_fail() {
        let cfg = ScenarioConfig {
            n_bs: 1,
            ..Default::default()
        };
        let a = generate_topology(&cfg, &mut stream(1, "t", &[])).unwrap();
        let b = generate_topology(&cfg, &mut stream(1, "t", &[])).unwrap();
        assert_eq!(a, b);
        let crowded = ScenarioConfig {
            n_bs: 10,
            ..Default::default()
        };
        assert!(matches!(
            generate_topology(&crowded, &mut stream(1, "t", &[])),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn path_loss_scales_with_exponent() {
        for n in [2.0, 3.3] {
            let a = path_amplitude(20.0, n, 28e9, 1.0);
            let b = path_amplitude(40.0, n, 28e9, 1.0);
            assert!((b / a - 2f64.powf(-n / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn long_term_invariants_and_determinism() {
        let cfg = ScenarioConfig::default();
        let topo = generate_topology(&cfg, &mut stream(3, "t", &[])).unwrap();
        let a = sample_long_term(&topo, &cfg, &mut stream(3, "lt", &[]));
        let b = sample_long_term(&topo, &cfg, &mut stream(3, "lt", &[]));
        assert_eq!(a, b);
        for p in a.links.iter().flatten() {
            assert!((-PI..PI).contains(&p.azimuth));
            assert!(p.elevation > 0.0 && p.elevation < PI);
            assert!(p.amplitude >= 0.0);
            if p.class == LinkClass::Blocked {
                assert_eq!(p.amplitude, 0.0);
            }
        }
        // Only the first path may be line of sight.
        for link in &a.links {
            assert!(link[1..].iter().all(|p| p.class != LinkClass::Los));
            assert_eq!(link.len(), 6);
        }
    }

    #[test]
    fn fully_blocked_link_gives_zero_channel() {
        let cfg = ScenarioConfig {
            blockage_prob: 1.0,
            ..Default::default()
        };
        let topo = generate_topology(&cfg, &mut stream(3, "t", &[])).unwrap();
        let lt = sample_long_term(&topo, &cfg, &mut stream(3, "lt", &[]));
        let ss = SmallScaleState::stationary(3 * 4 * 6, 0.91, &mut stream(3, "ss", &[]));
        let ch = assemble_channel(&lt, &ss, 8, 4, 1);
        assert!(ch.h.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn single_unit_path_has_norm_sqrt_m() {
        let lt = LongTermState {
            n_bs: 1,
            n_users: 1,
            links: vec![vec![Path {
                azimuth: 0.3,
                elevation: 1.2,
                amplitude: 1.0,
                class: LinkClass::Los,
            }]],
        };
        let ss = SmallScaleState {
            rho: 1.0,
            gains: vec![Complex64::new(1.0, 0.0)],
        };
        let ch = assemble_channel(&lt, &ss, 8, 4, 1);
        assert!((ch.h.norm() - 32f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_paths_match_direct_sum() {
        let mut rng = stream(8, "t", &[]);
        let paths: Vec<Path> = (0..2)
            .map(|_| Path {
                azimuth: rng.random_range(-PI..PI),
                elevation: rng.random_range(0.1..3.0),
                amplitude: rng.random_range(0.1..2.0),
                class: LinkClass::Nlos,
            })
            .collect();
        let gains = vec![complex_normal(&mut rng), complex_normal(&mut rng)];
        let lt = LongTermState {
            n_bs: 1,
            n_users: 1,
            links: vec![paths.clone()],
        };
        let ch = assemble_channel(&lt, &SmallScaleState { rho: 0.5, gains: gains.clone() }, 4, 2, 1);
        // Direct evaluation of each element from the phase formula.
        let (my, mz) = (4usize, 2usize);
        let m = (my * mz) as f64;
        for idx in 0..my * mz {
            let (iz, iy) = ((idx / my) as f64, (idx % my) as f64);
            let mut acc = Complex64::new(0.0, 0.0);
            for (p, g) in paths.iter().zip(&gains) {
                let phase = PI * (iz * p.elevation.cos() + iy * p.azimuth.sin() * p.elevation.sin());
                acc += g * p.amplitude * Complex64::from_polar(1.0 / m.sqrt(), phase);
            }
            acc *= (m / 2.0).sqrt();
            assert!((ch.h[(idx, 0)] - acc).norm() < 1e-12);
        }
    }

    #[test]
    fn channel_is_linear_in_amplitude() {
        let cfg = ScenarioConfig::default();
        let topo = generate_topology(&cfg, &mut stream(4, "t", &[])).unwrap();
        let lt = sample_long_term(&topo, &cfg, &mut stream(4, "lt", &[]));
        let ss = SmallScaleState::stationary(3 * 4 * 6, 0.91, &mut stream(4, "ss", &[]));
        let h1 = assemble_channel(&lt, &ss, 8, 4, 1).h;
        let h2 = assemble_channel(&lt.scaled(2.0), &ss, 8, 4, 1).h;
        // Scaling by a power of two is exact in binary floating point.
        assert_eq!(h1 * Complex64::new(2.0, 0.0), h2);
    }

    #[test]
    fn ar1_limits() {
        let mut rng = stream(9, "ar", &[]);
        let mut frozen = SmallScaleState::stationary(4, 1.0, &mut rng);
        let before = frozen.gains.clone();
        frozen.evolve(&mut rng);
        assert_eq!(before, frozen.gains);
        let mut fresh = SmallScaleState::stationary(4, 0.0, &mut rng);
        let before = fresh.gains.clone();
        fresh.evolve(&mut rng);
        assert!(before.iter().zip(&fresh.gains).all(|(a, b)| a != b));
    }
}
