//! Scenario geometry and the near-field line-of-sight channel response.
//!
//! A planar transmit aperture radiates toward point users. The channel from
//! an aperture point `r` to the user centered at `s` is the product of
//! three factors:
//!
//! - a projected-aperture directivity term `sqrt(e_r . (s - r) / |r - s|)`,
//!   clamped to zero when the user is behind the aperture plane,
//! - the spherical-wave term `j k0 eta exp(-j k0 d) / (4 pi d)`,
//! - the near-field correction `1 + j/(k0 d) - 1/(k0 d)^2`.
//!
//! A normalized variant `H' = (2 sqrt(pi) / (k0 eta)) H` is used throughout
//! the rest of the crate; together with unit noise power, unit total transmit
//! power, and a single SNR scale `zeta`, it makes all downstream quantities
//! dimensionless and well conditioned.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{CapaError, Result};

/// Cartesian point or direction in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self.scale(1.0 / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Planar rectangular transmit aperture.
///
/// `u_axis` and `v_axis` span the aperture plane; `normal` is the boresight
/// direction. The three must form a right-handed orthonormal triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aperture {
    pub center: Vec3,
    pub normal: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    /// Side length along `u_axis`, meters.
    pub side_u: f64,
    /// Side length along `v_axis`, meters.
    pub side_v: f64,
}

impl Aperture {
    /// Square aperture in the x-y plane, centered at the origin, with
    /// boresight +z.
    pub fn square_xy(side: f64) -> Self {
        Aperture {
            center: Vec3::new(0.0, 0.0, 0.0),
            normal: Vec3::new(0.0, 0.0, 1.0),
            u_axis: Vec3::new(1.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 1.0, 0.0),
            side_u: side,
            side_v: side,
        }
    }

    pub fn area(&self) -> f64 {
        self.side_u * self.side_v
    }

    /// Point at local coordinates (u, v), each in [-side/2, side/2].
    pub fn point_at(&self, u: f64, v: f64) -> Vec3 {
        self.center.add(self.u_axis.scale(u)).add(self.v_axis.scale(v))
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-9;
        for (name, v) in [("normal", self.normal), ("u_axis", self.u_axis), ("v_axis", self.v_axis)] {
            if (v.norm() - 1.0).abs() > tol {
                return Err(CapaError::Domain(format!("aperture {name} is not unit length")));
            }
        }
        if self.normal.dot(self.u_axis).abs() > tol
            || self.normal.dot(self.v_axis).abs() > tol
            || self.u_axis.dot(self.v_axis).abs() > tol
        {
            return Err(CapaError::Domain("aperture axes are not orthogonal".into()));
        }
        if !(self.side_u > 0.0 && self.side_v > 0.0) {
            return Err(CapaError::Domain("aperture sides must be positive".into()));
        }
        Ok(())
    }
}

/// Wavelength-derived constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Wavelength, meters.
    pub wavelength: f64,
    /// Wavenumber `2 pi / wavelength`, rad/m.
    pub wavenumber: f64,
    /// Free-space impedance, ohms.
    pub impedance: f64,
    /// Effective receive aperture `lambda^2 / (4 pi)`, m^2.
    pub user_aperture: f64,
}

impl PhysicalConstants {
    pub fn from_wavelength(wavelength: f64) -> Self {
        PhysicalConstants {
            wavelength,
            wavenumber: 2.0 * PI / wavelength,
            impedance: 120.0 * PI,
            user_aperture: wavelength * wavelength / (4.0 * PI),
        }
    }
}

/// A complete downlink scene: aperture, constants, user centers, and the
/// normalized-unit knobs (`zeta` sets the SNR scale; noise and total power
/// are fixed to one in normalized units).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub aperture: Aperture,
    pub constants: PhysicalConstants,
    pub users: Vec<Vec3>,
    pub zeta: f64,
    pub sigma: f64,
    pub p_max: f64,
}

/// Default wavelength, meters.
pub const DEFAULT_WAVELENGTH: f64 = 0.0107;
/// Default aperture side for |A| = 0.25 m^2.
pub const DEFAULT_APERTURE_SIDE: f64 = 0.5;
/// Default SNR scale (50 dB).
pub const DEFAULT_ZETA: f64 = 1e5;
/// Default user-region distance from the aperture plane, meters.
pub const DEFAULT_USER_DISTANCE: f64 = 30.0;
/// Default half-extent of the square user region, meters.
pub const DEFAULT_USER_HALF_EXTENT: f64 = 1.0;

impl Scenario {
    /// Default geometry: square aperture in the x-y plane at the origin with
    /// boresight +z, users near (0, 0, 30) m.
    pub fn with_users(users: Vec<Vec3>) -> Self {
        Scenario {
            aperture: Aperture::square_xy(DEFAULT_APERTURE_SIDE),
            constants: PhysicalConstants::from_wavelength(DEFAULT_WAVELENGTH),
            users,
            zeta: DEFAULT_ZETA,
            sigma: 1.0,
            p_max: 1.0,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Scale factor from raw to normalized channel: `2 sqrt(pi) / (k0 eta)`.
    pub fn channel_norm_factor(&self) -> f64 {
        2.0 * PI.sqrt() / (self.constants.wavenumber * self.constants.impedance)
    }

    pub fn validate(&self) -> Result<()> {
        self.aperture.validate()?;
        if self.users.is_empty() {
            return Err(CapaError::Domain("scenario has no users".into()));
        }
        if !(self.zeta > 0.0) {
            return Err(CapaError::Domain("zeta must be positive".into()));
        }
        for (k, s) in self.users.iter().enumerate() {
            if !s.is_finite() {
                return Err(CapaError::Domain(format!("user {k} has non-finite position")));
            }
            let off_plane = s.sub(self.aperture.center).dot(self.aperture.normal).abs();
            if off_plane <= self.constants.wavelength {
                return Err(CapaError::Domain(format!(
                    "user {k} lies within one wavelength of the aperture plane"
                )));
            }
        }
        Ok(())
    }
}

/// Raw channel response `H_k(r)` from aperture point `r` to user `k`.
pub fn channel_response(scene: &Scenario, k: usize, r: Vec3) -> Result<Complex64> {
    let s = *scene
        .users
        .get(k)
        .ok_or_else(|| CapaError::Argument(format!("user index {k} out of range")))?;
    let k0 = scene.constants.wavenumber;
    let eta = scene.constants.impedance;

    let diff = s.sub(r);
    let dist = diff.norm();
    if dist < 1e-12 {
        return Err(CapaError::Domain("user coincides with aperture point".into()));
    }
    // Projected-aperture directivity, clamped at zero behind the plane.
    let proj = scene.aperture.normal.dot(diff) / dist;
    let direct = if proj > 0.0 { proj.sqrt() } else { 0.0 };

    let kd = k0 * dist;
    let spherical = Complex64::new(0.0, k0 * eta) * Complex64::from_polar(1.0, -kd)
        / (4.0 * PI * dist);
    let near_field = Complex64::new(1.0 - 1.0 / (kd * kd), 1.0 / kd);

    let h = spherical * near_field * direct;
    if !h.re.is_finite() || !h.im.is_finite() {
        return Err(CapaError::Numeric(format!(
            "non-finite channel response for user {k} at distance {dist:.3e}"
        )));
    }
    Ok(h)
}

/// Normalized channel response `H'_k(r) = (2 sqrt(pi) / (k0 eta)) H_k(r)`.
pub fn channel_response_normalized(scene: &Scenario, k: usize, r: Vec3) -> Result<Complex64> {
    Ok(channel_response(scene, k, r)? * scene.channel_norm_factor())
}

/// Serialization schema for scenario files (documented in the README).
pub mod schema {
    use super::*;

    /// On-disk scenario layout. `v_axis` is derived as `normal x u_axis`.
    #[derive(Debug, Serialize, Deserialize)]
    pub struct ScenarioFile {
        pub wavelength: f64,
        pub aperture: ApertureFile,
        pub users: Vec<[f64; 3]>,
        pub zeta: f64,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ApertureFile {
        pub center: [f64; 3],
        pub normal: [f64; 3],
        pub u_axis: [f64; 3],
        pub side_u: f64,
        pub side_v: f64,
    }

    fn to_arr(v: Vec3) -> [f64; 3] {
        [v.x, v.y, v.z]
    }

    fn from_arr(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_file(scene: &Scenario) -> ScenarioFile {
        ScenarioFile {
            wavelength: scene.constants.wavelength,
            aperture: ApertureFile {
                center: to_arr(scene.aperture.center),
                normal: to_arr(scene.aperture.normal),
                u_axis: to_arr(scene.aperture.u_axis),
                side_u: scene.aperture.side_u,
                side_v: scene.aperture.side_v,
            },
            users: scene.users.iter().map(|&u| to_arr(u)).collect(),
            zeta: scene.zeta,
        }
    }

    pub fn from_file(f: &ScenarioFile) -> Result<Scenario> {
        let normal = from_arr(f.aperture.normal);
        let u_axis = from_arr(f.aperture.u_axis);
        let scene = Scenario {
            aperture: Aperture {
                center: from_arr(f.aperture.center),
                normal,
                u_axis,
                v_axis: normal.cross(u_axis),
                side_u: f.aperture.side_u,
                side_v: f.aperture.side_v,
            },
            constants: PhysicalConstants::from_wavelength(f.wavelength),
            users: f.users.iter().map(|&u| from_arr(u)).collect(),
            zeta: f.zeta,
            sigma: 1.0,
            p_max: 1.0,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn write_json(scene: &Scenario) -> Result<String> {
        Ok(serde_json::to_string_pretty(&to_file(scene))?)
    }

    pub fn read_json(text: &str) -> Result<Scenario> {
        let f: ScenarioFile = serde_json::from_str(text)?;
        from_file(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broadside_scene(dist: f64) -> Scenario {
        Scenario::with_users(vec![Vec3::new(0.0, 0.0, dist)])
    }

    #[test]
    fn wavenumber_matches_wavelength() {
        let c = PhysicalConstants::from_wavelength(0.0107);
        // 2 pi / 0.0107 = 587.2 rad/m to four significant figures
        assert!((c.wavenumber - 587.2137).abs() < 0.05);
        assert!((c.wavenumber * c.wavelength - 2.0 * PI).abs() < 1e-12);
        assert!((c.impedance - 120.0 * PI).abs() < 1e-12);
        assert!((c.user_aperture - 0.0107f64.powi(2) / (4.0 * PI)).abs() < 1e-18);
    }

    #[test]
    fn magnitude_decays_with_distance() {
        // Fixed direction, growing distance: |H| -> 0 like 1/d in the far
        // field (every factor decays or is bounded).
        let mut mags = Vec::new();
        for d in [10.0, 100.0, 1000.0, 10000.0] {
            let scene = broadside_scene(d);
            let h = channel_response(&scene, 0, Vec3::new(0.0, 0.0, 0.0)).unwrap();
            mags.push(h.norm());
        }
        for w in mags.windows(2) {
            assert!(w[1] < w[0]);
        }
        let ratio = mags[0] / mags[3];
        assert!((ratio - 1000.0).abs() < 50.0, "decay ratio {ratio}");
    }

    #[test]
    fn broadside_magnitude_matches_dominant_term() {
        // High-precision evaluation vs the dominant-term magnitude
        // k0 eta / (4 pi d) at k0 d >> 1: within 1% for k0 d > 50.
        let scene = broadside_scene(30.0);
        let k0 = scene.constants.wavenumber;
        let d = 30.0;
        assert!(k0 * d > 50.0);
        let h = channel_response(&scene, 0, Vec3::new(0.0, 0.0, 0.0)).unwrap();
        let dominant = k0 * scene.constants.impedance / (4.0 * PI * d);
        // term-by-term: directivity = 1, |near-field| = sqrt((1-1/(kd)^2)^2 + 1/(kd)^2)
        let kd = k0 * d;
        let nf = Complex64::new(1.0 - 1.0 / (kd * kd), 1.0 / kd).norm();
        assert!((h.norm() - dominant * nf).abs() < 1e-12 * dominant);
        assert!((h.norm() / dominant - 1.0).abs() < 0.01);
    }

    #[test]
    fn normalized_ratio_is_global_constant() {
        let scene = Scenario::with_users(vec![
            Vec3::new(0.3, -0.7, 30.0),
            Vec3::new(-0.5, 0.2, 31.0),
        ]);
        let expect = 2.0 * PI.sqrt() / (scene.constants.wavenumber * scene.constants.impedance);
        for k in 0..2 {
            for &(u, v) in &[(0.1, 0.2), (-0.24, 0.03), (0.0, 0.0)] {
                let r = scene.aperture.point_at(u, v);
                let h = channel_response(&scene, k, r).unwrap();
                let hn = channel_response_normalized(&scene, k, r).unwrap();
                let ratio = hn / h;
                assert!((ratio.re - expect).abs() < 1e-15);
                assert!(ratio.im.abs() < 1e-18);
            }
        }
    }

    #[test]
    fn continuity_in_r() {
        let scene = Scenario::with_users(vec![Vec3::new(0.4, 0.9, 30.0)]);
        let delta = 1e-6;
        for &(u, v) in &[(0.0, 0.0), (0.2, -0.1), (-0.25, 0.25)] {
            let r = scene.aperture.point_at(u, v);
            let h = channel_response(&scene, 0, r).unwrap();
            let h2 = channel_response(&scene, 0, r.add(Vec3::new(delta, 0.0, 0.0))).unwrap();
            assert!((h2 - h).norm() <= 1e-3 * h.norm());
        }
    }

    #[test]
    fn reciprocal_distance_decay() {
        // Collinear points at d and 2d in the far field: |H| ratio near 2,
        // modulo the directivity correction (unity at broadside).
        let d = 50.0;
        let scene1 = broadside_scene(d);
        let scene2 = broadside_scene(2.0 * d);
        assert!(scene1.constants.wavenumber * d > 100.0);
        let h1 = channel_response(&scene1, 0, Vec3::new(0.0, 0.0, 0.0)).unwrap();
        let h2 = channel_response(&scene2, 0, Vec3::new(0.0, 0.0, 0.0)).unwrap();
        let ratio = h1.norm() / h2.norm();
        assert!(ratio > 1.9 && ratio < 2.1);
    }

    #[test]
    fn behind_aperture_is_zero() {
        let scene = Scenario::with_users(vec![Vec3::new(0.0, 0.0, -30.0)]);
        let h = channel_response(&scene, 0, Vec3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(h, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn user_on_aperture_rejected() {
        let scene = Scenario::with_users(vec![Vec3::new(0.0, 0.0, 0.0)]);
        assert!(scene.validate().is_err());
        assert!(channel_response(&scene, 0, Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn raw_and_normalized_se_agree_through_zeta() {
        // SE computed from (H, V, sigma_0, P_max) equals SE computed from
        // (H', V', 1, 1) with the prefactor zeta, to relative 1e-10.
        use crate::beamfield::{gain_matrix, power_vector, project_power, CoeffMatrix};
        use crate::quadrature::{channel_gram, gauss_legendre_grid, integrate, gram_from_samples};
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let mut scene = Scenario::with_users(vec![
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 30.0),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 30.0),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 30.0),
            ]);
            // arbitrary raw units
            let sigma0: f64 = rng.random_range(0.5e-4..2e-4);
            let p_max_raw: f64 = rng.random_range(0.5..4.0);
            let a_user = scene.constants.user_aperture;
            let k0 = scene.constants.wavenumber;
            let eta = scene.constants.impedance;
            scene.zeta = (a_user / (sigma0 * sigma0)) * (k0 * k0 * eta * eta)
                / (4.0 * PI)
                * p_max_raw;

            let grid = gauss_legendre_grid(&scene.aperture, 24, 24).unwrap();
            let q_norm = channel_gram(&scene, &grid).unwrap();
            // random normalized-unit beams on the unit power boundary
            let mut bm = crate::linalg::CMat::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    bm[(i, j)] = num_complex::Complex64::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                }
            }
            let b = CoeffMatrix { b: bm };
            let p = power_vector(&q_norm, &b).unwrap();
            let b = project_power(&b, &p, 1.0).unwrap();
            let se_norm = crate::beamfield::spectral_efficiency(
                &gain_matrix(&q_norm, &b).unwrap(),
                scene.zeta,
            );

            // raw route: raw channels H, raw beams sqrt(P_max) V' where
            // V' = sum b conj(H'); raw gains integral of H_k V_j
            let c = scene.channel_norm_factor();
            let mut h_raw = crate::linalg::CMat::zeros(3, grid.len());
            for k in 0..3 {
                for (m, &node) in grid.nodes.iter().enumerate() {
                    h_raw[(k, m)] = channel_response(&scene, k, node).unwrap();
                }
            }
            let mut se_raw = 0.0;
            for k in 0..3 {
                let mut sig = 0.0;
                let mut intf = sigma0 * sigma0;
                for j in 0..3 {
                    let g_raw = integrate(&grid, |r| {
                        let h = channel_response(&scene, k, r).unwrap();
                        let vj = (0..3)
                            .map(|i| {
                                b.b[(i, j)]
                                    * (channel_response_normalized(&scene, i, r).unwrap()).conj()
                            })
                            .sum::<num_complex::Complex64>();
                        h * vj * p_max_raw.sqrt()
                    })
                    .unwrap();
                    let term = a_user * g_raw.norm_sqr();
                    if j == k {
                        sig = term;
                    } else {
                        intf += term;
                    }
                }
                se_raw += (1.0 + sig / intf).log2();
            }
            assert!(
                (se_raw - se_norm).abs() <= 1e-10 * se_norm.abs(),
                "trial {trial}: raw {se_raw} vs normalized {se_norm}"
            );
            let _ = (c, gram_from_samples(&h_raw, &grid.weights, String::new()));
        }
    }

    #[test]
    fn scenario_roundtrips_through_json() {
        let scene = Scenario::with_users(vec![
            Vec3::new(0.3, -0.7, 30.0),
            Vec3::new(-0.5, 0.2, 30.0),
        ]);
        let text = schema::write_json(&scene).unwrap();
        let back = schema::read_json(&text).unwrap();
        assert_eq!(back.users.len(), 2);
        assert!((back.constants.wavelength - scene.constants.wavelength).abs() < 1e-15);
        assert!((back.zeta - scene.zeta).abs() < 1e-9);
        assert!((back.aperture.v_axis.y - 1.0).abs() < 1e-15);
    }
}
