//! Beamformers as coefficient matrices over the conjugate channel subspace.
//!
//! Column k of a [`CoeffMatrix`] holds the linear-combination vector of
//! user k's beam: `V_k(r) = sum_j b_jk conj(H'_j(r))`. With the channel
//! Gram matrix `Q` (`q_ki = integral of H'_k conj(H'_i)`), every power and
//! cross gain reduces to finite algebra:
//!
//! - gains:  `G = Q B`, `g_kj = integral of H'_k V_j`
//! - powers: `p_k = Re(b_k^H Q b_k)`
//!
//! One orientation convention is used everywhere; the quadrature oracles in
//! the tests pin it down.

use num_complex::Complex64;

use crate::error::{CapaError, Result};
use crate::linalg::{solve_psd_pinv, CMat};
use crate::physics::{channel_response_normalized, Scenario, Vec3};
use crate::quadrature::{GramMatrix, QuadratureGrid};

/// K x K complex coefficient matrix; column k represents user k's beam.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    pub b: CMat,
}

impl CoeffMatrix {
    pub fn zeros(k: usize) -> Self {
        CoeffMatrix { b: CMat::zeros(k, k) }
    }

    pub fn identity(k: usize) -> Self {
        CoeffMatrix { b: CMat::identity(k) }
    }

    pub fn dim(&self) -> usize {
        self.b.rows
    }

    pub fn is_finite(&self) -> bool {
        self.b.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Structured-text export: complex entries as `[re, im]`, row-major,
    /// with a provenance hash of the scenario it was computed for.
    pub fn to_json(&self, scenario_hash: u64) -> String {
        let entries: Vec<[f64; 2]> = self.b.data.iter().map(|z| [z.re, z.im]).collect();
        serde_json::json!({
            "k": self.dim(),
            "scenario_hash": format!("{scenario_hash:016x}"),
            "entries": entries,
        })
        .to_string()
    }
}

/// K x K gain matrix; row k is the observing user, column j the data stream.
#[derive(Debug, Clone)]
pub struct GainMatrix {
    pub g: CMat,
}

impl GainMatrix {
    pub fn dim(&self) -> usize {
        self.g.rows
    }
}

/// Synthesized beam value `V_k(r) = sum_j b_jk conj(H'_j(r))`.
pub fn synthesize_beam(scene: &Scenario, b: &CoeffMatrix, k: usize, r: Vec3) -> Result<Complex64> {
    if k >= b.dim() {
        return Err(CapaError::Argument(format!("stream index {k} out of range")));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..b.dim() {
        let h = channel_response_normalized(scene, j, r)?;
        acc += b.b[(j, k)] * h.conj();
    }
    Ok(acc)
}

/// Per-user transmit powers `p_k = Re(b_k^H Q b_k)`.
pub fn power_vector(q: &GramMatrix, b: &CoeffMatrix) -> Result<Vec<f64>> {
    let k = q.dim();
    if b.dim() != k {
        return Err(CapaError::DimensionMismatch(format!(
            "gram dim {k} vs coeff dim {}",
            b.dim()
        )));
    }
    let qb = q.q.matmul(&b.b);
    let mut p = vec![0.0; k];
    for col in 0..k {
        let mut acc = 0.0;
        for row in 0..k {
            acc += (b.b[(row, col)].conj() * qb[(row, col)]).re;
        }
        p[col] = acc;
    }
    Ok(p)
}

/// Gain matrix `G = Q B`.
pub fn gain_matrix(q: &GramMatrix, b: &CoeffMatrix) -> Result<GainMatrix> {
    if b.dim() != q.dim() {
        return Err(CapaError::DimensionMismatch(format!(
            "gram dim {} vs coeff dim {}",
            q.dim(),
            b.dim()
        )));
    }
    Ok(GainMatrix { g: q.q.matmul(&b.b) })
}

/// Per-user SINR in normalized units:
/// `gamma_k = zeta |g_kk|^2 / (sum_{j != k} zeta |g_kj|^2 + 1)`.
pub fn sinr_vector(g: &GainMatrix, zeta: f64) -> Vec<f64> {
    let k = g.dim();
    let mut out = vec![0.0; k];
    for user in 0..k {
        let signal = zeta * g.g[(user, user)].norm_sqr();
        let mut interference = 0.0;
        for j in 0..k {
            if j != user {
                interference += zeta * g.g[(user, j)].norm_sqr();
            }
        }
        out[user] = signal / (interference + 1.0);
    }
    out
}

/// Spectral efficiency `sum_k log2(1 + gamma_k)`, bits/s/Hz.
pub fn spectral_efficiency(g: &GainMatrix, zeta: f64) -> f64 {
    sinr_vector(g, zeta).iter().map(|&x| (1.0 + x).log2()).sum()
}

/// Scale a coefficient matrix onto the total-power boundary:
/// `B_bar = B sqrt(p_max / sum_j p_j)`.
pub fn project_power(b: &CoeffMatrix, p: &[f64], p_max: f64) -> Result<CoeffMatrix> {
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(CapaError::DegenerateBeam(format!(
            "total power {total:.3e} is not positive"
        )));
    }
    let scale = (p_max / total).sqrt();
    Ok(CoeffMatrix {
        b: b.b.scale(Complex64::new(scale, 0.0)),
    })
}

/// Spectral efficiency of a coefficient matrix after exact projection onto
/// the total-power boundary. This is the uniform scoring rule for every
/// method: solvers that already satisfy the constraint are unchanged
/// (their projection scale is one), while solutions carrying discretization
/// power error are normalized before being measured.
pub fn boundary_se(q: &GramMatrix, b: &CoeffMatrix, zeta: f64, p_max: f64) -> Result<f64> {
    let p = power_vector(q, b)?;
    let projected = project_power(b, &p, p_max)?;
    Ok(spectral_efficiency(&gain_matrix(q, &projected)?, zeta))
}

/// Result of projecting grid-sampled beam fields onto the conjugate
/// channel subspace and rescaling to the power boundary.
#[derive(Debug, Clone)]
pub struct SubspaceProjection {
    pub coeffs: CoeffMatrix,
    pub se_before: f64,
    pub se_after: f64,
    pub scale_c: f64,
    /// Total squared norm of the removed out-of-subspace residual.
    pub residual_power: f64,
    /// Set when the channel Gram was rank-deficient and a pseudo-inverse
    /// projection was used.
    pub rank_deficient: bool,
}

impl SubspaceProjection {
    pub fn se_gain(&self) -> f64 {
        self.se_after - self.se_before
    }
}

/// Project arbitrary grid-sampled beam fields (one row of samples per
/// stream, aligned with `grid.nodes`) onto the conjugate channel subspace,
/// rescale the result to the power boundary, and report the SE before and
/// after. The input must be feasible: total power at most `p_max`.
///
/// The projection solves the grid-weighted least squares
/// `min_c sum_m w_m |V_k(r_m) - sum_j c_jk conj(H'_j(r_m))|^2`,
/// whose normal equations use the conjugate of the channel Gram.
pub fn subspace_improvement(
    scene: &Scenario,
    grid: &QuadratureGrid,
    fields: &[Vec<Complex64>],
) -> Result<SubspaceProjection> {
    let k_users = scene.num_users();
    if fields.len() != k_users {
        return Err(CapaError::DimensionMismatch(format!(
            "{} fields for {} users",
            fields.len(),
            k_users
        )));
    }
    for (idx, f) in fields.iter().enumerate() {
        if f.len() != grid.len() {
            return Err(CapaError::DimensionMismatch(format!(
                "field {idx} has {} samples, grid has {}",
                f.len(),
                grid.len()
            )));
        }
    }

    let h = crate::quadrature::sample_channels(scene, grid)?;
    let gram = crate::quadrature::gram_from_samples(&h, &grid.weights, grid.tag_string());

    // SE of the raw fields by direct quadrature: g_kj = integral H'_k V_j.
    let mut g_before = CMat::zeros(k_users, k_users);
    for k in 0..k_users {
        for j in 0..k_users {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..grid.len() {
                acc += h[(k, m)] * fields[j][m] * grid.weights[m];
            }
            g_before[(k, j)] = acc;
        }
    }
    let se_before = spectral_efficiency(&GainMatrix { g: g_before }, scene.zeta);

    // Least-squares projection of each field onto span{conj(H'_j)}.
    // With basis phi_j = conj(H'_j), the normal equations read
    // sum_j <phi_j, phi_i> c_j = <V_k, phi_i>, and <phi_j, phi_i> = q_ij,
    // so the system matrix is Q itself and the rhs is integral of V_k H'_i.
    let basis_gram = gram.q.clone();
    let mut coeffs = CMat::zeros(k_users, k_users);
    let mut rank_deficient = false;
    let mut input_power_total = 0.0;
    for k in 0..k_users {
        let mut rhs = vec![Complex64::new(0.0, 0.0); k_users];
        for j in 0..k_users {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..grid.len() {
                acc += fields[k][m] * h[(j, m)] * grid.weights[m];
            }
            rhs[j] = acc;
        }
        let (c, truncated) = solve_psd_pinv(&basis_gram, &rhs, 1e-12);
        rank_deficient |= truncated;
        coeffs.set_column(k, &c);

        for m in 0..grid.len() {
            input_power_total += fields[k][m].norm_sqr() * grid.weights[m];
        }
    }

    // Projected power via the Gram route (same algebra as power_vector).
    let coeff_matrix = CoeffMatrix { b: coeffs };
    let p_proj = power_vector(&gram, &coeff_matrix)?;
    let projected_power_total: f64 = p_proj.iter().sum();

    if !(projected_power_total > 0.0) {
        return Err(CapaError::DegenerateBeam(
            "projected fields carry no power".into(),
        ));
    }
    if input_power_total > scene.p_max * (1.0 + 1e-6) {
        return Err(CapaError::Argument(format!(
            "input fields are infeasible: total power {input_power_total:.6e} > p_max"
        )));
    }

    let scale_c = (scene.p_max / projected_power_total).sqrt();
    let rescaled = CoeffMatrix {
        b: coeff_matrix.b.scale(Complex64::new(scale_c, 0.0)),
    };
    let se_after = spectral_efficiency(&gain_matrix(&gram, &rescaled)?, scene.zeta);

    Ok(SubspaceProjection {
        coeffs: rescaled,
        se_before,
        se_after,
        scale_c,
        residual_power: (input_power_total - projected_power_total).max(0.0),
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{channel_gram, gauss_legendre_grid, riemann_grid};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene_k(k: usize, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = (0..k)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    30.0,
                )
            })
            .collect();
        Scenario::with_users(users)
    }

    fn random_coeffs(k: usize, rng: &mut ChaCha8Rng) -> CoeffMatrix {
        let mut b = CMat::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                b[(i, j)] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        CoeffMatrix { b }
    }

    #[test]
    fn identity_coeffs_synthesize_conjugate_channel() {
        let scene = scene_k(1, 1);
        let b = CoeffMatrix::identity(1);
        let r = scene.aperture.point_at(0.1, -0.2);
        let v = synthesize_beam(&scene, &b, 0, r).unwrap();
        let h = channel_response_normalized(&scene, 0, r).unwrap();
        assert!((v - h.conj()).norm() < 1e-15);
    }

    #[test]
    fn zero_coeffs_synthesize_zero() {
        let scene = scene_k(3, 2);
        let b = CoeffMatrix::zeros(3);
        let r = scene.aperture.point_at(0.0, 0.1);
        for k in 0..3 {
            assert_eq!(synthesize_beam(&scene, &b, k, r).unwrap(), Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn two_term_combination_matches_direct_sum() {
        let scene = scene_k(2, 3);
        let mut b = CoeffMatrix::zeros(2);
        b.b[(0, 0)] = Complex64::new(1.0, 0.0);
        b.b[(1, 0)] = Complex64::new(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let r = scene
                .aperture
                .point_at(rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
            let v = synthesize_beam(&scene, &b, 0, r).unwrap();
            let h1 = channel_response_normalized(&scene, 0, r).unwrap();
            let h2 = channel_response_normalized(&scene, 1, r).unwrap();
            let direct = h1.conj() + Complex64::new(0.0, 1.0) * h2.conj();
            assert!((v - direct).norm() < 1e-15);
        }
    }

    #[test]
    fn power_vector_basic_identities() {
        let scene = scene_k(3, 5);
        let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        // zero coefficients -> zero power
        let p = power_vector(&q, &CoeffMatrix::zeros(3)).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
        // unit coordinate column -> diagonal Gram entry
        let p = power_vector(&q, &CoeffMatrix::identity(3)).unwrap();
        for k in 0..3 {
            assert!((p[k] - q.q[(k, k)].re).abs() < 1e-15 * q.q[(k, k)].re.abs());
        }
    }

    #[test]
    fn power_vector_matches_quadrature_oracle() {
        let scene = scene_k(4, 6);
        let grid = gauss_legendre_grid(&scene.aperture, 32, 32).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_coeffs(4, &mut rng);
        let p = power_vector(&q, &b).unwrap();
        for k in 0..4 {
            let oracle = crate::quadrature::integrate(&grid, |r| {
                let v = synthesize_beam(&scene, &b, k, r).unwrap();
                v * v.conj()
            })
            .unwrap()
            .re;
            assert!(
                (p[k] - oracle).abs() <= 1e-6 * oracle.abs(),
                "power mismatch: {} vs {}",
                p[k],
                oracle
            );
        }
    }

    #[test]
    fn gain_matrix_matches_quadrature_oracle() {
        let scene = scene_k(4, 8);
        let grid = gauss_legendre_grid(&scene.aperture, 32, 32).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_coeffs(4, &mut rng);
        let g = gain_matrix(&q, &b).unwrap();
        let scale = g.g.max_abs();
        for k in 0..4 {
            for j in 0..4 {
                let oracle = crate::quadrature::integrate(&grid, |r| {
                    let h = channel_response_normalized(&scene, k, r).unwrap();
                    let v = synthesize_beam(&scene, &b, j, r).unwrap();
                    h * v
                })
                .unwrap();
                assert!(
                    (g.g[(k, j)] - oracle).norm() <= 1e-6 * scale,
                    "gain mismatch at ({k},{j})"
                );
            }
        }
    }

    #[test]
    fn gain_identities() {
        let scene = scene_k(1, 10);
        let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let g = gain_matrix(&q, &CoeffMatrix::identity(1)).unwrap();
        assert!((g.g[(0, 0)] - q.q[(0, 0)]).norm() < 1e-15 * q.q[(0, 0)].re);
        let g0 = gain_matrix(&q, &CoeffMatrix::zeros(1)).unwrap();
        assert_eq!(g0.g[(0, 0)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn sinr_closed_forms() {
        // single user: gamma = zeta |g11|^2
        let g = GainMatrix {
            g: CMat::from_rows(&[vec![Complex64::new(0.5, 0.5)]]),
        };
        let gamma = sinr_vector(&g, 2.0);
        assert!((gamma[0] - 2.0 * 0.5f64) < 1e-15); // |0.5+0.5i|^2 = 0.5
        // all-ones 2x2 at zeta = 1: gamma = 0.5 each
        let ones = GainMatrix {
            g: CMat::from_rows(&[
                vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)],
                vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)],
            ]),
        };
        let gamma = sinr_vector(&ones, 1.0);
        assert!((gamma[0] - 0.5).abs() < 1e-15);
        assert!((gamma[1] - 0.5).abs() < 1e-15);
        // diagonal gains: no interference
        let diag = GainMatrix {
            g: CMat::from_rows(&[
                vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)],
                vec![Complex64::new(0.0, 0.0), Complex64::new(3.0, 0.0)],
            ]),
        };
        let gamma = sinr_vector(&diag, 1.5);
        assert!((gamma[0] - 1.5 * 4.0).abs() < 1e-12);
        assert!((gamma[1] - 1.5 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn se_closed_forms() {
        let zero = GainMatrix { g: CMat::zeros(2, 2) };
        assert_eq!(spectral_efficiency(&zero, 1.0), 0.0);
        // K=1 with zeta |g|^2 = 1 -> SE = 1
        let g = GainMatrix {
            g: CMat::from_rows(&[vec![Complex64::new(1.0, 0.0)]]),
        };
        assert!((spectral_efficiency(&g, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn project_power_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_coeffs(3, &mut rng);
        // total already p_max -> unit scale
        let p = vec![0.25, 0.5, 0.25];
        let out = project_power(&b, &p, 1.0).unwrap();
        assert!(out.b.sub(&b.b).max_abs() < 1e-15);
        // total 4 p_max -> halved entries
        let p = vec![2.0, 1.0, 1.0];
        let out = project_power(&b, &p, 1.0).unwrap();
        assert!(out.b.sub(&b.b.scale(Complex64::new(0.5, 0.0))).max_abs() < 1e-15);
        // zero powers -> degenerate-beam error
        assert!(matches!(
            project_power(&b, &[0.0, 0.0, 0.0], 1.0),
            Err(CapaError::DegenerateBeam(_))
        ));
    }

    #[test]
    fn project_power_lands_on_boundary() {
        let scene = scene_k(4, 12);
        let grid = gauss_legendre_grid(&scene.aperture, 24, 24).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let b = random_coeffs(4, &mut rng);
            let p = power_vector(&q, &b).unwrap();
            let projected = project_power(&b, &p, scene.p_max).unwrap();
            let total: f64 = power_vector(&q, &projected).unwrap().iter().sum();
            assert!((total - scene.p_max).abs() <= 1e-8 * scene.p_max);
        }
    }

    #[test]
    fn joint_permutation_invariance_of_se() {
        // SE(Pi^T S, Pi^T B Pi) = SE(S, B): term reordering only.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..20 {
            let k = 4;
            let scene = scene_k(k, 100 + trial);
            let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
            let q = channel_gram(&scene, &grid).unwrap();
            let b = random_coeffs(k, &mut rng);
            let se = spectral_efficiency(&gain_matrix(&q, &b).unwrap(), scene.zeta);

            // random permutation
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            // permuted scene: users reordered; permuted coeffs Pi^T B Pi
            let users_p: Vec<Vec3> = perm.iter().map(|&i| scene.users[i]).collect();
            let mut scene_p = scene.clone();
            scene_p.users = users_p;
            let qp = channel_gram(&scene_p, &grid).unwrap();
            let mut bp = CoeffMatrix::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    bp.b[(i, j)] = b.b[(perm[i], perm[j])];
                }
            }
            let se_p = spectral_efficiency(&gain_matrix(&qp, &bp).unwrap(), scene.zeta);
            assert!(
                (se - se_p).abs() <= 1e-9 * se.abs().max(1.0),
                "SE not permutation invariant: {se} vs {se_p}"
            );
        }
    }

    #[test]
    fn independent_permutation_of_powers() {
        // power(Pi1^T S scene, Pi1^T B Pi2) = Pi2^T power(S scene, B)
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..20 {
            let k = 4;
            let scene = scene_k(k, 200 + trial);
            let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
            let q = channel_gram(&scene, &grid).unwrap();
            let b = random_coeffs(k, &mut rng);
            let p = power_vector(&q, &b).unwrap();

            let mut perm1: Vec<usize> = (0..k).collect();
            let mut perm2: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm1.swap(i, rng.random_range(0..=i));
                perm2.swap(i, rng.random_range(0..=i));
            }
            let mut scene_p = scene.clone();
            scene_p.users = perm1.iter().map(|&i| scene.users[i]).collect();
            let qp = channel_gram(&scene_p, &grid).unwrap();
            let mut bp = CoeffMatrix::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    bp.b[(i, j)] = b.b[(perm1[i], perm2[j])];
                }
            }
            let pp = power_vector(&qp, &bp).unwrap();
            for j in 0..k {
                assert!(
                    (pp[j] - p[perm2[j]]).abs() <= 1e-10 * p[perm2[j]].abs().max(1e-30),
                    "power not independently equivariant"
                );
            }
        }
    }

    #[test]
    fn subspace_projection_of_in_subspace_input_is_identity() {
        let scene = scene_k(3, 16);
        let grid = gauss_legendre_grid(&scene.aperture, 24, 24).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = random_coeffs(3, &mut rng);
        let p = power_vector(&q, &b).unwrap();
        let b = project_power(&b, &p, scene.p_max).unwrap();
        // sample the in-subspace fields on the grid
        let fields: Vec<Vec<Complex64>> = (0..3)
            .map(|k| {
                grid.nodes
                    .iter()
                    .map(|&r| synthesize_beam(&scene, &b, k, r).unwrap())
                    .collect()
            })
            .collect();
        let proj = subspace_improvement(&scene, &grid, &fields).unwrap();
        assert!((proj.scale_c - 1.0).abs() < 1e-7, "C = {}", proj.scale_c);
        assert!(proj.se_gain().abs() < 1e-9, "gain = {}", proj.se_gain());
        assert!(!proj.rank_deficient);
    }

    #[test]
    fn subspace_projection_flags_duplicated_users() {
        let pos = Vec3::new(0.2, -0.3, 30.0);
        let scene = Scenario::with_users(vec![pos, pos]);
        let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        // any feasible field: the first channel conjugate at half power
        let h = crate::quadrature::sample_channels(&scene, &grid).unwrap();
        let q00: f64 = (0..grid.len())
            .map(|m| h[(0, m)].norm_sqr() * grid.weights[m])
            .sum();
        let scale = (0.5 * scene.p_max / q00).sqrt();
        let fields: Vec<Vec<Complex64>> = (0..2)
            .map(|_| {
                (0..grid.len())
                    .map(|m| h[(0, m)].conj() * scale)
                    .collect()
            })
            .collect();
        let out = subspace_improvement(&scene, &grid, &fields).unwrap();
        assert!(out.rank_deficient, "duplicate users must flag the pseudo-inverse path");
    }

    #[test]
    fn subspace_projection_improves_out_of_subspace_input() {
        let scene = scene_k(3, 18);
        let grid = gauss_legendre_grid(&scene.aperture, 24, 24).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let b = random_coeffs(3, &mut rng);
        let p = power_vector(&q, &b).unwrap();
        let b = project_power(&b, &p, scene.p_max).unwrap();
        // add an out-of-subspace ripple, then rescale back inside the
        // feasible set
        let mut fields: Vec<Vec<Complex64>> = (0..3)
            .map(|k| {
                grid.nodes
                    .iter()
                    .map(|&r| synthesize_beam(&scene, &b, k, r).unwrap())
                    .collect()
            })
            .collect();
        let beam_scale = fields[0].iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (m, &node) in grid.nodes.iter().enumerate() {
            let ripple = (200.0 * node.x).sin() * (170.0 * node.y).cos();
            fields[0][m] += Complex64::new(0.3 * beam_scale * ripple, 0.0);
        }
        // rescale everything to total power = p_max
        let mut total = 0.0;
        for f in &fields {
            for (m, z) in f.iter().enumerate() {
                total += z.norm_sqr() * grid.weights[m];
            }
        }
        let s = (scene.p_max / total).sqrt();
        for f in fields.iter_mut() {
            for z in f.iter_mut() {
                *z *= s;
            }
        }
        let proj = subspace_improvement(&scene, &grid, &fields).unwrap();
        assert!(proj.scale_c > 1.0);
        assert!(proj.residual_power > 0.0);
        assert!(proj.se_gain() > 0.0, "gain = {}", proj.se_gain());

        // oracle cross-check: SE difference recomputed by quadrature on the
        // projected coefficient fields
        let after_fields: Vec<Vec<Complex64>> = (0..3)
            .map(|k| {
                grid.nodes
                    .iter()
                    .map(|&r| synthesize_beam(&scene, &proj.coeffs, k, r).unwrap())
                    .collect()
            })
            .collect();
        let mut g_after = CMat::zeros(3, 3);
        let h = crate::quadrature::sample_channels(&scene, &grid).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..grid.len() {
                    acc += h[(k, m)] * after_fields[j][m] * grid.weights[m];
                }
                g_after[(k, j)] = acc;
            }
        }
        let se_after_oracle = spectral_efficiency(&GainMatrix { g: g_after }, scene.zeta);
        assert!(
            (proj.se_after - se_after_oracle).abs() <= 1e-6 * se_after_oracle.abs(),
            "subspace SE disagrees with quadrature oracle"
        );
    }
}
