//! Classical beamforming optimizers used as references:
//!
//! - match filtering with optimized per-user powers,
//! - WMMSE on the aperture discretized into M patches, lifted back to
//!   coefficient space,
//! - WMMSE run directly in the K-dimensional Gram factor space,
//! - the closed-form structure evaluator `(sigma^2 I + Lambda Q)^{-1} P^{1/2}`.
//!
//! Both WMMSE variants are block-coordinate ascent on the weighted-MSE
//! reformulation of sum-rate maximization; their objective traces are
//! monotone up to numerical slack and the power constraint is enforced by
//! bisection on the dual variable at every precoder update.

use num_complex::Complex64;

use crate::beamfield::CoeffMatrix;
use crate::error::{CapaError, Result};
use crate::linalg::{cdot, cholesky_jittered, solve_lower, solve_lower_herm, solve_lu, vec_norm_sqr, CMat};
use crate::physics::Scenario;
use crate::quadrature::{riemann_grid, sample_channels, GramMatrix};

/// Solver scratch state exposed for inspection and run records.
#[derive(Debug, Clone)]
pub struct WmmseState {
    /// Per-user precoder columns (dimension M for the discretized solver,
    /// K for the Gram-space solver).
    pub v: CMat,
    /// Per-user receive scalars.
    pub u: Vec<Complex64>,
    /// Per-user positive MSE weights.
    pub w: Vec<f64>,
    /// Dual variable of the total-power constraint.
    pub mu: f64,
    /// Objective (sum rate, bits/s/Hz) after each iteration.
    pub objective_trace: Vec<f64>,
    /// Set when a ridge-regularized solve had to be used.
    pub ridge_used: bool,
}

/// Diagonal parameters of the closed-form structure evaluator.
#[derive(Debug, Clone)]
pub struct StructureParams {
    /// Nonnegative uplink-power-like diagonal.
    pub lambda: Vec<f64>,
    /// Nonnegative downlink-power-like diagonal.
    pub p_dl: Vec<f64>,
}

/// Run record emitted by the CLI for each solver invocation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolverRunRecord {
    pub scene_hash: String,
    pub solver_tag: String,
    pub m_patches: usize,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    pub final_se: f64,
    pub wall_time_s: f64,
}

/// Match-filter coefficients: diagonal B with `b_kk = sqrt(p_k / q_kk)`,
/// i.e. beam directions `conj(H'_k) / sqrt(q_kk)` carrying power `p_k`.
pub fn mf_coefficients(q: &GramMatrix, powers: &[f64]) -> Result<CoeffMatrix> {
    let k = q.dim();
    if powers.len() != k {
        return Err(CapaError::DimensionMismatch(format!(
            "{} powers for {} users",
            powers.len(),
            k
        )));
    }
    let mut b = CMat::zeros(k, k);
    for i in 0..k {
        let qkk = q.q[(i, i)].re;
        if !(qkk > 0.0) {
            return Err(CapaError::Domain(format!("user {i} has zero-norm channel")));
        }
        if powers[i] < 0.0 {
            return Err(CapaError::Argument(format!("negative power for user {i}")));
        }
        b[(i, i)] = Complex64::new((powers[i] / qkk).sqrt(), 0.0);
    }
    Ok(CoeffMatrix { b })
}

/// Scalar-channel sum rate for MF directions with powers `p`:
/// effective amplitude from stream j at user k is `|q_kj| / sqrt(q_jj)`.
fn mf_power_objective(alpha: &CMat, zeta: f64, p: &[f64]) -> f64 {
    let k = alpha.rows;
    let mut se = 0.0;
    for user in 0..k {
        let sig = zeta * p[user] * alpha[(user, user)].norm_sqr();
        let mut intf = 1.0;
        for j in 0..k {
            if j != user {
                intf += zeta * p[j] * alpha[(user, j)].norm_sqr();
            }
        }
        se += (1.0 + sig / intf).log2();
    }
    se
}

/// Optimize the per-user powers of match filtering with a scalar WMMSE
/// cycle on the effective interference channel `c_kj = q_kj / sqrt(q_jj)`.
/// Returns powers summing to `p_max`.
pub fn wmmse_power_allocation(q: &GramMatrix, zeta: f64, p_max: f64, iters: usize) -> Result<Vec<f64>> {
    let k = q.dim();
    if iters == 0 {
        return Err(CapaError::Argument("power allocation needs iters >= 1".into()));
    }
    // alpha_kj = effective amplitude from stream j to user k per unit
    // sqrt(power); x_j = sqrt(p_j) are real nonnegative scalar precoders.
    let mut alpha = CMat::zeros(k, k);
    for row in 0..k {
        for col in 0..k {
            let qjj = q.q[(col, col)].re;
            if !(qjj > 0.0) {
                return Err(CapaError::Domain(format!("user {col} has zero-norm channel")));
            }
            alpha[(row, col)] = q.q[(row, col)] / qjj.sqrt();
        }
    }
    let sz = zeta.sqrt();
    let a = |row: usize, col: usize| sz * alpha[(row, col)].norm();

    let mut x = vec![(p_max / k as f64).sqrt(); k];
    let mut last_obj = f64::NEG_INFINITY;
    for _ in 0..iters {
        let mut u = vec![0.0; k];
        let mut w = vec![0.0; k];
        for i in 0..k {
            let mut denom = 1.0;
            for j in 0..k {
                denom += (a(i, j) * x[j]).powi(2);
            }
            u[i] = a(i, i) * x[i] / denom;
            let e = 1.0 - u[i] * a(i, i) * x[i];
            w[i] = 1.0 / e.max(1e-300);
        }
        // precoder update with bisection on the power dual
        let x_of_mu = |mu: f64| -> Vec<f64> {
            (0..k)
                .map(|j| {
                    let mut denom = mu;
                    for i in 0..k {
                        denom += w[i] * u[i] * u[i] * a(i, j) * a(i, j);
                    }
                    (w[j] * u[j] * a(j, j) / denom.max(1e-300)).max(0.0)
                })
                .collect()
        };
        let power = |xs: &[f64]| xs.iter().map(|v| v * v).sum::<f64>();
        let candidate = x_of_mu(0.0);
        if power(&candidate) <= p_max {
            // unconstrained update already inside: scale up to the boundary
            x = candidate;
        } else {
            let mut lo = 0.0;
            let mut hi = 1.0;
            while power(&x_of_mu(hi)) > p_max && hi < 1e18 {
                hi *= 2.0;
            }
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                if power(&x_of_mu(mid)) > p_max {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            x = x_of_mu(hi);
        }
        let s = (p_max / power(&x).max(1e-300)).sqrt();
        for v in x.iter_mut() {
            *v *= s;
        }
        let p: Vec<f64> = x.iter().map(|v| v * v).collect();
        let obj = mf_power_objective(&alpha, zeta, &p);
        if obj + 1e-12 * obj.abs().max(1.0) < last_obj {
            break; // numerically stalled
        }
        last_obj = obj;
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    let s = p_max / total.max(1e-300);
    Ok(x.iter().map(|v| v * v * s).collect())
}

/// Shared WMMSE cycle over explicit channel columns (dimension N per user,
/// K users), with channels scaled so that noise power is unity. Returns the
/// final precoders and solver state; the objective trace holds the sum rate
/// after the initialization and after every iteration.
fn wmmse_cycle(chans: &CMat, p_max: f64, tol: f64, max_iters: usize) -> WmmseState {
    let n = chans.rows;
    let k = chans.cols;
    let h_col = |j: usize| chans.column(j);

    // MF directions with equal powers: feasible and deterministic.
    let mut v = CMat::zeros(n, k);
    for j in 0..k {
        let h = h_col(j);
        let nrm = vec_norm_sqr(&h).sqrt();
        let scale = (p_max / k as f64).sqrt() / nrm.max(1e-300);
        for i in 0..n {
            v[(i, j)] = h[i] * scale;
        }
    }

    let mut u = vec![Complex64::new(0.0, 0.0); k];
    let mut w = vec![1.0; k];
    let mut mu = 0.0;
    let mut ridge_used = false;

    let sum_rate = |v: &CMat| -> f64 {
        let mut se = 0.0;
        for user in 0..k {
            let h = h_col(user);
            let mut sig = 0.0;
            let mut intf = 1.0;
            for j in 0..k {
                let g = cdot(&h, &v.column(j)).norm_sqr();
                if j == user {
                    sig = g;
                } else {
                    intf += g;
                }
            }
            se += (1.0 + sig / intf).log2();
        }
        se
    };

    let mut last = sum_rate(&v);
    let mut trace = vec![last];

    for _iter in 0..max_iters {
        for user in 0..k {
            let h = h_col(user);
            let mut denom = 1.0;
            for j in 0..k {
                denom += cdot(&h, &v.column(j)).norm_sqr();
            }
            u[user] = cdot(&h, &v.column(user)) / denom;
        }
        for user in 0..k {
            let h = h_col(user);
            let e = 1.0 - (u[user].conj() * cdot(&h, &v.column(user))).re;
            w[user] = 1.0 / e.max(1e-12);
        }
        // v_j = w_j u_j (sum_i w_i |u_i|^2 h_i h_i^H + mu I)^{-1} h_j with
        // mu from bisection so total power lands on p_max.
        let mut a0 = CMat::zeros(n, n);
        for i in 0..k {
            let coef = w[i] * u[i].norm_sqr();
            if coef == 0.0 {
                continue;
            }
            let h = h_col(i);
            for r in 0..n {
                let hr = h[r] * coef;
                for c in 0..n {
                    a0[(r, c)] += hr * h[c].conj();
                }
            }
        }
        let mut solve_for = |mu: f64| -> CMat {
            let mut a = a0.clone();
            for d in 0..n {
                a[(d, d)] += Complex64::new(mu, 0.0);
            }
            let l = match cholesky_jittered(&a, 1e-10 * (1.0 + a.max_abs()), 8) {
                Ok((l, jitter)) => {
                    if jitter > 0.0 {
                        ridge_used = true;
                    }
                    l
                }
                Err(_) => unreachable!("HPSD + jitter always factors"),
            };
            let mut vs = CMat::zeros(n, k);
            for j in 0..k {
                let rhs = h_col(j);
                let y = solve_lower_herm(&l, &solve_lower(&l, &rhs));
                let coef = Complex64::new(w[j], 0.0) * u[j];
                for i in 0..n {
                    vs[(i, j)] = y[i] * coef;
                }
            }
            vs
        };
        let total_power = |vs: &CMat| -> f64 { vs.data.iter().map(|z| z.norm_sqr()).sum() };

        let v0 = solve_for(0.0);
        let p0 = total_power(&v0);
        let mut new_v;
        if p0 <= p_max {
            // constraint met at mu = 0; scale onto the equality boundary
            let s = (p_max / p0.max(1e-300)).sqrt();
            new_v = v0.scale(Complex64::new(s, 0.0));
            mu = 0.0;
        } else {
            let mut hi = if mu > 0.0 { mu } else { 1.0 };
            while total_power(&solve_for(hi)) > p_max && hi < 1e18 {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            let mut best = solve_for(hi);
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                let cand = solve_for(mid);
                let p = total_power(&cand);
                if p > p_max {
                    lo = mid;
                } else {
                    hi = mid;
                    best = cand;
                }
                if (p - p_max).abs() <= 1e-10 * p_max {
                    hi = mid;
                    best = solve_for(mid);
                    break;
                }
            }
            mu = hi;
            new_v = best;
            let s = (p_max / total_power(&new_v).max(1e-300)).sqrt();
            new_v = new_v.scale(Complex64::new(s, 0.0));
        }
        v = new_v;

        let obj = sum_rate(&v);
        trace.push(obj);
        let done = (obj - last).abs() < tol * last.abs().max(1.0);
        last = obj;
        if done {
            break;
        }
    }

    WmmseState { v, u, w, mu, objective_trace: trace, ridge_used }
}

/// WMMSE on the aperture discretized into `m_per_axis^2` patches.
///
/// Channel vectors are the normalized channels sampled at patch centers and
/// scaled by `sqrt(patch area)` so Euclidean inner products approximate
/// aperture integrals; an extra `sqrt(zeta)` folds the SNR scale in so the
/// noise is unity. The discrete precoders are lifted back to coefficient
/// space by solving the sampled-channel Gram system, so the returned beams
/// are continuous functions of the aperture coordinate.
pub fn spd_wmmse(
    scene: &Scenario,
    m_per_axis: usize,
    zeta: f64,
    p_max: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(CoeffMatrix, WmmseState)> {
    if m_per_axis == 0 {
        return Err(CapaError::Argument("m_per_axis must be >= 1".into()));
    }
    let k = scene.num_users();
    let grid = riemann_grid(&scene.aperture, m_per_axis, m_per_axis)?;
    let h = sample_channels(scene, &grid)?; // K x M
    let m = grid.len();
    let sqrt_w = grid.weights[0].sqrt();

    // The solver's "channel vector" for user k is the conjugated sample
    // vector, so that the Hermitian gain h_k^H v_j equals the discrete
    // approximation of sqrt(zeta) * integral of H'_k V_j, with v_j holding
    // sqrt(dA)-scaled field samples and ||v_j||^2 the physical power.
    let sz = zeta.sqrt();
    let mut chans = CMat::zeros(m, k);
    for j in 0..k {
        for i in 0..m {
            chans[(i, j)] = h[(j, i)].conj() * sqrt_w * sz;
        }
    }
    let mut state = wmmse_cycle(&chans, p_max, tol, max_iters);

    // Lift each discrete precoder onto the sampled conjugate channels:
    // v_j[m] ~ sqrt(dA) sum_i b_ij conj(H'_i(r_m)). The normal equations use
    // the sampled Gram q_il = sum_m dA H'_i conj(H'_l) and rhs (H_s v_j)_i
    // = discrete integral of H'_i V_j.
    let mut hs = CMat::zeros(k, m);
    for r in 0..k {
        for c in 0..m {
            hs[(r, c)] = h[(r, c)] * sqrt_w;
        }
    }
    let disc_gram = hs.matmul(&hs.hermitian_transpose());
    let mut b = CMat::zeros(k, k);
    for j in 0..k {
        let vj = state.v.column(j);
        let rhs = hs.matvec(&vj);
        let col = match solve_lu(&disc_gram, &rhs) {
            Ok(c) => c,
            Err(_) => {
                state.ridge_used = true;
                let mut reg = disc_gram.clone();
                let bump = 1e-10 * (1.0 + reg.max_abs());
                for d in 0..k {
                    reg[(d, d)] += Complex64::new(bump, 0.0);
                }
                solve_lu(&reg, &rhs)
                    .map_err(|e| CapaError::SingularMatrix(format!("coefficient lift: {e}")))?
            }
        };
        b.set_column(j, &col);
    }
    Ok((CoeffMatrix { b }, state))
}

/// WMMSE in the K-dimensional effective channel space of the Gram factor.
///
/// `Q = L L^H` (Cholesky with escalating jitter when Q is numerically
/// semidefinite); the effective channel of user k is column k of `L^H`, so
/// every gain and power computed through Q is preserved, and precoders map
/// back via `b_k = L^{-H} x_k`.
pub fn gram_wmmse(
    q: &GramMatrix,
    zeta: f64,
    p_max: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(CoeffMatrix, WmmseState)> {
    let k = q.dim();
    let trace = q.q.trace().re;
    let (l, _jitter) = cholesky_jittered(&q.q, 1e-12 * trace.max(1e-300) / k as f64, 12)
        .map_err(|e| CapaError::Domain(format!("gram matrix not PSD within jitter: {e}")))?;
    let lh = l.hermitian_transpose();

    let sz = zeta.sqrt();
    let mut chans = CMat::zeros(k, k);
    for j in 0..k {
        for i in 0..k {
            chans[(i, j)] = lh[(i, j)] * sz;
        }
    }
    let state = wmmse_cycle(&chans, p_max, tol, max_iters);

    // b_k = L^{-H} x_k: gains (Q B)_kj = (L x_j)_k = h_k^H x_j and powers
    // b_k^H Q b_k = ||x_k||^2 are preserved exactly.
    let mut b = CMat::zeros(k, k);
    for j in 0..k {
        let col = solve_lower_herm(&l, &state.v.column(j));
        b.set_column(j, &col);
    }
    Ok((CoeffMatrix { b }, state))
}

/// Closed-form structure evaluator
/// `B = (sigma^2 I + Lambda Q)^{-1} P^{1/2}` with diagonal `Lambda`, `P`.
pub fn optimal_structure(q: &GramMatrix, params: &StructureParams, sigma: f64) -> Result<CoeffMatrix> {
    let k = q.dim();
    if params.lambda.len() != k || params.p_dl.len() != k {
        return Err(CapaError::DimensionMismatch(format!(
            "structure params sized {}/{} for K = {k}",
            params.lambda.len(),
            params.p_dl.len()
        )));
    }
    if !(sigma > 0.0) {
        return Err(CapaError::Domain("sigma must be positive".into()));
    }
    if params.lambda.iter().chain(params.p_dl.iter()).any(|&x| x < 0.0) {
        return Err(CapaError::Domain("structure params must be nonnegative".into()));
    }
    let mut a = CMat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = q.q[(i, j)] * params.lambda[i];
        }
        a[(i, i)] += Complex64::new(sigma * sigma, 0.0);
    }
    let mut b = CMat::zeros(k, k);
    for j in 0..k {
        let mut rhs = vec![Complex64::new(0.0, 0.0); k];
        rhs[j] = Complex64::new(params.p_dl[j].sqrt(), 0.0);
        let col = solve_lu(&a, &rhs)
            .map_err(|e| CapaError::Domain(format!("structure system singular: {e}")))?;
        b.set_column(j, &col);
    }
    Ok(CoeffMatrix { b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamfield::{gain_matrix, power_vector, spectral_efficiency, synthesize_beam};
    use crate::physics::{Scenario, Vec3};
    use crate::quadrature::{channel_gram, gauss_legendre_grid, integrate};
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

    fn gram_for(scene: &Scenario) -> GramMatrix {
        let grid = gauss_legendre_grid(&scene.aperture, 32, 32).unwrap();
        channel_gram(scene, &grid).unwrap()
    }

    #[test]
    fn mf_single_user_reaches_cauchy_schwarz_bound() {
        let scene = scene_k(1, 1);
        let q = gram_for(&scene);
        let b = mf_coefficients(&q, &[scene.p_max]).unwrap();
        let g = gain_matrix(&q, &b).unwrap();
        let se = spectral_efficiency(&g, scene.zeta);
        let expect = (1.0 + scene.zeta * q.q[(0, 0)].re).log2();
        assert!((se - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn mf_zero_powers_zero_coeffs() {
        let scene = scene_k(3, 2);
        let q = gram_for(&scene);
        let b = mf_coefficients(&q, &[0.0, 0.0, 0.0]).unwrap();
        assert!(b.b.max_abs() == 0.0);
    }

    #[test]
    fn mf_se_matches_quadrature_oracle() {
        let scene = scene_k(4, 3);
        let grid = gauss_legendre_grid(&scene.aperture, 32, 32).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let powers = vec![scene.p_max / 4.0; 4];
        let b = mf_coefficients(&q, &powers).unwrap();
        let g_fast = gain_matrix(&q, &b).unwrap();
        let mut g_slow = CMat::zeros(4, 4);
        for k in 0..4 {
            for j in 0..4 {
                g_slow[(k, j)] = integrate(&grid, |r| {
                    let h = crate::physics::channel_response_normalized(&scene, k, r).unwrap();
                    let v = synthesize_beam(&scene, &b, j, r).unwrap();
                    h * v
                })
                .unwrap();
            }
        }
        let se_fast = spectral_efficiency(&g_fast, scene.zeta);
        let se_slow =
            spectral_efficiency(&crate::beamfield::GainMatrix { g: g_slow }, scene.zeta);
        assert!((se_fast - se_slow).abs() <= 1e-6 * se_slow);
    }

    #[test]
    fn power_allocation_single_user_takes_everything() {
        let scene = scene_k(1, 4);
        let q = gram_for(&scene);
        let p = wmmse_power_allocation(&q, scene.zeta, scene.p_max, 50).unwrap();
        assert!((p[0] - scene.p_max).abs() < 1e-12);
    }

    #[test]
    fn power_allocation_orthogonal_users_matches_grid_search() {
        // q_12 = 0 reduces to water filling over two parallel channels;
        // compare against a brute-force grid search over the power split.
        let mut q = CMat::zeros(2, 2);
        q[(0, 0)] = Complex64::new(3e-5, 0.0);
        q[(1, 1)] = Complex64::new(1e-5, 0.0);
        let q = GramMatrix { q, grid_tag: "synthetic".into() };
        let zeta = 1e5;
        let p = wmmse_power_allocation(&q, zeta, 1.0, 200).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);

        let se_of = |p0: f64| -> f64 {
            (1.0 + zeta * p0 * q.q[(0, 0)].re).log2()
                + (1.0 + zeta * (1.0 - p0) * q.q[(1, 1)].re).log2()
        };
        let mut best_se = f64::NEG_INFINITY;
        for i in 0..=10_000 {
            best_se = best_se.max(se_of(i as f64 / 10_000.0));
        }
        let se_wmmse = se_of(p[0]);
        assert!(
            (se_wmmse - best_se).abs() <= 1e-3 * best_se,
            "SE {se_wmmse} vs grid-search oracle {best_se}"
        );
    }

    #[test]
    fn power_allocation_beats_equal_split() {
        for trial in 0..5 {
            let scene = scene_k(4, 50 + trial);
            let q = gram_for(&scene);
            let p = wmmse_power_allocation(&q, scene.zeta, scene.p_max, 100).unwrap();
            let b_opt = mf_coefficients(&q, &p).unwrap();
            let b_eq = mf_coefficients(&q, &vec![scene.p_max / 4.0; 4]).unwrap();
            let se_opt = spectral_efficiency(&gain_matrix(&q, &b_opt).unwrap(), scene.zeta);
            let se_eq = spectral_efficiency(&gain_matrix(&q, &b_eq).unwrap(), scene.zeta);
            assert!(se_opt >= se_eq - 1e-9, "{se_opt} < {se_eq}");
        }
    }

    #[test]
    fn spd_wmmse_single_user_is_match_filter() {
        let scene = scene_k(1, 6);
        let (b, state) = spd_wmmse(&scene, 16, scene.zeta, scene.p_max, 1e-9, 200).unwrap();
        let grid = riemann_grid(&scene.aperture, 16, 16).unwrap();
        let q = channel_gram(&scene, &grid).unwrap();
        let b_mf = mf_coefficients(&q, &[scene.p_max]).unwrap();
        // same beam up to a global phase
        let diff = (b.b[(0, 0)].norm() - b_mf.b[(0, 0)].norm()).abs();
        assert!(diff <= 1e-6 * b_mf.b[(0, 0)].norm(), "mf mismatch {diff:.3e}");
        assert!(!state.objective_trace.is_empty());
    }

    #[test]
    fn spd_wmmse_objective_monotone() {
        for trial in 0..20 {
            let scene = scene_k(4, 100 + trial);
            let (_, state) = spd_wmmse(&scene, 6, scene.zeta, scene.p_max, 1e-8, 120).unwrap();
            for w in state.objective_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-8,
                    "objective decreased: {} -> {} (trial {trial})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn gram_wmmse_single_user_is_match_filter() {
        let scene = scene_k(1, 7);
        let q = gram_for(&scene);
        let (b, _) = gram_wmmse(&q, scene.zeta, scene.p_max, 1e-10, 200).unwrap();
        let b_mf = mf_coefficients(&q, &[scene.p_max]).unwrap();
        assert!((b.b[(0, 0)].norm() - b_mf.b[(0, 0)].norm()).abs() < 1e-6 * b_mf.b[(0, 0)].norm());
    }

    #[test]
    fn gram_wmmse_orthogonal_users_is_water_filling() {
        // Diagonal Gram: per-user beams are scaled unit coordinates and the
        // SE equals the closed-form water-filling optimum.
        let mut qm = CMat::zeros(3, 3);
        let gains = [4e-5, 2e-5, 5e-6];
        for i in 0..3 {
            qm[(i, i)] = Complex64::new(gains[i], 0.0);
        }
        let q = GramMatrix { q: qm, grid_tag: "synthetic".into() };
        let zeta = 1e5;
        let p_max = 1.0;
        let (b, _) = gram_wmmse(&q, zeta, p_max, 1e-12, 500).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(b.b[(i, j)].norm() < 1e-8 * b.b.max_abs());
                }
            }
        }
        let se = spectral_efficiency(&gain_matrix(&q, &b).unwrap(), zeta);

        // water-filling oracle on parallel channels with gains zeta * q_ii
        let g: Vec<f64> = gains.iter().map(|&x| zeta * x).collect();
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap());
        let mut wf_se = 0.0;
        for active in (1..=3usize).rev() {
            let chosen = &idx[..active];
            let inv_sum: f64 = chosen.iter().map(|&i| 1.0 / g[i]).sum();
            let nu = (p_max + inv_sum) / active as f64;
            if chosen.iter().all(|&i| nu - 1.0 / g[i] >= -1e-15) {
                wf_se = chosen
                    .iter()
                    .map(|&i| (1.0 + g[i] * (nu - 1.0 / g[i])).log2())
                    .sum();
                break;
            }
        }
        assert!(
            (se - wf_se).abs() <= 1e-6 * wf_se,
            "gram wmmse {se} vs water filling {wf_se}"
        );
    }

    #[test]
    fn gram_wmmse_rejects_indefinite() {
        let mut qm = CMat::identity(2);
        qm[(1, 1)] = Complex64::new(-1.0, 0.0);
        let q = GramMatrix { q: qm, grid_tag: "synthetic".into() };
        assert!(gram_wmmse(&q, 1.0, 1.0, 1e-8, 10).is_err());
    }

    #[test]
    fn spd_and_gram_wmmse_agree_at_fine_discretization() {
        let scene = scene_k(4, 8);
        let q = gram_for(&scene);
        let (b_gram, _) = gram_wmmse(&q, scene.zeta, scene.p_max, 1e-6, 500).unwrap();
        let se_gram = crate::beamfield::boundary_se(&q, &b_gram, scene.zeta, scene.p_max).unwrap();
        let (b_spd, _) = spd_wmmse(&scene, 12, scene.zeta, scene.p_max, 1e-6, 500).unwrap();
        let se_spd = crate::beamfield::boundary_se(&q, &b_spd, scene.zeta, scene.p_max).unwrap();
        assert!(
            (se_spd - se_gram).abs() <= 0.02 * se_gram,
            "spd {se_spd} vs gram {se_gram}"
        );
        assert!(se_spd <= se_gram + 1e-3, "discretized exceeds gram-space optimum");
    }

    #[test]
    fn structure_evaluator_closed_forms() {
        let scene = scene_k(2, 9);
        let q = gram_for(&scene);
        // Lambda = 0: B = P^{1/2} / sigma^2
        let params = StructureParams { lambda: vec![0.0, 0.0], p_dl: vec![4.0, 9.0] };
        let b = optimal_structure(&q, &params, 2.0).unwrap();
        assert!((b.b[(0, 0)].re - 2.0 / 4.0).abs() < 1e-12);
        assert!((b.b[(1, 1)].re - 3.0 / 4.0).abs() < 1e-12);
        assert!(b.b[(0, 1)].norm() < 1e-15);
        // P = 0: B = 0
        let params = StructureParams { lambda: vec![1.0, 2.0], p_dl: vec![0.0, 0.0] };
        let b = optimal_structure(&q, &params, 1.0).unwrap();
        assert!(b.b.max_abs() == 0.0);
    }

    #[test]
    fn structure_evaluator_matches_adjugate_inverse() {
        let scene = scene_k(2, 10);
        let q = gram_for(&scene);
        let lambda = [0.7, 1.3];
        let p_dl = [0.4, 0.9];
        let params = StructureParams { lambda: lambda.to_vec(), p_dl: p_dl.to_vec() };
        let sigma = 0.9;
        let b = optimal_structure(&q, &params, sigma).unwrap();

        let s2 = sigma * sigma;
        let a11 = Complex64::new(s2, 0.0) + q.q[(0, 0)] * lambda[0];
        let a12 = q.q[(0, 1)] * lambda[0];
        let a21 = q.q[(1, 0)] * lambda[1];
        let a22 = Complex64::new(s2, 0.0) + q.q[(1, 1)] * lambda[1];
        let det = a11 * a22 - a12 * a21;
        let inv = [[a22 / det, -a12 / det], [-a21 / det, a11 / det]];
        for i in 0..2 {
            for j in 0..2 {
                let expect = inv[i][j] * p_dl[j].sqrt();
                assert!(
                    (b.b[(i, j)] - expect).norm() <= 1e-12 * expect.norm().max(1e-12),
                    "structure mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn wmmse_power_lands_on_boundary() {
        for trial in 0..5 {
            let scene = scene_k(4, 300 + trial);
            let (b, _) = spd_wmmse(&scene, 8, scene.zeta, scene.p_max, 1e-8, 60).unwrap();
            let grid = riemann_grid(&scene.aperture, 8, 8).unwrap();
            let q = channel_gram(&scene, &grid).unwrap();
            let total: f64 = power_vector(&q, &b).unwrap().iter().sum();
            assert!(
                (total - scene.p_max).abs() <= 1e-6 * scene.p_max,
                "power residual {total}"
            );
        }
    }
}
