//! Node/weight rules over the aperture and the integrals built on them.
//!
//! Two rules are provided: centered Riemann sums (uniform sub-rectangles)
//! and tensor-product Gauss-Legendre. Every integral in the crate — powers,
//! cross gains, Gram entries — goes through [`integrate`] or the cached
//! channel samples, so switching rules is a one-argument change.
//!
//! The default evaluation grid for labels and final spectral-efficiency
//! numbers is Gauss-Legendre (32, 32); a fine Riemann grid serves as the
//! independent oracle in tests.

use num_complex::Complex64;

use crate::error::{CapaError, Result};
use crate::linalg::CMat;
use crate::physics::{channel_response_normalized, Aperture, Scenario, Vec3};

/// Which rule produced a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RuleTag {
    Riemann,
    GaussLegendre,
}

/// Quadrature nodes and weights on the aperture plane.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub rule_tag: RuleTag,
    /// Nodes per axis, recorded for provenance.
    pub counts: (usize, usize),
    /// Largest gap between adjacent nodes along either axis, meters.
    pub max_spacing: f64,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tag_string(&self) -> String {
        let rule = match self.rule_tag {
            RuleTag::Riemann => "riemann",
            RuleTag::GaussLegendre => "gauss_legendre",
        };
        format!("{}({},{})", rule, self.counts.0, self.counts.1)
    }
}

/// Centered Riemann rule: `m_u * m_v` sub-rectangle centers with uniform
/// weight `|A| / (m_u * m_v)`.
pub fn riemann_grid(aperture: &Aperture, m_u: usize, m_v: usize) -> Result<QuadratureGrid> {
    if m_u == 0 || m_v == 0 {
        return Err(CapaError::Argument("riemann grid counts must be >= 1".into()));
    }
    let du = aperture.side_u / m_u as f64;
    let dv = aperture.side_v / m_v as f64;
    let w = du * dv;
    let mut nodes = Vec::with_capacity(m_u * m_v);
    for iu in 0..m_u {
        let u = -0.5 * aperture.side_u + (iu as f64 + 0.5) * du;
        for iv in 0..m_v {
            let v = -0.5 * aperture.side_v + (iv as f64 + 0.5) * dv;
            nodes.push(aperture.point_at(u, v));
        }
    }
    Ok(QuadratureGrid {
        weights: vec![w; nodes.len()],
        nodes,
        rule_tag: RuleTag::Riemann,
        counts: (m_u, m_v),
        max_spacing: du.max(dv),
    })
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Chebyshev-style initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Tensor-product Gauss-Legendre rule mapped affinely onto the aperture,
/// weights scaled by the Jacobian `side_u * side_v / 4`.
pub fn gauss_legendre_grid(aperture: &Aperture, n_u: usize, n_v: usize) -> Result<QuadratureGrid> {
    if n_u == 0 || n_v == 0 {
        return Err(CapaError::Argument("gauss-legendre counts must be >= 1".into()));
    }
    let (xu, wu) = gauss_legendre_1d(n_u);
    let (xv, wv) = gauss_legendre_1d(n_v);
    let jac = aperture.side_u * aperture.side_v / 4.0;
    let mut nodes = Vec::with_capacity(n_u * n_v);
    let mut weights = Vec::with_capacity(n_u * n_v);
    for iu in 0..n_u {
        let u = 0.5 * aperture.side_u * xu[iu];
        for iv in 0..n_v {
            let v = 0.5 * aperture.side_v * xv[iv];
            nodes.push(aperture.point_at(u, v));
            weights.push(jac * wu[iu] * wv[iv]);
        }
    }
    let gap = |xs: &[f64], side: f64| -> f64 {
        let mut g: f64 = (xs[0] + 1.0) * 0.5 * side; // edge to first node
        for w in xs.windows(2) {
            g = g.max((w[1] - w[0]) * 0.5 * side);
        }
        g.max((1.0 - xs[xs.len() - 1]) * 0.5 * side)
    };
    Ok(QuadratureGrid {
        nodes,
        weights,
        rule_tag: RuleTag::GaussLegendre,
        counts: (n_u, n_v),
        max_spacing: gap(&xu, aperture.side_u).max(gap(&xv, aperture.side_v)),
    })
}

/// Weighted sum of `f` over the grid. Non-finite samples are reported with
/// their node index.
pub fn integrate<F>(grid: &QuadratureGrid, f: F) -> Result<Complex64>
where
    F: Fn(Vec3) -> Complex64,
{
    let mut acc = Complex64::new(0.0, 0.0);
    for (m, (&node, &w)) in grid.nodes.iter().zip(grid.weights.iter()).enumerate() {
        let v = f(node);
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(CapaError::Numeric(format!(
                "non-finite sample at quadrature node {m}"
            )));
        }
        acc += v * w;
    }
    Ok(acc)
}

/// Gram matrix of the normalized channels over the aperture:
/// `q_ki = integral of H'_k(r) conj(H'_i(r))`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub q: CMat,
    pub grid_tag: String,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.q.rows
    }

    /// Row-major export with complex entries as `[re, im]` pairs.
    pub fn to_json(&self) -> String {
        let entries: Vec<[f64; 2]> = self.q.data.iter().map(|z| [z.re, z.im]).collect();
        serde_json::json!({
            "k": self.dim(),
            "grid_tag": self.grid_tag,
            "entries": entries,
        })
        .to_string()
    }
}

/// Normalized channel samples of every user at every grid node, as a
/// K x M matrix. This is the shared kernel behind Gram assembly, label
/// generation, and the discretized solvers.
pub fn sample_channels(scene: &Scenario, grid: &QuadratureGrid) -> Result<CMat> {
    let k_users = scene.num_users();
    let m = grid.len();
    let mut h = CMat::zeros(k_users, m);
    for k in 0..k_users {
        for (j, &node) in grid.nodes.iter().enumerate() {
            h[(k, j)] = channel_response_normalized(scene, k, node)?;
        }
    }
    Ok(h)
}

/// Assemble the channel Gram matrix: upper triangle by quadrature, lower
/// triangle by conjugate mirror, diagonal forced real.
pub fn channel_gram(scene: &Scenario, grid: &QuadratureGrid) -> Result<GramMatrix> {
    let h = sample_channels(scene, grid)?;
    Ok(gram_from_samples(&h, &grid.weights, grid.tag_string()))
}

/// Gram assembly from precomputed channel samples (K x M) and weights.
pub fn gram_from_samples(h: &CMat, weights: &[f64], grid_tag: String) -> GramMatrix {
    let k_users = h.rows;
    let m = h.cols;
    assert_eq!(weights.len(), m);
    let mut q = CMat::zeros(k_users, k_users);
    for k in 0..k_users {
        for i in k..k_users {
            let mut acc = Complex64::new(0.0, 0.0);
            let row_k = &h.data[k * m..(k + 1) * m];
            let row_i = &h.data[i * m..(i + 1) * m];
            for ((&hk, &hi), &w) in row_k.iter().zip(row_i.iter()).zip(weights.iter()) {
                acc += hk * hi.conj() * w;
            }
            if i == k {
                q[(k, k)] = Complex64::new(acc.re, 0.0);
            } else {
                q[(k, i)] = acc;
                q[(i, k)] = acc.conj();
            }
        }
    }
    GramMatrix { q, grid_tag }
}

/// Nodes per fringe of the most oscillatory Gram integrand on this scene,
/// i.e. how well the grid resolves the fastest phase variation
/// `k0 (|r - s_i| - |r - s_k|)` over the aperture. Values >= 4 keep the
/// default rule in its spectrally convergent regime; larger apertures need
/// node counts scaled linearly with `side / wavelength`.
pub fn fringe_nodes_per_cycle(scene: &Scenario, grid: &QuadratureGrid) -> f64 {
    let k0 = scene.constants.wavenumber;
    let ap = &scene.aperture;
    let half_u = 0.5 * ap.side_u;
    let half_v = 0.5 * ap.side_v;
    let corners = [
        ap.point_at(-half_u, -half_v),
        ap.point_at(-half_u, half_v),
        ap.point_at(half_u, -half_v),
        ap.point_at(half_u, half_v),
    ];
    let mut max_rate = 0.0f64; // rad per meter across the aperture
    for (k, &sk) in scene.users.iter().enumerate() {
        for &si in scene.users.iter().skip(k + 1) {
            for &c in &corners {
                let uk = sk.sub(c).normalized();
                let ui = si.sub(c).normalized();
                max_rate = max_rate.max(k0 * uk.sub(ui).norm());
            }
        }
    }
    if max_rate == 0.0 {
        return f64::INFINITY;
    }
    let fringe = 2.0 * std::f64::consts::PI / max_rate;
    fringe / grid.max_spacing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::Scenario;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_scene_k2() -> Scenario {
        Scenario::with_users(vec![Vec3::new(0.4, -0.3, 30.0), Vec3::new(-0.6, 0.8, 30.0)])
    }

    #[test]
    fn riemann_single_cell() {
        let ap = Aperture::square_xy(0.5);
        let g = riemann_grid(&ap, 1, 1).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g.nodes[0].x).abs() < 1e-15 && (g.nodes[0].y).abs() < 1e-15);
        assert!((g.weights[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn riemann_6x6_matches_uniform_weights() {
        let ap = Aperture::square_xy(0.5);
        let g = riemann_grid(&ap, 6, 6).unwrap();
        assert_eq!(g.len(), 36);
        for &w in &g.weights {
            assert!((w - 0.25 / 36.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_area() {
        let ap = Aperture::square_xy(0.5);
        for (mu, mv) in [(1usize, 1usize), (3, 5), (16, 16), (7, 2)] {
            let g = riemann_grid(&ap, mu, mv).unwrap();
            let total: f64 = g.weights.iter().sum();
            assert!((total - 0.25).abs() < 1e-12 * 0.25);
            let gl = gauss_legendre_grid(&ap, mu, mv).unwrap();
            let total: f64 = gl.weights.iter().sum();
            assert!((total - 0.25).abs() < 1e-12 * 0.25);
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let ap = Aperture::square_xy(0.5);
        assert!(riemann_grid(&ap, 0, 4).is_err());
        assert!(gauss_legendre_grid(&ap, 4, 0).is_err());
    }

    #[test]
    fn gauss_legendre_single_node_is_midpoint() {
        let ap = Aperture::square_xy(0.5);
        let g = gauss_legendre_grid(&ap, 1, 1).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.nodes[0].x.abs() < 1e-15 && g.nodes[0].y.abs() < 1e-15);
        assert!((g.weights[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_nodes_are_polynomial_exact() {
        // Degree 2n-1 exactness on [-1,1]: n = 4 integrates x^6 exactly.
        let (x, w) = gauss_legendre_1d(4);
        let integral: f64 = x.iter().zip(w.iter()).map(|(&xi, &wi)| wi * xi.powi(6)).sum();
        assert!((integral - 2.0 / 7.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn integrate_constant_gives_area_times_constant() {
        let ap = Aperture::square_xy(0.5);
        let g = gauss_legendre_grid(&ap, 5, 5).unwrap();
        let c = Complex64::new(2.5, -1.0);
        let v = integrate(&g, |_| c).unwrap();
        assert!((v - c * 0.25).norm() < 1e-13);
    }

    #[test]
    fn integrate_reports_bad_node() {
        let ap = Aperture::square_xy(0.5);
        let g = riemann_grid(&ap, 2, 2).unwrap();
        let err = integrate(&g, |p| {
            if p.x > 0.0 && p.y > 0.0 {
                Complex64::new(f64::NAN, 0.0)
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .unwrap_err();
        assert!(matches!(err, CapaError::Numeric(_)));
        assert!(err.to_string().contains("node 3"));
    }

    #[test]
    fn self_power_positive_real() {
        let scene = default_scene_k2();
        let g = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        let q11 = integrate(&g, |r| {
            let h = channel_response_normalized(&scene, 0, r).unwrap();
            h * h.conj()
        })
        .unwrap();
        assert!(q11.re > 0.0);
        assert!(q11.im.abs() < 1e-18);
    }

    #[test]
    fn single_user_snr_matches_zeta_times_power() {
        // K=1, b = 1/sqrt(q'_11): gamma = zeta * q'_11, with q'_11 from a
        // fine-grid oracle.
        let scene = Scenario::with_users(vec![Vec3::new(0.2, 0.1, 30.0)]);
        let oracle = riemann_grid(&scene.aperture, 512, 512).unwrap();
        let q11 = integrate(&oracle, |r| {
            let h = channel_response_normalized(&scene, 0, r).unwrap();
            h * h.conj()
        })
        .unwrap()
        .re;
        let b = 1.0 / q11.sqrt();
        // gain g_11 = b * q_11, gamma = zeta |g|^2 = zeta * q11
        let gamma = scene.zeta * (b * q11).powi(2);
        assert!((gamma - scene.zeta * q11).abs() < 1e-10 * scene.zeta * q11);
    }

    #[test]
    fn cross_gain_matches_fine_oracle() {
        let scene = default_scene_k2();
        let fine = riemann_grid(&scene.aperture, 512, 512).unwrap();
        let gl = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        let f = |s: &Scenario, r: Vec3| {
            let h1 = channel_response_normalized(s, 0, r).unwrap();
            let h2 = channel_response_normalized(s, 1, r).unwrap();
            h1 * h2.conj()
        };
        let a = integrate(&fine, |r| f(&scene, r)).unwrap();
        let b = integrate(&gl, |r| f(&scene, r)).unwrap();
        assert!((a - b).norm() <= 1e-4 * a.norm());
    }

    #[test]
    fn gram_hermitian_and_psd_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let k = rng.random_range(1..=5);
            let users: Vec<Vec3> = (0..k)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        30.0,
                    )
                })
                .collect();
            let scene = Scenario::with_users(users);
            let grid = gauss_legendre_grid(&scene.aperture, 12, 12).unwrap();
            let gram = channel_gram(&scene, &grid).unwrap();
            assert!(gram.q.hermitian_defect() <= 1e-10 * gram.q.max_abs());
            let (eigs, _) = crate::linalg::hermitian_eigen(&gram.q);
            let max_eig = eigs.iter().cloned().fold(0.0, f64::max);
            assert!(eigs[0] >= -1e-8 * max_eig, "gram not PSD: {eigs:?}");
        }
    }

    #[test]
    fn duplicated_user_gives_rank_deficient_gram() {
        let p = Vec3::new(0.25, -0.4, 30.0);
        let scene = Scenario::with_users(vec![p, p]);
        let grid = gauss_legendre_grid(&scene.aperture, 16, 16).unwrap();
        let gram = channel_gram(&scene, &grid).unwrap();
        let (eigs, _) = crate::linalg::hermitian_eigen(&gram.q);
        let trace = gram.q.trace().re;
        assert!(eigs[0].abs() < 1e-8 * trace);
    }

    #[test]
    fn riemann_refinement_converges() {
        // |q(m) - q(2m)| nonincreasing in m for far-field users.
        let scene = default_scene_k2();
        let mut diffs = Vec::new();
        let mut prev: Option<Complex64> = None;
        for m in [8usize, 16, 32, 64, 128, 256] {
            let grid = riemann_grid(&scene.aperture, m, m).unwrap();
            let q = channel_gram(&scene, &grid).unwrap().q[(0, 1)];
            if let Some(p) = prev {
                diffs.push((q - p).norm());
            }
            prev = Some(q);
        }
        for w in diffs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "refinement not contracting: {diffs:?}");
        }
    }

    #[test]
    fn default_grid_resolves_fringes() {
        // Worst-case user placement in the default region still leaves the
        // (32,32) Gauss-Legendre rule above 4 nodes per fringe.
        let scene = Scenario::with_users(vec![
            Vec3::new(1.0, 1.0, 30.0),
            Vec3::new(-1.0, -1.0, 30.0),
        ]);
        let grid = gauss_legendre_grid(&scene.aperture, 32, 32).unwrap();
        assert!(fringe_nodes_per_cycle(&scene, &grid) >= 4.0);
    }

    #[test]
    fn gram_export_is_row_major_re_im() {
        let scene = default_scene_k2();
        let grid = gauss_legendre_grid(&scene.aperture, 8, 8).unwrap();
        let gram = channel_gram(&scene, &grid).unwrap();
        let text = gram.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["k"], 2);
        let entries = v["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 4);
        let q01 = &entries[1];
        assert!((q01[0].as_f64().unwrap() - gram.q[(0, 1)].re).abs() < 1e-15);
        assert!((q01[1].as_f64().unwrap() - gram.q[(0, 1)].im).abs() < 1e-15);
    }
}
