//! Dense complex matrices and the small set of factorizations the solvers
//! need: Hermitian eigendecomposition (cyclic Jacobi), Cholesky with
//! optional diagonal jitter, and triangular/HPD solves.
//!
//! Matrices here are small (K x K coefficient/Gram matrices, or M x M
//! discretized-aperture systems with M up to a few hundred), so everything
//! is plain row-major `Vec<Complex64>` with O(n^3) reference algorithms.

use num_complex::Complex64;

use crate::error::{CapaError, Result};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        CMat { rows: r, cols: c, data }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[Complex64]) {
        assert_eq!(col.len(), self.rows);
        for (i, &v) in col.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    /// Conjugate transpose.
    pub fn hermitian_transpose(&self) -> CMat {
        let mut out = CMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> CMat {
        let mut out = CMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn conj(&self) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn matmul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a.norm_sqr() == 0.0 {
                    continue;
                }
                let lhs_row = i * rhs.cols;
                let rhs_row = k * rhs.cols;
                for j in 0..rhs.cols {
                    out.data[lhs_row + j] += a * rhs.data[rhs_row + j];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: Complex64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, x.len());
        let mut y = vec![Complex64::new(0.0, 0.0); self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[i] = acc;
        }
        y
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest Hermitian-asymmetry |a_ij - conj(a_ji)| over all pairs.
    pub fn hermitian_defect(&self) -> f64 {
        assert!(self.is_square());
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `conj(x) . y`, the sesquilinear inner product.
pub fn cdot(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    assert_eq!(x.len(), y.len());
    x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

pub fn vec_norm_sqr(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvectors as columns of a unitary matrix. Intended for the small
/// Gram-sized matrices in this crate; convergence is quadratic and the
/// sweep count is capped defensively.
pub fn hermitian_eigen(a: &CMat) -> (Vec<f64>, CMat) {
    assert!(a.is_square(), "eigen of non-square matrix");
    let n = a.rows;
    let mut m = a.clone();
    // Work on the Hermitian average to shed roundoff asymmetry.
    for i in 0..n {
        for j in 0..n {
            let avg = 0.5 * (m[(i, j)] + a[(j, i)].conj());
            m[(i, j)] = avg;
        }
    }
    let mut v = CMat::identity(n);
    let scale = a.max_abs().max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m[(i, j)].norm());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.norm() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                // Unitary 2x2 rotation zeroing the (p,q) entry:
                // diagonalize [[app, apq], [conj(apq), aqq]].
                let phase = apq / apq.norm();
                let tau = (aqq - app) / (2.0 * apq.norm());
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Columns rotate as [p q] <- [p q] * [[c, s*phase], [-s*conj(phase), c]]
                for i in 0..n {
                    let aip = m[(i, p)];
                    let aiq = m[(i, q)];
                    m[(i, p)] = aip * c - aiq * s * phase.conj();
                    m[(i, q)] = aip * s * phase + aiq * c;
                }
                for j in 0..n {
                    let apj = m[(p, j)];
                    let aqj = m[(q, j)];
                    m[(p, j)] = apj * c - aqj * s * phase;
                    m[(q, j)] = apj * s * phase.conj() + aqj * c;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * c - viq * s * phase.conj();
                    v[(i, q)] = vip * s * phase + viq * c;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigs: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
    order.sort_by(|&i, &j| eigs[i].partial_cmp(&eigs[j]).unwrap());
    let sorted_eigs: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
    let mut sorted_v = CMat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            sorted_v[(i, new_j)] = v[(i, old_j)];
        }
    }
    (sorted_eigs, sorted_v)
}

/// Cholesky factor L (lower triangular, `A = L L^H`) of a Hermitian
/// positive-definite matrix. Fails on non-positive pivots.
pub fn cholesky(a: &CMat) -> Result<CMat> {
    assert!(a.is_square());
    let n = a.rows;
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let (left, right) = l.data.split_at_mut(j * n + j + 1);
        let mut d = a[(j, j)].re;
        for v in &left[j * n..j * n + j] {
            d -= v.norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(CapaError::SingularMatrix(format!(
                "cholesky pivot {j} is {d:.3e}"
            )));
        }
        let djj = d.sqrt();
        left[j * n + j] = Complex64::new(djj, 0.0);
        let inv = 1.0 / djj;
        let row_j = &left[j * n..j * n + j];
        let base = j * n + j + 1;
        for i in (j + 1)..n {
            let row_i = &mut right[i * n - base..i * n - base + j + 1];
            let mut s = a[(i, j)];
            // s -= row_i[..j] . conj(row_j[..j])
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for (x, y) in row_i[..j].iter().zip(row_j.iter()) {
                acc_re += x.re * y.re + x.im * y.im;
                acc_im += x.im * y.re - x.re * y.im;
            }
            s -= Complex64::new(acc_re, acc_im);
            row_i[j] = s * inv;
        }
    }
    Ok(l)
}

/// Cholesky with escalating diagonal jitter, for numerically semidefinite
/// matrices. Returns the factor and the jitter actually applied.
pub fn cholesky_jittered(a: &CMat, base_jitter: f64, max_tries: usize) -> Result<(CMat, f64)> {
    if let Ok(l) = cholesky(a) {
        return Ok((l, 0.0));
    }
    let mut jitter = base_jitter;
    for _ in 0..max_tries {
        let mut aj = a.clone();
        for i in 0..a.rows {
            aj[(i, i)] += Complex64::new(jitter, 0.0);
        }
        if let Ok(l) = cholesky(&aj) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(CapaError::SingularMatrix(format!(
        "cholesky failed after jitter up to {jitter:.3e}"
    )))
}

/// Solve `L x = b` with L lower triangular.
pub fn solve_lower(l: &CMat, b: &[Complex64]) -> Vec<Complex64> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            x[i] = x[i] - lik * x[k];
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// Solve `L^H x = b` with L lower triangular (so the system is upper).
pub fn solve_lower_herm(l: &CMat, b: &[Complex64]) -> Vec<Complex64> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)].conj();
            x[i] = x[i] - lki * x[k];
        }
        x[i] /= l[(i, i)].conj();
    }
    x
}

/// Solve `A x = b` for Hermitian positive-definite A via Cholesky.
pub fn solve_hpd(a: &CMat, b: &[Complex64]) -> Result<Vec<Complex64>> {
    let l = cholesky(a)?;
    Ok(solve_lower_herm(&l, &solve_lower(&l, b)))
}

/// General complex solve via partial-pivot LU. Kept for the handful of
/// non-Hermitian systems (coefficient recovery, structure evaluation).
pub fn solve_lu(a: &CMat, b: &[Complex64]) -> Result<Vec<Complex64>> {
    assert!(a.is_square());
    let n = a.rows;
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[(col, col)].norm();
        for r in (col + 1)..n {
            let v = m[(r, col)].norm();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(CapaError::SingularMatrix(format!(
                "lu pivot {col} below threshold"
            )));
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(pivot, j)];
                m[(pivot, j)] = tmp;
            }
            x.swap(col, pivot);
        }
        let d = m[(col, col)];
        for r in (col + 1)..n {
            let f = m[(r, col)] / d;
            if f.norm_sqr() == 0.0 {
                continue;
            }
            m[(r, col)] = Complex64::new(0.0, 0.0);
            for j in (col + 1)..n {
                let v = m[(col, j)];
                m[(r, j)] = m[(r, j)] - f * v;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let v = m[(i, j)] * x[j];
            x[i] = x[i] - v;
        }
        x[i] /= m[(i, i)];
    }
    Ok(x)
}

/// Inverse via LU column solves.
pub fn inverse(a: &CMat) -> Result<CMat> {
    let n = a.rows;
    let mut out = CMat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        e[j] = Complex64::new(1.0, 0.0);
        let col = solve_lu(a, &e)?;
        out.set_column(j, &col);
    }
    Ok(out)
}

/// Solve `A x = b` for Hermitian PSD A with a rank-revealing pseudo-inverse
/// (eigendecomposition, inverting eigenvalues above `rel_tol * max_eig`).
/// Returns the solution and whether any eigenvalue was truncated.
pub fn solve_psd_pinv(a: &CMat, b: &[Complex64], rel_tol: f64) -> (Vec<Complex64>, bool) {
    let (eigs, vecs) = hermitian_eigen(a);
    let max_eig = eigs.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut truncated = false;
    let n = a.rows;
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    // y = V diag(1/lambda) V^H b on the retained spectrum
    for j in 0..n {
        if eigs[j] <= rel_tol * max_eig {
            truncated = true;
            continue;
        }
        let vj = vecs.column(j);
        let coef = cdot(&vj, b) / eigs[j];
        for i in 0..n {
            y[i] += vj[i] * coef;
        }
    }
    (y, truncated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn random_cmat(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        m
    }

    fn random_hpd(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        let g = random_cmat(n, rng);
        let mut a = g.matmul(&g.hermitian_transpose());
        for i in 0..n {
            a[(i, i)] += Complex64::new(0.1, 0.0);
        }
        a
    }

    #[test]
    fn eigen_recovers_hermitian_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_hpd(5, &mut rng);
            let (eigs, v) = hermitian_eigen(&a);
            // A V = V diag(eigs)
            let av = a.matmul(&v);
            for j in 0..5 {
                for i in 0..5 {
                    let expect = v[(i, j)] * eigs[j];
                    assert!(
                        (av[(i, j)] - expect).norm() < 1e-9 * a.max_abs().max(1.0),
                        "eigen residual too large"
                    );
                }
            }
            // eigenvalues ascending
            for j in 1..5 {
                assert!(eigs[j] >= eigs[j - 1]);
            }
        }
    }

    #[test]
    fn eigen_unitary_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_hpd(6, &mut rng);
        let (_, v) = hermitian_eigen(&a);
        let vv = v.hermitian_transpose().matmul(&v);
        let eye = CMat::identity(6);
        assert!(vv.sub(&eye).max_abs() < 1e-10);
    }

    #[test]
    fn cholesky_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_hpd(5, &mut rng);
        let l = cholesky(&a).unwrap();
        let llh = l.matmul(&l.hermitian_transpose());
        assert!(llh.sub(&a).max_abs() < 1e-10 * a.max_abs());
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = CMat::identity(2);
        a[(1, 1)] = Complex64::new(-1.0, 0.0);
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn solves_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_hpd(6, &mut rng);
        let b: Vec<Complex64> = (0..6)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let x1 = solve_hpd(&a, &b).unwrap();
        let x2 = solve_lu(&a, &b).unwrap();
        for i in 0..6 {
            assert!((x1[i] - x2[i]).norm() < 1e-9);
        }
        let r = a.matvec(&x1);
        for i in 0..6 {
            assert!((r[i] - b[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn pinv_handles_rank_deficiency() {
        // Rank-1 PSD matrix: A = u u^H
        let u = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let mut a = CMat::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                a[(i, j)] = u[i] * u[j].conj();
            }
        }
        let b = a.matvec(&u); // in range
        let (x, truncated) = solve_psd_pinv(&a, &b, 1e-10);
        assert!(truncated);
        let r = a.matvec(&x);
        for i in 0..2 {
            assert!((r[i] - b[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn inverse_matches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cmat(4, &mut rng);
        let ainv = inverse(&a).unwrap();
        let eye = a.matmul(&ainv);
        assert!(eye.sub(&CMat::identity(4)).max_abs() < 1e-9);
    }
}
