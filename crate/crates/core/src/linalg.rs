//! Small dense helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::math;

pub(crate) fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Log-determinant of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn spd_log_det(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        acc += math::ln(l[(i, i)]);
    }
    Some(2.0 * acc)
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

pub fn eigenvalues(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    m.clone().symmetric_eigenvalues()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Spectral norm of a symmetric matrix: its largest absolute eigenvalue.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Outcome of a projection onto the positive definite cone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub min_eigenvalue_before: f64,
    pub floor: f64,
    pub clipped: usize,
}

impl Projection {
    pub fn modified(&self) -> bool {
        self.clipped > 0
    }
}

/// Eigenvalue clipping: every eigenvalue below `rel_floor * lambda_max` is raised to that floor.
///
/// Matrices already above the floor are returned unchanged (bit for bit).
pub fn project_positive_definite(m: &DMatrix<f64>, rel_floor: f64) -> (DMatrix<f64>, Projection) {
    let eig = m.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = if lambda_max > 0.0 { rel_floor * lambda_max } else { rel_floor.max(f64::MIN_POSITIVE) };
    let clipped = eig.eigenvalues.iter().filter(|&&v| v < floor).count();
    let report = Projection { min_eigenvalue_before: lambda_min, floor, clipped };
    if clipped == 0 {
        return (m.clone(), report);
    }
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&values) * q.transpose();
    symmetrize(&mut out);
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_leaves_pd_matrix_untouched() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (out, rep) = project_positive_definite(&m, 1e-6);
        assert_eq!(out, m);
        assert!(!rep.modified());
    }

    #[test]
    fn projection_clips_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (out, rep) = project_positive_definite(&m, 1e-6);
        assert_eq!(rep.clipped, 1);
        assert!(min_eigenvalue(&out) >= 3.0e-6 * (1.0 - 1e-9));
        assert!(spd_log_det(&out).is_some());
    }
}
