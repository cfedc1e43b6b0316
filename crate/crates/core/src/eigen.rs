//! Closed-form eigen-decomposition of symmetric 3×3 matrices.

use nalgebra::{Matrix3, Vector3};

/// Eigenvalues of a symmetric matrix in descending order.
///
/// Uses the trigonometric solution of the characteristic polynomial on the
/// deviatoric part, which is well conditioned for the scatter matrices seen
/// here (positive semi-definite, one eigenvalue near zero).
pub fn sym_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let q = m.trace() / 3.0;
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
    if p2 <= f64::MIN_POSITIVE {
        return [q, q, q];
    }
    let p = (p2 / 6.0).sqrt();
    let b = (m - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let l2 = 3.0 * q - l1 - l3;
    // Round-off can reorder the middle value by a few ulps.
    let mut v = [l1, l2, l3];
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Unit eigenvector of `m` for eigenvalue `lambda`, taken as the largest
/// cross product among the rows of `m − λI`. Returns `None` when the rows
/// span less than two dimensions.
pub fn sym_eigenvector(m: &Matrix3<f64>, lambda: f64) -> Option<Vector3<f64>> {
    let a = m - Matrix3::identity() * lambda;
    let r0 = Vector3::new(a[(0, 0)], a[(0, 1)], a[(0, 2)]);
    let r1 = Vector3::new(a[(1, 0)], a[(1, 1)], a[(1, 2)]);
    let r2 = Vector3::new(a[(2, 0)], a[(2, 1)], a[(2, 2)]);
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .copied()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
        .expect("three candidates");
    let n = best.norm();
    if n > 0.0 && n.is_finite() {
        Some(best / n)
    } else {
        None
    }
}

/// Unit vector orthogonal to `v` (assumed unit).
pub fn any_orthogonal(v: &Vector3<f64>) -> Vector3<f64> {
    let axis = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
        Vector3::x()
    } else if v.y.abs() <= v.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    v.cross(&axis).normalize()
}
