//! Activations and rotation helpers shared by the forward and backward passes.

use nalgebra::{Matrix3, Vector3};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the raw (unnormalized)
/// quaternion. The result is orthogonal to `q`.
pub fn quat_matrix_backward(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = grad_r;
    let dot = |m: [[f64; 3]; 3]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += m[i][j] * g[(i, j)];
            }
        }
        s
    };
    let gw = dot([
        [0.0, -2.0 * z, 2.0 * y],
        [2.0 * z, 0.0, -2.0 * x],
        [-2.0 * y, 2.0 * x, 0.0],
    ]);
    let gx = dot([
        [0.0, 2.0 * y, 2.0 * z],
        [2.0 * y, -4.0 * x, -2.0 * w],
        [2.0 * z, 2.0 * w, -4.0 * x],
    ]);
    let gy = dot([
        [-4.0 * y, 2.0 * x, 2.0 * w],
        [2.0 * x, 0.0, 2.0 * z],
        [-2.0 * w, 2.0 * z, -4.0 * y],
    ]);
    let gz = dot([
        [-4.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * w, -4.0 * z, 2.0 * y],
        [2.0 * x, 2.0 * y, 0.0],
    ]);
    let qh = [w, x, y, z];
    let gh = [gw, gx, gy, gz];
    let proj: f64 = (0..4).map(|i| qh[i] * gh[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (gh[i] - qh[i] * proj) / n;
    }
    out
}

pub fn normalize_quat(q: &mut [f64; 4]) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        for c in q.iter_mut() {
            *c /= n;
        }
    } else {
        *q = [1.0, 0.0, 0.0, 0.0];
    }
}

/// Shortest-arc quaternion rotating `+z` onto the unit vector `n`.
pub fn quat_from_z_to(n: &Vector3<f64>) -> [f64; 4] {
    let z = Vector3::z();
    let d = z.dot(n);
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let axis = z.cross(n);
    let mut q = [1.0 + d, axis.x, axis.y, axis.z];
    normalize_quat(&mut q);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_invert() {
        for &x in &[-20.0, -3.5, -1e-3, 0.0, 0.7, 12.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
            assert!((logit(s) - x).abs() < 1e-9 * (1.0 + x.abs()));
            assert!(f64::exp(x) > 0.0);
            assert!((f64::exp(x).ln() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn quaternion_matrix_is_orthonormal() {
        let r = quat_to_matrix(&[0.3, -0.2, 0.9, 0.1]);
        let e = r * r.transpose() - Matrix3::identity();
        assert!(e.norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quaternion_backward_matches_finite_differences() {
        let q = [0.4, -0.3, 0.5, 0.2];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.2);
        let f = |q: &[f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
        let analytic = quat_matrix_backward(&q, &g);
        for i in 0..4 {
            let (mut qp, mut qm) = (q, q);
            qp[i] += 1e-6;
            qm[i] -= 1e-6;
            let fd = (f(&qp) - f(&qm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
        }
        let dot: f64 = (0..4).map(|i| q[i] * analytic[i]).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn z_alignment() {
        let n = Vector3::new(1.0, 2.0, -0.5).normalize();
        let r = quat_to_matrix(&quat_from_z_to(&n));
        assert!((r.column(2) - n).norm() < 1e-12);
        let r = quat_to_matrix(&quat_from_z_to(&-Vector3::z()));
        assert!((r.column(2) + Vector3::z()).norm() < 1e-12);
    }
}
