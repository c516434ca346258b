//! 3D covariance from rotation + scale, and its vector-Jacobian products.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Result, WsrError};

/// Upper triangle of a symmetric 3x3 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov3D {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Cov3D {
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.xx, self.xy, self.xz, //
            self.xy, self.yy, self.yz, //
            self.xz, self.yz, self.zz,
        )
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
#[inline]
pub fn unit_quat_to_rotmat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-9) || !n.is_finite() {
        return Err(WsrError::invalid(format!("quaternion norm {n} is degenerate")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Sigma = R(q) diag(s^2) R(q)^T.
pub fn quat_scale_to_cov(q: [f64; 4], s: [f64; 3]) -> Result<Cov3D> {
    let qn = normalize_quat(q)?;
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(WsrError::invalid(format!("scales must be positive, got {s:?}")));
    }
    Ok(Cov3D::from_matrix(&cov_matrix(qn, s)))
}

#[inline]
pub(crate) fn cov_matrix(unit_q: [f64; 4], s: [f64; 3]) -> Matrix3<f64> {
    let r = unit_quat_to_rotmat(unit_q);
    let m = r * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
    m * m.transpose()
}

/// Gradients of a loss through `Sigma(q, s)` given `dL/dSigma` (full,
/// symmetric matrix). Returns `(dL/dq_raw, dL/ds)` where `q_raw` is the
/// unnormalized stored quaternion.
pub(crate) fn cov_vjp(q_raw: [f64; 4], s: [f64; 3], grad_sigma: &Matrix3<f64>) -> ([f64; 4], [f64; 3]) {
    let n = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let qn = [q_raw[0] / n, q_raw[1] / n, q_raw[2] / n, q_raw[3] / n];
    let r = unit_quat_to_rotmat(qn);
    let sd = Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
    let m = r * sd;
    // Sigma = M M^T
    let gm = (grad_sigma + grad_sigma.transpose()) * m;
    let mut gs = [0.0; 3];
    for j in 0..3 {
        gs[j] = (0..3).map(|i| gm[(i, j)] * r[(i, j)]).sum();
    }
    let gr = gm * sd;
    let gq_unit = rotmat_vjp(qn, &gr);
    // chain through q / |q|
    let d = (0..4).map(|i| qn[i] * gq_unit[i]).sum::<f64>();
    let gq = [
        (gq_unit[0] - qn[0] * d) / n,
        (gq_unit[1] - qn[1] * d) / n,
        (gq_unit[2] - qn[2] * d) / n,
        (gq_unit[3] - qn[3] * d) / n,
    ];
    (gq, gs)
}

/// `dL/dq` for `R(q)` treated as a polynomial in the quaternion entries.
#[inline]
fn rotmat_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |i, j| g[(i, j)];
    [
        2.0 * (z * (g(1, 0) - g(0, 1)) + y * (g(0, 2) - g(2, 0)) + x * (g(2, 1) - g(1, 2))),
        2.0 * (y * (g(1, 0) + g(0, 1)) + z * (g(2, 0) + g(0, 2)) + w * (g(2, 1) - g(1, 2))
            - 2.0 * x * (g(1, 1) + g(2, 2))),
        2.0 * (x * (g(1, 0) + g(0, 1)) + w * (g(0, 2) - g(2, 0)) + z * (g(2, 1) + g(1, 2))
            - 2.0 * y * (g(0, 0) + g(2, 2))),
        2.0 * (w * (g(1, 0) - g(0, 1)) + x * (g(2, 0) + g(0, 2)) + y * (g(2, 1) + g(1, 2))
            - 2.0 * z * (g(0, 0) + g(1, 1))),
    ]
}
