//! Pinhole camera, Gaussian projection to screen space, and culling.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Result, WsrError};
use crate::math::cov::{cov_matrix, cov_vjp, normalize_quat};
use crate::scene::{GaussianElement, Scene};

/// Isotropic screen-space covariance floor in pixels^2 (3DGS anti-aliasing).
pub const COV2D_FLOOR: f64 = 0.3;
/// Default footprint extent in standard deviations.
pub const DEFAULT_EXTENT_SIGMAS: f64 = 3.0;

/// Pinhole camera with a world-to-camera rigid transform. Camera space is
/// x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        };
        cam.validate(1e-6)?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with a horizontal field of view
    /// `fov_x` (radians). `up` is the world up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).try_normalize(1e-12).ok_or_else(|| {
            WsrError::invalid("camera eye and target coincide")
        })?;
        let right = forward
            .cross(&Vector3::from(up))
            .try_normalize(1e-12)
            .ok_or_else(|| WsrError::invalid("camera up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            rotation,
            translation,
            0.01,
            1000.0,
        )
    }

    pub fn validate(&self, tolerance: f64) -> Result<()> {
        let rrt = self.rotation * self.rotation.transpose();
        let err = (rrt - Matrix3::identity()).abs().max();
        if !(err <= tolerance) || (self.rotation.determinant() - 1.0).abs() > 10.0 * tolerance {
            return Err(WsrError::Validation(format!(
                "camera rotation is not orthonormal (residual {err:.3e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(WsrError::Validation("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(WsrError::Validation(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(WsrError::Validation("image dimensions must be nonzero".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// `(R p + t, z)`.
pub fn world_to_camera(cam: &Camera, p: [f64; 3]) -> (Vector3<f64>, f64) {
    let x = cam.rotation * Vector3::from(p) + cam.translation;
    (x, x.z)
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]` of the regularized covariance.
    pub cov2d: [f64; 3],
    /// `[xx, xy, yy]` of the inverse covariance.
    pub conic: [f64; 3],
    /// Camera-space z of the center.
    pub depth: f64,
    /// Footprint radius in pixels.
    pub radius: f64,
    pub visible: bool,
}

impl SplatProjection {
    fn hidden(depth: f64) -> Self {
        Self {
            mean2d: [0.0; 2],
            cov2d: [0.0; 3],
            conic: [0.0; 3],
            depth,
            radius: 0.0,
            visible: false,
        }
    }
}

#[inline]
fn projection_jacobian(cam: &Camera, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * x.y * iz2,
    )
}

pub fn project_gaussian(cam: &Camera, element: &GaussianElement) -> SplatProjection {
    project_gaussian_with(cam, element, DEFAULT_EXTENT_SIGMAS)
}

/// Projects with a footprint extent of `extent_sigmas` standard deviations.
pub fn project_gaussian_with(cam: &Camera, element: &GaussianElement, extent_sigmas: f64) -> SplatProjection {
    let (xc, depth) = world_to_camera(cam, element.position);
    if !(depth > cam.near && depth < cam.far) {
        return SplatProjection::hidden(depth);
    }
    let Ok(q) = normalize_quat(element.rotation) else {
        return SplatProjection::hidden(depth);
    };
    let sigma3 = cov_matrix(q, element.scale());
    let t = projection_jacobian(cam, &xc) * cam.rotation;
    let c = t * sigma3 * t.transpose();
    let cov2d = [c[(0, 0)] + COV2D_FLOOR, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + COV2D_FLOOR];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) {
        return SplatProjection::hidden(depth);
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let mid = 0.5 * (cov2d[0] + cov2d[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = extent_sigmas * lambda_max.sqrt();
    let mean2d = [
        cam.fx * xc.x / depth + cam.cx,
        cam.fy * xc.y / depth + cam.cy,
    ];
    let on_screen = mean2d[0] + radius > 0.0
        && mean2d[0] - radius < cam.width as f64
        && mean2d[1] + radius > 0.0
        && mean2d[1] - radius < cam.height as f64;
    SplatProjection {
        mean2d,
        cov2d,
        conic,
        depth,
        radius,
        visible: on_screen,
    }
}

/// Indices of visible elements in input order.
pub fn frustum_cull(cam: &Camera, scene: &Scene) -> Vec<usize> {
    frustum_cull_with(cam, scene, DEFAULT_EXTENT_SIGMAS)
}

pub fn frustum_cull_with(cam: &Camera, scene: &Scene, extent_sigmas: f64) -> Vec<usize> {
    scene
        .elements
        .iter()
        .enumerate()
        .filter(|(_, e)| project_gaussian_with(cam, e, extent_sigmas).visible)
        .map(|(i, _)| i)
        .collect()
}

/// Upstream gradients of one projected splat.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ProjectionGrad {
    pub mean2d: [f64; 2],
    /// With respect to the conic entries `[xx, xy, yy]`, where `xy` stands
    /// for both off-diagonal entries.
    pub conic: [f64; 3],
    pub depth: f64,
}

/// Gradient of the projection with respect to `(position, raw rotation,
/// log_scale)`.
pub(crate) fn project_vjp(
    cam: &Camera,
    element: &GaussianElement,
    grad: &ProjectionGrad,
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let (xc, z) = world_to_camera(cam, element.position);
    let q = normalize_quat(element.rotation).expect("visible splat has a valid rotation");
    let s = element.scale();
    let sigma3 = cov_matrix(q, s);
    let w = cam.rotation;
    let j = projection_jacobian(cam, &xc);
    let t = j * w;
    let c = t * sigma3 * t.transpose();
    let a = c[(0, 0)] + COV2D_FLOOR;
    let b = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    let d = c[(1, 1)] + COV2D_FLOOR;
    let det = a * d - b * b;
    let conic = nalgebra::Matrix2::new(d / det, -b / det, -b / det, a / det);

    // conic = cov^{-1}  =>  dL/dcov = -conic * dL/dconic * conic
    let gq = nalgebra::Matrix2::new(
        grad.conic[0],
        0.5 * grad.conic[1],
        0.5 * grad.conic[1],
        grad.conic[2],
    );
    let gcov = -(conic * gq * conic);

    // cov = T Sigma T^T + floor
    let g_sigma = t.transpose() * gcov * t;
    let g_t = 2.0 * gcov * t * sigma3;
    let g_j = g_t * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
    let mut g_xc = Vector3::zeros();
    // J entries: (0,0)=fx/z, (0,2)=-fx x/z^2, (1,1)=fy/z, (1,2)=-fy y/z^2
    g_xc.x += g_j[(0, 2)] * (-fx * iz2);
    g_xc.y += g_j[(1, 2)] * (-fy * iz2);
    g_xc.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * xc.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * xc.y * iz3);

    // mean2d = (fx x/z + cx, fy y/z + cy)
    g_xc.x += grad.mean2d[0] * fx * iz;
    g_xc.y += grad.mean2d[1] * fy * iz;
    g_xc.z += -grad.mean2d[0] * fx * xc.x * iz2 - grad.mean2d[1] * fy * xc.y * iz2;

    g_xc.z += grad.depth;

    let g_p = w.transpose() * g_xc;
    let (g_q, g_s) = cov_vjp(element.rotation, s, &g_sigma);
    let g_log_scale = [g_s[0] * s[0], g_s[1] * s[1], g_s[2] * s[2]];
    ([g_p.x, g_p.y, g_p.z], g_q, g_log_scale)
}
