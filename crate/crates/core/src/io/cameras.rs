//! Camera lists as JSON.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Result, WsrError};

/// Orthonormality tolerance applied to rotations read from disk.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraId {
    Index(u64),
    Name(String),
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CameraId::Index(i) => write!(f, "{i}"),
            CameraId::Name(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: CameraId,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl CameraRecord {
    pub fn from_camera(id: CameraId, cam: &Camera) -> Self {
        let r = cam.rotation;
        Self {
            id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            near: cam.near,
            far: cam.far,
        }
    }

    /// Validates the record and snaps the rotation to the nearest
    /// orthonormal matrix.
    pub fn to_camera(&self) -> Result<Camera> {
        let r = Matrix3::from_row_slice(&self.rotation);
        let cam = Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: r,
            translation: Vector3::from(self.translation),
            near: self.near,
            far: self.far,
        };
        cam.validate(ROTATION_TOLERANCE)
            .map_err(|e| WsrError::Validation(format!("camera {}: {e}", self.id)))?;
        let svd = r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        Ok(Camera { rotation: u * vt, ..cam })
    }
}

/// Named cameras in file order.
pub fn load_camera_records(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = fs::read_to_string(path).map_err(|e| WsrError::io(path, e))?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    for r in &records {
        r.to_camera()?;
    }
    Ok(records)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    load_camera_records(path)?.iter().map(CameraRecord::to_camera).collect()
}

pub fn save_camera_records(path: &Path, records: &[CameraRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WsrError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| WsrError::io(path, e))
}

/// Writes cameras with ids `0..n`.
pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| CameraRecord::from_camera(CameraId::Index(i as u64), c))
        .collect();
    save_camera_records(path, &records)
}
