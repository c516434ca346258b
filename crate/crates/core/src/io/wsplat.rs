//! `.wsplat` viewer export.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `WSPL` |
//! | 4     | u32 version (1) |
//! | 4     | u32 splat count |
//! | 1     | u8 weight model (0 DIR, 1 EXP, 2 LC) |
//! | 1     | u8 color SH degree |
//! | 1     | u8 opacity SH degree |
//! | 1     | u8 reserved (0) |
//! | 24    | f32 sigma, beta, w_B, c_B.r, c_B.g, c_B.b |
//!
//! followed by one f32 record per splat: position (3), quaternion `w x y z`
//! (4), log scale (3), color SH (3 channels x `(Dc+1)^2`, channel-major),
//! opacity SH (`(Do+1)^2`), LC weight (1).

use std::fs;
use std::path::Path;

use crate::error::{Result, WsrError};
use crate::math::sh::{coeffs_per_channel, ShCoeffs, MAX_SH_DEGREE};
use crate::scene::{GaussianElement, Scene, WeightKind, WeightModel};

pub const MAGIC: &[u8; 4] = b"WSPL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// Floats per splat record.
pub fn record_floats(sh_degree_color: u8, sh_degree_opacity: u8) -> usize {
    3 + 4 + 3 + 3 * coeffs_per_channel(sh_degree_color) + coeffs_per_channel(sh_degree_opacity) + 1
}

pub fn encode_wsplat(scene: &Scene) -> Vec<u8> {
    let stride = record_floats(scene.sh_degree_color, scene.sh_degree_opacity);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stride * scene.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    out.extend_from_slice(&[
        scene.weight_model.kind.as_u8(),
        scene.sh_degree_color,
        scene.sh_degree_opacity,
        0,
    ]);
    let m = scene.weight_model;
    let c = scene.background_color;
    for v in [m.sigma, m.beta, scene.background_weight, c[0], c[1], c[2]] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for e in &scene.elements {
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        e.position.iter().for_each(|&v| put(v));
        e.rotation.iter().for_each(|&v| put(v));
        e.log_scale.iter().for_each(|&v| put(v));
        e.color_sh.values().iter().for_each(|&v| put(v));
        e.opacity_sh.values().iter().for_each(|&v| put(v));
        put(e.lc_weight);
    }
    out
}

pub fn export_wsplat(scene: &Scene, path: &Path) -> Result<()> {
    scene.validate()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WsrError::io(dir, e))?;
    }
    fs::write(path, encode_wsplat(scene)).map_err(|e| WsrError::io(path, e))
}

fn f32_at(bytes: &[u8], off: usize) -> f64 {
    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
}

/// Parses a `.wsplat` buffer back into a scene (values at f32 precision).
pub fn parse_wsplat(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() < HEADER_LEN {
        return Err(WsrError::parse(bytes.len() as u64, "file shorter than the 40-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(WsrError::parse(0, "bad magic, expected `WSPL`"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(WsrError::parse(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let kind = WeightKind::from_u8(bytes[12]).ok_or_else(|| WsrError::parse(12, format!("unknown weight model {}", bytes[12])))?;
    let (dc, dop) = (bytes[13], bytes[14]);
    if dc > MAX_SH_DEGREE {
        return Err(WsrError::parse(13, format!("color SH degree {dc} above 3")));
    }
    if dop > MAX_SH_DEGREE {
        return Err(WsrError::parse(14, format!("opacity SH degree {dop} above 3")));
    }
    let g: Vec<f64> = (0..6).map(|k| f32_at(bytes, 16 + 4 * k)).collect();
    let stride = 4 * record_floats(dc, dop);
    let body = bytes.len() - HEADER_LEN;
    if body < count * stride {
        let complete = body / stride;
        return Err(WsrError::parse(
            (HEADER_LEN + complete * stride) as u64,
            format!("file ends after {complete} of {count} records"),
        ));
    }
    if body > count * stride {
        return Err(WsrError::parse((HEADER_LEN + count * stride) as u64, "trailing bytes after the last record"));
    }
    let mut scene = Scene::empty(
        WeightModel {
            kind,
            sigma: g[0],
            beta: g[1],
        },
        dc,
        dop,
    );
    scene.background_weight = g[2];
    scene.background_color = [g[3], g[4], g[5]];
    let ncolor = 3 * coeffs_per_channel(dc);
    let nop = coeffs_per_channel(dop);
    for i in 0..count {
        let base = HEADER_LEN + i * stride;
        let mut k = 0;
        let mut next = || {
            let v = f32_at(bytes, base + 4 * k);
            k += 1;
            v
        };
        let position = [next(), next(), next()];
        let rotation = [next(), next(), next(), next()];
        let log_scale = [next(), next(), next()];
        let color: Vec<f64> = (0..ncolor).map(|_| next()).collect();
        let opacity: Vec<f64> = (0..nop).map(|_| next()).collect();
        let lc_weight = next();
        scene.elements.push(GaussianElement {
            position,
            rotation,
            log_scale,
            color_sh: ShCoeffs::new(dc, 3, color)?,
            opacity_sh: ShCoeffs::new(dop, 1, opacity)?,
            lc_weight,
        });
    }
    Ok(scene)
}

pub fn load_wsplat(path: &Path) -> Result<Scene> {
    parse_wsplat(&fs::read(path).map_err(|e| WsrError::io(path, e))?)
}
