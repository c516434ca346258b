//! Deterministic synthetic scenes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Result, WsrError};
use crate::math::sh::ShCoeffs;
use crate::render::{render_sorted_reference, Image, RenderOptions};
use crate::scene::{GaussianElement, Scene, WeightKind, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Black and white splats that swap depth order mid-sweep.
    TwoSplat,
    /// Twenty splats seen by a ring of twelve cameras.
    Toy20,
}

impl std::str::FromStr for Preset {
    type Err = WsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-splat" => Ok(Self::TwoSplat),
            "toy20" => Ok(Self::Toy20),
            other => Err(WsrError::invalid(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    /// Sorted-reference renders, one per camera.
    pub images: Vec<Image>,
    /// Camera sweep for popping analysis (empty for presets without one).
    pub path: Vec<Camera>,
}

pub const TOY20_SIZE: u32 = 64;
pub const TOY20_VIEWS: usize = 12;
pub const TOY20_SEED: u64 = 20;
pub const SWEEP_FRAMES: usize = 61;
pub const SWEEP_DEGREES: f64 = 3.0;

fn element(position: [f64; 3], scale: [f64; 3], rotation: [f64; 4], rgb: [f64; 3], opacity: f64) -> GaussianElement {
    GaussianElement {
        position,
        rotation,
        log_scale: scale.map(f64::ln),
        color_sh: ShCoeffs::from_rgb(0, rgb),
        opacity_sh: ShCoeffs::constant(0, opacity),
        lc_weight: 1.0,
    }
}

/// Camera on a horizontal circle around the origin at azimuth `theta`.
pub fn orbit_camera(radius: f64, theta: f64, height: f64, fov_x: f64, size: u32) -> Result<Camera> {
    Camera::look_at(
        [radius * theta.sin(), height, -radius * theta.cos()],
        [0.0; 3],
        [0.0, -1.0, 0.0],
        fov_x,
        size,
        size,
    )
}

pub fn two_splat() -> Result<SynthScene> {
    let mut scene = Scene::empty(WeightModel::lc(10.0), 0, 0);
    scene.background_color = [0.5; 3];
    scene.background_weight = 0.05;
    let id = [1.0, 0.0, 0.0, 0.0];
    scene.elements.push(element([-0.3, 0.0, 0.0], [0.6; 3], id, [0.0; 3], 0.98));
    scene.elements.push(element([0.3, 0.0, 0.0], [0.6; 3], id, [1.0; 3], 0.98));
    let path = (0..SWEEP_FRAMES)
        .map(|i| {
            let t = i as f64 / (SWEEP_FRAMES - 1) as f64;
            let deg = -SWEEP_DEGREES + 2.0 * SWEEP_DEGREES * t;
            orbit_camera(5.0, deg.to_radians(), 0.0, 0.7, TOY20_SIZE)
        })
        .collect::<Result<Vec<_>>>()?;
    let cameras = vec![path[0].clone(), path[SWEEP_FRAMES - 1].clone()];
    let images = render_all(&scene, &cameras)?;
    Ok(SynthScene {
        scene,
        cameras,
        images,
        path,
    })
}

pub fn toy20() -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY20_SEED);
    let mut scene = Scene::empty(WeightModel::initial(WeightKind::Lc), 0, 0);
    for _ in 0..20 {
        let position = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let scale = [0, 1, 2].map(|_| rng.random_range(0.12..0.3));
        let axis: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let half = rng.random_range(0.0..PI) / 2.0;
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
        let rotation = [half.cos(), half.sin() * axis[0] / n, half.sin() * axis[1] / n, half.sin() * axis[2] / n];
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.1..0.95));
        let opacity = rng.random_range(0.6..0.95);
        scene.elements.push(element(position, scale, rotation, rgb, opacity));
    }
    let cameras = (0..TOY20_VIEWS)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / TOY20_VIEWS as f64;
            let height = if i % 2 == 0 { 0.8 } else { -0.8 };
            orbit_camera(4.0, theta, height, 0.9, TOY20_SIZE)
        })
        .collect::<Result<Vec<_>>>()?;
    let images = render_all(&scene, &cameras)?;
    Ok(SynthScene {
        scene,
        cameras,
        images,
        path: Vec::new(),
    })
}

fn render_all(scene: &Scene, cameras: &[Camera]) -> Result<Vec<Image>> {
    cameras
        .iter()
        .map(|c| render_sorted_reference(scene, c, &RenderOptions::default()))
        .collect()
}

pub fn generate(preset: Preset) -> Result<SynthScene> {
    match preset {
        Preset::TwoSplat => two_splat(),
        Preset::Toy20 => toy20(),
    }
}
