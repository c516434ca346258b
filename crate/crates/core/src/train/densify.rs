//! Clone/split densification without opacity pruning.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::cov::{normalize_quat, unit_quat_to_rotmat};
use crate::scene::{ParamLayout, Scene};
use crate::train::adam::AdamState;
use crate::train::backward::ScreenStats;

/// Scale divisor applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Steps between densification passes; zero disables densification.
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Mean screen-space positional gradient (NDC units) above which an
    /// element is cloned or split.
    pub grad_threshold: f64,
    /// Elements with max scale above this fraction of the scene extent are
    /// split, others cloned.
    pub percent_dense: f64,
    /// Elements whose projected radius (pixels) exceeded this are removed.
    pub max_radius: f64,
    /// No new elements are added beyond this count.
    pub max_elements: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop: 15_000,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            max_radius: 128.0,
            max_elements: 100_000,
        }
    }
}

impl DensifyConfig {
    pub fn due(&self, step: usize) -> bool {
        self.interval > 0 && step >= self.start && step < self.stop && step > 0 && step.is_multiple_of(self.interval)
    }
}

/// Screen-space gradient statistics accumulated between passes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
    pub max_radius: Vec<f64>,
    /// Sum of world-space position gradients, used for clone offsets.
    pub position_grad: Vec<[f64; 3]>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
            max_radius: vec![0.0; n],
            position_grad: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    pub fn record(&mut self, screen: &ScreenStats, grads: &[f64], layout: &ParamLayout) {
        let stride = layout.stride();
        for i in 0..self.len() {
            if !screen.visible[i] {
                continue;
            }
            self.grad_sum[i] += screen.mean2d_grad[i];
            self.count[i] += 1;
            self.max_radius[i] = self.max_radius[i].max(screen.radius[i]);
            for k in 0..3 {
                self.position_grad[i][k] += grads[i * stride + ParamLayout::POSITION + k];
            }
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Where an element of the densified scene came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    New,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    pub origins: Vec<Origin>,
    pub cloned: usize,
    pub split: usize,
    pub removed: usize,
}

/// Applies one densification pass. `extent` is the scene extent used for
/// the clone/split size threshold.
pub fn densify<R: Rng>(
    scene: &mut Scene,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut R,
) -> DensifyOutcome {
    let n = scene.len();
    assert_eq!(stats.len(), n, "densify statistics do not match the scene");
    let mut out = DensifyOutcome::default();
    let mut kept = Vec::with_capacity(n);
    let mut added = Vec::new();
    let mut budget = cfg.max_elements.saturating_sub(n);
    let size_limit = cfg.percent_dense * extent;
    for (i, e) in scene.elements.iter().enumerate() {
        if stats.max_radius[i] > cfg.max_radius {
            out.removed += 1;
            continue;
        }
        let hot = stats.mean_grad(i) > cfg.grad_threshold;
        let max_scale = e.scale().into_iter().fold(0.0, f64::max);
        if !hot || budget == 0 {
            kept.push((Origin::Kept(i), e.clone()));
            continue;
        }
        if max_scale <= size_limit {
            let g = stats.position_grad[i];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let mut clone = e.clone();
            if norm > 0.0 {
                for k in 0..3 {
                    clone.position[k] -= max_scale * g[k] / norm;
                }
            }
            kept.push((Origin::Kept(i), e.clone()));
            added.push(clone);
            out.cloned += 1;
            budget -= 1;
        } else {
            let r = normalize_quat(e.rotation).map(unit_quat_to_rotmat).unwrap_or_else(|_| nalgebra::Matrix3::identity());
            let s = e.scale();
            for _ in 0..2 {
                let z: [f64; 3] = [0, 1, 2].map(|k| rng.sample::<f64, _>(StandardNormal) * s[k]);
                let offset = r * nalgebra::Vector3::from(z);
                let mut child = e.clone();
                for k in 0..3 {
                    child.position[k] += offset[k];
                    child.log_scale[k] -= SPLIT_SCALE_DIVISOR.ln();
                }
                added.push(child);
            }
            out.split += 1;
            budget = budget.saturating_sub(1);
        }
    }
    out.origins = kept.iter().map(|(o, _)| *o).collect();
    out.origins.extend(std::iter::repeat_n(Origin::New, added.len()));
    scene.elements = kept.into_iter().map(|(_, e)| e).chain(added).collect();
    out
}

/// Moves optimizer moments to the densified layout; new elements start at
/// zero.
pub fn remap_adam(state: &AdamState, old: &ParamLayout, new: &ParamLayout, origins: &[Origin]) -> AdamState {
    let mut out = AdamState::new(new.total());
    out.step = state.step;
    let stride = new.stride();
    for (j, origin) in origins.iter().enumerate() {
        if let Origin::Kept(i) = *origin {
            let src = i * old.stride()..(i + 1) * old.stride();
            out.m[j * stride..(j + 1) * stride].copy_from_slice(&state.m[src.clone()]);
            out.v[j * stride..(j + 1) * stride].copy_from_slice(&state.v[src]);
        }
    }
    let g_old = old.globals_offset();
    let g_new = new.globals_offset();
    out.m[g_new..].copy_from_slice(&state.m[g_old..]);
    out.v[g_new..].copy_from_slice(&state.v[g_old..]);
    out
}
