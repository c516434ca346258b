//! Central finite-difference check of the analytic gradients.

use rayon::prelude::*;
use serde::Serialize;

use crate::camera::Camera;
use crate::error::{Result, WsrError};
use crate::metrics::render_with;
use crate::metrics::RendererKind;
use crate::render::{Image, RenderOptions};
use crate::scene::Scene;
use crate::train::backward::backward_wsr;
use crate::train::loss::{loss_with, LossWeights};

/// Default relative step: `h = 1e-5 * max(1, |theta|)`.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Below this magnitude the absolute difference is reported.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotCheck {
    pub index: usize,
    pub slot: String,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// Entry of `slots` with the largest error.
    pub worst: Option<SlotCheck>,
    pub slots: Vec<SlotCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

fn scene_loss(scene: &Scene, cam: &Camera, target: &Image, opts: &RenderOptions, weights: &LossWeights) -> Result<f64> {
    let img = render_with(RendererKind::Wsr, scene, cam, opts)?;
    loss_with(&img, target, weights)
}

/// Central difference of the loss for one parameter index.
pub fn numeric_gradient(
    scene: &Scene,
    cam: &Camera,
    target: &Image,
    opts: &RenderOptions,
    weights: &LossWeights,
    index: usize,
    step: f64,
) -> Result<f64> {
    let theta = scene.param(index);
    let h = step * theta.abs().max(1.0);
    let mut plus = scene.clone();
    *plus.param_mut(index) = theta + h;
    let mut minus = scene.clone();
    *minus.param_mut(index) = theta - h;
    let lp = scene_loss(&plus, cam, target, opts, weights)?;
    let lm = scene_loss(&minus, cam, target, opts, weights)?;
    Ok((lp - lm) / (2.0 * h))
}

/// Compares `analytic` (full gradient vector) against central differences
/// on `slots`.
pub fn compare_gradients(
    scene: &Scene,
    cam: &Camera,
    target: &Image,
    opts: &RenderOptions,
    weights: &LossWeights,
    analytic: &[f64],
    slots: &[usize],
    step: f64,
) -> Result<GradCheckReport> {
    if slots.is_empty() {
        return Err(WsrError::invalid("gradient check needs at least one slot"));
    }
    let layout = scene.layout();
    if analytic.len() != layout.total() {
        return Err(WsrError::invalid("analytic gradient has the wrong length"));
    }
    if let Some(&bad) = slots.iter().find(|&&i| i >= layout.total()) {
        return Err(WsrError::invalid(format!("slot index {bad} out of range")));
    }
    let checks = slots
        .par_iter()
        .map(|&i| {
            let numeric = numeric_gradient(scene, cam, target, opts, weights, i, step)?;
            Ok(SlotCheck {
                index: i,
                slot: layout.slot(i).to_string(),
                analytic: analytic[i],
                numeric,
                error: relative_error(analytic[i], numeric),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.error.total_cmp(&b.error))
        .cloned();
    Ok(GradCheckReport {
        max_error: worst.as_ref().map_or(0.0, |w| w.error),
        worst,
        slots: checks,
    })
}

/// Runs the analytic backward pass and checks it on `slots`.
pub fn finite_diff_check(
    scene: &Scene,
    cam: &Camera,
    target: &Image,
    slots: &[usize],
    step: f64,
    opts: &RenderOptions,
    weights: &LossWeights,
) -> Result<GradCheckReport> {
    let out = backward_wsr(scene, cam, target, opts, weights)?;
    compare_gradients(scene, cam, target, opts, weights, &out.grads.values, slots, step)
}
