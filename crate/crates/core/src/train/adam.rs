use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrError};
use crate::scene::{ElementField, GlobalField, ParamLayout, ParamSlot, Scene};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the spatial scale.
    pub position: f64,
    /// Position rate reached at the end of the decay.
    pub position_final: f64,
    pub color_sh: f64,
    pub opacity_sh: f64,
    pub scale: f64,
    pub rotation: f64,
    pub lc_weight: f64,
    /// Shared by sigma, beta and the background weight.
    pub globals: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            color_sh: 2.5e-3,
            opacity_sh: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            lc_weight: 5e-2,
            globals: 1e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear interpolation from `position` to `position_final` over
    /// `total` steps.
    pub fn position_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 || self.position <= 0.0 || self.position_final <= 0.0 {
            return self.position;
        }
        let t = (step as f64 / total as f64).clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }

    fn for_slot(&self, slot: ParamSlot, position_lr: f64) -> f64 {
        match slot {
            ParamSlot::Element { field, .. } => match field {
                ElementField::Position => position_lr,
                ElementField::Rotation => self.rotation,
                ElementField::LogScale => self.scale,
                ElementField::ColorSh => self.color_sh,
                ElementField::OpacitySh => self.opacity_sh,
                ElementField::LcWeight => self.lc_weight,
            },
            ParamSlot::Global(_) => self.globals,
        }
    }
}

/// First and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Smallest value kept for sigma and beta after an update.
const MIN_POSITIVE_GLOBAL: f64 = 1e-6;

/// One Adam update of every trainable parameter. `position_lr` is the
/// already scaled and decayed position rate.
pub fn adam_step(
    scene: &mut Scene,
    grads: &[f64],
    state: &mut AdamState,
    rates: &LearningRates,
    position_lr: f64,
) -> Result<()> {
    let layout: ParamLayout = scene.layout();
    if grads.len() != layout.total() || state.m.len() != layout.total() || state.v.len() != layout.total() {
        return Err(WsrError::invalid(format!(
            "optimizer shapes disagree: {} params, {} grads, {} moments",
            layout.total(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut params = scene.params();
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let slot = layout.slot(i);
        let lr = rates.for_slot(slot, position_lr);
        let next = params[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if !next.is_finite() {
            return Err(WsrError::NonFinite { slot: slot.to_string() });
        }
        params[i] = match slot {
            ParamSlot::Global(GlobalField::BackgroundWeight) => next.max(0.0),
            ParamSlot::Global(_) => next.max(MIN_POSITIVE_GLOBAL),
            _ => next,
        };
    }
    scene.set_params(&params)?;
    state.m = m;
    state.v = v;
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::tests::splat;
    use crate::scene::WeightModel;

    fn toy() -> Scene {
        let mut s = Scene::empty(WeightModel::initial(crate::scene::WeightKind::Exp), 0, 0);
        s.elements.push(splat([0.1, 0.2, 3.0], 0.3, [0.4, 0.5, 0.6], 0.7));
        s
    }

    #[test]
    fn zero_gradient_leaves_scene_unchanged() {
        let mut s = toy();
        let before = s.clone();
        let mut st = AdamState::new(s.param_count());
        for _ in 0..5 {
            adam_step(&mut s, &vec![0.0; before.param_count()], &mut st, &LearningRates::default(), 1e-3).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = toy();
        let n = s.param_count();
        let mut st = AdamState::new(n);
        let mut g = vec![0.0; n];
        g[0] = 2.5;
        g[11] = -0.7;
        let (x0, y0) = (s.param(0), s.param(11));
        for _ in 0..50 {
            adam_step(&mut s, &g, &mut st, &LearningRates::default(), 1e-3).unwrap();
        }
        assert!(s.param(0) < x0);
        assert!(s.param(11) > y0);
    }

    #[test]
    fn matches_textbook_adam() {
        let mut s = toy();
        let n = s.param_count();
        let rates = LearningRates::default();
        let grads: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 + 1.0).sin()).collect();
        let mut st = AdamState::new(n);
        let p0 = s.params();
        adam_step(&mut s, &grads, &mut st, &rates, 0.004).unwrap();
        adam_step(&mut s, &grads, &mut st, &rates, 0.004).unwrap();
        let layout = s.layout();
        for i in [0usize, 4, 8, 10, 13, 14] {
            let lr = match layout.slot(i) {
                ParamSlot::Element { field: ElementField::Position, .. } => 0.004,
                ParamSlot::Element { field: ElementField::Rotation, .. } => 1e-3,
                ParamSlot::Element { field: ElementField::LogScale, .. } => 5e-3,
                ParamSlot::Element { field: ElementField::ColorSh, .. } => 2.5e-3,
                ParamSlot::Element { field: ElementField::OpacitySh, .. } => 5e-2,
                ParamSlot::Element { field: ElementField::LcWeight, .. } => 5e-2,
                ParamSlot::Global(_) => 1e-3,
            };
            let (mut theta, mut m, mut v) = (p0[i], 0.0f64, 0.0f64);
            for t in 1..=2 {
                let g = grads[i];
                m = 0.9 * m + (1.0 - 0.9) * g;
                v = 0.999 * v + (1.0 - 0.999) * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                theta -= lr * mh / (vh.sqrt() + 1e-15);
            }
            assert_eq!(s.param(i).to_bits(), theta.to_bits(), "slot {i}");
        }
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let r = LearningRates::default();
        assert_eq!(r.position_at(0, 100), r.position);
        assert!((r.position_at(100, 100) - 1.6e-6).abs() < 1e-18);
        assert!((r.position_at(50, 100) - 1.6e-5).abs() < 1e-17);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = toy();
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut s, &[0.0; 3], &mut st, &LearningRates::default(), 1e-3).is_err());
    }

    #[test]
    fn non_finite_update_names_slot() {
        let mut s = toy();
        let n = s.param_count();
        let mut st = AdamState::new(n);
        let mut g = vec![0.0; n];
        g[2] = f64::NAN;
        let err = adam_step(&mut s, &g, &mut st, &LearningRates::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("element[0].position[2]"), "{err}");
    }
}
