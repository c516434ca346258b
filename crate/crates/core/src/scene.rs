//! Scene container, weight-model parameters, and the flat view over all
//! trainable scalars.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrError};
use crate::math::cov::normalize_quat;
use crate::math::sh::{coeffs_per_channel, ShCoeffs, MAX_SH_DEGREE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    /// Constant weight of one.
    Dir,
    /// `exp(-sigma * d^beta)`.
    Exp,
    /// `max(0, 1 - d / sigma) * v_i`.
    Lc,
}

impl WeightKind {
    pub fn as_u8(self) -> u8 {
        match self {
            WeightKind::Dir => 0,
            WeightKind::Exp => 1,
            WeightKind::Lc => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(WeightKind::Dir),
            1 => Some(WeightKind::Exp),
            2 => Some(WeightKind::Lc),
            _ => None,
        }
    }

    /// Number of global weight parameters this model trains.
    pub fn global_count(self) -> usize {
        match self {
            WeightKind::Dir => 0,
            WeightKind::Exp => 2,
            WeightKind::Lc => 1,
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::Dir => "dir",
            WeightKind::Exp => "exp",
            WeightKind::Lc => "lc",
        })
    }
}

impl std::str::FromStr for WeightKind {
    type Err = WsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dir" => Ok(WeightKind::Dir),
            "exp" => Ok(WeightKind::Exp),
            "lc" => Ok(WeightKind::Lc),
            other => Err(WsrError::invalid(format!("unknown weight model `{other}`"))),
        }
    }
}

pub const EXP_INIT_SIGMA: f64 = 0.1;
pub const EXP_INIT_BETA: f64 = 0.8;
pub const LC_INIT_SIGMA: f64 = 10.0;
pub const LC_INIT_V: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightModel {
    pub kind: WeightKind,
    pub sigma: f64,
    /// Only meaningful for [`WeightKind::Exp`].
    pub beta: f64,
}

impl WeightModel {
    pub fn dir() -> Self {
        Self {
            kind: WeightKind::Dir,
            sigma: 1.0,
            beta: 1.0,
        }
    }

    pub fn exp(sigma: f64, beta: f64) -> Self {
        Self {
            kind: WeightKind::Exp,
            sigma,
            beta,
        }
    }

    pub fn lc(sigma: f64) -> Self {
        Self {
            kind: WeightKind::Lc,
            sigma,
            beta: 1.0,
        }
    }

    /// The initialization used for training.
    pub fn initial(kind: WeightKind) -> Self {
        match kind {
            WeightKind::Dir => Self::dir(),
            WeightKind::Exp => Self::exp(EXP_INIT_SIGMA, EXP_INIT_BETA),
            WeightKind::Lc => Self::lc(LC_INIT_SIGMA),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            WeightKind::Dir => true,
            WeightKind::Exp => self.sigma > 0.0 && self.beta > 0.0,
            WeightKind::Lc => self.sigma > 0.0,
        };
        if !ok || !self.sigma.is_finite() || !self.beta.is_finite() {
            return Err(WsrError::Validation(format!(
                "weight model {} has invalid sigma={} beta={}",
                self.kind, self.sigma, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianElement {
    pub position: [f64; 3],
    /// `(w, x, y, z)`, normalized at use.
    pub rotation: [f64; 4],
    /// Natural log of the per-axis standard deviation.
    pub log_scale: [f64; 3],
    pub color_sh: ShCoeffs,
    pub opacity_sh: ShCoeffs,
    /// Per-element multiplier used by the LC weight model.
    pub lc_weight: f64,
}

impl GaussianElement {
    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    fn validate(&self, color_degree: u8, opacity_degree: u8) -> Result<()> {
        normalize_quat(self.rotation)?;
        if self.scale().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(WsrError::Validation(format!(
                "log_scale {:?} does not give finite positive scales",
                self.log_scale
            )));
        }
        if self.color_sh.degree() != color_degree
            || self.color_sh.channels() != 3
            || self.opacity_sh.degree() != opacity_degree
            || self.opacity_sh.channels() != 1
        {
            return Err(WsrError::Validation(
                "element SH layout disagrees with the scene degrees".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub elements: Vec<GaussianElement>,
    pub weight_model: WeightModel,
    /// Fixed configuration, not trained.
    pub background_color: [f64; 3],
    pub background_weight: f64,
    pub sh_degree_color: u8,
    pub sh_degree_opacity: u8,
}

impl Scene {
    pub fn empty(weight_model: WeightModel, sh_degree_color: u8, sh_degree_opacity: u8) -> Self {
        Self {
            elements: Vec::new(),
            weight_model,
            background_color: [0.0; 3],
            background_weight: 1.0,
            sh_degree_color,
            sh_degree_opacity,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree_color > MAX_SH_DEGREE || self.sh_degree_opacity > MAX_SH_DEGREE {
            return Err(WsrError::Validation("SH degree above 3".into()));
        }
        self.weight_model.validate()?;
        if !(self.background_weight.is_finite() && self.background_weight >= 0.0) {
            return Err(WsrError::Validation(format!(
                "background weight {} must be finite and non-negative",
                self.background_weight
            )));
        }
        for (i, e) in self.elements.iter().enumerate() {
            e.validate(self.sh_degree_color, self.sh_degree_opacity)
                .map_err(|err| WsrError::Validation(format!("element {i}: {err}")))?;
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            elements: self.elements.len(),
            color_len: 3 * coeffs_per_channel(self.sh_degree_color),
            opacity_len: coeffs_per_channel(self.sh_degree_opacity),
            kind: self.weight_model.kind,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layout().total()
    }

    /// Axis-aligned bounds of the element centers.
    pub fn bounds(&self) -> Option<Aabb> {
        let mut it = self.elements.iter();
        let first = it.next()?;
        let mut b = Aabb {
            min: first.position,
            max: first.position,
        };
        for e in it {
            for k in 0..3 {
                b.min[k] = b.min[k].min(e.position[k]);
                b.max[k] = b.max[k].max(e.position[k]);
            }
        }
        Some(b)
    }

    pub fn param(&self, index: usize) -> f64 {
        *self.locate(index)
    }

    pub fn param_mut(&mut self, index: usize) -> &mut f64 {
        let layout = self.layout();
        match layout.slot(index) {
            ParamSlot::Element {
                element,
                field,
                component,
            } => {
                let e = &mut self.elements[element];
                match field {
                    ElementField::Position => &mut e.position[component],
                    ElementField::Rotation => &mut e.rotation[component],
                    ElementField::LogScale => &mut e.log_scale[component],
                    ElementField::ColorSh => &mut e.color_sh.values_mut()[component],
                    ElementField::OpacitySh => &mut e.opacity_sh.values_mut()[component],
                    ElementField::LcWeight => &mut e.lc_weight,
                }
            }
            ParamSlot::Global(GlobalField::Sigma) => &mut self.weight_model.sigma,
            ParamSlot::Global(GlobalField::Beta) => &mut self.weight_model.beta,
            ParamSlot::Global(GlobalField::BackgroundWeight) => &mut self.background_weight,
        }
    }

    fn locate(&self, index: usize) -> &f64 {
        match self.layout().slot(index) {
            ParamSlot::Element {
                element,
                field,
                component,
            } => {
                let e = &self.elements[element];
                match field {
                    ElementField::Position => &e.position[component],
                    ElementField::Rotation => &e.rotation[component],
                    ElementField::LogScale => &e.log_scale[component],
                    ElementField::ColorSh => &e.color_sh.values()[component],
                    ElementField::OpacitySh => &e.opacity_sh.values()[component],
                    ElementField::LcWeight => &e.lc_weight,
                }
            }
            ParamSlot::Global(GlobalField::Sigma) => &self.weight_model.sigma,
            ParamSlot::Global(GlobalField::Beta) => &self.weight_model.beta,
            ParamSlot::Global(GlobalField::BackgroundWeight) => &self.background_weight,
        }
    }

    /// All trainable scalars in [`ParamLayout`] order.
    pub fn params(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.total());
        for e in &self.elements {
            out.extend_from_slice(&e.position);
            out.extend_from_slice(&e.rotation);
            out.extend_from_slice(&e.log_scale);
            out.extend_from_slice(e.color_sh.values());
            out.extend_from_slice(e.opacity_sh.values());
            out.push(e.lc_weight);
        }
        match layout.kind {
            WeightKind::Dir => {}
            WeightKind::Exp => out.extend([self.weight_model.sigma, self.weight_model.beta]),
            WeightKind::Lc => out.push(self.weight_model.sigma),
        }
        out.push(self.background_weight);
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let layout = self.layout();
        if values.len() != layout.total() {
            return Err(WsrError::invalid(format!(
                "expected {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        let stride = layout.stride();
        for (e, chunk) in self.elements.iter_mut().zip(values.chunks_exact(stride)) {
            let mut it = chunk.iter().copied();
            let mut take = |dst: &mut [f64]| {
                for d in dst {
                    *d = it.next().expect("stride covers all fields");
                }
            };
            take(&mut e.position);
            take(&mut e.rotation);
            take(&mut e.log_scale);
            take(e.color_sh.values_mut());
            take(e.opacity_sh.values_mut());
            take(std::slice::from_mut(&mut e.lc_weight));
        }
        let globals = &values[layout.elements * stride..];
        match layout.kind {
            WeightKind::Dir => {}
            WeightKind::Exp => {
                self.weight_model.sigma = globals[0];
                self.weight_model.beta = globals[1];
            }
            WeightKind::Lc => self.weight_model.sigma = globals[0],
        }
        self.background_weight = globals[globals.len() - 1];
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Knobs for [`scene_new_random`] that are not fixed by the weight model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInit {
    pub weight: WeightKind,
    pub sh_degree_color: u8,
    pub sh_degree_opacity: u8,
    /// Initial view-independent opacity `u`.
    pub opacity: f64,
    pub background_weight: f64,
    /// Fraction of the box diagonal used as the initial scale.
    pub scale_fraction: f64,
}

impl Default for RandomInit {
    fn default() -> Self {
        Self {
            weight: WeightKind::Lc,
            sh_degree_color: 3,
            sh_degree_opacity: 3,
            opacity: 0.5,
            background_weight: 1.0,
            scale_fraction: 0.05,
        }
    }
}

/// Deterministic random scene: uniform positions, near-identity rotations,
/// degree-0 colors.
pub fn scene_new_random(n: usize, bounds: Aabb, seed: u64, init: &RandomInit) -> Result<Scene> {
    if n == 0 {
        return Err(WsrError::invalid("random scene needs at least one element"));
    }
    if init.sh_degree_color > MAX_SH_DEGREE || init.sh_degree_opacity > MAX_SH_DEGREE {
        return Err(WsrError::invalid("SH degree above 3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_scale = (init.scale_fraction * bounds.diagonal()).max(1e-6).ln();
    let mut scene = Scene::empty(
        WeightModel::initial(init.weight),
        init.sh_degree_color,
        init.sh_degree_opacity,
    );
    scene.background_weight = init.background_weight;
    for _ in 0..n {
        let position = [0, 1, 2].map(|k| {
            if bounds.max[k] > bounds.min[k] {
                rng.random_range(bounds.min[k]..=bounds.max[k])
            } else {
                bounds.min[k]
            }
        });
        let jitter = 0.1;
        let rotation = [
            1.0,
            rng.random_range(-jitter..jitter),
            rng.random_range(-jitter..jitter),
            rng.random_range(-jitter..jitter),
        ];
        let rgb = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        scene.elements.push(GaussianElement {
            position,
            rotation,
            log_scale: [log_scale; 3],
            color_sh: ShCoeffs::from_rgb(init.sh_degree_color, rgb),
            opacity_sh: ShCoeffs::constant(init.sh_degree_opacity, init.opacity),
            lc_weight: LC_INIT_V,
        });
    }
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementField {
    Position,
    Rotation,
    LogScale,
    ColorSh,
    OpacitySh,
    LcWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GlobalField {
    Sigma,
    Beta,
    BackgroundWeight,
}

/// One trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    Element {
        element: usize,
        field: ElementField,
        component: usize,
    },
    Global(GlobalField),
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSlot::Element {
                element,
                field,
                component,
            } => {
                let name = match field {
                    ElementField::Position => "position",
                    ElementField::Rotation => "rotation",
                    ElementField::LogScale => "log_scale",
                    ElementField::ColorSh => "color_sh",
                    ElementField::OpacitySh => "opacity_sh",
                    ElementField::LcWeight => "lc_weight",
                };
                write!(f, "element[{element}].{name}[{component}]")
            }
            ParamSlot::Global(GlobalField::Sigma) => f.write_str("sigma"),
            ParamSlot::Global(GlobalField::Beta) => f.write_str("beta"),
            ParamSlot::Global(GlobalField::BackgroundWeight) => f.write_str("background_weight"),
        }
    }
}

/// Flat layout of every trainable scalar: per element
/// `[position(3), rotation(4), log_scale(3), color_sh, opacity_sh, lc_weight]`,
/// then the model globals (`sigma, beta` for EXP, `sigma` for LC) and
/// finally the background weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub elements: usize,
    pub color_len: usize,
    pub opacity_len: usize,
    pub kind: WeightKind,
}

impl ParamLayout {
    pub const POSITION: usize = 0;
    pub const ROTATION: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const COLOR: usize = 10;

    pub fn opacity_offset(&self) -> usize {
        Self::COLOR + self.color_len
    }

    pub fn lc_offset(&self) -> usize {
        self.opacity_offset() + self.opacity_len
    }

    pub fn stride(&self) -> usize {
        self.lc_offset() + 1
    }

    pub fn globals(&self) -> usize {
        self.kind.global_count() + 1
    }

    pub fn globals_offset(&self) -> usize {
        self.elements * self.stride()
    }

    pub fn total(&self) -> usize {
        self.globals_offset() + self.globals()
    }

    pub fn sigma_index(&self) -> Option<usize> {
        (self.kind != WeightKind::Dir).then(|| self.globals_offset())
    }

    pub fn beta_index(&self) -> Option<usize> {
        (self.kind == WeightKind::Exp).then(|| self.globals_offset() + 1)
    }

    pub fn background_index(&self) -> usize {
        self.total() - 1
    }

    pub fn slot(&self, index: usize) -> ParamSlot {
        assert!(index < self.total(), "parameter index {index} out of range");
        let g = self.globals_offset();
        if index >= g {
            return match (self.kind, index - g) {
                (_, k) if k + 1 == self.globals() => ParamSlot::Global(GlobalField::BackgroundWeight),
                (_, 0) => ParamSlot::Global(GlobalField::Sigma),
                _ => ParamSlot::Global(GlobalField::Beta),
            };
        }
        let element = index / self.stride();
        let local = index % self.stride();
        let (field, component) = if local < Self::ROTATION {
            (ElementField::Position, local)
        } else if local < Self::LOG_SCALE {
            (ElementField::Rotation, local - Self::ROTATION)
        } else if local < Self::COLOR {
            (ElementField::LogScale, local - Self::LOG_SCALE)
        } else if local < self.opacity_offset() {
            (ElementField::ColorSh, local - Self::COLOR)
        } else if local < self.lc_offset() {
            (ElementField::OpacitySh, local - self.opacity_offset())
        } else {
            (ElementField::LcWeight, 0)
        };
        ParamSlot::Element {
            element,
            field,
            component,
        }
    }

    pub fn index(&self, slot: ParamSlot) -> usize {
        match slot {
            ParamSlot::Element {
                element,
                field,
                component,
            } => {
                let base = element * self.stride();
                base + match field {
                    ElementField::Position => Self::POSITION + component,
                    ElementField::Rotation => Self::ROTATION + component,
                    ElementField::LogScale => Self::LOG_SCALE + component,
                    ElementField::ColorSh => Self::COLOR + component,
                    ElementField::OpacitySh => self.opacity_offset() + component,
                    ElementField::LcWeight => self.lc_offset(),
                }
            }
            ParamSlot::Global(GlobalField::Sigma) => self.globals_offset(),
            ParamSlot::Global(GlobalField::Beta) => self.globals_offset() + 1,
            ParamSlot::Global(GlobalField::BackgroundWeight) => self.background_index(),
        }
    }
}
