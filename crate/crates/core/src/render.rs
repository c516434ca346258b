//! Forward rendering: sort-free weighted sums and the sorted alpha-blend
//! reference.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project_gaussian_with, Camera, SplatProjection, DEFAULT_EXTENT_SIGMAS};
use crate::error::{Result, WsrError};
use crate::math::accum::{CompensatedSum, Quotient, StableAccumulator, WeightedSum};
use crate::math::sh::{basis_into, eval_color_unclamped, eval_scalar};
use crate::scene::{Scene, WeightKind, WeightModel};

/// Row-major RGB image with channels nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// `3 * width * height` values.
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(3 * n);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(WsrError::invalid(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                3 * width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_size(other), "image sizes differ");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_size(other), "image sizes differ");
        let mut sum = CompensatedSum::default();
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            sum.add((a - b).abs());
        }
        sum.value() / self.pixels.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub precision: Precision,
    /// A splat is skipped at a pixel where its falloff is below this
    /// fraction of its peak.
    pub alpha_floor: f64,
    /// Footprint half-extent in standard deviations.
    pub extent_sigmas: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            alpha_floor: 1.0 / 255.0,
            extent_sigmas: DEFAULT_EXTENT_SIGMAS,
        }
    }
}

impl RenderOptions {
    /// No footprint truncation: every splat contributes to every pixel.
    /// The rendered image is then a smooth function of the parameters.
    pub fn exact() -> Self {
        Self {
            alpha_floor: 0.0,
            extent_sigmas: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_floor >= 0.0) || !(self.extent_sigmas > 0.0) {
            return Err(WsrError::invalid(format!(
                "render options need alpha_floor >= 0 and extent_sigmas > 0, got {} / {}",
                self.alpha_floor, self.extent_sigmas
            )));
        }
        Ok(())
    }
}

/// Per-splat weight `w(d)`; `v` is the element's LC multiplier.
pub fn weight_eval(model: &WeightModel, d: f64, v: f64) -> Result<f64> {
    match model.kind {
        WeightKind::Dir => Ok(1.0),
        WeightKind::Exp => {
            if !(d > 0.0) {
                return Err(WsrError::invalid(format!("EXP weight needs depth > 0, got {d}")));
            }
            Ok((-exp_exponent(model, d)).exp())
        }
        WeightKind::Lc => Ok(lc_falloff(model, d) * v),
    }
}

#[inline]
pub(crate) fn exp_exponent(model: &WeightModel, d: f64) -> f64 {
    model.sigma * d.powf(model.beta)
}

#[inline]
pub(crate) fn lc_falloff(model: &WeightModel, d: f64) -> f64 {
    (1.0 - d / model.sigma).max(0.0)
}

/// Everything about a visible splat that is constant across pixels.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    pub index: usize,
    pub proj: SplatProjection,
    /// Unit direction from the camera center to the splat.
    pub dir: [f64; 3],
    pub dist: f64,
    pub basis: [f64; 16],
    /// Color before the clamp at zero.
    pub color_raw: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    /// DIR/LC weight; unused for EXP.
    pub weight: f64,
    /// EXP exponent `sigma d^beta`; zero otherwise.
    pub exponent: f64,
    pub x_range: (u32, u32),
    pub y_range: (u32, u32),
}

impl PreparedSplat {
    #[inline]
    pub fn covers(&self, x: u32, y: u32) -> bool {
        x >= self.x_range.0 && x <= self.x_range.1 && y >= self.y_range.0 && y <= self.y_range.1
    }

    /// Falloff at pixel `(x, y)` and the pixel offset from the mean.
    #[inline]
    pub fn falloff(&self, x: u32, y: u32) -> (f64, [f64; 2]) {
        let dx = x as f64 + 0.5 - self.proj.mean2d[0];
        let dy = y as f64 + 0.5 - self.proj.mean2d[1];
        let [a, b, c] = self.proj.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        (power.exp(), [dx, dy])
    }
}

fn pixel_range(center: f64, radius: f64, size: u32) -> Option<(u32, u32)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(size as f64 - 1.0);
    (lo <= hi).then_some((lo as u32, hi as u32))
}

/// Projects and shades the visible splats, in scene order. No sorting.
pub(crate) fn prepare_splats(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Vec<PreparedSplat> {
    let center = cam.center();
    let model = scene.weight_model;
    scene
        .elements
        .iter()
        .enumerate()
        .filter_map(|(index, e)| {
            let proj = project_gaussian_with(cam, e, opts.extent_sigmas);
            if !proj.visible {
                return None;
            }
            let x_range = pixel_range(proj.mean2d[0], proj.radius, cam.width)?;
            let y_range = pixel_range(proj.mean2d[1], proj.radius, cam.height)?;
            let v = [
                e.position[0] - center.x,
                e.position[1] - center.y,
                e.position[2] - center.z,
            ];
            let dist = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let dir = [v[0] / dist, v[1] / dist, v[2] / dist];
            let mut basis = [0.0; 16];
            basis_into(scene.sh_degree_color.max(scene.sh_degree_opacity), dir, &mut basis);
            let color_raw = eval_color_unclamped(&e.color_sh, &basis);
            let color = color_raw.map(|c| c.max(0.0));
            let opacity = eval_scalar(&e.opacity_sh, &basis);
            let (weight, exponent) = match model.kind {
                WeightKind::Dir => (1.0, 0.0),
                WeightKind::Exp => (0.0, exp_exponent(&model, proj.depth)),
                WeightKind::Lc => (lc_falloff(&model, proj.depth) * e.lc_weight, 0.0),
            };
            Some(PreparedSplat {
                index,
                proj,
                dir,
                dist,
                basis,
                color_raw,
                color,
                opacity,
                weight,
                exponent,
                x_range,
                y_range,
            })
        })
        .collect()
}

/// Per-render diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub visible_splats: usize,
    pub contributions: usize,
    /// Pixels whose WSR denominator was not positive (background used).
    pub degenerate_pixels: usize,
}

/// Rows rendered per parallel task. Fixed so results do not depend on the
/// worker count.
pub(crate) const ROW_BLOCK: u32 = 8;

pub(crate) fn splats_in_rows(splats: &[PreparedSplat], y0: u32, y1: u32) -> Vec<&PreparedSplat> {
    splats
        .iter()
        .filter(|s| s.y_range.0 <= y1 && s.y_range.1 >= y0)
        .collect()
}

#[derive(Clone, Copy)]
struct RasterSplat<T> {
    mean: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    opacity: T,
    weight: T,
    exponent: T,
}

impl<T: Float> RasterSplat<T> {
    fn from_prepared(s: &PreparedSplat) -> Self {
        let c = |v: f64| T::from(v).expect("finite cast");
        Self {
            mean: s.proj.mean2d.map(c),
            conic: s.proj.conic.map(c),
            color: s.color.map(c),
            opacity: c(s.opacity),
            weight: c(s.weight),
            exponent: c(s.exponent),
        }
    }
}

/// One pixel's WSR result before clamping.
pub(crate) type PixelQuotient = Quotient<f64>;

fn wsr_pixel<T: Float>(
    splats: &[(&PreparedSplat, RasterSplat<T>)],
    kind: WeightKind,
    x: u32,
    y: u32,
    alpha_floor: T,
    bg: [T; 3],
    bg_w: T,
    contributions: &mut usize,
) -> Quotient<T> {
    let half = T::from(0.5).unwrap();
    let px = T::from(x).unwrap() + half;
    let py = T::from(y).unwrap() + half;
    let mut stable = StableAccumulator::<T>::new();
    let mut plain = WeightedSum::<T>::default();
    for (meta, s) in splats {
        if !meta.covers(x, y) {
            continue;
        }
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let power = -half * (s.conic[0] * dx * dx + (s.conic[1] + s.conic[1]) * dx * dy + s.conic[2] * dy * dy);
        let g = power.exp();
        if g < alpha_floor {
            continue;
        }
        let alpha = s.opacity * g;
        *contributions += 1;
        match kind {
            WeightKind::Exp => {
                stable.add(s.exponent, s.color, alpha);
            }
            WeightKind::Dir | WeightKind::Lc => plain.add(s.color, alpha * s.weight),
        }
    }
    match kind {
        WeightKind::Exp => stable.quotient(bg, bg_w),
        _ => plain.quotient(bg, bg_w),
    }
}

fn render_wsr_typed<T: Float + Send + Sync>(
    scene: &Scene,
    cam: &Camera,
    splats: &[PreparedSplat],
    opts: &RenderOptions,
) -> (Image, RenderStats, Vec<PixelQuotient>) {
    let c = |v: f64| T::from(v).unwrap();
    let kind = scene.weight_model.kind;
    let bg = scene.background_color.map(c);
    let bg_w = c(scene.background_weight);
    let floor = c(opts.alpha_floor);
    let width = cam.width as usize;
    let blocks: Vec<u32> = (0..cam.height).step_by(ROW_BLOCK as usize).collect();
    let results: Vec<(Vec<PixelQuotient>, usize)> = blocks
        .par_iter()
        .map(|&y0| {
            let y1 = (y0 + ROW_BLOCK - 1).min(cam.height - 1);
            let local: Vec<(&PreparedSplat, RasterSplat<T>)> = splats_in_rows(splats, y0, y1)
                .into_iter()
                .map(|s| (s, RasterSplat::from_prepared(s)))
                .collect();
            let mut out = Vec::with_capacity(width * (y1 - y0 + 1) as usize);
            let mut contributions = 0;
            for y in y0..=y1 {
                for x in 0..cam.width {
                    let q = wsr_pixel(&local, kind, x, y, floor, bg, bg_w, &mut contributions);
                    out.push(Quotient {
                        rgb: q.rgb.map(|v| v.to_f64().unwrap()),
                        denominator: q.denominator.to_f64().unwrap(),
                        log_scale: q.log_scale.to_f64().unwrap(),
                        degenerate: q.degenerate,
                    });
                }
            }
            (out, contributions)
        })
        .collect();

    let mut stats = RenderStats {
        visible_splats: splats.len(),
        ..RenderStats::default()
    };
    let mut quotients = Vec::with_capacity(cam.pixel_count());
    for (block, contributions) in results {
        stats.contributions += contributions;
        quotients.extend(block);
    }
    let mut image = Image::new(cam.width, cam.height);
    for (i, q) in quotients.iter().enumerate() {
        if q.degenerate {
            stats.degenerate_pixels += 1;
        }
        for ch in 0..3 {
            image.pixels[3 * i + ch] = clamp01(q.rgb[ch]);
        }
    }
    (image, stats, quotients)
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn check_inputs(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<()> {
    scene.validate()?;
    cam.validate(1e-6)?;
    opts.validate()
}

/// Sort-free weighted-sum rendering.
pub fn render_wsr(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    render_wsr_with_stats(scene, cam, opts).map(|(img, _)| img)
}

pub fn render_wsr_with_stats(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<(Image, RenderStats)> {
    check_inputs(scene, cam, opts)?;
    let splats = prepare_splats(scene, cam, opts);
    let (img, stats, _) = match opts.precision {
        Precision::F32 => render_wsr_typed::<f32>(scene, cam, &splats, opts),
        Precision::F64 => render_wsr_typed::<f64>(scene, cam, &splats, opts),
    };
    Ok((img, stats))
}

/// f64 forward pass that also returns the per-pixel sums needed by the
/// backward pass.
pub(crate) fn render_wsr_sums(
    scene: &Scene,
    cam: &Camera,
    opts: &RenderOptions,
) -> (Vec<PreparedSplat>, Image, RenderStats, Vec<PixelQuotient>) {
    let splats = prepare_splats(scene, cam, opts);
    let (img, stats, sums) = render_wsr_typed::<f64>(scene, cam, &splats, opts);
    (splats, img, stats, sums)
}

/// Precomputation, rasterization, and optional sort timings of one render.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub project_s: f64,
    pub sort_s: Option<f64>,
    pub rasterize_s: f64,
}

/// WSR render reporting per-stage wall time.
pub fn render_wsr_timed(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<(Image, StageTimings)> {
    check_inputs(scene, cam, opts)?;
    let t0 = std::time::Instant::now();
    let splats = prepare_splats(scene, cam, opts);
    let t1 = std::time::Instant::now();
    let (img, _, _) = match opts.precision {
        Precision::F32 => render_wsr_typed::<f32>(scene, cam, &splats, opts),
        Precision::F64 => render_wsr_typed::<f64>(scene, cam, &splats, opts),
    };
    let t2 = std::time::Instant::now();
    Ok((
        img,
        StageTimings {
            project_s: (t1 - t0).as_secs_f64(),
            sort_s: None,
            rasterize_s: (t2 - t1).as_secs_f64(),
        },
    ))
}

static DEPTH_ORDER_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of times [`depth_order`] has run in this process.
pub fn depth_order_calls() -> usize {
    DEPTH_ORDER_CALLS.load(Ordering::SeqCst)
}

/// Visible element indices, stably sorted by ascending center depth.
pub fn depth_order(scene: &Scene, cam: &Camera) -> Vec<usize> {
    let opts = RenderOptions::default();
    let splats = prepare_splats(scene, cam, &opts);
    order_prepared(&splats).into_iter().map(|i| splats[i].index).collect()
}

fn order_prepared(splats: &[PreparedSplat]) -> Vec<usize> {
    DEPTH_ORDER_CALLS.fetch_add(1, Ordering::SeqCst);
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].proj.depth.total_cmp(&splats[b].proj.depth));
    order
}

/// Upper bound on per-splat alpha in the sorted compositor.
pub const MAX_ALPHA: f64 = 0.99;
/// Front-to-back compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Front-to-back alpha blending over depth-sorted splats.
pub fn render_sorted_reference(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    render_sorted_timed(scene, cam, opts).map(|(img, _)| img)
}

pub fn render_sorted_timed(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<(Image, StageTimings)> {
    check_inputs(scene, cam, opts)?;
    let t0 = std::time::Instant::now();
    let splats = prepare_splats(scene, cam, opts);
    let t1 = std::time::Instant::now();
    let order = order_prepared(&splats);
    let sorted: Vec<PreparedSplat> = order.into_iter().map(|i| splats[i].clone()).collect();
    let t2 = std::time::Instant::now();
    let bg = scene.background_color;
    let width = cam.width;
    let blocks: Vec<u32> = (0..cam.height).step_by(ROW_BLOCK as usize).collect();
    let rows: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&y0| {
            let y1 = (y0 + ROW_BLOCK - 1).min(cam.height - 1);
            let local = splats_in_rows(&sorted, y0, y1);
            let mut out = Vec::with_capacity(3 * (width * (y1 - y0 + 1)) as usize);
            for y in y0..=y1 {
                for x in 0..width {
                    let mut t = 1.0;
                    let mut rgb = [0.0; 3];
                    for s in &local {
                        if !s.covers(x, y) {
                            continue;
                        }
                        let (g, _) = s.falloff(x, y);
                        if g < opts.alpha_floor {
                            continue;
                        }
                        let alpha = (s.opacity * g).clamp(0.0, MAX_ALPHA);
                        for ch in 0..3 {
                            rgb[ch] += s.color[ch] * alpha * t;
                        }
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        out.push(clamp01(rgb[ch] + t * bg[ch]));
                    }
                }
            }
            out
        })
        .collect();
    let t3 = std::time::Instant::now();
    let img = Image::from_pixels(cam.width, cam.height, rows.concat())?;
    Ok((
        img,
        StageTimings {
            project_s: (t1 - t0).as_secs_f64(),
            sort_s: Some((t2 - t1).as_secs_f64()),
            rasterize_s: (t3 - t2).as_secs_f64(),
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::camera::project_gaussian_with;
    use crate::math::sh::{sh_eval, ShCoeffs};
    use crate::scene::{scene_new_random, Aabb, GaussianElement, RandomInit, WeightModel};
    use nalgebra::{Matrix3, Vector3};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn axis_camera(w: u32, h: u32, f: f64) -> Camera {
        Camera::new(
            f,
            f,
            0.5 * w as f64,
            0.5 * h as f64,
            w,
            h,
            Matrix3::identity(),
            Vector3::zeros(),
            0.01,
            1000.0,
        )
        .unwrap()
    }

    pub(crate) fn splat(position: [f64; 3], scale: f64, rgb: [f64; 3], u: f64) -> GaussianElement {
        GaussianElement {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            color_sh: ShCoeffs::from_rgb(0, rgb),
            opacity_sh: ShCoeffs::constant(0, u),
            lc_weight: 1.0,
        }
    }

    fn scene_of(model: WeightModel, elements: Vec<GaussianElement>) -> Scene {
        let mut s = Scene::empty(model, 0, 0);
        s.elements = elements;
        s
    }

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn weight_eval_frozen_values() {
        let m = WeightModel::exp(0.1, 0.8);
        let table = [
            (0.5, 0.944_183_337_963_014_328_3),
            (1.0, 0.904_837_418_035_959_573_2),
            (2.0, 0.840_204_375_426_519_876_4),
            (3.0, 0.785_981_150_393_567_283_6),
            (5.0, 0.696_010_987_705_703_445_9),
            (10.0, 0.532_082_171_170_585_759_4),
        ];
        for (d, want) in table {
            assert!((weight_eval(&m, d, 0.0).unwrap() - want).abs() < 1e-12, "d={d}");
        }
        assert!(weight_eval(&m, 0.0, 1.0).is_err());
        assert!(weight_eval(&m, -1.0, 1.0).is_err());
        for d in [-3.0, 0.0, 0.7, 1e6] {
            assert_eq!(weight_eval(&WeightModel::dir(), d, 0.3).unwrap(), 1.0);
        }
        let lc = WeightModel::lc(10.0);
        assert_eq!(weight_eval(&lc, 10.0, 0.1).unwrap(), 0.0);
        assert_eq!(weight_eval(&lc, 25.0, 0.1).unwrap(), 0.0);
        assert!((weight_eval(&lc, 4.0, 0.1).unwrap() - 0.06).abs() < 1e-15);
    }

    #[test]
    fn empty_scene_renders_background() {
        let mut s = Scene::empty(WeightModel::initial(WeightKind::Exp), 0, 0);
        s.background_color = [0.2, 0.4, 0.9];
        let cam = axis_camera(9, 7, 10.0);
        for img in [
            render_wsr(&s, &cam, &RenderOptions::default()).unwrap(),
            render_sorted_reference(&s, &cam, &RenderOptions::default()).unwrap(),
        ] {
            for y in 0..7 {
                for x in 0..9 {
                    assert!(close(img.get(x, y), [0.2, 0.4, 0.9], 1e-15));
                }
            }
        }
    }

    #[test]
    fn dominant_splat_sets_pixel_color() {
        for kind in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
            let mut s = scene_of(WeightModel::initial(kind), vec![splat([0.0, 0.0, 2.0], 0.5, [0.1, 0.7, 0.3], 1e9)]);
            s.background_color = [1.0, 1.0, 1.0];
            let img = render_wsr(&s, &axis_camera(1, 1, 10.0), &RenderOptions::default()).unwrap();
            assert!(close(img.get(0, 0), [0.1, 0.7, 0.3], 1e-7), "{kind}");
        }
    }

    #[test]
    fn sorted_single_layer_and_two_layer_over() {
        let cam = axis_camera(1, 1, 10.0);
        let one = scene_of(WeightModel::dir(), vec![splat([0.0, 0.0, 3.0], 0.5, [1.0, 0.0, 0.0], 0.6)]);
        let img = render_sorted_reference(&one, &cam, &RenderOptions::default()).unwrap();
        assert!(close(img.get(0, 0), [0.6, 0.0, 0.0], 1e-12));

        // back element listed first to exercise the sort
        let two = scene_of(
            WeightModel::dir(),
            vec![
                splat([0.0, 0.0, 5.0], 0.5, [1.0, 0.0, 0.0], 1.0),
                splat([0.0, 0.0, 2.0], 0.5, [1.0, 1.0, 1.0], 0.5),
            ],
        );
        let img = render_sorted_reference(&two, &cam, &RenderOptions::default()).unwrap();
        // alpha 1.0 is clamped to 0.99 for the back layer
        let want = [0.5 + 0.5 * 0.99, 0.5, 0.5];
        assert!(close(img.get(0, 0), want, 1e-12), "{:?}", img.get(0, 0));
    }

    #[test]
    fn red_blue_overlap_depends_on_weight_model() {
        let red = splat([0.0, 0.0, 2.0], 0.4, [1.0, 0.0, 0.0], 0.8);
        let blue = splat([0.0, 0.0, 4.0], 0.8, [0.0, 0.0, 1.0], 0.8);
        let cam = axis_camera(1, 1, 10.0);
        let mut dir = scene_of(WeightModel::dir(), vec![red.clone(), blue.clone()]);
        dir.background_weight = 1e-3;
        let p = render_wsr(&dir, &cam, &RenderOptions::default()).unwrap().get(0, 0);
        assert!((p[0] - p[2]).abs() < 1e-9 && p[0] > 0.45, "DIR overlap should be purple: {p:?}");
        let mut lc = dir.clone();
        lc.weight_model = WeightModel::lc(5.0);
        let p = render_wsr(&lc, &cam, &RenderOptions::default()).unwrap().get(0, 0);
        assert!(p[0] > 2.5 * p[2], "LC overlap should be red-dominant: {p:?}");
    }

    /// Independent back-to-front OVER compositor.
    pub(crate) fn over_oracle(scene: &Scene, cam: &Camera) -> Image {
        let center = cam.center();
        let mut items: Vec<(f64, usize, crate::camera::SplatProjection, [f64; 3], f64)> = Vec::new();
        for (i, e) in scene.elements.iter().enumerate() {
            let p = project_gaussian_with(cam, e, f64::INFINITY);
            if !p.visible {
                continue;
            }
            let v = Vector3::from(e.position) - center;
            let dir = (v / v.norm()).into();
            let c = sh_eval(&e.color_sh, dir).unwrap();
            let u = sh_eval(&e.opacity_sh, dir).unwrap()[0];
            items.push((p.depth, i, p, [c[0], c[1], c[2]], u));
        }
        items.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        let mut img = Image::filled(cam.width, cam.height, scene.background_color);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut c = scene.background_color;
                for (_, _, p, col, u) in &items {
                    let dx = x as f64 + 0.5 - p.mean2d[0];
                    let dy = y as f64 + 0.5 - p.mean2d[1];
                    let inv = {
                        let [a, b, d] = p.cov2d;
                        let det = a * d - b * b;
                        [d / det, -b / det, a / det]
                    };
                    let g = (-0.5 * (inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy)).exp();
                    let a = (u * g).clamp(0.0, 0.99);
                    for ch in 0..3 {
                        c[ch] = a * col[ch] + (1.0 - a) * c[ch];
                    }
                }
                img.set(x, y, c.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        img
    }

    pub(crate) fn moderate_scene(seed: u64, n: usize) -> Scene {
        let init = RandomInit {
            weight: WeightKind::Dir,
            sh_degree_color: 1,
            sh_degree_opacity: 0,
            scale_fraction: 0.08,
            ..RandomInit::default()
        };
        let mut s = scene_new_random(n, Aabb::new([-1.0, -1.0, 3.0], [1.0, 1.0, 6.0]), seed, &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        for e in &mut s.elements {
            e.opacity_sh.values_mut()[0] = rng.random_range(0.05..0.4) / crate::math::sh::SH_C0;
            for v in &mut e.color_sh.values_mut().iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        s.background_color = [0.1, 0.2, 0.3];
        s
    }

    #[test]
    fn sorted_renderer_matches_back_to_front_oracle() {
        let cam = Camera::look_at([0.3, -0.2, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 24, 20).unwrap();
        for seed in 0..3 {
            let s = moderate_scene(seed, 50);
            let got = render_sorted_reference(&s, &cam, &RenderOptions::exact()).unwrap();
            let want = over_oracle(&s, &cam);
            assert!(got.max_abs_diff(&Image::filled(24, 20, s.background_color)) > 0.1);
            assert!(got.max_abs_diff(&want) < 1e-6, "seed {seed}: {}", got.max_abs_diff(&want));
        }
    }

    #[test]
    fn wsr_is_permutation_invariant() {
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 32, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
            let mut s = moderate_scene(4, 40);
            s.weight_model = WeightModel::initial(kind);
            for (prec, tol) in [(Precision::F64, 1e-10), (Precision::F32, 1e-4)] {
                let opts = RenderOptions {
                    precision: prec,
                    ..RenderOptions::default()
                };
                let base = render_wsr(&s, &cam, &opts).unwrap();
                let mut p = s.clone();
                p.elements.shuffle(&mut rng);
                let other = render_wsr(&p, &cam, &opts).unwrap();
                assert!(base.max_abs_diff(&other) < tol, "{kind} {prec:?}");
            }
        }
    }

    #[test]
    fn vanishing_opacity_gives_background() {
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 16, 16).unwrap();
        for kind in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
            let mut s = moderate_scene(5, 30);
            s.weight_model = WeightModel::initial(kind);
            for e in &mut s.elements {
                for v in e.opacity_sh.values_mut() {
                    *v *= 1e-8;
                }
            }
            let img = render_wsr(&s, &cam, &RenderOptions::default()).unwrap();
            let bg = Image::filled(16, 16, s.background_color);
            assert!(img.max_abs_diff(&bg) < 1e-5, "{kind}");
        }
    }

    #[test]
    fn scaling_alpha_and_background_weight_is_invisible() {
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 16, 16).unwrap();
        for kind in [WeightKind::Dir, WeightKind::Exp, WeightKind::Lc] {
            let mut s = moderate_scene(6, 30);
            s.weight_model = WeightModel::initial(kind);
            s.background_weight = 0.3;
            let base = render_wsr(&s, &cam, &RenderOptions::default()).unwrap();
            for k in [1e-3, 7.0, 1e4] {
                let mut t = s.clone();
                t.background_weight *= k;
                for e in &mut t.elements {
                    for v in e.opacity_sh.values_mut() {
                        *v *= k;
                    }
                }
                let img = render_wsr(&t, &cam, &RenderOptions::default()).unwrap();
                assert!(base.max_abs_diff(&img) < 1e-9, "{kind} k={k}");
            }
        }
    }

    #[test]
    fn negative_denominator_falls_back_to_background() {
        let mut s = scene_of(WeightModel::dir(), vec![splat([0.0, 0.0, 2.0], 0.5, [1.0, 0.0, 0.0], -3.0)]);
        s.background_color = [0.0, 1.0, 0.0];
        let (img, stats) = render_wsr_with_stats(&s, &axis_camera(1, 1, 10.0), &RenderOptions::default()).unwrap();
        assert_eq!(img.get(0, 0), [0.0, 1.0, 0.0]);
        assert_eq!(stats.degenerate_pixels, 1);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 40, 36).unwrap();
        let mut s = moderate_scene(7, 40);
        s.weight_model = WeightModel::initial(WeightKind::Exp);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| render_wsr(&s, &cam, &RenderOptions::default()).unwrap());
        let b = four.install(|| render_wsr(&s, &cam, &RenderOptions::default()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn depth_order_cases() {
        let cam = axis_camera(8, 8, 8.0);
        let at = |z: f64| splat([0.0, 0.0, z], 0.2, [0.5; 3], 0.5);
        let s = scene_of(WeightModel::dir(), vec![at(3.0), at(1.0), at(2.0)]);
        assert_eq!(depth_order(&s, &cam), vec![1, 2, 0]);
        let s = scene_of(WeightModel::dir(), vec![at(2.0), at(2.0), at(2.0)]);
        assert_eq!(depth_order(&s, &cam), vec![0, 1, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let depths: Vec<f64> = (0..10_000).map(|_| rng.random_range(1.0..50.0)).collect();
        let s = scene_of(WeightModel::dir(), depths.iter().map(|&z| at(z)).collect());
        let mut want: Vec<usize> = (0..depths.len()).collect();
        want.sort_by(|&a, &b| depths[a].partial_cmp(&depths[b]).unwrap());
        assert_eq!(depth_order(&s, &cam), want);
    }

    #[test]
    fn timed_renders_report_stages() {
        let s = moderate_scene(8, 10);
        let cam = Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 4.5], [0.0, -1.0, 0.0], 1.0, 16, 16).unwrap();
        let (a, t) = render_wsr_timed(&s, &cam, &RenderOptions::default()).unwrap();
        assert!(t.sort_s.is_none());
        assert_eq!(a, render_wsr(&s, &cam, &RenderOptions::default()).unwrap());
        let (_, t) = render_sorted_timed(&s, &cam, &RenderOptions::default()).unwrap();
        assert!(t.sort_s.is_some());
    }
}
