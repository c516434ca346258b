//! Two-pass analytic gradients of the WSR image loss.

use rayon::prelude::*;

use crate::camera::{project_vjp, Camera, ProjectionGrad};
use crate::error::{Result, WsrError};
use crate::math::sh::basis_jacobian;
use crate::render::{render_wsr_sums, splats_in_rows, Image, PixelQuotient, PreparedSplat, RenderOptions, ROW_BLOCK};
use crate::scene::{ParamLayout, Scene, WeightKind};
use crate::train::loss::{loss_and_grad, LossWeights};

/// One gradient per trainable scalar, in [`ParamLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.total()],
        }
    }

    pub fn element(&self, i: usize) -> &[f64] {
        let s = self.layout.stride();
        &self.values[i * s..(i + 1) * s]
    }

    fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(WsrError::NonFinite {
                slot: self.layout.slot(i).to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Screen-space statistics of one view, per element.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenStats {
    /// Norm of the loss gradient w.r.t. the projected mean, in normalized
    /// device coordinates.
    pub mean2d_grad: Vec<f64>,
    pub visible: Vec<bool>,
    /// Projected radius in pixels (zero when not visible).
    pub radius: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub screen: ScreenStats,
    pub image: Image,
}

/// Per-splat sums collected over pixels.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    opacity: f64,
    mean2d: [f64; 2],
    conic: [f64; 3],
    /// Derivative w.r.t. the raw weight (DIR/LC) or minus the exponent (EXP).
    weight: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..3 {
            self.color[k] += o.color[k];
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        self.weight += o.weight;
    }
}

struct BlockGrad {
    splats: Vec<(usize, SplatGrad)>,
    background: f64,
}

fn pixel_upstream(q: &PixelQuotient, dl: &[f64]) -> Option<[f64; 3]> {
    if q.degenerate {
        return None;
    }
    let mut g = [0.0; 3];
    let mut any = false;
    for ch in 0..3 {
        let v = q.rgb[ch];
        if v > 0.0 && v < 1.0 {
            g[ch] = dl[ch];
            any |= g[ch] != 0.0;
        }
    }
    any.then_some(g)
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    splats: &[PreparedSplat],
    kind: WeightKind,
    bg_rgb: [f64; 3],
    cam: &Camera,
    opts: &RenderOptions,
    sums: &[PixelQuotient],
    dl: &[f64],
    y0: u32,
) -> BlockGrad {
    let y1 = (y0 + ROW_BLOCK - 1).min(cam.height - 1);
    let local = splats_in_rows(splats, y0, y1);
    let mut acc = vec![SplatGrad::default(); local.len()];
    let mut background = 0.0;
    for y in y0..=y1 {
        for x in 0..cam.width {
            let p = (y * cam.width + x) as usize;
            let q = &sums[p];
            let Some(g_r) = pixel_upstream(q, &dl[3 * p..3 * p + 3]) else {
                continue;
            };
            let r = q.rgb;
            let inv_den = 1.0 / q.denominator;
            background += (0..3).map(|ch| g_r[ch] * (bg_rgb[ch] - r[ch])).sum::<f64>() * q.log_scale.exp() * inv_den;
            for (s, a) in local.iter().zip(acc.iter_mut()) {
                if !s.covers(x, y) {
                    continue;
                }
                let (g, [dx, dy]) = s.falloff(x, y);
                if g < opts.alpha_floor {
                    continue;
                }
                let alpha = s.opacity * g;
                // w / D in the quotient frame
                let wfrac = match kind {
                    WeightKind::Exp => (q.log_scale - s.exponent).exp() * inv_den,
                    _ => s.weight * inv_den,
                };
                let omega = alpha * wfrac;
                let mut sdot = 0.0;
                for ch in 0..3 {
                    if s.color_raw[ch] > 0.0 {
                        a.color[ch] += g_r[ch] * omega;
                    }
                    sdot += g_r[ch] * (s.color[ch] - r[ch]);
                }
                let d_alpha = sdot * wfrac;
                a.opacity += d_alpha * g;
                let d_g = d_alpha * s.opacity * g;
                let [ca, cb, cc] = s.proj.conic;
                a.mean2d[0] += d_g * (ca * dx + cb * dy);
                a.mean2d[1] += d_g * (cb * dx + cc * dy);
                a.conic[0] += -0.5 * d_g * dx * dx;
                a.conic[1] += -d_g * dx * dy;
                a.conic[2] += -0.5 * d_g * dy * dy;
                a.weight += match kind {
                    WeightKind::Exp => sdot * omega,
                    _ => sdot * alpha * inv_den,
                };
            }
        }
    }
    let splats = local
        .iter()
        .zip(acc)
        .map(|(s, a)| (s.index, a))
        .collect();
    BlockGrad { splats, background }
}

/// Loss of the WSR render against `target` and its gradient with respect
/// to every trainable parameter.
pub fn backward_wsr(
    scene: &Scene,
    cam: &Camera,
    target: &Image,
    opts: &RenderOptions,
    weights: &LossWeights,
) -> Result<BackwardOutput> {
    scene.validate()?;
    cam.validate(1e-6)?;
    opts.validate()?;
    if target.width != cam.width || target.height != cam.height {
        return Err(WsrError::invalid(format!(
            "target is {}x{} but the camera renders {}x{}",
            target.width, target.height, cam.width, cam.height
        )));
    }
    let (splats, image, _, sums) = render_wsr_sums(scene, cam, opts);
    let (loss, dl) = loss_and_grad(&image, target, weights)?;

    let model = scene.weight_model;
    let kind = model.kind;
    let blocks: Vec<u32> = (0..cam.height).step_by(ROW_BLOCK as usize).collect();
    let partials: Vec<BlockGrad> = blocks
        .par_iter()
        .map(|&y0| block_backward(&splats, kind, scene.background_color, cam, opts, &sums, &dl, y0))
        .collect();

    let n = scene.len();
    let mut per_element = vec![SplatGrad::default(); n];
    let mut g_background = 0.0;
    for block in &partials {
        for (i, g) in &block.splats {
            per_element[*i].add(g);
        }
        g_background += block.background;
    }

    let layout = scene.layout();
    let mut grads = Gradients::zeros(layout);
    let stride = layout.stride();
    let mut screen = ScreenStats {
        mean2d_grad: vec![0.0; n],
        visible: vec![false; n],
        radius: vec![0.0; n],
    };
    let (mut g_sigma, mut g_beta) = (0.0, 0.0);
    let basis_degree = scene.sh_degree_color.max(scene.sh_degree_opacity);
    for s in &splats {
        let i = s.index;
        let e = &scene.elements[i];
        let a = &per_element[i];
        screen.visible[i] = true;
        screen.radius[i] = s.proj.radius;
        screen.mean2d_grad[i] = (a.mean2d[0] * 0.5 * cam.width as f64).hypot(a.mean2d[1] * 0.5 * cam.height as f64);

        let out = &mut grads.values[i * stride..(i + 1) * stride];
        let cpc = e.color_sh.per_channel();
        let mut g_basis = [0.0; 16];
        for ch in 0..3 {
            let coeffs = e.color_sh.channel(ch);
            for k in 0..cpc {
                out[ParamLayout::COLOR + ch * cpc + k] = a.color[ch] * s.basis[k];
                g_basis[k] += a.color[ch] * coeffs[k];
            }
        }
        let opc = layout.opacity_offset();
        for (k, &h) in e.opacity_sh.values().iter().enumerate() {
            out[opc + k] = a.opacity * s.basis[k];
            g_basis[k] += a.opacity * h;
        }

        let z = s.proj.depth;
        let mut g_depth = 0.0;
        match kind {
            WeightKind::Dir => {}
            WeightKind::Exp => {
                // a.weight is dL/d(ln w) with ln w = -sigma z^beta
                let zb = z.powf(model.beta);
                g_sigma -= a.weight * zb;
                g_beta -= a.weight * model.sigma * zb * z.ln();
                g_depth -= a.weight * model.sigma * model.beta * zb / z;
            }
            WeightKind::Lc => {
                let falloff = (1.0 - z / model.sigma).max(0.0);
                out[layout.lc_offset()] = a.weight * falloff;
                if falloff > 0.0 {
                    g_sigma += a.weight * e.lc_weight * z / (model.sigma * model.sigma);
                    g_depth -= a.weight * e.lc_weight / model.sigma;
                }
            }
        }

        let (g_p, g_q, g_ls) = project_vjp(
            cam,
            e,
            &ProjectionGrad {
                mean2d: a.mean2d,
                conic: a.conic,
                depth: g_depth,
            },
        );

        // view direction d = (p - c) / |p - c|
        let mut jac = [[0.0; 3]; 16];
        basis_jacobian(basis_degree, s.dir, &mut jac);
        let mut g_dir = [0.0; 3];
        for (gb, row) in g_basis.iter().zip(&jac) {
            for k in 0..3 {
                g_dir[k] += gb * row[k];
            }
        }
        let proj_len = g_dir[0] * s.dir[0] + g_dir[1] * s.dir[1] + g_dir[2] * s.dir[2];
        for k in 0..3 {
            out[ParamLayout::POSITION + k] = g_p[k] + (g_dir[k] - s.dir[k] * proj_len) / s.dist;
            out[ParamLayout::LOG_SCALE + k] = g_ls[k];
        }
        out[ParamLayout::ROTATION..ParamLayout::ROTATION + 4].copy_from_slice(&g_q);
    }
    if let Some(i) = layout.sigma_index() {
        grads.values[i] = g_sigma;
    }
    if let Some(i) = layout.beta_index() {
        grads.values[i] = g_beta;
    }
    grads.values[layout.background_index()] = g_background;
    grads.check_finite()?;
    Ok(BackwardOutput {
        loss,
        grads,
        screen,
        image,
    })
}
