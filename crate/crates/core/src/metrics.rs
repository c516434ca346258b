//! Image-quality metrics and the temporal popping analyzer.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Result, WsrError};
use crate::math::accum::CompensatedSum;
use crate::render::{render_sorted_reference, render_wsr, Image, RenderOptions};
use crate::scene::Scene;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(WsrError::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let mut sum = CompensatedSum::default();
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        sum.add((x - y) * (x - y));
    }
    Ok(sum.value() / a.pixels.len().max(1) as f64)
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode correlation with the SSIM window.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * row[x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(grad: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let g = grad[y * ow + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * ow + x] += win[k] * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let g = tmp[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += win[k] * g;
            }
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.pixels.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM of one channel, and optionally its gradient with respect to
/// `x`.
fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let win = gaussian_window();
    // Second moments of mean-centered planes lose fewer digits to
    // cancellation; variance and covariance are shift invariant.
    let center = |v: &[f64]| {
        let mut sum = CompensatedSum::default();
        v.iter().for_each(|&a| sum.add(a));
        let c = sum.value() / v.len() as f64;
        v.iter().map(|a| a - c).collect::<Vec<f64>>()
    };
    let (xs, ys) = (center(x), center(y));
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &win);
    let mu_y = filter_valid(y, w, h, &win);
    let mu_xs = filter_valid(&xs, w, h, &win);
    let mu_ys = filter_valid(&ys, w, h, &win);
    let e_xx = filter_valid(&xx, w, h, &win);
    let e_yy = filter_valid(&yy, w, h, &win);
    let e_xy = filter_valid(&xy, w, h, &win);
    let n = mu_x.len();
    let inv_n = 1.0 / n as f64;
    let mut total = CompensatedSum::default();
    let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let (sx, sy) = (mu_xs[i], mu_ys[i]);
        let var_x = e_xx[i] - sx * sx;
        let var_y = e_yy[i] - sy * sy;
        let cov = e_xy[i] - sx * sy;
        let n1 = 2.0 * mx * my + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = mx * mx + my * my + SSIM_C1;
        let d2 = var_x + var_y + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        total.add(s);
        if want_grad {
            let ds_dvar = -s / d2;
            let ds_dcov = 2.0 * s / n2;
            let ds_dmu = s * (2.0 * my / n1 - 2.0 * mx / d1) + ds_dvar * (-2.0 * sx) + ds_dcov * (-sy);
            g_mu[i] = ds_dmu * inv_n;
            g_xx[i] = ds_dvar * inv_n;
            g_xy[i] = ds_dcov * inv_n;
        }
    }
    let grad = want_grad.then(|| {
        let a = filter_valid_adjoint(&g_mu, w, h, &win);
        let b = filter_valid_adjoint(&g_xx, w, h, &win);
        let c = filter_valid_adjoint(&g_xy, w, h, &win);
        (0..w * h).map(|p| a[p] + 2.0 * xs[p] * b[p] + ys[p] * c[p]).collect()
    });
    (total.value() * inv_n, grad)
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if (a.width as usize) < SSIM_WINDOW || (a.height as usize) < SSIM_WINDOW {
        return Err(WsrError::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    check_ssim_size(a)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let sum: f64 = (0..3)
        .map(|ch| ssim_plane(&channel_plane(a, ch), &channel_plane(b, ch), w, h, false).0)
        .sum();
    Ok(sum / 3.0)
}

/// SSIM and its gradient with respect to every value of `a` (interleaved
/// RGB, same layout as `Image::pixels`).
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_same_size(a, b)?;
    check_ssim_size(a)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let mut grad = vec![0.0; a.pixels.len()];
    let mut sum = 0.0;
    for ch in 0..3 {
        let (s, g) = ssim_plane(&channel_plane(a, ch), &channel_plane(b, ch), w, h, true);
        sum += s;
        for (p, v) in g.expect("gradient requested").into_iter().enumerate() {
            grad[3 * p + ch] = v / 3.0;
        }
    }
    Ok((sum / 3.0, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RendererKind {
    Wsr,
    Sorted,
}

impl std::str::FromStr for RendererKind {
    type Err = WsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsr" => Ok(Self::Wsr),
            "sorted" => Ok(Self::Sorted),
            other => Err(WsrError::invalid(format!("unknown renderer `{other}`"))),
        }
    }
}

pub fn render_with(kind: RendererKind, scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    match kind {
        RendererKind::Wsr => render_wsr(scene, cam, opts),
        RendererKind::Sorted => render_sorted_reference(scene, cam, opts),
    }
}

/// Frame-to-frame change along a camera path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoppingReport {
    pub renderer: RendererKind,
    /// Max absolute pixel change between frames `i` and `i + 1`.
    pub deltas: Vec<f64>,
    pub max_delta: f64,
    pub max_index: usize,
}

impl PoppingReport {
    pub fn median_delta(&self) -> f64 {
        median(&self.deltas)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn popping_metric(
    scene: &Scene,
    path: &[Camera],
    renderer: RendererKind,
    opts: &RenderOptions,
) -> Result<PoppingReport> {
    if path.len() < 2 {
        return Err(WsrError::invalid("popping analysis needs at least two cameras"));
    }
    let frames = path
        .iter()
        .map(|cam| render_with(renderer, scene, cam, opts))
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = frames.windows(2).map(|w| w[0].max_abs_diff(&w[1])).collect();
    let (max_index, max_delta) = deltas
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    Ok(PoppingReport {
        renderer,
        deltas,
        max_delta,
        max_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::from_pixels(w, h, px).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(4, 4, [0.5; 3]);
        let c = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        let d = random_image(8, 8, 2);
        let mut m = 0.0;
        for (x, y) in a.pixels.iter().zip(&d.pixels) {
            m += (x - y).powi(2);
        }
        m /= a.pixels.len() as f64;
        let want = -10.0 * m.log10();
        assert!((psnr(&a, &d).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &d).unwrap(), psnr(&d, &a).unwrap());
        assert!(psnr(&a, &Image::new(4, 4)).is_err());
    }

    /// Direct windowed SSIM without separable filtering.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width as usize, a.height as usize);
        let mut win2 = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in win2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let di = i as f64 - 5.0;
                let dj = j as f64 - 5.0;
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..3 {
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = win2[i][j] / s;
                            let p = a.get((x0 + j) as u32, (y0 + i) as u32)[ch];
                            let q = b.get((x0 + j) as u32, (y0 + i) as u32)[ch];
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(20, 16, 3);
        let b = random_image(20, 16, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((ab - ssim_direct(&a, &b)).abs() < 1e-12);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    #[test]
    fn ssim_negative_image() {
        let a = random_image(16, 16, 5);
        let mut neg = a.clone();
        for v in &mut neg.pixels {
            *v = 1.0 - *v;
        }
        let got = ssim(&a, &neg).unwrap();
        assert!((got - ssim_direct(&a, &neg)).abs() < 1e-12);
        assert!(got < 0.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (p, q) = (0.3, 0.7);
        let a = Image::filled(12, 12, [p; 3]);
        let b = Image::filled(12, 12, [q; 3]);
        let want = (2.0 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        // black vs white
        let k = Image::filled(16, 16, [0.0; 3]);
        let wh = Image::filled(16, 16, [1.0; 3]);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&k, &wh).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(14, 13, 6);
        let b = random_image(14, 13, 7);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 40, 77, 200, 301, 545] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.pixels[idx] += h;
            m.pixels[idx] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
