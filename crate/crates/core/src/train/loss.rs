use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrError};
use crate::metrics::{ssim, ssim_with_grad};
use crate::render::Image;

/// Mix of the L1 and D-SSIM terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.8, dssim: 0.2 }
    }
}

fn l1(rendered: &Image, target: &Image) -> Result<f64> {
    if !rendered.same_size(target) {
        return Err(WsrError::invalid(format!(
            "loss needs equal sizes, got {}x{} and {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    Ok(rendered.mean_abs_diff(target))
}

/// `0.8 * mean|r - s| + 0.2 * (1 - SSIM(r, s))`.
pub fn loss(rendered: &Image, target: &Image) -> Result<f64> {
    loss_with(rendered, target, &LossWeights::default())
}

pub fn loss_with(rendered: &Image, target: &Image, weights: &LossWeights) -> Result<f64> {
    let mut total = weights.l1 * l1(rendered, target)?;
    if weights.dssim != 0.0 {
        total += weights.dssim * (1.0 - ssim(rendered, target)?);
    }
    Ok(total)
}

/// Loss and its gradient with respect to every value of `rendered`.
pub fn loss_and_grad(rendered: &Image, target: &Image, weights: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let l = l1(rendered, target)?;
    let n = rendered.pixels.len() as f64;
    let mut grad: Vec<f64> = rendered
        .pixels
        .iter()
        .zip(&target.pixels)
        .map(|(r, s)| {
            let d = r - s;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            weights.l1 * sign / n
        })
        .collect();
    let mut total = weights.l1 * l;
    if weights.dssim != 0.0 {
        let (s, g) = ssim_with_grad(rendered, target)?;
        total += weights.dssim * (1.0 - s);
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc -= weights.dssim * v;
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{SSIM_C1, SSIM_C2};

    #[test]
    fn identical_images_have_zero_loss() {
        let a = Image::filled(12, 12, [0.3, 0.5, 0.7]);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_pair() {
        // Constant images: variances and covariance vanish, so SSIM reduces
        // to the luminance term.
        let a = Image::filled(16, 16, [0.4; 3]);
        let b = Image::filled(16, 16, [0.5; 3]);
        let s = ((2.0 * 0.4 * 0.5 + SSIM_C1) * SSIM_C2) / ((0.16 + 0.25 + SSIM_C1) * SSIM_C2);
        let want = 0.8 * 0.1 + 0.2 * (1.0 - s);
        assert!((loss(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white() {
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(16, 16, [1.0; 3]);
        let s = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((loss(&a, &b).unwrap() - (0.8 + 0.2 * (1.0 - s))).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(loss(&Image::new(12, 12), &Image::new(12, 13)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut a = Image::new(12, 12);
        let mut b = Image::new(12, 12);
        for (i, v) in a.pixels.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64) / 101.0;
        }
        for (i, v) in b.pixels.iter_mut().enumerate() {
            *v = ((i * 53 % 97) as f64) / 97.0 + 0.003;
        }
        let w = LossWeights::default();
        let (l, g) = loss_and_grad(&a, &b, &w).unwrap();
        assert!((l - loss(&a, &b).unwrap()).abs() < 1e-15);
        let h = 1e-7;
        for idx in [0usize, 13, 200, 431] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.pixels[idx] += h;
            m.pixels[idx] -= h;
            let fd = (loss(&p, &b).unwrap() - loss(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7, "{idx}");
        }
    }
}
