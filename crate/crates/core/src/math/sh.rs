//! Real spherical harmonics up to degree 3.
//!
//! Basis order is band-major (l = 0..=degree, m = -l..=l) with the
//! Condon-Shortley phase folded into the constants, the layout used by
//! 3DGS checkpoints.

use crate::error::{Result, WsrError};

pub const MAX_SH_DEGREE: u8 = 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to color SH before clamping (3DGS convention).
pub const COLOR_OFFSET: f64 = 0.5;

pub const fn coeffs_per_channel(degree: u8) -> usize {
    let d = degree as usize + 1;
    d * d
}

/// Spherical-harmonic coefficients for one or more channels, stored
/// channel-major: `values[ch * (degree + 1)^2 + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    degree: u8,
    channels: usize,
    values: Vec<f64>,
}

impl ShCoeffs {
    pub fn new(degree: u8, channels: usize, values: Vec<f64>) -> Result<Self> {
        check_degree(degree)?;
        if channels == 0 {
            return Err(WsrError::invalid("SH coefficients need at least one channel"));
        }
        let expected = channels * coeffs_per_channel(degree);
        if values.len() != expected {
            return Err(WsrError::invalid(format!(
                "expected {expected} SH values for degree {degree} x {channels} channels, got {}",
                values.len()
            )));
        }
        Ok(Self {
            degree,
            channels,
            values,
        })
    }

    pub fn zeros(degree: u8, channels: usize) -> Self {
        assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} out of range");
        Self {
            degree,
            channels,
            values: vec![0.0; channels * coeffs_per_channel(degree)],
        }
    }

    /// Degree-0 color coefficients producing `rgb` after the +0.5 offset.
    pub fn from_rgb(degree: u8, rgb: [f64; 3]) -> Self {
        let mut sh = Self::zeros(degree, 3);
        for (ch, &c) in rgb.iter().enumerate() {
            sh.channel_mut(ch)[0] = (c - COLOR_OFFSET) / SH_C0;
        }
        sh
    }

    /// Scalar coefficients whose evaluation is the constant `value`.
    pub fn constant(degree: u8, value: f64) -> Self {
        let mut sh = Self::zeros(degree, 1);
        sh.values[0] = value / SH_C0;
        sh
    }

    pub fn degree(&self) -> u8 {
        self.degree
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn per_channel(&self) -> usize {
        coeffs_per_channel(self.degree)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let k = self.per_channel();
        &self.values[ch * k..(ch + 1) * k]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let k = self.per_channel();
        &mut self.values[ch * k..(ch + 1) * k]
    }
}

fn check_degree(degree: u8) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(WsrError::invalid(format!(
            "SH degree {degree} outside [0, {MAX_SH_DEGREE}]"
        )));
    }
    Ok(())
}

fn check_unit(dir: [f64; 3]) -> Result<()> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(WsrError::invalid(format!(
            "SH direction must be unit length, got norm {n}"
        )));
    }
    Ok(())
}

/// Basis values for a unit direction.
pub fn sh_basis(degree: u8, dir: [f64; 3]) -> Result<Vec<f64>> {
    check_degree(degree)?;
    check_unit(dir)?;
    let mut out = [0.0; 16];
    basis_into(degree, dir, &mut out);
    Ok(out[..coeffs_per_channel(degree)].to_vec())
}

/// Unchecked basis evaluation. Slots beyond `(degree + 1)^2` are left alone.
#[inline]
pub fn basis_into(degree: u8, dir: [f64; 3], out: &mut [f64; 16]) {
    let [x, y, z] = dir;
    out[0] = SH_C0;
    if degree < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = SH_C2[0] * xy;
    out[5] = SH_C2[1] * yz;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * xz;
    out[8] = SH_C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * xy * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis polynomial with respect to the raw
/// direction components (x, y, z treated as independent).
pub fn basis_jacobian(degree: u8, dir: [f64; 3], jac: &mut [[f64; 3]; 16]) {
    let [x, y, z] = dir;
    jac[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    jac[1] = [0.0, -SH_C1, 0.0];
    jac[2] = [0.0, 0.0, SH_C1];
    jac[3] = [-SH_C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c = SH_C2;
    jac[4] = [c[0] * y, c[0] * x, 0.0];
    jac[5] = [0.0, c[1] * z, c[1] * y];
    jac[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
    jac[7] = [c[3] * z, 0.0, c[3] * x];
    jac[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    let c = SH_C3;
    jac[9] = [6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
    jac[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
    jac[11] = [
        -2.0 * c[2] * x * y,
        c[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * c[2] * y * z,
    ];
    jac[12] = [
        -6.0 * c[3] * x * z,
        -6.0 * c[3] * y * z,
        c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    jac[13] = [
        c[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * c[4] * x * y,
        8.0 * c[4] * x * z,
    ];
    jac[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)];
    jac[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0];
}

#[inline]
fn dot(basis: &[f64; 16], coeffs: &[f64]) -> f64 {
    coeffs.iter().zip(basis.iter()).map(|(c, b)| c * b).sum()
}

/// Raw per-channel dot products with the basis (no offset, no clamp).
pub fn sh_dot(coeffs: &ShCoeffs, dir: [f64; 3]) -> Vec<f64> {
    let mut basis = [0.0; 16];
    basis_into(coeffs.degree, dir, &mut basis);
    (0..coeffs.channels)
        .map(|ch| dot(&basis, coeffs.channel(ch)))
        .collect()
}

/// Evaluates SH coefficients along a unit direction.
///
/// Three-channel (color) coefficients get the +0.5 offset and are clamped
/// at zero. Any other channel count is returned raw: opacity SH is never
/// clamped.
pub fn sh_eval(coeffs: &ShCoeffs, dir: [f64; 3]) -> Result<Vec<f64>> {
    check_unit(dir)?;
    let mut out = sh_dot(coeffs, dir);
    if coeffs.channels == 3 {
        for v in &mut out {
            *v = (*v + COLOR_OFFSET).max(0.0);
        }
    }
    Ok(out)
}

/// Color channels before the clamp; the clamp mask is needed by the
/// backward pass.
#[inline]
pub fn eval_color_unclamped(coeffs: &ShCoeffs, basis: &[f64; 16]) -> [f64; 3] {
    debug_assert_eq!(coeffs.channels, 3);
    [
        dot(basis, coeffs.channel(0)) + COLOR_OFFSET,
        dot(basis, coeffs.channel(1)) + COLOR_OFFSET,
        dot(basis, coeffs.channel(2)) + COLOR_OFFSET,
    ]
}

#[inline]
pub fn eval_scalar(coeffs: &ShCoeffs, basis: &[f64; 16]) -> f64 {
    dot(basis, coeffs.channel(0))
}

/// Base color plus a view-dependent intensity of a single specular color:
/// `a + x(dir) * b`, clamped at zero.
pub fn compact_color_eval(a: [f64; 3], b: [f64; 3], h: &ShCoeffs, dir: [f64; 3]) -> Result<[f64; 3]> {
    if h.channels != 1 {
        return Err(WsrError::invalid(format!(
            "specular intensity SH must have one channel, got {}",
            h.channels
        )));
    }
    check_unit(dir)?;
    let mut basis = [0.0; 16];
    basis_into(h.degree, dir, &mut basis);
    let x = eval_scalar(h, &basis);
    Ok([
        (a[0] + x * b[0]).max(0.0),
        (a[1] + x * b[1]).max(0.0),
        (a[2] + x * b[2]).max(0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Real SH from associated Legendre recurrences, independent of the
    /// hard-coded polynomial constants above.
    fn legendre_sh(l: i32, m: i32, dir: [f64; 3]) -> f64 {
        let [x, y, z] = dir;
        let ct = z.clamp(-1.0, 1.0);
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let phi = y.atan2(x);
        let am = m.unsigned_abs() as i32;
        // P_am^am with Condon-Shortley phase.
        let mut pmm = 1.0;
        let mut fact = 1.0;
        for _ in 0..am {
            pmm *= -fact * st;
            fact += 2.0;
        }
        let plm = if l == am {
            pmm
        } else {
            let mut p_prev = pmm;
            let mut p = ct * (2 * am + 1) as f64 * pmm;
            for ll in (am + 2)..=l {
                let next = ((2 * ll - 1) as f64 * ct * p - (ll + am - 1) as f64 * p_prev)
                    / (ll - am) as f64;
                p_prev = p;
                p = next;
            }
            p
        };
        let fac = |n: i32| (1..=n).map(|v| v as f64).product::<f64>();
        let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * fac(l - am) / fac(l + am)).sqrt();
        match m.cmp(&0) {
            std::cmp::Ordering::Equal => k * plm,
            std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * plm * (m as f64 * phi).cos(),
            std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * plm * (am as f64 * phi).sin(),
        }
    }

    fn random_unit(rng: &mut impl rand::Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 1.0 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn degree_zero_is_constant() {
        let b = sh_basis(0, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0] - 0.28209479177).abs() < 1e-11);
    }

    #[test]
    fn band_one_at_pole() {
        let b = sh_basis(1, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(b[1], 0.0);
        assert_eq!(b[3], 0.0);
        assert!((b[2].abs() - 0.4886025119).abs() < 1e-10);
    }

    #[test]
    fn degree_three_matches_frozen_values() {
        // 40-digit evaluation of the real SH (with Condon-Shortley phase)
        // at (0.6, 0.48, 0.64).
        let expected = [
            0.28209479177387814347,
            -0.23452920571340156236,
            0.31270560761786874982,
            -0.29316150714175195295,
            0.31465394801051877232,
            -0.33563087787788669047,
            0.07216159012977657738,
            -0.41953859734735836309,
            0.070797138302366723771,
            -0.24062449632080463667,
            0.53279750110750692349,
            -0.22991231896260484392,
            -0.22736887592050550568,
            -0.2873903987032560549,
            0.11987943774918905779,
            0.11725346219022259838,
        ];
        let b = sh_basis(3, [0.6, 0.48, 0.64]).unwrap();
        for (got, want) in b.iter().zip(expected) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn basis_matches_legendre_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let dir = random_unit(&mut rng);
            let b = sh_basis(3, dir).unwrap();
            for l in 0..=3 {
                for m in -l..=l {
                    let idx = (l * l + l + m) as usize;
                    let want = legendre_sh(l, m, dir);
                    assert!((b[idx] - want).abs() < 1e-10, "l={l} m={m} {} vs {want}", b[idx]);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let dir = random_unit(&mut rng);
            let mut jac = [[0.0; 3]; 16];
            basis_jacobian(3, dir, &mut jac);
            for axis in 0..3 {
                let mut plus = dir;
                let mut minus = dir;
                plus[axis] += h;
                minus[axis] -= h;
                let (mut bp, mut bm) = ([0.0; 16], [0.0; 16]);
                basis_into(3, plus, &mut bp);
                basis_into(3, minus, &mut bm);
                for k in 0..16 {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert!((fd - jac[k][axis]).abs() < 1e-7, "k={k} axis={axis}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(sh_basis(4, [0.0, 0.0, 1.0]).is_err());
        assert!(sh_basis(2, [0.0, 0.0, 2.0]).is_err());
        assert!(ShCoeffs::new(1, 3, vec![0.0; 5]).is_err());
        assert!(ShCoeffs::new(4, 1, vec![0.0; 25]).is_err());
    }

    #[test]
    fn color_degree_zero_is_view_independent() {
        let sh = ShCoeffs::from_rgb(0, [0.7, 0.7, 0.7]);
        for dir in [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.6, 0.0, 0.8]] {
            for c in sh_eval(&sh, dir).unwrap() {
                assert!((c - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn opacity_is_not_clamped() {
        let sh = ShCoeffs::constant(0, -0.3);
        let u = sh_eval(&sh, [0.0, 0.0, 1.0]).unwrap();
        assert!((u[0] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn color_clamps_at_zero() {
        let sh = ShCoeffs::from_rgb(0, [-0.2, 0.1, 1.4]);
        let c = sh_eval(&sh, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c[0], 0.0);
        assert!((c[2] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn band_one_is_odd() {
        let mut sh = ShCoeffs::zeros(1, 1);
        sh.values_mut()[1..4].copy_from_slice(&[0.3, -0.7, 0.2]);
        let d = [0.36, 0.48, 0.8];
        let nd = [-0.36, -0.48, -0.8];
        let a = sh_eval(&sh, d).unwrap()[0];
        let b = sh_eval(&sh, nd).unwrap()[0];
        assert!((a + b).abs() < 1e-12);
        assert!(a.abs() > 1e-3);
    }

    #[test]
    fn compact_color_cases() {
        let a = [0.2, 0.4, 0.6];
        let dir = [0.6, 0.48, 0.64];
        let zero_h = ShCoeffs::zeros(3, 1);
        assert_eq!(compact_color_eval(a, [0.5, 0.5, 0.5], &zero_h, dir).unwrap(), a);

        let mut h = ShCoeffs::zeros(3, 1);
        for (i, v) in h.values_mut().iter_mut().enumerate() {
            *v = 0.05 * (i as f64) - 0.3;
        }
        assert_eq!(compact_color_eval(a, [0.0; 3], &h, dir).unwrap(), a);

        let b = [0.3, -0.1, 0.25];
        let basis = sh_basis(3, dir).unwrap();
        let x: f64 = basis.iter().zip(h.values()).map(|(p, q)| p * q).sum();
        let got = compact_color_eval(a, b, &h, dir).unwrap();
        for ch in 0..3 {
            let want = (a[ch] + x * b[ch]).max(0.0);
            assert!((got[ch] - want).abs() < 1e-12);
        }
        assert!(compact_color_eval(a, b, &ShCoeffs::zeros(1, 3), dir).is_err());
    }
}
