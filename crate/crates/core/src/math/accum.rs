//! Per-pixel weighted-sum accumulators.
//!
//! [`StableAccumulator`] keeps exponential weights `e^{-d}` normalized by
//! the largest weight seen so far, so sums whose raw weights would all
//! underflow (or overflow) still produce the right quotient.

use num_traits::Float;

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy)]
pub struct CompensatedSum<T> {
    sum: T,
    comp: T,
}

impl<T: Float> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self {
            sum: T::zero(),
            comp: T::zero(),
        }
    }
}

impl<T: Float> CompensatedSum<T> {
    #[inline]
    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    #[inline]
    pub fn scale(&mut self, f: T) {
        self.sum = self.sum * f;
        self.comp = self.comp * f;
    }

    #[inline]
    pub fn value(&self) -> T {
        self.sum + self.comp
    }
}

/// Result of combining accumulated sums with the background term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quotient<T> {
    pub rgb: [T; 3],
    /// Total denominator in the frame of `log_scale`: the true denominator
    /// is `denominator * e^{-log_scale}`.
    pub denominator: T,
    /// Exponent shift applied to every weight in this quotient.
    pub log_scale: T,
    /// The denominator was not positive and the background was returned.
    pub degenerate: bool,
}

/// Running max-normalized exponential sums sharing one exponent shift for
/// numerator and denominator.
#[derive(Debug, Clone, Copy)]
pub struct StableAccumulator<T> {
    mu: T,
    num: [CompensatedSum<T>; 3],
    den: CompensatedSum<T>,
    count: usize,
}

impl<T: Float> Default for StableAccumulator<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> StableAccumulator<T> {
    pub fn new() -> Self {
        Self {
            mu: T::infinity(),
            num: [CompensatedSum::default(); 3],
            den: CompensatedSum::default(),
            count: 0,
        }
    }

    /// Smallest exponent added so far (`+inf` when empty).
    pub fn mu(&self) -> T {
        self.mu
    }

    /// Numerator sums scaled by `e^{mu}`.
    pub fn num(&self) -> [T; 3] {
        [self.num[0].value(), self.num[1].value(), self.num[2].value()]
    }

    /// Denominator sum scaled by `e^{mu}`.
    pub fn den(&self) -> T {
        self.den.value()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds the term `alpha * e^{-exponent}` with color `rgb`.
    ///
    /// Returns `false` without touching the sums when `exponent` is not
    /// finite.
    #[inline]
    pub fn add(&mut self, exponent: T, rgb: [T; 3], alpha: T) -> bool {
        if !exponent.is_finite() {
            return false;
        }
        let w = if self.count == 0 {
            self.mu = exponent;
            alpha
        } else if exponent < self.mu {
            let rescale = (exponent - self.mu).exp();
            for n in &mut self.num {
                n.scale(rescale);
            }
            self.den.scale(rescale);
            self.mu = exponent;
            alpha
        } else {
            (self.mu - exponent).exp() * alpha
        };
        for (n, c) in self.num.iter_mut().zip(rgb) {
            n.add(w * c);
        }
        self.den.add(w);
        self.count += 1;
        true
    }

    /// `(c_B w_B + sum alpha c e^{-d}) / (w_B + sum alpha e^{-d})`.
    ///
    /// The background counts as one more term with exponent `-ln w_B`. Both
    /// sums are expressed in the frame of the smallest exponent overall, so
    /// no weight in the final division exceeds one.
    pub fn quotient(&self, background_rgb: [T; 3], background_w: T) -> Quotient<T> {
        let bg_exponent = if background_w > T::zero() {
            -background_w.ln()
        } else {
            T::infinity()
        };
        let log_scale = if self.count == 0 { bg_exponent } else { self.mu.min(bg_exponent) };
        let bg = if background_w > T::zero() {
            (log_scale - bg_exponent).exp()
        } else {
            T::zero()
        };
        let scale = if self.count == 0 { T::zero() } else { (log_scale - self.mu).exp() };
        let den = bg + self.den() * scale;
        if !(den > T::zero()) || !den.is_finite() {
            return Quotient {
                rgb: background_rgb,
                denominator: den,
                log_scale,
                degenerate: true,
            };
        }
        let num = self.num();
        let mut rgb = [T::zero(); 3];
        for ch in 0..3 {
            rgb[ch] = (background_rgb[ch] * bg + num[ch] * scale) / den;
        }
        Quotient {
            rgb,
            denominator: den,
            log_scale,
            degenerate: false,
        }
    }
}

/// Plain (non-exponential) weighted sums with compensated accumulation.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSum<T> {
    num: [CompensatedSum<T>; 3],
    den: CompensatedSum<T>,
}

impl<T: Float> Default for WeightedSum<T> {
    fn default() -> Self {
        Self {
            num: [CompensatedSum::default(); 3],
            den: CompensatedSum::default(),
        }
    }
}

impl<T: Float> WeightedSum<T> {
    #[inline]
    pub fn add(&mut self, rgb: [T; 3], weight: T) {
        for (n, c) in self.num.iter_mut().zip(rgb) {
            n.add(weight * c);
        }
        self.den.add(weight);
    }

    pub fn num(&self) -> [T; 3] {
        [self.num[0].value(), self.num[1].value(), self.num[2].value()]
    }

    pub fn den(&self) -> T {
        self.den.value()
    }

    pub fn quotient(&self, background_rgb: [T; 3], background_w: T) -> Quotient<T> {
        let den = background_w + self.den();
        if !(den > T::zero()) || !den.is_finite() {
            return Quotient {
                rgb: background_rgb,
                denominator: den,
                log_scale: T::zero(),
                degenerate: true,
            };
        }
        let num = self.num();
        let mut rgb = [T::zero(); 3];
        for ch in 0..3 {
            rgb[ch] = (background_rgb[ch] * background_w + num[ch]) / den;
        }
        Quotient {
            rgb,
            denominator: den,
            log_scale: T::zero(),
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quotient_of(terms: &[(f64, [f64; 3], f64)], bg: [f64; 3], wb: f64) -> [f64; 3] {
        let mut acc = StableAccumulator::new();
        for &(d, c, a) in terms {
            acc.add(d, c, a);
        }
        acc.quotient(bg, wb).rgb
    }

    #[test]
    fn single_term() {
        let mut acc = StableAccumulator::new();
        acc.add(5.0, [1.0, 0.0, 0.0], 2.0);
        assert_eq!(acc.mu(), 5.0);
        assert_eq!(acc.num(), [2.0, 0.0, 0.0]);
        assert_eq!(acc.den(), 2.0);
    }

    #[test]
    fn equal_exponents_are_plain_sums() {
        let mut acc = StableAccumulator::new();
        acc.add(3.0, [0.2, 0.4, 0.6], 0.5);
        acc.add(3.0, [1.0, 0.0, 0.5], 1.5);
        let num = acc.num();
        assert!((num[0] - (0.1 + 1.5)).abs() < 1e-15);
        assert!((num[1] - 0.2).abs() < 1e-15);
        assert!((num[2] - (0.3 + 0.75)).abs() < 1e-15);
        assert!((acc.den() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_exponent() {
        let mut acc = StableAccumulator::<f64>::new();
        assert!(!acc.add(f64::NAN, [1.0; 3], 1.0));
        assert!(!acc.add(f64::INFINITY, [1.0; 3], 1.0));
        assert_eq!(acc.count(), 0);
    }

    #[test]
    fn far_exponents_survive_underflow() {
        // e^{-800} underflows in f64; the quotient is dominated by the d=0 term.
        let terms = [(800.0, [1.0, 0.0, 0.0], 1.0), (0.0, [0.0, 1.0, 0.0], 1.0)];
        let q = quotient_of(&terms, [0.0; 3], 0.0);
        assert!(q[0].abs() < 1e-300);
        assert!((q[1] - 1.0).abs() < 1e-15);
        // Both terms far out: raw sums are 0/0, quotient is still defined.
        let terms = [(800.0, [1.0, 0.0, 0.0], 1.0), (801.0, [0.0, 1.0, 0.0], 1.0)];
        let q = quotient_of(&terms, [0.0; 3], 0.0);
        let e = (-1.0f64).exp();
        assert!((q[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((q[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn background_only() {
        let acc = StableAccumulator::<f64>::new();
        assert_eq!(acc.quotient([0.0; 3], 1.0).rgb, [0.0; 3]);
        let q = acc.quotient([0.3, 0.2, 0.1], 0.0);
        assert!(q.degenerate);
        assert_eq!(q.rgb, [0.3, 0.2, 0.1]);
    }

    #[test]
    fn dominant_term_wins() {
        let mut acc = StableAccumulator::new();
        acc.add(-30.0, [1.0, 1.0, 1.0], 1.0);
        let q = acc.quotient([0.0; 3], 1.0).rgb;
        for c in q {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    fn terms_strategy(max_abs: f64) -> impl Strategy<Value = Vec<(f64, [f64; 3], f64)>> {
        prop::collection::vec(
            (
                -max_abs..max_abs,
                (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
                0.01..2.0f64,
            )
                .prop_map(|(d, (r, g, b), a)| (d, [r, g, b], a)),
            1..200,
        )
    }

    fn rel_close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-300))
    }

    proptest! {
        #[test]
        fn permutation_invariant(terms in terms_strategy(400.0), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = terms.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = quotient_of(&terms, [0.1, 0.2, 0.3], 0.5);
            let b = quotient_of(&shuffled, [0.1, 0.2, 0.3], 0.5);
            prop_assert!(rel_close(a, b, 1e-11), "{a:?} vs {b:?}");
        }

        #[test]
        fn exponent_shift_invariant(terms in terms_strategy(300.0)) {
            let base = quotient_of(&terms, [0.0; 3], 0.0);
            for xi in [-100.0, 0.0, 250.0] {
                let shifted: Vec<_> = terms.iter().map(|&(d, c, a)| (d + xi, c, a)).collect();
                let q = quotient_of(&shifted, [0.0; 3], 0.0);
                prop_assert!(rel_close(base, q, 1e-10), "xi={xi}: {base:?} vs {q:?}");
            }
        }

        #[test]
        fn matches_naive_when_well_scaled(terms in terms_strategy(30.0)) {
            let q = quotient_of(&terms, [0.0; 3], 0.0);
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for &(d, c, a) in &terms {
                let w = a * (-d).exp();
                for ch in 0..3 {
                    num[ch] += w * c[ch];
                }
                den += w;
            }
            let naive = [num[0] / den, num[1] / den, num[2] / den];
            prop_assert!(rel_close(q, naive, 1e-6));
        }

        #[test]
        fn f32_permutation_invariant(terms in terms_strategy(60.0), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = terms.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let run = |ts: &[(f64, [f64; 3], f64)]| {
                let mut acc = StableAccumulator::<f32>::new();
                for &(d, c, a) in ts {
                    acc.add(d as f32, [c[0] as f32, c[1] as f32, c[2] as f32], a as f32);
                }
                acc.quotient([0.0; 3], 0.5).rgb
            };
            let a = run(&terms);
            let b = run(&shuffled);
            for ch in 0..3 {
                prop_assert!((a[ch] - b[ch]).abs() <= 1e-5 * a[ch].abs().max(b[ch].abs()).max(1e-30));
            }
        }
    }
}
