//! Uniform-grid tabulation and quadrature.
//!
//! Functions on `[0, t_max]` are stored as node values `f(k*h)`. Evaluation
//! interpolates linearly; integration and convolution use the trapezoid rule,
//! so both are exact for piecewise-linear data and O(h^2) for smooth
//! integrands. Callers needing tighter error combine two step sizes via
//! [`richardson`].

use crate::error::PhLabError;

/// Node-based table of a real function on a uniform grid over `[0, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    h: f64,
    values: Vec<f64>,
}

impl Tabulated {
    /// Wraps node values `f(0), f(h), ..., f((n-1)h)`.
    pub fn new(h: f64, values: Vec<f64>) -> Result<Self, PhLabError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(PhLabError::InvalidInput(format!("grid step must be positive, got {h}")));
        }
        if values.is_empty() {
            return Err(PhLabError::InvalidInput("grid table needs at least one node".into()));
        }
        Ok(Self { h, values })
    }

    /// Tabulates `f` at `n` nodes with step `h`.
    pub fn from_fn(h: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self, PhLabError> {
        Self::new(h, (0..n).map(|k| f(k as f64 * h)).collect())
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty tables
    }

    /// Largest grid node, `(len-1)*h`.
    pub fn t_max(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Linear interpolation; zero outside `[0, t_max]`.
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.t_max() {
            return 0.0;
        }
        let x = t / self.h;
        let k = (x.floor() as usize).min(self.values.len() - 1);
        if k + 1 == self.values.len() {
            return self.values[k];
        }
        let w = x - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }

    /// Trapezoid integral over the full support.
    pub fn integral(&self) -> f64 {
        trapezoid(self.h, &self.values)
    }

    /// Composite Simpson integral (fourth order): pairs of segments under
    /// Simpson's rule, with a 3/8 panel absorbing an odd segment count.
    pub fn integral_simpson(&self) -> f64 {
        let v = &self.values;
        let n_seg = v.len() - 1;
        match n_seg {
            0 => 0.0,
            1 => 0.5 * self.h * (v[0] + v[1]),
            2 => self.h / 3.0 * (v[0] + 4.0 * v[1] + v[2]),
            _ => {
                let (even_end, tail) = if n_seg % 2 == 0 {
                    (n_seg, 0.0)
                } else {
                    let k = n_seg - 3;
                    let t = 3.0 * self.h / 8.0 * (v[k] + 3.0 * v[k + 1] + 3.0 * v[k + 2] + v[k + 3]);
                    (k, t)
                };
                let mut acc = 0.0;
                let mut i = 0;
                while i + 2 <= even_end {
                    acc += v[i] + 4.0 * v[i + 1] + v[i + 2];
                    i += 2;
                }
                self.h / 3.0 * acc + tail
            }
        }
    }

    /// Trapezoid partial integrals `F(kh) = \int_0^{kh} f`, one per node.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * self.h * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Trapezoid integral of `t^power * f(t)`.
    pub fn moment(&self, power: f64) -> f64 {
        let weighted: Vec<f64> = self
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| (k as f64 * self.h).powf(power) * v)
            .collect();
        trapezoid(self.h, &weighted)
    }

    /// Trapezoid convolution `(self * other)(kh)`, truncated to `max_len`
    /// nodes (full support `len_a + len_b - 1` when `None`).
    ///
    /// Both tables must share the same step.
    pub fn convolve(&self, other: &Tabulated, max_len: Option<usize>) -> Result<Tabulated, PhLabError> {
        if (self.h - other.h).abs() > 1e-12 * self.h {
            return Err(PhLabError::InvalidInput(format!(
                "convolution needs matching grid steps, got {} and {}",
                self.h, other.h
            )));
        }
        let full = self.values.len() + other.values.len() - 1;
        let n = max_len.map_or(full, |m| m.min(full)).max(1);
        let mut out = vec![0.0; n];
        // Trapezoid weights: the j = 0 and j = k endpoints enter with 1/2.
        // A degenerate overlap (single shared node) integrates over a
        // zero-length interval and contributes nothing; in particular the
        // convolution vanishes at 0.
        for (k, slot) in out.iter_mut().enumerate() {
            let j_lo = k.saturating_sub(other.values.len() - 1);
            let j_hi = k.min(self.values.len() - 1);
            if j_lo >= j_hi {
                continue;
            }
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                let w = if j == 0 || j == k { 0.5 } else { 1.0 };
                acc += w * self.values[j] * other.values[k - j];
            }
            *slot = acc * self.h;
        }
        Tabulated::new(self.h, out)
    }

    /// Applies `f` to every node value in place.
    pub fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.values {
            *v = f(*v);
        }
    }
}

/// Trapezoid rule over equally spaced node values.
pub fn trapezoid(h: f64, values: &[f64]) -> f64 {
    match values {
        [] | [_] => 0.0,
        [vs @ ..] => {
            let inner: f64 = vs[1..vs.len() - 1].iter().sum();
            h * (0.5 * vs[0] + inner + 0.5 * vs[vs.len() - 1])
        }
    }
}

/// Richardson extrapolation of an O(h^p) quantity computed at steps `h` and
/// `h/2`: returns the O(h^{2p}) combination.
pub fn richardson(coarse: f64, fine: f64, order: u32) -> f64 {
    let w = 2f64.powi(order as i32);
    (w * fine - coarse) / (w - 1.0)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. The interval is pre-split into fixed panels so mass concentrated
/// far from the endpoints cannot slip between the initial probe points;
/// each panel then refines adaptively. Recursion depth is capped, so a
/// genuinely singular integrand degrades gracefully instead of hanging.
pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const PANELS: usize = 16;
    if !(b > a) {
        return 0.0;
    }
    let w = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| integrate_panel(f, a + i as f64 * w, a + (i + 1) as f64 * w, tol / PANELS as f64))
        .sum()
}

fn integrate_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    if !(b > a) {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Bisection root find for continuous `f` with a sign change on `[lo, hi]`.
/// Returns the midpoint once the bracket is narrower than `tol`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64, PhLabError> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(PhLabError::InvalidInput(format!(
            "bisection bracket [{lo}, {hi}] has no sign change"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid == 0.0 {
            return Ok(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eval_interpolates_and_clips() {
        let t = Tabulated::new(0.5, vec![0.0, 1.0, 4.0]).unwrap();
        assert_abs_diff_eq!(t.eval(0.25), 0.5);
        assert_abs_diff_eq!(t.eval(0.75), 2.5);
        assert_abs_diff_eq!(t.eval(1.0), 4.0);
        assert_eq!(t.eval(-0.1), 0.0);
        assert_eq!(t.eval(1.1), 0.0);
    }

    #[test]
    fn trapezoid_exact_on_linear() {
        let t = Tabulated::from_fn(0.1, 11, |x| 3.0 * x + 1.0).unwrap();
        assert_abs_diff_eq!(t.integral(), 2.5, epsilon = 1e-12);
        let cum = t.cumulative();
        assert_abs_diff_eq!(cum[10], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cum[5], 0.875, epsilon = 1e-12);
    }

    #[test]
    fn convolution_matches_closed_form() {
        // exp(1) pdf convolved with itself is the gamma(2,1) pdf t*exp(-t).
        let h = 0.005;
        let p = Tabulated::from_fn(h, 4001, |t| (-t).exp()).unwrap();
        let c = p.convolve(&p, Some(2001)).unwrap();
        for &t in &[0.5f64, 1.0, 5.0, 9.0] {
            let expect = t * (-t).exp();
            assert_abs_diff_eq!(c.eval(t), expect, epsilon = 5e-5);
        }
    }

    #[test]
    fn richardson_cancels_leading_error() {
        // Trapezoid on exp over [0,1]: errors at h and h/2 combine to O(h^4).
        let exact = 1f64.exp() - 1.0;
        let at = |n: usize| {
            Tabulated::from_fn(1.0 / n as f64, n + 1, f64::exp).unwrap().integral()
        };
        let est = richardson(at(50), at(100), 2);
        assert!((est - exact).abs() < 1e-9);
        assert!((at(100) - exact).abs() > 1e-6);
    }

    #[test]
    fn adaptive_simpson_smooth() {
        let v = integrate(&|x: f64| (-x).exp() * x.powi(3), 0.0, 40.0, 1e-10);
        assert_abs_diff_eq!(v, 6.0, epsilon = 1e-8);
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-9).unwrap();
        assert_abs_diff_eq!(r, 2f64.sqrt(), epsilon = 1e-8);
        assert!(bisect(|x| x * x + 1.0, 0.0, 2.0, 1e-9).is_err());
    }
}
