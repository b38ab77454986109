//! Wave kernel, coloration kernels and their convolution algebra.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};
use statrs::function::gamma::gamma;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{domain, Error, Result};
use crate::quad;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Shape of an integrable coloration kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Centered normal density with standard deviation `sd`, cut at the support radius.
    Gaussian { sd: f64 },
    /// Normalized indicator 1/(2a) on [-a, a]; a test fixture only (discontinuous).
    Box,
}

/// Spatial coloration kernel k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// k integrable with support [-support, support] and L¹ norm `l1`.
    Integrable { shape: Shape, support: f64, l1: f64 },
    /// k = R_{1,α/2}, so that f = k∗k̃ = R_{1,α}; tails are cut at `truncation_radius`.
    Riesz { alpha: f64, truncation_radius: f64 },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl KernelSpec {
    /// Standard normal density truncated at ±6.
    pub fn gaussian() -> Self {
        Self::gaussian_with(1.0, 6.0)
    }

    pub fn gaussian_with(sd: f64, support: f64) -> Self {
        let l1 = erf(support / sd * FRAC_1_SQRT_2);
        KernelSpec::Integrable { shape: Shape::Gaussian { sd }, support, l1 }
    }

    pub fn box_fixture(half_width: f64) -> Self {
        KernelSpec::Integrable { shape: Shape::Box, support: half_width, l1: 1.0 }
    }

    pub fn riesz(alpha: f64, truncation_radius: f64) -> Self {
        KernelSpec::Riesz { alpha, truncation_radius }
    }

    /// Riesz kernel whose truncation radius is eight times the given spatial window.
    pub fn riesz_for_window(alpha: f64, window: f64) -> Self {
        Self::riesz(alpha, 8.0 * window)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Integrable { shape, support, l1 } => {
                if !(support > 0.0 && support.is_finite()) {
                    return domain(format!("integrable kernel support must be positive, got {support}"));
                }
                if !(l1 > 0.0 && l1.is_finite()) {
                    return domain(format!("integrable kernel L1 norm must be positive, got {l1}"));
                }
                if let Shape::Gaussian { sd } = shape {
                    if !(sd > 0.0) {
                        return domain(format!("gaussian sd must be positive, got {sd}"));
                    }
                }
                Ok(())
            }
            KernelSpec::Riesz { alpha, truncation_radius } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return domain(format!("riesz alpha must lie in (0,1), got {alpha}"));
                }
                if !(truncation_radius > 0.0 && truncation_radius.is_finite()) {
                    return domain(format!("riesz truncation radius must be positive, got {truncation_radius}"));
                }
                Ok(())
            }
        }
    }

    pub fn is_riesz(&self) -> bool {
        matches!(self, KernelSpec::Riesz { .. })
    }

    /// Variance growth exponent β: 1 for integrable k, α+1 for Riesz.
    pub fn beta(&self) -> f64 {
        match *self {
            KernelSpec::Integrable { .. } => 1.0,
            KernelSpec::Riesz { alpha, .. } => alpha + 1.0,
        }
    }

    /// Distance beyond which k vanishes (support radius or truncation radius).
    pub fn reach(&self) -> f64 {
        match *self {
            KernelSpec::Integrable { support, .. } => support,
            KernelSpec::Riesz { truncation_radius, .. } => truncation_radius,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => format!("gaussian(sd={sd})"),
            KernelSpec::Integrable { shape: Shape::Box, support, .. } => format!("box(a={support})"),
            KernelSpec::Riesz { alpha, .. } => format!("riesz(alpha={alpha})"),
        }
    }

    /// Pointwise value k(x) (zero beyond the reach).
    pub fn eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax > self.reach() {
            return 0.0;
        }
        match *self {
            KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => std_normal_pdf(x / sd) / sd,
            KernelSpec::Integrable { shape: Shape::Box, support, .. } => 0.5 / support,
            KernelSpec::Riesz { alpha, .. } => {
                riesz_constant_unchecked(0.5 * alpha) * ax.powf(-(1.0 - 0.5 * alpha))
            }
        }
    }

    /// Odd antiderivative K(x) = ∫₀ˣ k.
    pub fn antiderivative(&self, x: f64) -> f64 {
        let r = self.reach();
        let xc = x.clamp(-r, r);
        match *self {
            KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => std_normal_cdf(xc / sd) - 0.5,
            KernelSpec::Integrable { shape: Shape::Box, support, .. } => 0.5 * xc / support,
            KernelSpec::Riesz { alpha, .. } => {
                let e = 0.5 * alpha;
                riesz_constant_unchecked(e) * xc.signum() * xc.abs().powf(e) / e
            }
        }
    }

    /// Even second antiderivative K₂(x) = ∫₀ˣ K.
    pub fn second_antiderivative(&self, x: f64) -> f64 {
        let r = self.reach();
        let ax = x.abs();
        let ac = ax.min(r);
        let inner = match *self {
            KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => {
                let u = ac / sd;
                sd * (u * (std_normal_cdf(u) - 0.5) + std_normal_pdf(u) - INV_SQRT_2PI)
            }
            KernelSpec::Integrable { shape: Shape::Box, support, .. } => 0.25 * ac * ac / support,
            KernelSpec::Riesz { alpha, .. } => {
                let e = 0.5 * alpha;
                riesz_constant_unchecked(e) * ac.powf(1.0 + e) / (e * (1.0 + e))
            }
        };
        inner + (ax - ac) * self.antiderivative(r)
    }

    /// ∫_{x1}^{x2} k.
    pub fn cell_integral(&self, x1: f64, x2: f64) -> f64 {
        self.antiderivative(x2) - self.antiderivative(x1)
    }

    /// |Fk(ξ)|² for the untruncated kernel.
    pub fn fourier_weight(&self, xi: f64) -> f64 {
        match *self {
            KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => (-(sd * xi).powi(2)).exp(),
            KernelSpec::Integrable { shape: Shape::Box, support, .. } => {
                let s = support * xi;
                if s.abs() < 1e-8 {
                    1.0
                } else {
                    (s.sin() / s).powi(2)
                }
            }
            KernelSpec::Riesz { alpha, .. } => xi.abs().powf(-alpha),
        }
    }

    /// L¹ norm of k (infinite for the untruncated Riesz kernel).
    pub fn l1_norm(&self) -> f64 {
        match *self {
            KernelSpec::Integrable { l1, .. } => l1,
            KernelSpec::Riesz { .. } => f64::INFINITY,
        }
    }
}

/// G_t(x) = ½·1{|x| < t}.
pub fn wave_kernel(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return domain(format!("wave kernel needs t > 0, got {t}"));
    }
    Ok(if x.abs() < t { 0.5 } else { 0.0 })
}

/// ‖G_t‖_{L^p} = (2^{1-p} t)^{1/p}.
pub fn wave_kernel_lp_norm(t: f64, p: f64) -> Result<f64> {
    if !(t > 0.0 && p > 0.0) {
        return domain(format!("need t > 0 and p > 0, got t={t}, p={p}"));
    }
    Ok((2f64.powf(1.0 - p) * t).powf(1.0 / p))
}

/// φ_{t,R}(r,y) = ∫_{-R}^{R} G_{t-r}(x-y) dx, half the overlap of [-R,R] and the cone interval.
pub fn phi_tr(t: f64, radius: f64, r: f64, y: f64) -> Result<f64> {
    if r > t {
        return domain(format!("phi_tR needs r <= t, got r={r}, t={t}"));
    }
    if !(radius > 0.0) || r < 0.0 {
        return domain(format!("phi_tR needs R > 0 and r >= 0, got R={radius}, r={r}"));
    }
    Ok(phi_unchecked(t - r, radius, y))
}

#[inline]
pub(crate) fn phi_unchecked(tau: f64, radius: f64, y: f64) -> f64 {
    let lo = (-radius).max(y - tau);
    let hi = radius.min(y + tau);
    0.5 * (hi - lo).max(0.0)
}

/// C_{1,α} = π^{-1/2} 2^{-α} Γ((1-α)/2) / Γ(α/2).
pub fn riesz_constant(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return domain(format!("riesz constant needs alpha in (0,1), got {alpha}"));
    }
    Ok(riesz_constant_unchecked(alpha))
}

fn riesz_constant_unchecked(alpha: f64) -> f64 {
    PI.powf(-0.5) * 2f64.powf(-alpha) * gamma(0.5 * (1.0 - alpha)) / gamma(0.5 * alpha)
}

/// Covariance density f = k∗k̃.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceKernel {
    form: CovForm,
    pub closed_form: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum CovForm {
    Normal { var: f64 },
    Triangle { a: f64 },
    Power { alpha: f64, c: f64 },
}

impl CovarianceKernel {
    pub fn eval(&self, x: f64) -> f64 {
        match self.form {
            CovForm::Normal { var } => (-(x * x) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt(),
            CovForm::Triangle { a } => (2.0 * a - x.abs()).max(0.0) / (4.0 * a * a),
            CovForm::Power { alpha, c } => c * x.abs().powf(alpha - 1.0),
        }
    }

    pub fn is_power(&self) -> bool {
        matches!(self.form, CovForm::Power { .. })
    }

    /// Exact moments [∫f, ∫f·d, ∫f·d²] over [a, b].
    pub fn moments(&self, a: f64, b: f64) -> [f64; 3] {
        if b <= a {
            return [0.0; 3];
        }
        match self.form {
            CovForm::Normal { var } => {
                let s = var.sqrt();
                let m0 = if a >= 0.0 {
                    0.5 * (erfc(a / s * FRAC_1_SQRT_2) - erfc(b / s * FRAC_1_SQRT_2))
                } else if b <= 0.0 {
                    0.5 * (erfc(-b / s * FRAC_1_SQRT_2) - erfc(-a / s * FRAC_1_SQRT_2))
                } else {
                    std_normal_cdf(b / s) - std_normal_cdf(a / s)
                };
                let (fa, fb) = (std_normal_pdf(a / s) / s, std_normal_pdf(b / s) / s);
                let m1 = var * (fa - fb);
                [m0, m1, var * m0 + var * (a * fa - b * fb)]
            }
            CovForm::Triangle { a: w } => {
                let (lo, hi) = (a.max(-2.0 * w), b.min(2.0 * w));
                let mut m = [0.0; 3];
                // f = (2w ∓ d)/(4w²) on each side of 0
                let mut piece = |p: f64, q: f64, sign: f64| {
                    if q <= p {
                        return;
                    }
                    for (j, mj) in m.iter_mut().enumerate() {
                        let j = j as f64;
                        let lin = |x: f64| {
                            let x1 = x.powi(j as i32 + 1) / (j + 1.0);
                            let x2 = x.powi(j as i32 + 2) / (j + 2.0);
                            2.0 * w * x1 + sign * x2
                        };
                        *mj += (lin(q) - lin(p)) / (4.0 * w * w);
                    }
                };
                piece(lo.max(0.0), hi, -1.0);
                piece(lo, hi.min(0.0), 1.0);
                m
            }
            CovForm::Power { alpha, c } => {
                let mut m = [0.0; 3];
                let mut piece = |p: f64, q: f64, sign: f64| {
                    // ∫_p^q e^{j+α-1} de on e ≥ 0, then the sign of d^j
                    if q <= p {
                        return;
                    }
                    for (j, mj) in m.iter_mut().enumerate() {
                        let e = j as f64 + alpha;
                        *mj += c * sign.powi(j as i32) * (q.powf(e) - p.powf(e)) / e;
                    }
                };
                if b > 0.0 {
                    piece(a.max(0.0), b, 1.0);
                }
                if a < 0.0 {
                    piece((-b).max(0.0), -a, -1.0);
                }
                m
            }
        }
    }

    /// Constants (κ, e) with sup_d (A_τ∗f)(d) ≤ κ τ^e, A_τ(u) = ¼(2τ − |u|)₊.
    pub fn growth(&self) -> (f64, f64) {
        match self.form {
            CovForm::Normal { .. } | CovForm::Triangle { .. } => (self.eval(0.0), 2.0),
            CovForm::Power { alpha, c } => (0.5 * c * 2f64.powf(1.0 + alpha) / (alpha * (alpha + 1.0)), 1.0 + alpha),
        }
    }

    /// ∫f over the line.
    pub fn total_mass(&self) -> f64 {
        match self.form {
            CovForm::Power { .. } => f64::INFINITY,
            _ => 1.0,
        }
    }
}

pub fn covariance_kernel(spec: &KernelSpec) -> Result<CovarianceKernel> {
    spec.validate()?;
    let form = match *spec {
        KernelSpec::Integrable { shape: Shape::Gaussian { sd }, .. } => CovForm::Normal { var: 2.0 * sd * sd },
        KernelSpec::Integrable { shape: Shape::Box, support, .. } => CovForm::Triangle { a: support },
        KernelSpec::Riesz { alpha, .. } => CovForm::Power { alpha, c: riesz_constant_unchecked(alpha) },
    };
    Ok(CovarianceKernel { form, closed_form: true })
}

/// f(x) by direct quadrature of ∫ k(y) k(y - x) dy over the (truncated) support.
pub fn covariance_by_quadrature(spec: &KernelSpec, x: f64) -> Result<f64> {
    let r = spec.reach();
    let lo = (-r).max(x - r);
    let hi = r.min(x + r);
    if hi <= lo {
        return Ok(0.0);
    }
    let mut pts = vec![lo, hi];
    for c in [0.0, x] {
        if c > lo && c < hi {
            pts.push(c);
        }
    }
    pts.sort_by(f64::total_cmp);
    let mut s = 0.0;
    for w in pts.windows(2) {
        s += quad::integrate(|y| spec.eval(y) * spec.eval(y - x), w[0], w[1], 1e-13, 1e-11)?;
    }
    Ok(s)
}

/// Function sampled at cell centres x0 + i·h, read as piecewise constant on cells of width h.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub x0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl Sampled {
    pub fn from_fn(x0: f64, h: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        Sampled { x0, h, values: (0..n).map(|i| f(x0 + i as f64 * h)).collect() }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    /// ‖·‖_{L^p} of the piecewise-constant function.
    pub fn lp_norm(&self, p: f64) -> f64 {
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.h).powf(1.0 / p)
    }
}

/// Result of [`convolve_kernel`].
#[derive(Clone, Debug)]
pub struct Convolution {
    pub out: Sampled,
    /// Upper bound on |g∗k − computed| due to the Riesz tail cut (0 for integrable k).
    pub truncation_bound: f64,
}

/// (g∗k) at x0 + i·h for i < n, with g piecewise constant and k integrated exactly per cell.
pub fn convolve_kernel(g: &Sampled, spec: &KernelSpec, out_x0: f64, out_h: f64, n: usize) -> Result<Convolution> {
    spec.validate()?;
    if !(g.h > 0.0 && out_h > 0.0) {
        return domain("grid spacings must be positive");
    }
    if let KernelSpec::Integrable { support, .. } = *spec {
        if g.h > support {
            return Err(Error::Domain(format!(
                "grid spacing {} exceeds kernel support half-width {support}; refine the input grid",
                g.h
            )));
        }
    }
    let edges: Vec<f64> = (0..=g.values.len()).map(|j| g.x0 - 0.5 * g.h + j as f64 * g.h).collect();
    let values = (0..n)
        .map(|i| {
            let x = out_x0 + i as f64 * out_h;
            let mut acc = 0.0;
            let mut k_hi = spec.antiderivative(x - edges[0]);
            for (j, &v) in g.values.iter().enumerate() {
                let k_lo = spec.antiderivative(x - edges[j + 1]);
                acc += v * (k_hi - k_lo);
                k_hi = k_lo;
            }
            acc
        })
        .collect();
    let truncation_bound = match *spec {
        KernelSpec::Riesz { truncation_radius, .. } => {
            let l1: f64 = g.values.iter().map(|v| v.abs()).sum::<f64>() * g.h;
            l1 * spec.eval(truncation_radius)
        }
        _ => 0.0,
    };
    Ok(Convolution { out: Sampled { x0: out_x0, h: out_h, values }, truncation_bound })
}

/// (1/2π) ∫ (1+ξ²)^{-1} w(ξ) dξ for an even Fourier weight w.
pub fn dalang_integral(weight: impl Fn(f64) -> f64) -> Result<f64> {
    let g = |x: f64| weight(x) / (1.0 + x * x);
    let near = quad::integrate(g, 0.0, 1.0, 1e-13, 1e-11);
    let far = quad::integrate_to_inf(g, 1.0, 1e-13, 1e-11);
    match (near, far) {
        (Ok(a), Ok(b)) => Ok((a + b) / PI),
        (Err(e), _) | (_, Err(e)) => Err(Error::Config(format!("Dalang integral does not converge: {e}"))),
    }
}

/// ∫ (1+ξ²)^{-1} μ(dξ) with μ(dξ) = |Fk(ξ)|²/(2π) dξ.
pub fn dalang_check(spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    dalang_integral(|x| spec.fourier_weight(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn wave_kernel_values() {
        assert_eq!(wave_kernel(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(wave_kernel(1.0, 3.0).unwrap(), 0.0);
        assert!(wave_kernel(0.0, 0.0).is_err());
        let mass = quad::integrate(|x| wave_kernel(4.0, x).unwrap(), -4.0, 4.0, 1e-12, 1e-12).unwrap();
        assert_relative_eq!(mass, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn wave_kernel_norms() {
        assert_relative_eq!(wave_kernel_lp_norm(4.0, 2.0).unwrap(), 2f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(wave_kernel_lp_norm(1.0, 1.0).unwrap(), 1.0, max_relative = 1e-15);
        let want = 2f64.powf(-1.0 / 3.0);
        assert_relative_eq!(wave_kernel_lp_norm(2.0, 3.0).unwrap(), want, max_relative = 1e-15);
        let q = quad::integrate(|x| wave_kernel(2.0, x).unwrap().powi(3), -2.0, 2.0, 1e-14, 1e-14).unwrap();
        assert_relative_eq!(q.powf(1.0 / 3.0), want, max_relative = 1e-12);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_tr(1.0, 10.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(phi_tr(1.0, 10.0, 0.0, 12.0).unwrap(), 0.0);
        assert_eq!(phi_tr(1.0, 1.0, 0.0, 1.0).unwrap(), 0.5);
        assert!(phi_tr(1.0, 1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn riesz_constants() {
        assert_relative_eq!(riesz_constant(0.5).unwrap(), 0.398942280401432678, max_relative = 1e-13);
        // 30-digit gamma-function evaluations
        assert_relative_eq!(riesz_constant(0.25).unwrap(), 0.149270361082947661, max_relative = 1e-12);
        assert_relative_eq!(riesz_constant(0.75).unwrap(), 1.066219321352448104, max_relative = 1e-12);
        assert!(riesz_constant(1.0).is_err());
        assert!(riesz_constant(0.0).is_err());
    }

    #[test]
    fn covariance_closed_forms() {
        let g = KernelSpec::gaussian();
        let f = covariance_kernel(&g).unwrap();
        assert_relative_eq!(f.eval(0.0), 0.5 / PI.sqrt(), max_relative = 1e-14);
        for x in [0.0, 0.3, 1.0, 2.5] {
            let q = covariance_by_quadrature(&g, x).unwrap();
            assert_relative_eq!(f.eval(x), q, max_relative = 1e-7);
        }
        let b = KernelSpec::box_fixture(1.0);
        let fb = covariance_kernel(&b).unwrap();
        for x in [0.0, 0.5, 1.5, 2.5] {
            assert_relative_eq!(fb.eval(x), covariance_by_quadrature(&b, x).unwrap(), epsilon = 1e-10);
        }
        let r = KernelSpec::riesz(0.5, 1e6);
        let fr = covariance_kernel(&r).unwrap();
        assert_relative_eq!(fr.eval(4.0), 0.398942280401432678 * 0.5, max_relative = 1e-12);
        assert_eq!(fr.eval(1.0), fr.eval(-1.0));
    }

    #[test]
    fn riesz_convolution_reproduces_power_law() {
        // (R_{1,α/2} ∗ R_{1,α/2})(x) = R_{1,α}(x) away from the cut
        let k = KernelSpec::riesz(0.5, 4000.0);
        let x = 3.0;
        let f = |y: f64| k.eval(y) * k.eval(x - y);
        let mut s = 0.0;
        let pts = [-4000.0, -100.0, -1.0, 0.0, 1.5, x, 5.0, 100.0, 4000.0 + x - 1.0];
        for w in pts.windows(2) {
            s += quad::integrate(f, w[0], w[1], 1e-13, 1e-10).unwrap();
        }
        let want = covariance_kernel(&k).unwrap().eval(x);
        // the omitted tails carry O(ρ^{-1/2}) relative mass
        assert_relative_eq!(s, want, max_relative = 2e-2);
    }

    #[test]
    fn l1_norm_matches_quadrature() {
        for spec in [KernelSpec::gaussian(), KernelSpec::gaussian_with(0.7, 5.0), KernelSpec::box_fixture(2.0)] {
            let a = spec.reach();
            let q = quad::integrate(|x| spec.eval(x), -a, a, 1e-14, 1e-13).unwrap();
            assert_relative_eq!(q, spec.l1_norm(), max_relative = 1e-6);
        }
    }

    #[test]
    fn antiderivatives_match_quadrature() {
        for spec in [KernelSpec::gaussian(), KernelSpec::box_fixture(1.5), KernelSpec::riesz(0.5, 50.0)] {
            for x in [0.3, 1.0, 2.2, 7.0] {
                let k1 = quad::integrate(|s| spec.eval(s), 0.0, x, 1e-13, 1e-12).unwrap();
                assert_relative_eq!(spec.antiderivative(x), k1, max_relative = 1e-8);
                let k2 = quad::integrate(|s| spec.antiderivative(s), 0.0, x, 1e-13, 1e-12).unwrap();
                assert_relative_eq!(spec.second_antiderivative(x), k2, max_relative = 1e-8);
                assert_relative_eq!(spec.second_antiderivative(-x), k2, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn convolution_of_box_gives_trapezoid() {
        let spec = KernelSpec::box_fixture(0.5);
        let h = 0.01;
        let g = Sampled::from_fn(-1.0 + 0.5 * h, h, 200, |_| 1.0);
        let c = convolve_kernel(&g, &spec, -2.0, 0.05, 81).unwrap();
        for (i, v) in c.out.values.iter().enumerate() {
            let x = c.out.x(i);
            // double-quadrature oracle
            let want = quad::integrate(|y| spec.eval(x - y), -1.0, 1.0, 1e-13, 1e-12).unwrap();
            assert!((v - want).abs() < 1e-9, "x={x}: {v} vs {want}");
        }
        assert_relative_eq!(c.out.values[40], 1.0, max_relative = 1e-12);
        assert_eq!(c.truncation_bound, 0.0);
    }

    #[test]
    fn convolution_of_zero_is_zero() {
        let g = Sampled::from_fn(0.0, 0.1, 50, |_| 0.0);
        for spec in [KernelSpec::gaussian(), KernelSpec::riesz(0.5, 10.0)] {
            let c = convolve_kernel(&g, &spec, -3.0, 0.1, 60).unwrap();
            assert!(c.out.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn coarse_grid_is_refused() {
        let g = Sampled::from_fn(0.0, 2.0, 5, |_| 1.0);
        assert!(convolve_kernel(&g, &KernelSpec::box_fixture(1.0), 0.0, 1.0, 5).is_err());
    }

    #[test]
    fn riesz_convolution_of_wave_kernel() {
        let rho = 400.0;
        let spec = KernelSpec::riesz(0.5, rho);
        let h = 0.01;
        let g = Sampled::from_fn(-1.0 + 0.5 * h, h, 200, |x| wave_kernel(1.0, x).unwrap());
        let (x0, ho, n) = (-40.0 + 0.01, 0.02, 4000);
        let c = convolve_kernel(&g, &spec, x0, ho, n).unwrap();
        // closed form ½[K(x+1) - K(x-1)] with the untruncated antiderivative
        let exact = |x: f64| 0.5 * (spec.antiderivative(x + 1.0) - spec.antiderivative(x - 1.0));
        for (i, v) in c.out.values.iter().enumerate() {
            assert!((v - exact(c.out.x(i))).abs() < 1e-9);
        }
        let l2 = c.out.lp_norm(2.0);
        // dense-quadrature oracle over the same range
        let mut q = 0.0;
        let edges = [-40.0, -1.0, 0.0, 1.0, 40.0];
        for w in edges.windows(2) {
            q += quad::integrate(|x| exact(x).powi(2), w[0], w[1], 1e-12, 1e-12).unwrap();
        }
        assert!(l2.is_finite());
        assert_relative_eq!(l2, q.sqrt(), max_relative = 1e-4);
        assert!(c.out.values.iter().all(|v| v.is_finite()));
        assert!(c.truncation_bound > 0.0 && c.truncation_bound < 0.02);
    }

    #[test]
    fn dalang_values() {
        let g = dalang_check(&KernelSpec::gaussian()).unwrap();
        assert_relative_eq!(g, 0.213791788077903502, max_relative = 1e-9);
        let r = dalang_check(&KernelSpec::riesz(0.5, 10.0)).unwrap();
        assert_relative_eq!(r, std::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-8);
        assert_eq!(dalang_integral(|_| 0.0).unwrap(), 0.0);
        assert!(dalang_integral(|x| x * x).is_err());
    }

    fn lp(values: impl Iterator<Item = f64>, h: f64, p: f64) -> f64 {
        (values.map(|v| v.abs().powf(p)).sum::<f64>() * h).powf(1.0 / p)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn phi_closed_form_matches_midpoint_rule(
            t in 0.1f64..3.0, frac in 0.0f64..1.0, radius in 0.5f64..20.0, y in -25.0f64..25.0
        ) {
            let r = frac * t;
            let closed = phi_tr(t, radius, r, y).unwrap();
            // the integrand is piecewise constant; breakpoints are resolved exactly
            let mut pts = vec![-radius, radius];
            for b in [y - (t - r), y + (t - r)] {
                if b > -radius && b < radius { pts.push(b); }
            }
            pts.sort_by(f64::total_cmp);
            let mut mid = 0.0;
            for w in pts.windows(2) {
                let n = 64;
                let h = (w[1] - w[0]) / n as f64;
                for i in 0..n {
                    let x = w[0] + (i as f64 + 0.5) * h;
                    mid += h * if (x - y).abs() < t - r { 0.5 } else { 0.0 };
                }
            }
            prop_assert!((closed - mid).abs() <= 1e-10);
        }

        #[test]
        fn phi_lp_bound_and_time_increment(
            t in 0.2f64..3.0, frac in 0.0f64..0.99, ds in 0.0f64..1.0, radius in 1.0f64..30.0, p in 1.0f64..4.0
        ) {
            let r = frac * t;
            let h = 1e-3;
            let n = ((2.0 * (radius + t + 1.0)) / h) as usize;
            let x0 = -(radius + t + 1.0);
            let vals: Vec<f64> = (0..n).map(|i| phi_unchecked(t - r, radius, x0 + (i as f64 + 0.5) * h)).collect();
            let norm = lp(vals.iter().copied(), h, p);
            // phi <= t - r and its integral is 2 R (t - r)
            let bound = 2f64.powf(1.0 / p) * (t - r) * radius.powf(1.0 / p);
            prop_assert!(norm <= bound * (1.0 + 1e-9));
            let s = r + ds * (t - r);
            let diff = lp((0..n).map(|i| {
                let y = x0 + (i as f64 + 0.5) * h;
                phi_unchecked(t - r, radius, y) - phi_unchecked(s - r, radius, y)
            }), h, p);
            prop_assert!(diff.powf(p) <= 4.0 * radius * (t - s).powf(p) * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn plateau_exceeds_the_smaller_constant(t in 0.1f64..1.0, radius in 10.0f64..30.0, p in 1.5f64..4.0) {
            // the plateau alone has p-th power 2 (R - t) t^p, above 2^{2-p} t^p R
            let plateau = 2.0 * (radius - t) * t.powf(p);
            prop_assert!(plateau > 2f64.powf(2.0 - p) * t.powf(p) * radius);
            prop_assert_eq!(phi_unchecked(t, radius, 0.0), t);
        }

        #[test]
        fn young_bound_for_integrable_kernel(t in 0.2f64..2.0, radius in 1.0f64..16.0, p in 1.0f64..4.0) {
            let spec = KernelSpec::gaussian();
            let h = 0.05;
            let w = radius + t + 1.0;
            let n = (2.0 * w / h) as usize;
            let g = Sampled::from_fn(-w + 0.5 * h, h, n, |y| phi_unchecked(t, radius, y));
            let m = n + (2.0 * 7.0 / h) as usize;
            let c = convolve_kernel(&g, &spec, -w - 7.0 + 0.5 * h, h, m).unwrap();
            prop_assert!(c.out.lp_norm(p) <= g.lp_norm(p) * spec.l1_norm() * (1.0 + 1e-9));
        }

        #[test]
        fn covariance_symmetric_and_nonnegative(x in -20.0f64..20.0, alpha in 0.05f64..0.95) {
            for spec in [KernelSpec::gaussian(), KernelSpec::box_fixture(1.0), KernelSpec::riesz(alpha, 100.0)] {
                let f = covariance_kernel(&spec).unwrap();
                prop_assert_eq!(f.eval(x), f.eval(-x));
                prop_assert!(f.eval(x) >= 0.0);
                prop_assert_eq!(spec.eval(x), spec.eval(-x));
            }
        }
    }

    #[test]
    fn hls_shape_is_bounded() {
        // ‖φ_{t,R} ∗ k‖_p / R^{1/q}, 1/q = 1/p + α/2, stays bounded in R
        let alpha = 0.5;
        let p = 2.0;
        let inv_q = 1.0 / p + 0.5 * alpha;
        let t: f64 = 1.0;
        let mut ratios = vec![];
        for radius in [8.0, 16.0, 32.0, 64.0] {
            let spec = KernelSpec::riesz(alpha, 1e9);
            let h = radius / 64.0;
            let w = radius + t;
            let n = (2.0 * w / h).ceil() as usize;
            let g = Sampled::from_fn(-w + 0.5 * h, h, n, |y| phi_unchecked(t, radius, y));
            let span = 40.0 * radius;
            let m = (2.0 * span / h) as usize;
            let c = convolve_kernel(&g, &spec, -span + 0.5 * h, h, m).unwrap();
            // add the analytic tail beyond the output window: (φ∗k)(y) ≈ ‖φ‖₁ k(y)
            let mass = 2.0 * t * radius;
            let cst = riesz_constant(0.5 * alpha).unwrap();
            let e = (1.0 - 0.5 * alpha) * p;
            let tail = 2.0 * (mass * cst).powf(p) * span.powf(1.0 - e) / (e - 1.0);
            let norm = (c.out.lp_norm(p).powf(p) + tail).powf(1.0 / p);
            ratios.push(norm / radius.powf(inv_q));
        }
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.5, "{ratios:?}");
    }
}
