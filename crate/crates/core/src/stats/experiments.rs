//! Scaling, covariance, CLT, ergodicity and path experiments on coupled ensembles.

use crate::chaos_combinatorics::{truncated_covariance, CovarianceWindow};
use crate::error::{domain, Error, Result};
use crate::kernels::KernelSpec;
use crate::levy_noise::LevyMeasureSpec;
use crate::report::{ExperimentReport, Status};
use crate::stats::distances::{clt_distances, dkw_floor};
use crate::stats::ensemble::Ensemble;
use crate::stats::estimators::{column, jackknife_rows, loglog_slope, sum, JACKKNIFE_BLOCKS};

/// Allowed |fitted slope − β|.
pub const SLOPE_TOL: f64 = 0.15;
/// Relative residual allowed in the Riesz covariance fit.
pub const COV_FIT_TOL: f64 = 0.10;
/// Allowed relative error of K(t,t)/K(s,s) against (t/s)³.
pub const RATIO_TOL: f64 = 0.15;
/// Default d_K threshold at n = 10⁴.
pub const DK_THRESHOLD: f64 = 0.06;
/// Confidence level of the DKW floor.
pub const DKW_DELTA: f64 = 0.05;
/// Allowed |ergodic slope − (β − 2)|.
pub const ERGODIC_TOL: f64 = 0.2;
/// Increment ratios must stay within this factor of their median.
pub const INCREMENT_SPREAD: f64 = 5.0;
/// Chaos order of the deterministic covariance references.
pub const REFERENCE_ORDER: usize = 3;

type Loc = (Option<f64>, Option<f64>, Option<f64>);

fn at(r: Option<f64>, t: Option<f64>, s: Option<f64>) -> Loc {
    (r, t, s)
}

fn header(name: &str, kernel: &KernelSpec, spec: &LevyMeasureSpec, p: Option<f64>) -> ExperimentReport {
    ExperimentReport::new(name, &kernel.label(), &spec.to_string(), p)
}

/// Column index of F_R(t), or `None` for t = 0 where F vanishes identically.
fn col_index(ens: &Ensemble, t: f64, r: f64) -> Result<Option<usize>> {
    if t == 0.0 {
        return Ok(None);
    }
    ens.index(t, r).map(Some)
}

fn parts_cov(parts: &[&[Vec<f64>]], a: Option<usize>, b: Option<usize>) -> f64 {
    let (Some(a), Some(b)) = (a, b) else { return 0.0 };
    let xa = column(parts, a);
    let xb = column(parts, b);
    let n = xa.len() as f64;
    let ma = sum(xa.iter().copied()) / n;
    let mb = sum(xb.iter().copied()) / n;
    sum(xa.iter().zip(&xb).map(|(x, y)| (x - ma) * (y - mb))) / (n - 1.0)
}

/// Cov(F_R(t), F_R(s)) with its jackknife SE.
pub fn covariance_se(ens: &Ensemble, t: f64, s: f64, r: f64) -> Result<(f64, f64)> {
    let (a, b) = (col_index(ens, t, r)?, col_index(ens, s, r)?);
    Ok(jackknife_rows(&ens.rows, |parts| parts_cov(parts, a, b)))
}

/// ∫₀^{t∧s}(t − r)(s − r)dr, the time shape of the Riesz limit covariance.
pub fn riesz_time_shape(t: f64, s: f64) -> f64 {
    let m = t.min(s).max(0.0);
    t * s * m - 0.5 * (t + s) * m * m + m * m * m / 3.0
}

/// First-chaos part of σ_R²(t) = m₂∫₀ᵗ‖φ_{t,R}(s,·)∗k‖² ds; linear in m₂.
pub fn first_chaos_variance(kernel: &KernelSpec, m2: f64, t: f64, r: f64) -> Result<f64> {
    let c = truncated_covariance(kernel, m2, t, t, CovarianceWindow::Radius(r), 1)?;
    Ok(c.terms[0])
}

fn check_scan(ens: &Ensemble, t: f64) -> Result<()> {
    if ens.radii.len() < 2 {
        return domain("a scaling fit needs at least two radii");
    }
    if ens.n() < 2 * JACKKNIFE_BLOCKS {
        return domain(format!("need at least {} replicates, got {}", 2 * JACKKNIFE_BLOCKS, ens.n()));
    }
    ens.index(t, ens.radii[0]).map(|_| ())
}

/// σ̂²_R(t) per radius and the log-log slope against β.
pub fn variance_scan(ens: &Ensemble, kernel: &KernelSpec, spec: &LevyMeasureSpec, t: f64) -> Result<ExperimentReport> {
    check_scan(ens, t)?;
    let beta = kernel.beta();
    let mut rep = header("variance-scan", kernel, spec, None);
    rep.note(format!("n = {} coupled replicates; SEs by jackknife over {JACKKNIFE_BLOCKS} blocks", ens.n()));
    let cols: Vec<usize> = ens.radii.iter().map(|&r| ens.index(t, r)).collect::<Result<_>>()?;
    let mut vars = Vec::new();
    for (&r, &c) in ens.radii.iter().zip(&cols) {
        let (v, se) = jackknife_rows(&ens.rows, |parts| parts_cov(parts, Some(c), Some(c)));
        rep.push("sigma2", at(Some(r), Some(t), None), v, Some(se), None);
        vars.push(v);
    }
    if vars.iter().any(|v| !(*v > 0.0)) {
        rep.note("zero variance at some radius: no fluctuations to scale");
        rep.check("slope", at(None, Some(t), None), f64::NAN, Status::Inconclusive);
        return Ok(rep);
    }
    let fit = loglog_slope(&ens.radii, &vars)?;
    let radii = ens.radii.clone();
    let (_, slope_se) = jackknife_rows(&ens.rows, |parts| {
        let v: Vec<f64> = cols.iter().map(|&c| parts_cov(parts, Some(c), Some(c))).collect();
        loglog_slope(&radii, &v).map(|f| f.slope).unwrap_or(f64::NAN)
    });
    rep.push("beta", at(None, Some(t), None), beta, None, None);
    rep.push("slope_ci_lo", at(None, Some(t), None), fit.slope - 1.96 * slope_se, None, None);
    rep.push("slope_ci_hi", at(None, Some(t), None), fit.slope + 1.96 * slope_se, None, None);
    let status = if !(1.96 * slope_se <= SLOPE_TOL) {
        Status::Inconclusive
    } else {
        Status::from_bool((fit.slope - beta).abs() <= SLOPE_TOL)
    };
    rep.status = rep.status.combine(status);
    rep.push("slope", at(None, Some(t), None), fit.slope, Some(slope_se), Some(status));
    Ok(rep)
}

/// Reference for the integrable-kernel covariance comparison.
pub enum CovarianceReference<'a> {
    /// Gaussian-model ensemble on the same radii and times.
    GaussianModel(&'a Ensemble),
    /// Deterministic truncated chaos sum at the same finite R.
    Chain,
}

/// K̂_R(t,s) = Ĉov(F_R(t), F_R(s)) / R^β over all radii and pairs.
pub fn covariance_limit(
    ens: &Ensemble,
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    pairs: &[(f64, f64)],
    reference: CovarianceReference<'_>,
) -> Result<ExperimentReport> {
    if pairs.is_empty() {
        return domain("no (t, s) pairs requested");
    }
    let beta = kernel.beta();
    let mut rep = header("covariance", kernel, spec, None);
    let mut khat = Vec::new();
    for &r in &ens.radii {
        for &(t, s) in pairs {
            let (c, se) = covariance_se(ens, t, s, r)?;
            let norm = r.powf(beta);
            rep.push("K_hat", at(Some(r), Some(t), Some(s)), c / norm, Some(se / norm), None);
            if r == ens.r_max() {
                khat.push((t, s, c / norm, se / norm));
            }
        }
    }
    let r = ens.r_max();
    if kernel.is_riesz() {
        rep.note("c_alpha is fitted by least squares at the largest R; it is never asserted");
        let shapes: Vec<f64> = khat.iter().map(|&(t, s, ..)| riesz_time_shape(t, s)).collect();
        let den: f64 = shapes.iter().map(|x| x * x).sum();
        if den == 0.0 {
            return domain("all pairs have t∧s = 0; nothing to fit");
        }
        let c_hat = khat.iter().zip(&shapes).map(|(k, x)| k.2 * x).sum::<f64>() / den;
        rep.push("c_alpha_hat", at(Some(r), None, None), c_hat, None, None);
        for (&(t, s, k, se), &x) in khat.iter().zip(&shapes) {
            let model = c_hat * x;
            if model == 0.0 {
                rep.check("K_zero", at(Some(r), Some(t), Some(s)), k, Status::from_bool(k == 0.0));
                continue;
            }
            let rel = (k - model).abs() / model;
            let status = if se / model > COV_FIT_TOL { Status::Inconclusive } else { Status::from_bool(rel <= COV_FIT_TOL) };
            rep.check("fit_residual_rel", at(Some(r), Some(t), Some(s)), rel, status);
        }
        let diag: Vec<&(f64, f64, f64, f64)> = khat.iter().filter(|p| p.0 == p.1 && p.0 > 0.0).collect();
        if diag.len() >= 2 {
            let lo = diag.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
            let hi = diag.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
            let want = (hi.0 / lo.0).powi(3);
            let ratio = hi.2 / lo.2;
            rep.push("diag_ratio_expected", at(Some(r), Some(hi.0), Some(lo.0)), want, None, None);
            rep.check("diag_ratio", at(Some(r), Some(hi.0), Some(lo.0)), ratio, Status::from_bool((ratio / want - 1.0).abs() <= RATIO_TOL));
        }
    } else {
        match reference {
            CovarianceReference::GaussianModel(g) => {
                rep.note("reference: Gaussian-model ensemble at the same R");
                for &(t, s, k, se) in &khat {
                    let (cg, seg) = covariance_se(g, t, s, r)?;
                    let (kg, seg) = (cg / r, seg / r);
                    rep.push("K_hat_gaussian", at(Some(r), Some(t), Some(s)), kg, Some(seg), None);
                    let z = (k - kg).abs() / (se * se + seg * seg).sqrt();
                    rep.check("gap_over_se", at(Some(r), Some(t), Some(s)), z, Status::from_bool(z <= 3.0));
                }
            }
            CovarianceReference::Chain => {
                rep.note(format!("reference: truncated chaos sum of order {REFERENCE_ORDER} at the same R"));
                for &(t, s, k, se) in &khat {
                    let c = truncated_covariance(kernel, spec.m2(), t, s, CovarianceWindow::Radius(r), REFERENCE_ORDER)?;
                    let kc = c.value / r;
                    let slack = (c.remainder_bound + c.residual) / r;
                    rep.push("K_chain", at(Some(r), Some(t), Some(s)), kc, Some(slack), None);
                    let ok = (k - kc).abs() <= 3.0 * se + slack;
                    rep.check("gap_over_se", at(Some(r), Some(t), Some(s)), (k - kc).abs() / se, Status::from_bool(ok));
                }
            }
        }
    }
    Ok(rep)
}

/// d_K and d_W of F_R(t)/σ̂_R per radius.
pub fn qclt_experiment(ens: &Ensemble, kernel: &KernelSpec, spec: &LevyMeasureSpec, t: f64, p: f64, threshold: f64) -> Result<ExperimentReport> {
    if !(p > 1.0 && p <= 2.0) {
        return domain(format!("p must lie in (1, 2], got {p}"));
    }
    if let KernelSpec::Riesz { alpha, .. } = *kernel {
        let lo = 2.0 / (2.0 - alpha);
        if !(p > lo) {
            return domain(format!("the Riesz case needs p > 2/(2-alpha) = {lo:.4}, got p = {p}"));
        }
    }
    let (mp, m2p) = (spec.abs_moment(p), spec.abs_moment(2.0 * p));
    if !(mp.is_finite() && m2p.is_finite()) {
        return domain("m_p and m_2p must be finite");
    }
    let mut rep = header("qclt", kernel, spec, Some(p));
    let n = ens.n();
    let floor = dkw_floor(n, DKW_DELTA);
    match *kernel {
        KernelSpec::Riesz { alpha, .. } => {
            rep.note(format!(
                "rate R^-eps for eps < {:.4} is asymptotic; only monotone decay is checked",
                1.0 - 1.0 / p - 0.5 * alpha
            ));
        }
        _ => {
            rep.note(format!("rate exponent 1 - 1/p = {:.4}", 1.0 - 1.0 / p));
        }
    }
    rep.push("dkw_floor", at(None, Some(t), None), floor, None, None);
    let mut dks = Vec::new();
    for &r in &ens.radii {
        let xs = ens.column(t, r)?;
        let m = sum(xs.iter().copied()) / n as f64;
        let sd = (sum(xs.iter().map(|x| (x - m).powi(2))) / (n as f64 - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Numeric { msg: format!("zero sample variance at R={r}"), residual: 0.0 });
        }
        let z: Vec<f64> = xs.iter().map(|x| x / sd).collect();
        let zm = sum(z.iter().copied()) / n as f64;
        let zv = sum(z.iter().map(|x| x * x)) / n as f64;
        rep.check("std_mean", at(Some(r), Some(t), None), zm, Status::from_bool(zm.abs() <= 3.0 / (n as f64).sqrt()));
        // Var(Z²) = 2 under normality
        rep.check("std_second_moment", at(Some(r), Some(t), None), zv, Status::from_bool((zv - 1.0).abs() <= 3.0 * (2.0 / n as f64).sqrt()));
        let (dk, dw) = clt_distances(&z);
        rep.push("d_K", at(Some(r), Some(t), None), dk, None, None);
        rep.push("d_W", at(Some(r), Some(t), None), dw, None, None);
        dks.push(dk);
    }
    let monotone = dks.windows(2).all(|w| w[1] <= w[0] + floor);
    rep.check("monotone_within_floor", at(None, Some(t), None), if monotone { 1.0 } else { 0.0 }, Status::from_bool(monotone));
    let last = *dks.last().unwrap_or(&f64::NAN);
    let status = if floor > threshold { Status::Inconclusive } else { Status::from_bool(last <= threshold) };
    rep.check("final_d_K", at(Some(ens.r_max()), Some(t), None), last, status);
    Ok(rep)
}

/// Ê|F_R(t)/R|² per radius: strictly decreasing with slope β − 2.
pub fn ergodic_check(ens: &Ensemble, kernel: &KernelSpec, spec: &LevyMeasureSpec, t: f64) -> Result<ExperimentReport> {
    check_scan(ens, t)?;
    let mut rep = header("ergodic", kernel, spec, None);
    let target = kernel.beta() - 2.0;
    let mut vals = Vec::new();
    for &r in &ens.radii {
        let c = ens.index(t, r)?;
        let (v, se) = jackknife_rows(&ens.rows, |parts| {
            let x = column(parts, c);
            sum(x.iter().map(|f| (f / r).powi(2))) / x.len() as f64
        });
        rep.push("mean_sq_average", at(Some(r), Some(t), None), v, Some(se), None);
        rep.push("value_over_se", at(Some(r), Some(t), None), v / se, None, None);
        vals.push(v);
    }
    if vals.iter().all(|v| *v == 0.0) {
        rep.note("identically zero averages (noise-free)");
        rep.check("decreasing", at(None, Some(t), None), 1.0, Status::Pass);
        return Ok(rep);
    }
    let dec = vals.windows(2).all(|w| w[1] < w[0]);
    rep.check("decreasing", at(None, Some(t), None), if dec { 1.0 } else { 0.0 }, Status::from_bool(dec));
    let fit = loglog_slope(&ens.radii, &vals)?;
    rep.push("slope_target", at(None, Some(t), None), target, None, None);
    rep.check("slope", at(None, Some(t), None), fit.slope, Status::from_bool((fit.slope - target).abs() <= ERGODIC_TOL));
    Ok(rep)
}

/// Finite-dimensional covariances and increment moments of R^{−β/2}F_R(·) on the ensemble's
/// time grid.
pub fn fclt_experiment(ens: &Ensemble, kernel: &KernelSpec, spec: &LevyMeasureSpec, r: f64, p_prime: f64) -> Result<ExperimentReport> {
    if !(p_prime >= 2.0) {
        return domain(format!("increment moment order must be >= 2, got {p_prime}"));
    }
    let ts = ens.t_grid.clone();
    if ts.len() < 3 {
        return domain("the path check needs at least three times");
    }
    let beta = kernel.beta();
    let norm = r.powf(beta);
    let mut rep = header("fclt", kernel, spec, Some(p_prime));
    let mut cov = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        for &s in &ts[..=i] {
            let (c, se) = covariance_se(ens, t, s, r)?;
            cov.push((t, s, c / norm, se / norm));
            rep.push("cov_hat", at(Some(r), Some(t), Some(s)), c / norm, Some(se / norm), None);
        }
    }
    let reference: Vec<(f64, f64)> = if kernel.is_riesz() {
        let shapes: Vec<f64> = cov.iter().map(|&(t, s, ..)| riesz_time_shape(t, s)).collect();
        let c_hat = cov.iter().zip(&shapes).map(|(k, x)| k.2 * x).sum::<f64>() / shapes.iter().map(|x| x * x).sum::<f64>();
        rep.note("reference: fitted c_alpha times the limit time shape");
        rep.push("c_alpha_hat", at(Some(r), None, None), c_hat, None, None);
        shapes.iter().map(|x| (c_hat * x, 0.0)).collect()
    } else {
        rep.note(format!("reference: truncated chaos covariance of order {REFERENCE_ORDER} at the same R"));
        cov.iter()
            .map(|&(t, s, ..)| {
                let c = truncated_covariance(kernel, spec.m2(), t, s, CovarianceWindow::Radius(r), REFERENCE_ORDER)?;
                Ok((c.value / norm, (c.remainder_bound + c.residual) / norm))
            })
            .collect::<Result<_>>()?
    };
    for (&(t, s, k, se), &(kr, slack)) in cov.iter().zip(&reference) {
        rep.push("cov_reference", at(Some(r), Some(t), Some(s)), kr, Some(slack), None);
        let gap = (k - kr).abs();
        rep.check("cov_gap_over_se", at(Some(r), Some(t), Some(s)), gap / se, Status::from_bool(gap <= 3.0 * se + slack));
    }
    let diag: Vec<f64> = cov.iter().filter(|c| c.0 == c.1).map(|c| c.2).collect();
    let incr = diag[0] > 0.0 && diag.windows(2).all(|w| w[1] > w[0]);
    rep.check("diag_positive_increasing", at(Some(r), None, None), if incr { 1.0 } else { 0.0 }, Status::from_bool(incr));

    let mut ratios = Vec::new();
    let mut second = Vec::new();
    for i in 0..ts.len() {
        for j in i + 1..ts.len() {
            let (s, t) = (ts[i], ts[j]);
            let (a, b) = (ens.index(s, r)?, ens.index(t, r)?);
            let n = ens.n() as f64;
            let m = sum(ens.rows.iter().map(|row| (row[b] - row[a]).abs().powf(p_prime))) / n;
            let ratio = m / (r.powf(beta * p_prime / 2.0) * (t - s).powf(p_prime));
            rep.push("increment_ratio", at(Some(r), Some(t), Some(s)), ratio, None, None);
            ratios.push(ratio);
            second.push((s, t, sum(ens.rows.iter().map(|row| (row[b] - row[a]).powi(2))) / n));
        }
    }
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let max = sorted[sorted.len() - 1];
    rep.push("increment_ratio_median", at(Some(r), None, None), median, None, None);
    rep.check("increment_max_over_median", at(Some(r), None, None), max / median, Status::from_bool(max <= INCREMENT_SPREAD * median));
    // doubling t − s from a common start
    for &(s, t, m) in &second {
        if let Some(&(_, _, m2)) = second.iter().find(|q| q.0 == s && ((q.1 - s) - 2.0 * (t - s)).abs() < 1e-9) {
            rep.push("doubling_second_moment_ratio", at(Some(r), Some(t), Some(s)), m2 / m, None, None);
        }
    }
    Ok(rep)
}
