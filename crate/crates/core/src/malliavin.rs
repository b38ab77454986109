//! Add-one-point difference operators D and D², statistical checks of the key estimates,
//! and the Poincaré inequality for spatial averages.
//!
//! D_{r,y,z}G = G(ω + δ_{(r,y,z)}) − G(ω). Since the equation is linear in u, D is linear in z.

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::kernels::KernelSpec;
use crate::levy_noise::{sample_atoms, stream_rng, Atom, AtomCloud, LevyMeasureSpec, DEFAULT_ATOM_BUDGET};
use crate::quad::{gauss_legendre, gauss_legendre_on, integrate};
use crate::report::{ExperimentReport, Status};
use crate::solver::{Scheme, Solver, SolverConfig};
use crate::stats::estimators::{jackknife, parts_mean, variance_se, JACKKNIFE_BLOCKS};

/// The same resolution settings, targeted at the single point (t, x).
pub fn probe_config(cfg: &SolverConfig, t: f64, x: f64) -> SolverConfig {
    SolverConfig { t_max: t, center: x, half_width: 0.0, times: vec![t], ..cfg.clone() }
}

/// Coupled solves at one probe for one realization; the base value is computed once.
pub struct ProbeDifferences<'a> {
    solver: &'a Solver,
    cloud: &'a AtomCloud,
    t: f64,
    x: f64,
    base: f64,
}

impl<'a> ProbeDifferences<'a> {
    /// `solver` must be point-targeted (see [`probe_config`]).
    pub fn new(solver: &'a Solver, cloud: &'a AtomCloud) -> Result<Self> {
        let cfg = solver.config();
        if cfg.half_width != 0.0 {
            return domain("difference operators need a point-targeted solver configuration");
        }
        let (t, x) = (cfg.t_max, cfg.center);
        let base = solver.solve_u(cloud)?.eval(t, x)?;
        Ok(ProbeDifferences { solver, cloud, t, x, base })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    fn value_with(&self, extra: &[Atom]) -> Result<f64> {
        let mut c = self.cloud.clone();
        let mut added = false;
        for a in extra {
            if a.tau < self.t {
                c = c.with_atom(*a)?;
                added = true;
            } else {
                // validate the window even when the atom cannot act
                self.cloud.with_atom(*a)?;
            }
        }
        if !added {
            return Ok(self.base);
        }
        self.solver.solve_u(&c)?.eval(self.t, self.x)
    }

    /// D_{r,y,z}u(t,x).
    pub fn d(&self, extra: Atom) -> Result<f64> {
        Ok(self.value_with(&[extra])? - self.base)
    }

    /// D²_{ξ1,ξ2}u(t,x); symmetric in its arguments bit for bit.
    pub fn d2(&self, xi1: Atom, xi2: Atom) -> Result<f64> {
        if xi1 == xi2 {
            return domain("D² needs two distinct points");
        }
        let (a, b) = if (xi1.tau, xi1.xi, xi1.zeta) <= (xi2.tau, xi2.xi, xi2.zeta) { (xi1, xi2) } else { (xi2, xi1) };
        let ab = self.value_with(&[a, b])?;
        let va = self.value_with(&[a])?;
        let vb = self.value_with(&[b])?;
        Ok((ab - va) - (vb - self.base))
    }
}

/// u(ω + δ_extra)(t,x) − u(ω)(t,x) for one realization.
pub fn difference_d(
    cloud: &AtomCloud,
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cfg: &SolverConfig,
    extra: Atom,
    (t, x): (f64, f64),
) -> Result<f64> {
    let solver = Solver::new(kernel, spec, &probe_config(cfg, t, x))?;
    ProbeDifferences::new(&solver, cloud)?.d(extra)
}

/// Second-order add-two-points difference at (t, x).
pub fn difference_d2(
    cloud: &AtomCloud,
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cfg: &SolverConfig,
    xi1: Atom,
    xi2: Atom,
    (t, x): (f64, f64),
) -> Result<f64> {
    let solver = Solver::new(kernel, spec, &probe_config(cfg, t, x))?;
    ProbeDifferences::new(&solver, cloud)?.d2(xi1, xi2)
}

/// |z|·(G_{t−r}(x − ·) ∗ k)(y).
pub fn key_d_bound(kernel: &KernelSpec, (t, x): (f64, f64), extra: Atom) -> f64 {
    let w = t - extra.tau;
    if w <= 0.0 {
        return 0.0;
    }
    0.5 * extra.zeta.abs() * kernel.cell_integral(x - w - extra.xi, x + w - extra.xi)
}

/// |z₁z₂|·∫∫ f̃₂(r₁,y₁′,r₂,y₂′; t,x) k(y₁ − y₁′) k(y₂ − y₂′) dy₁′ dy₂′.
pub fn key_d2_bound(kernel: &KernelSpec, (t, x): (f64, f64), xi1: Atom, xi2: Atom) -> Result<f64> {
    let (a, b) = if xi1.tau <= xi2.tau { (xi1, xi2) } else { (xi2, xi1) };
    let (w, gap) = (t - b.tau, b.tau - a.tau);
    if w <= 0.0 || gap <= 0.0 {
        return Ok(0.0);
    }
    let reach = kernel.reach();
    let lo = (x - w).max(b.xi - reach);
    let hi = (x + w).min(b.xi + reach);
    if hi <= lo {
        return Ok(0.0);
    }
    // kernel offset d = b.ξ − y₂ passed separately so it never rounds to zero
    let term = |y2: f64, d: f64| 0.5 * kernel.eval(d) * 0.5 * kernel.cell_integral(y2 - gap - a.xi, y2 + gap - a.xi);
    let inner = |y2: f64| term(y2, b.xi - y2);
    let mut pts = vec![lo, hi];
    for c in [b.xi, a.xi - gap, a.xi + gap] {
        if c > lo && c < hi {
            pts.push(c);
        }
    }
    pts.sort_by(f64::total_cmp);
    // y = c ± s^q with q = 2/α cancels the |c − y|^{α/2−1} singularity of a Riesz kernel
    let q = match *kernel {
        KernelSpec::Riesz { alpha, .. } => 2.0 / alpha,
        KernelSpec::Integrable { .. } => 1.0,
    };
    let mut s = 0.0;
    for p in pts.windows(2) {
        let (p0, p1) = (p[0], p[1]);
        s += if q > 1.0 && (p0 == b.xi || p1 == b.xi) {
            let (c, sign) = if p0 == b.xi { (p0, 1.0) } else { (p1, -1.0) };
            integrate(|u| term(c + sign * u.powf(q), -sign * u.powf(q)) * q * u.powf(q - 1.0), 0.0, (p1 - p0).powf(1.0 / q), 1e-13, 1e-10)?
        } else {
            integrate(inner, p0, p1, 1e-13, 1e-10)?
        };
    }
    // symmetrization: one of the two time orderings is nonzero
    Ok(0.5 * (a.zeta * b.zeta).abs() * s)
}

/// ∫ u(r,y′) v^{(r,y′,z)}(t,x) k(y − y′) dy′ by composite Gauss–Legendre (compact kernels).
pub fn representation_d(
    cloud: &AtomCloud,
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cfg: &SolverConfig,
    extra: Atom,
    (t, x): (f64, f64),
) -> Result<f64> {
    if kernel.is_riesz() {
        return Err(Error::Unsupported("the representation check needs a compactly supported kernel".into()));
    }
    let (r, y, z) = (extra.tau, extra.xi, extra.zeta);
    if r >= t {
        return Ok(0.0);
    }
    let a = kernel.reach();
    let lo = (y - a).max(x - (t - r));
    let hi = (y + a).min(x + (t - r));
    if hi <= lo {
        return Ok(0.0);
    }
    let ucfg = SolverConfig { scheme: Scheme::EventDriven, t_max: r, center: 0.5 * (lo + hi), half_width: 0.5 * (hi - lo), times: vec![], ..cfg.clone() };
    let u = Solver::new(kernel, spec, &ucfg)?.solve_u(cloud)?;
    let vs = Solver::new(kernel, spec, &SolverConfig { scheme: Scheme::EventDriven, ..probe_config(cfg, t, x) })?;
    let panels = ((hi - lo) / 0.02).ceil().max(1.0) as usize;
    let (gx, gw) = gauss_legendre(4);
    let ph = (hi - lo) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let m = lo + (p as f64 + 0.5) * ph;
        for (xi, wi) in gx.iter().zip(&gw) {
            let yp = m + 0.5 * ph * xi;
            let v = vs.solve_v_delta(cloud, r, yp, z)?.eval(t, x)?;
            s += 0.5 * ph * wi * u.eval(r, yp)? * v * kernel.eval(y - yp);
        }
    }
    Ok(s)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Max-over-median rule for an unspecified constant.
pub const RATIO_SPREAD: f64 = 5.0;
const MAX_REL_SE: f64 = 0.2;

struct RatioSummary {
    status: Status,
    max_ratio: f64,
    median_ratio: f64,
    zero_violations: usize,
}

/// Turns per-replicate |D| rows into the bounded-ratio verdict.
fn ratio_report(rep: &mut ExperimentReport, labels: &[String], rhs: &[f64], rows: &[Vec<f64>], p: f64, t: f64) -> RatioSummary {
    let mut ratios = vec![];
    let mut zero_violations = 0;
    let mut inconclusive = false;
    for (j, label) in labels.iter().enumerate() {
        let absd: Vec<f64> = rows.iter().map(|r| r[j].abs().powf(p)).collect();
        if rhs[j] == 0.0 {
            let nz = absd.iter().filter(|v| **v != 0.0).count();
            zero_violations += nz;
            rep.push(&format!("ratio{label}"), (None, Some(t), None), 0.0, None, Some(Status::from_bool(nz == 0)));
            continue;
        }
        let (m, se) = jackknife(&absd, JACKKNIFE_BLOCKS, parts_mean);
        let norm = m.powf(1.0 / p);
        let rel = if m > 0.0 { se / (p * m) } else { f64::INFINITY };
        if rel > MAX_REL_SE {
            inconclusive = true;
        }
        let ratio = norm / rhs[j];
        rep.push(&format!("norm_p{label}"), (None, Some(t), None), norm, Some(norm * rel), None);
        rep.push(&format!("ratio{label}"), (None, Some(t), None), ratio, Some(ratio * rel), None);
        ratios.push(ratio);
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let median_ratio = median(&ratios);
    let status = if zero_violations > 0 {
        Status::Fail
    } else if inconclusive || ratios.is_empty() {
        Status::Inconclusive
    } else {
        Status::from_bool(max_ratio <= RATIO_SPREAD * median_ratio)
    };
    RatioSummary { status, max_ratio, median_ratio, zero_violations }
}

fn finish_ratio(rep: &mut ExperimentReport, s: RatioSummary, t: f64) {
    rep.push("fitted_constant", (None, Some(t), None), s.max_ratio, None, None);
    rep.push("median_ratio", (None, Some(t), None), s.median_ratio, None, None);
    rep.check("zero_region_violations", (None, Some(t), None), s.zero_violations as f64, Status::from_bool(s.zero_violations == 0));
    rep.check("max_over_median", (None, Some(t), None), s.max_ratio / s.median_ratio, s.status);
}

fn sample_probe_cloud(spec: &LevyMeasureSpec, cfg: &SolverConfig, kernel: &KernelSpec, seed: u64, i: usize) -> Result<AtomCloud> {
    let mut rng = stream_rng(seed, i as u64);
    sample_atoms(spec, cfg.t_max, cfg.required_half_width(kernel), DEFAULT_ATOM_BUDGET, &mut rng)
}

fn check_samples(n: usize, p: f64) -> Result<()> {
    if n < 2 * JACKKNIFE_BLOCKS {
        return domain(format!("need at least {} samples, got {n}", 2 * JACKKNIFE_BLOCKS));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return domain(format!("moment order must be at least 1, got {p}"));
    }
    Ok(())
}

/// Estimates ‖D_{r,y,1}u(t,x)‖_p on a grid of (r, y) and tests that its ratio to
/// (G_{t−r}(x−·)∗k)(y) stays bounded. Cells with zero bound must give D = 0 on every draw.
#[allow(clippy::too_many_arguments)]
pub fn verify_key_d(
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cfg: &SolverConfig,
    p: f64,
    (t, x): (f64, f64),
    grid: &[(f64, f64)],
    n_samples: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    check_samples(n_samples, p)?;
    if !spec.moment(p).is_finite() {
        return domain(format!("m_{p} is not finite"));
    }
    let pc = probe_config(cfg, t, x);
    let solver = Solver::new(kernel, spec, &pc)?;
    let atoms: Vec<Atom> = grid.iter().map(|&(r, y)| Atom::new(r, y, 1.0)).collect();
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let cloud = sample_probe_cloud(spec, &pc, kernel, seed, i)?;
            let pd = ProbeDifferences::new(&solver, &cloud)?;
            atoms.iter().map(|a| pd.d(*a)).collect()
        })
        .collect::<Result<_>>()?;
    let rhs: Vec<f64> = atoms.iter().map(|a| key_d_bound(kernel, (t, x), *a)).collect();
    let labels: Vec<String> = grid.iter().map(|(r, y)| format!("[r={r},y={y}]")).collect();
    let mut rep = ExperimentReport::new("malliavin-verify-D", &kernel.label(), &spec.to_string(), Some(p));
    rep.note(format!("probe (t,x)=({t},{x}); n={n_samples}; bounded ratio means max <= {RATIO_SPREAD} x median"));
    let s = ratio_report(&mut rep, &labels, &rhs, &rows, p, t);
    finish_ratio(&mut rep, s, t);
    Ok(rep)
}

/// Second-order analogue of [`verify_key_d`] over pairs of added points (jumps set to 1).
#[allow(clippy::too_many_arguments)]
pub fn verify_key_d2(
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cfg: &SolverConfig,
    p: f64,
    (t, x): (f64, f64),
    pairs: &[((f64, f64), (f64, f64))],
    n_samples: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    check_samples(n_samples, p)?;
    let pc = probe_config(cfg, t, x);
    let solver = Solver::new(kernel, spec, &pc)?;
    let atoms: Vec<(Atom, Atom)> =
        pairs.iter().map(|&((r1, y1), (r2, y2))| (Atom::new(r1, y1, 1.0), Atom::new(r2, y2, 1.0))).collect();
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let cloud = sample_probe_cloud(spec, &pc, kernel, seed, i)?;
            let pd = ProbeDifferences::new(&solver, &cloud)?;
            atoms.iter().map(|(a, b)| pd.d2(*a, *b)).collect()
        })
        .collect::<Result<_>>()?;
    let rhs: Vec<f64> = atoms.iter().map(|(a, b)| key_d2_bound(kernel, (t, x), *a, *b)).collect::<Result<_>>()?;
    let labels: Vec<String> =
        pairs.iter().map(|((r1, y1), (r2, y2))| format!("[r1={r1},y1={y1},r2={r2},y2={y2}]")).collect();
    let mut rep = ExperimentReport::new("malliavin-verify-D2", &kernel.label(), &spec.to_string(), Some(p));
    rep.note(format!("probe (t,x)=({t},{x}); n={n_samples}; bounded ratio means max <= {RATIO_SPREAD} x median"));
    let s = ratio_report(&mut rep, &labels, &rhs, &rows, p, t);
    finish_ratio(&mut rep, s, t);
    Ok(rep)
}

/// Quadrature nodes (r, y) and weights for ‖DF_R(t)‖²: Gauss–Legendre in r, trapezoid in y
/// over the reach-extended cone of [−R, R].
pub fn poincare_nodes(kernel: &KernelSpec, t: f64, radius: f64, r_nodes: usize, y_step: f64) -> Result<(Vec<(f64, f64)>, Vec<f64>)> {
    if !(y_step > 0.0 && r_nodes > 0 && t > 0.0 && radius > 0.0) {
        return domain("poincare grid needs positive t, R, step and node count");
    }
    let (rs, rw) = gauss_legendre_on(r_nodes, 0.0, t);
    let ymax = ((radius + t + kernel.reach()) / y_step).ceil() * y_step;
    let ny = (2.0 * ymax / y_step).round() as usize;
    let mut nodes = vec![];
    let mut weights = vec![];
    for (r, wr) in rs.iter().zip(&rw) {
        for j in 0..=ny {
            let y = -ymax + j as f64 * y_step;
            let wy = if j == 0 || j == ny { 0.5 * y_step } else { y_step };
            nodes.push((*r, y));
            weights.push(wr * wy);
        }
    }
    Ok((nodes, weights))
}

/// F_R(t) and D_{r,y,1}F_R(t) at the given nodes, for one realization.
/// `solver` targets [−R, R] at time t.
pub fn average_derivative_field(solver: &Solver, cloud: &AtomCloud, kernel: &KernelSpec, nodes: &[(f64, f64)]) -> Result<(f64, Vec<f64>)> {
    let cfg = solver.config();
    let (t, c, radius) = (cfg.t_max, cfg.center, cfg.half_width);
    let f = solver.solve_u(cloud)?.spatial_average(t, radius)?;
    let reach = kernel.reach();
    let d = nodes
        .iter()
        .map(|&(r, y)| {
            if r >= t || (y - c).abs() >= radius + (t - r) + reach {
                return Ok(0.0);
            }
            let with = cloud.with_atom(Atom::new(r, y, 1.0))?;
            Ok(solver.solve_u(&with)?.spatial_average(t, radius)? - f)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((f, d))
}

/// Var(F) ≤ E‖DF‖²_H with ‖DF‖² = m₂ Σ w_j (D_{node j,1}F)² (D is linear in the jump size).
pub fn poincare_check(f_samples: &[f64], d_field: &[Vec<f64>], weights: &[f64], spec: &LevyMeasureSpec) -> Result<ExperimentReport> {
    if f_samples.len() != d_field.len() {
        return domain("F samples and derivative fields must be paired");
    }
    if f_samples.len() < 2 * JACKKNIFE_BLOCKS {
        return domain(format!("need at least {} paired samples", 2 * JACKKNIFE_BLOCKS));
    }
    if d_field.iter().any(|d| d.len() != weights.len()) {
        return domain("derivative field length does not match the quadrature weights");
    }
    let m2 = spec.m2();
    let norms: Vec<f64> = d_field
        .iter()
        .map(|d| m2 * crate::stats::estimators::sum(d.iter().zip(weights).map(|(v, w)| w * v * v)))
        .collect();
    let (var, var_se) = variance_se(f_samples);
    let (en, en_se) = jackknife(&norms, JACKKNIFE_BLOCKS, parts_mean);
    let se = (var_se * var_se + en_se * en_se).sqrt();
    let mut rep = ExperimentReport::new("poincare", "", &spec.to_string(), None);
    rep.push("var_F", (None, None, None), var, Some(var_se), None);
    rep.push("E_norm_DF_sq", (None, None, None), en, Some(en_se), None);
    let status = if var <= en + 3.0 * se {
        if se > 0.5 * en && var > 0.0 {
            Status::Inconclusive
        } else {
            Status::Pass
        }
    } else {
        Status::Fail
    };
    rep.check("gap_over_se", (None, None, None), if se > 0.0 { (en - var) / se } else { f64::INFINITY }, status);
    Ok(rep)
}

/// Monte-Carlo Poincaré check for F_R(t): `n` realizations, D evaluated on
/// [`poincare_nodes`] with `r_nodes` Gauss–Legendre times and spatial step `y_step`.
#[allow(clippy::too_many_arguments)]
pub fn poincare_experiment(
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    t: f64,
    radius: f64,
    n: usize,
    seed: u64,
    r_nodes: usize,
    y_step: f64,
) -> Result<ExperimentReport> {
    let (nodes, weights) = poincare_nodes(kernel, t, radius, r_nodes, y_step)?;
    let cfg = SolverConfig::event_driven(t, 0.0, radius);
    let solver = Solver::new(kernel, spec, &cfg)?;
    let half_width = cfg.required_half_width(kernel);
    let pairs: Vec<(f64, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let cloud = sample_atoms(spec, t, half_width, DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, i))?;
            average_derivative_field(&solver, &cloud, kernel, &nodes)
        })
        .collect::<Result<_>>()?;
    let (fs, ds): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    let mut rep = poincare_check(&fs, &ds, &weights, spec)?;
    let label = kernel.label();
    rep.kernel = label.clone();
    for row in &mut rep.rows {
        row.kernel = label.clone();
        row.r = Some(radius);
        row.t = Some(t);
    }
    rep.note(format!("R={radius}, t={t}, n={n}, {} derivative nodes", nodes.len()));
    Ok(rep)
}

/// Compares D with its integral representation on fixed clouds of at most two atoms.
/// Compactly supported kernels only.
pub fn representation_spot_check(kernel: &KernelSpec, spec: &LevyMeasureSpec, tol: f64) -> Result<ExperimentReport> {
    let (t, x) = (1.0, 0.0);
    let cfg = SolverConfig::at_point(t, x).with_quad_h(1e-3);
    let l = cfg.required_half_width(kernel);
    let bases = [
        vec![],
        vec![Atom::new(0.35, 0.2, 1.0)],
        vec![Atom::new(0.15, 0.4, 1.0), Atom::new(0.55, -0.3, -1.0)],
    ];
    let extras = [Atom::new(0.3, 0.1, 1.0), Atom::new(0.1, -0.6, -1.0), Atom::new(0.7, 0.2, 1.0)];
    let mut rep = ExperimentReport::new("representation", &kernel.label(), &spec.to_string(), None);
    let mut worst: f64 = 0.0;
    for (b, atoms) in bases.iter().enumerate() {
        let cloud = AtomCloud::new(t, l, atoms.clone())?;
        for (e, extra) in extras.iter().enumerate() {
            let d = difference_d(&cloud, kernel, spec, &cfg, *extra, (t, x))?;
            let r = representation_d(&cloud, kernel, spec, &cfg, *extra, (t, x))?;
            rep.push(&format!("abs_gap[cloud={b},extra={e}]"), (None, Some(t), None), (d - r).abs(), None, None);
            worst = worst.max((d - r).abs());
        }
    }
    rep.check("max_abs_gap", (None, Some(t), None), worst, Status::from_bool(worst <= tol));
    Ok(rep)
}
