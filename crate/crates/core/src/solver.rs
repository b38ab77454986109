//! Mild-equation solvers: u driven by the Lévy colored noise, the delta-forced companion v,
//! and the Gaussian comparison model U.
//!
//! The event-driven scheme represents the contribution of atom i as an impulse density
//! P_i(y) = ζ_i u(τ_i⁻, y) k(y − ξ_i), piecewise constant on cells of width h, so that
//! u(t, x) = 1 + Σ_{τ_i < t} ½ ∫_{x−(t−τ_i)}^{x+(t−τ_i)} P_i. Cells are clipped to the backward
//! cone of the target region; nothing outside that cone can reach the target.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kernels::KernelSpec;
use crate::levy_noise::{Atom, AtomCloud, LevyMeasureSpec};

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    EventDriven,
    Grid,
}

/// Geometry and resolution of one solve.
///
/// The target region is [center − half_width, center + half_width] × [0, t_max]; values are
/// only available there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    /// Grid spacing (Grid runs at Δt = Δx) and the upper bound on the event-driven cell width.
    pub dx: f64,
    /// Event-driven cell width override.
    pub quad_h: Option<f64>,
    /// Picard depth.
    pub n_max: usize,
    pub t_max: f64,
    pub center: f64,
    pub half_width: f64,
    /// Snapshot times for the schemes that sweep forward (Grid, Riesz event-driven).
    /// Empty means {t_max}.
    pub times: Vec<f64>,
}

impl SolverConfig {
    pub fn event_driven(t_max: f64, center: f64, half_width: f64) -> Self {
        SolverConfig {
            scheme: Scheme::EventDriven,
            dx: 0.05,
            quad_h: None,
            n_max: 3,
            t_max,
            center,
            half_width,
            times: Vec::new(),
        }
    }

    /// Event-driven solve targeted at the single point (t, x).
    pub fn at_point(t: f64, x: f64) -> Self {
        Self::event_driven(t, x, 0.0)
    }

    pub fn grid(t_max: f64, center: f64, half_width: f64, dx: f64) -> Self {
        SolverConfig { scheme: Scheme::Grid, dx, ..Self::event_driven(t_max, center, half_width) }
    }

    pub fn with_quad_h(mut self, h: f64) -> Self {
        self.quad_h = Some(h);
        self
    }

    pub fn with_times(mut self, times: &[f64]) -> Self {
        self.times = times.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return domain(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.dx > 0.0) {
            return domain(format!("dx must be positive, got {}", self.dx));
        }
        if let Some(h) = self.quad_h {
            if !(h > 0.0) {
                return domain(format!("quadrature cell width must be positive, got {h}"));
            }
        }
        if !(self.half_width >= 0.0 && self.center.is_finite()) {
            return domain("target region must have a finite center and half-width >= 0");
        }
        if self.n_max < 1 {
            return domain("Picard depth must be at least 1");
        }
        for &t in &self.times {
            if !(0.0..=self.t_max).contains(&t) {
                return domain(format!("snapshot time {t} outside [0, {}]", self.t_max));
            }
        }
        Ok(())
    }

    /// Event-driven cell width: min(dx, a/8) for integrable k, the largest power of two not above
    /// truncation_radius/2048 for Riesz (keeps targets on the node grid).
    pub fn cell_width(&self, kernel: &KernelSpec) -> f64 {
        if let Some(h) = self.quad_h {
            return h;
        }
        match *kernel {
            KernelSpec::Integrable { support, .. } => self.dx.min(support / 8.0),
            KernelSpec::Riesz { truncation_radius, .. } => 2f64.powi((truncation_radius / 2048.0).log2().floor() as i32),
        }
    }

    /// Half-width L an atom cloud must cover for this solve.
    pub fn required_half_width(&self, kernel: &KernelSpec) -> f64 {
        self.center.abs() + self.half_width + self.t_max + kernel.reach()
    }

    fn snapshot_times(&self) -> Vec<f64> {
        let mut t = if self.times.is_empty() { vec![self.t_max] } else { self.times.clone() };
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    fn contains(&self, t: f64, x: f64) -> bool {
        let tol = 1e-9 * (1.0 + self.half_width + self.center.abs());
        (0.0..=self.t_max * (1.0 + 1e-12)).contains(&t) && (x - self.center).abs() <= self.half_width + tol
    }
}

/// Deterministic forcing of the equation: 1 for u, z·G_{t−r}(·−y) for v^{(r,y,z)}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Forcing {
    One,
    Delta { r: f64, y: f64, z: f64 },
}

impl Forcing {
    fn value(&self, t: f64, x: f64) -> f64 {
        match *self {
            Forcing::One => 1.0,
            Forcing::Delta { r, y, z } => {
                if t > r && (x - y).abs() < t - r {
                    0.5 * z
                } else {
                    0.0
                }
            }
        }
    }

    /// ∫_{lo}^{hi} of the forcing, minus the constant for u.
    fn centered_integral(&self, t: f64, lo: f64, hi: f64) -> f64 {
        match *self {
            Forcing::One => 0.0,
            Forcing::Delta { r, y, z } => {
                let s = (t - r).max(0.0);
                0.5 * z * ((y + s).min(hi) - (y - s).max(lo)).max(0.0)
            }
        }
    }

    fn start(&self) -> f64 {
        match *self {
            Forcing::One => 0.0,
            Forcing::Delta { r, .. } => r,
        }
    }
}

/// Piecewise-constant impulse density of one atom.
#[derive(Clone, Debug)]
struct Impulse {
    tau: f64,
    origin: f64,
    inv_h: f64,
    k_lo: i64,
    edges: Vec<f64>,
    mass: Vec<f64>,
    cum: Vec<f64>,
    qcum: Vec<f64>,
}

impl Impulse {
    /// Cells of the grid origin + kh, restricted to [lo, hi].
    fn cells(origin: f64, h: f64, lo: f64, hi: f64) -> (i64, Vec<f64>) {
        let k_lo = ((lo - origin) / h).floor() as i64;
        let k_hi = ((hi - origin) / h).ceil() as i64;
        let mut edges = Vec::with_capacity((k_hi - k_lo + 2).max(2) as usize);
        edges.push(lo);
        for k in k_lo + 1..k_hi {
            let e = origin + k as f64 * h;
            if e > lo && e < hi {
                edges.push(e);
            }
        }
        edges.push(hi);
        (k_lo, edges)
    }

    fn new(tau: f64, origin: f64, h: f64, k_lo: i64, edges: Vec<f64>, mass: Vec<f64>) -> Self {
        let n = mass.len();
        let mut cum = Vec::with_capacity(n + 1);
        let mut qcum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        qcum.push(0.0);
        for m in 0..n {
            let w = edges[m + 1] - edges[m];
            qcum.push(qcum[m] + cum[m] * w + 0.5 * mass[m] * w);
            cum.push(cum[m] + mass[m]);
        }
        Impulse { tau, origin, inv_h: 1.0 / h, k_lo, edges, mass, cum, qcum }
    }

    fn lo(&self) -> f64 {
        self.edges[0]
    }

    fn hi(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    #[inline]
    fn locate(&self, x: f64) -> usize {
        let n = self.mass.len();
        let guess = ((x - self.origin) * self.inv_h).floor() as i64 - self.k_lo;
        let mut m = guess.clamp(0, n as i64 - 1) as usize;
        while m > 0 && x < self.edges[m] {
            m -= 1;
        }
        while m + 1 < n && x >= self.edges[m + 1] {
            m += 1;
        }
        m
    }

    /// ∫_{-∞}^{x} P.
    #[inline]
    fn cumulative(&self, x: f64) -> f64 {
        if x <= self.lo() {
            return 0.0;
        }
        let n = self.mass.len();
        if x >= self.hi() {
            return self.cum[n];
        }
        let m = self.locate(x);
        let w = self.edges[m + 1] - self.edges[m];
        self.cum[m] + self.mass[m] * (x - self.edges[m]) / w
    }

    #[inline]
    fn window(&self, lo: f64, hi: f64) -> f64 {
        if hi <= self.lo() || lo >= self.hi() || hi <= lo {
            return 0.0;
        }
        self.cumulative(hi) - self.cumulative(lo)
    }

    /// ∫_{-∞}^{x} ∫_{-∞}^{s} P.
    fn second(&self, x: f64) -> f64 {
        let n = self.mass.len();
        if x <= self.lo() {
            return 0.0;
        }
        if x >= self.hi() {
            return self.qcum[n] + self.cum[n] * (x - self.hi());
        }
        let m = self.locate(x);
        let w = self.edges[m + 1] - self.edges[m];
        let d = x - self.edges[m];
        self.qcum[m] + self.cum[m] * d + 0.5 * self.mass[m] * d * d / w
    }

    /// ∫_{c−R}^{c+R} ½ ∫_{x−d}^{x+d} P dy dx.
    fn averaged(&self, c: f64, radius: f64, d: f64) -> f64 {
        0.5 * (self.second(c + radius + d) - self.second(c - radius + d) - self.second(c + radius - d)
            + self.second(c - radius - d))
    }
}

/// Event-driven field as a superposition of impulses.
#[derive(Clone, Debug)]
struct Superposition {
    forcing: Forcing,
    impulses: Vec<Impulse>,
}

impl Superposition {
    fn eval(&self, t: f64, x: f64) -> f64 {
        if let Forcing::Delta { r, y, .. } = self.forcing {
            // closed light cone of the forcing; rounding in the windows must not leak past it
            if (x - y).abs() >= t - r {
                return 0.0;
            }
        }
        let mut u = self.forcing.value(t, x);
        for imp in &self.impulses {
            if imp.tau >= t {
                break;
            }
            let d = t - imp.tau;
            u += 0.5 * imp.window(x - d, x + d);
        }
        u
    }

    fn average(&self, t: f64, c: f64, radius: f64) -> f64 {
        let mut s = self.forcing.centered_integral(t, c - radius, c + radius);
        for imp in &self.impulses {
            if imp.tau >= t {
                break;
            }
            s += imp.averaged(c, radius, t - imp.tau);
        }
        s
    }

    /// Values at the given points at time t, summing impulses in time order.
    fn eval_many(&self, t: f64, xs: &[f64], lo: f64, hi: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(xs.iter().map(|&x| self.forcing.value(t, x)));
        for imp in &self.impulses {
            if imp.tau >= t {
                break;
            }
            let d = t - imp.tau;
            if imp.hi() <= lo - d || imp.lo() >= hi + d {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(xs) {
                *o += 0.5 * imp.window(x - d, x + d);
            }
        }
    }
}

/// Node values at snapshot times on a uniform grid (Grid scheme and Gaussian model).
#[derive(Clone, Debug)]
struct NodeField {
    x0: f64,
    h: f64,
    times: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn interp(x0: f64, h: f64, v: &[f64], x: f64) -> f64 {
    let s = (x - x0) / h;
    let i = (s.floor() as i64).clamp(0, v.len() as i64 - 2) as usize;
    let f = s - i as f64;
    v[i] + f * (v[i + 1] - v[i])
}

/// ∫_a^b of the piecewise-linear interpolant of v − shift.
fn integrate_linear(x0: f64, h: f64, v: &[f64], shift: f64, a: f64, b: f64) -> f64 {
    let n = v.len();
    let node = |i: usize| x0 + i as f64 * h;
    let mut s = 0.0;
    for i in 0..n - 1 {
        let (l, r) = (node(i).max(a), node(i + 1).min(b));
        if r <= l {
            continue;
        }
        let (fl, fr) = (interp(x0, h, v, l), interp(x0, h, v, r));
        s += 0.5 * (fl + fr - 2.0 * shift) * (r - l);
    }
    s
}

fn find_time(times: &[f64], t: f64) -> Result<usize> {
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-9 * (1.0 + t.abs()))
        .ok_or_else(|| Error::Domain(format!("time {t} is not a snapshot time of this field")))
}

/// Snapshots of the Riesz accumulator sweep: u − 1 = ½[A(x+t) − B(x−t)] and its primitives.
#[derive(Clone, Debug)]
struct SweepField {
    z0: f64,
    w0: f64,
    h: f64,
    times: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    aa: Vec<Vec<f64>>,
    bb: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Repr {
    Super(Superposition),
    Nodes(NodeField),
    Sweep(SweepField),
}

/// One realization of u (or v, or U) on the target region.
#[derive(Clone, Debug)]
pub struct SolutionField {
    cfg: SolverConfig,
    repr: Repr,
}

impl SolutionField {
    /// Value at (t, x). Sweeping schemes only answer at their snapshot times.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        if !self.cfg.contains(t, x) {
            return domain(format!("({t}, {x}) lies outside the target region of this field"));
        }
        if t == 0.0 {
            return Ok(match &self.repr {
                Repr::Super(s) => s.forcing.value(0.0, x),
                _ => 1.0,
            });
        }
        Ok(match &self.repr {
            Repr::Super(s) => s.eval(t, x),
            Repr::Nodes(n) => {
                let i = find_time(&n.times, t)?;
                interp(n.x0, n.h, &n.rows[i], x)
            }
            Repr::Sweep(s) => {
                let i = find_time(&s.times, t)?;
                let t = s.times[i];
                1.0 + 0.5 * (interp(s.z0, s.h, &s.a[i], x + t) - interp(s.w0, s.h, &s.b[i], x - t))
            }
        })
    }

    /// ∫_{c−R}^{c+R} (u(t,x) − 1) dx around the target center (∫ v for delta forcing).
    pub fn spatial_average(&self, t: f64, radius: f64) -> Result<f64> {
        self.spatial_average_on(t, self.cfg.center - radius, self.cfg.center + radius)
    }

    /// ∫_{lo}^{hi} (u(t,x) − 1) dx.
    pub fn spatial_average_on(&self, t: f64, lo: f64, hi: f64) -> Result<f64> {
        if !(hi >= lo) || !self.cfg.contains(t, lo) || !self.cfg.contains(t, hi) {
            return domain(format!("[{lo}, {hi}] at t={t} is not inside the target region"));
        }
        if t == 0.0 || hi == lo {
            return Ok(match &self.repr {
                Repr::Super(s) => s.forcing.centered_integral(0.0, lo, hi),
                _ => 0.0,
            });
        }
        let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        Ok(match &self.repr {
            Repr::Super(s) => s.average(t, c, r),
            Repr::Nodes(n) => {
                let i = find_time(&n.times, t)?;
                integrate_linear(n.x0, n.h, &n.rows[i], 1.0, lo, hi)
            }
            Repr::Sweep(s) => {
                let i = find_time(&s.times, t)?;
                let t = s.times[i];
                let aa = |z: f64| interp(s.z0, s.h, &s.aa[i], z);
                let bb = |w: f64| interp(s.w0, s.h, &s.bb[i], w);
                0.5 * (aa(c + r + t) - aa(c - r + t) - bb(c + r - t) + bb(c - r - t))
            }
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Number of impulses kept by an event-driven superposition.
    pub fn impulse_count(&self) -> usize {
        match &self.repr {
            Repr::Super(s) => s.impulses.len(),
            _ => 0,
        }
    }

    /// Cached cell masses (impulse memo table) of an event-driven superposition.
    pub fn memo(&self) -> Vec<(f64, Vec<f64>)> {
        match &self.repr {
            Repr::Super(s) => s.impulses.iter().map(|i| (i.tau, i.mass.clone())).collect(),
            _ => Vec::new(),
        }
    }
}

/// Antiderivative of k sampled on a fine table (Riesz kernels are costly to evaluate).
#[derive(Clone, Debug)]
struct KTable {
    kernel: KernelSpec,
    step: f64,
    stride: usize,
    exact_below: f64,
    values: Vec<f64>,
}

impl KTable {
    fn new(kernel: KernelSpec, h: f64) -> Self {
        match kernel {
            KernelSpec::Riesz { truncation_radius, .. } => {
                // h is an integer number of table steps, at most 64, with at most ~4M entries
                let stride = ((4.0e6 * h / truncation_radius).floor() as usize).clamp(1, 64);
                let step = h / stride as f64;
                let n = (truncation_radius / step).ceil() as usize + 2;
                let values = (0..n).map(|i| kernel.antiderivative(i as f64 * step)).collect();
                KTable { kernel, step, stride, exact_below: 4.0 * h, values }
            }
            KernelSpec::Integrable { .. } => {
                KTable { kernel, step: 0.0, stride: 0, exact_below: f64::INFINITY, values: Vec::new() }
            }
        }
    }

    #[inline]
    fn lerp(&self, i: usize, f: f64) -> f64 {
        if i + 1 >= self.values.len() {
            self.values[self.values.len() - 1]
        } else {
            self.values[i] + f * (self.values[i + 1] - self.values[i])
        }
    }

    #[inline]
    fn k(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax < self.exact_below {
            return self.kernel.antiderivative(x);
        }
        let s = ax / self.step;
        let i = s as usize;
        self.lerp(i, s - i as f64).copysign(x)
    }

    /// K(d0 + m·h) for m < n. Table positions advance by a whole stride per cell, so the
    /// interpolation weight is fixed on each side of the origin.
    fn fill(&self, d0: f64, h: f64, n: usize, out: &mut Vec<f64>) {
        out.clear();
        if self.values.is_empty() {
            out.extend((0..n).map(|m| self.kernel.antiderivative(d0 + m as f64 * h)));
            return;
        }
        let e = self.exact_below;
        let first_at_least = |x: f64| (((x - d0) / h).ceil().max(0.0) as usize).min(n);
        let neg_end = first_at_least(-e + 1e-12 * h);
        let pos_start = first_at_least(e).max(neg_end);
        if neg_end > 0 {
            let s0 = -d0 / self.step;
            let (i0, f) = (s0 as usize, s0 - s0.floor());
            out.extend((0..neg_end).map(|m| -self.lerp(i0.saturating_sub(m * self.stride), f)));
        }
        out.extend((neg_end..pos_start).map(|m| self.kernel.antiderivative(d0 + m as f64 * h)));
        if pos_start < n {
            let s0 = (d0 + pos_start as f64 * h) / self.step;
            let (i0, f) = (s0 as usize, s0 - s0.floor());
            out.extend((0..n - pos_start).map(|m| self.lerp(i0 + m * self.stride, f)));
        }
    }
}

/// Reusable solver for one (kernel, noise, config) triple; precomputes kernel tables.
#[derive(Clone, Debug)]
pub struct Solver {
    kernel: KernelSpec,
    spec: LevyMeasureSpec,
    cfg: SolverConfig,
    h: f64,
    table: KTable,
}

impl Solver {
    pub fn new(kernel: &KernelSpec, spec: &LevyMeasureSpec, cfg: &SolverConfig) -> Result<Self> {
        kernel.validate()?;
        spec.validate()?;
        cfg.validate()?;
        let drift = spec.drift();
        if drift != 0.0 {
            if cfg.scheme == Scheme::EventDriven {
                return Err(Error::Unsupported(
                    "the event-driven scheme needs a centered jump law (m1 = 0); use the grid scheme".into(),
                ));
            }
            if kernel.is_riesz() {
                return Err(Error::Unsupported("compensator drift needs an integrable kernel (finite L1 norm)".into()));
            }
        }
        let h = match cfg.scheme {
            Scheme::EventDriven => cfg.cell_width(kernel),
            Scheme::Grid => cfg.dx,
        };
        if let (Scheme::Grid, KernelSpec::Integrable { support, .. }) = (cfg.scheme, kernel) {
            if h > *support {
                return domain(format!("grid spacing {h} exceeds the kernel support half-width {support}"));
            }
        }
        let table = KTable::new(*kernel, h);
        Ok(Solver { kernel: *kernel, spec: *spec, cfg: cfg.clone(), h, table })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn cell_width(&self) -> f64 {
        self.h
    }

    fn check_cloud(&self, cloud: &AtomCloud) -> Result<()> {
        let need = self.cfg.required_half_width(&self.kernel);
        if cloud.half_width < need * (1.0 - 1e-12) {
            return domain(format!(
                "atom window half-width {} does not cover the target region plus cone and kernel reach ({need})",
                cloud.half_width
            ));
        }
        if cloud.t_max < self.cfg.t_max * (1.0 - 1e-12) {
            return domain(format!("atom window horizon {} is shorter than t_max {}", cloud.t_max, self.cfg.t_max));
        }
        Ok(())
    }

    /// u for one realization.
    pub fn solve_u(&self, cloud: &AtomCloud) -> Result<SolutionField> {
        self.check_cloud(cloud)?;
        let repr = match (self.cfg.scheme, self.kernel) {
            (Scheme::EventDriven, KernelSpec::Riesz { .. }) => Repr::Sweep(self.sweep(cloud)),
            (Scheme::EventDriven, _) => Repr::Super(self.superpose(cloud.atoms(), Forcing::One, None)),
            (Scheme::Grid, _) => Repr::Nodes(self.leapfrog(cloud)?),
        };
        Ok(SolutionField { cfg: self.cfg.clone(), repr })
    }

    /// v^{(r,y,z)} for one realization (event-driven only).
    pub fn solve_v_delta(&self, cloud: &AtomCloud, r: f64, y: f64, z: f64) -> Result<SolutionField> {
        self.check_v(cloud, r)?;
        let f = Forcing::Delta { r, y, z };
        Ok(SolutionField { cfg: self.cfg.clone(), repr: Repr::Super(self.superpose(cloud.atoms(), f, None)) })
    }

    fn check_v(&self, cloud: &AtomCloud, r: f64) -> Result<()> {
        self.check_cloud(cloud)?;
        if !(r >= 0.0 && r < self.cfg.t_max) {
            return domain(format!("v needs 0 <= r < T, got r={r}"));
        }
        if self.cfg.scheme != Scheme::EventDriven {
            return Err(Error::Unsupported("the delta-forced equation is solved by the event-driven scheme only".into()));
        }
        Ok(())
    }

    /// Picard iterates v₀, …, v_{n_max} of the delta-forced equation (u when `forcing` is One).
    pub fn picard_iterates(&self, cloud: &AtomCloud, forcing: Forcing) -> Result<Vec<SolutionField>> {
        match forcing {
            Forcing::Delta { r, .. } => self.check_v(cloud, r)?,
            Forcing::One => {
                self.check_cloud(cloud)?;
                if self.cfg.scheme != Scheme::EventDriven {
                    return Err(Error::Unsupported("Picard iterates use the event-driven scheme".into()));
                }
            }
        }
        let mut out = vec![Superposition { forcing, impulses: Vec::new() }];
        for _ in 0..self.cfg.n_max {
            let next = self.superpose(cloud.atoms(), forcing, out.last());
            out.push(next);
        }
        Ok(out.into_iter().map(|s| SolutionField { cfg: self.cfg.clone(), repr: Repr::Super(s) }).collect())
    }

    /// Cell interval of atom `a` (kernel support ∩ target cone ∩ forcing cone).
    fn atom_interval(&self, a: &Atom, forcing: Forcing) -> Option<(f64, f64)> {
        let c = &self.cfg;
        if a.tau > c.t_max || a.tau <= forcing.start() {
            return None;
        }
        let reach = self.kernel.reach();
        let cone = c.half_width + (c.t_max - a.tau);
        let mut lo = (a.xi - reach).max(c.center - cone);
        let mut hi = (a.xi + reach).min(c.center + cone);
        if let Forcing::Delta { r, y, .. } = forcing {
            lo = lo.max(y - (a.tau - r));
            hi = hi.min(y + (a.tau - r));
        }
        (hi > lo).then_some((lo, hi))
    }

    fn superpose(&self, atoms: &[Atom], forcing: Forcing, source: Option<&Superposition>) -> Superposition {
        let h = self.h;
        let global = self.cfg.center - self.cfg.half_width - self.cfg.t_max;
        let mut me = Superposition { forcing, impulses: Vec::new() };
        let mut mids = Vec::new();
        let mut vals = Vec::new();
        for a in atoms {
            let Some((lo, hi)) = self.atom_interval(a, forcing) else { continue };
            let origin = match self.kernel {
                KernelSpec::Integrable { support, .. } => a.xi - support,
                KernelSpec::Riesz { .. } => global,
            };
            let (k_lo, edges) = Impulse::cells(origin, h, lo, hi);
            mids.clear();
            mids.extend(edges.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            let field = source.unwrap_or(&me);
            field.eval_many(a.tau, &mids, lo, hi, &mut vals);
            let mut k_prev = self.table.k(edges[0] - a.xi);
            let mass = edges[1..]
                .iter()
                .zip(&vals)
                .map(|(&e, &u)| {
                    let k_next = self.table.k(e - a.xi);
                    let m = a.zeta * u * (k_next - k_prev);
                    k_prev = k_next;
                    m
                })
                .collect();
            me.impulses.push(Impulse::new(a.tau, origin, h, k_lo, edges, mass));
        }
        me
    }

    /// Riesz event-driven sweep with running accumulators A(z) = Σ C_i(z − τ_i), B(w) = Σ C_i(w + τ_i),
    /// C_i the cumulative impulse of atom i, and their primitives AA, BB.
    fn sweep(&self, cloud: &AtomCloud) -> SweepField {
        let c = &self.cfg;
        let h = self.h;
        let times = c.snapshot_times();
        let n_cells = ((c.half_width + c.t_max) / h).ceil() as usize * 2;
        let e0 = c.center - 0.5 * n_cells as f64 * h;
        let nt = (c.t_max / h).ceil() as usize + 1;
        let z0 = e0;
        let w0 = e0 - nt as f64 * h;
        let n_nodes = n_cells + nt + 1;
        let mut a = vec![0.0; n_nodes];
        let mut b = vec![0.0; n_nodes];
        let mut aa = vec![0.0; n_nodes];
        let mut bb = vec![0.0; n_nodes];
        let mut out = SweepField { z0, w0, h, times: times.clone(), a: vec![], b: vec![], aa: vec![], bb: vec![] };
        let snap = |a: &Vec<f64>, b: &Vec<f64>, aa: &Vec<f64>, bb: &Vec<f64>, out: &mut SweepField| {
            out.a.push(a.clone());
            out.b.push(b.clone());
            out.aa.push(aa.clone());
            out.bb.push(bb.clone());
        };
        let mut next_snap = 0;
        let mut kv = Vec::new();
        let mut mass = Vec::new();
        let mut cum = Vec::new();
        let mut qcum = Vec::new();
        for at in cloud.atoms() {
            while next_snap < times.len() && times[next_snap] <= at.tau {
                snap(&a, &b, &aa, &bb, &mut out);
                next_snap += 1;
            }
            if at.tau > c.t_max {
                break;
            }
            let cone = c.half_width + c.t_max - at.tau;
            let m_lo = ((c.center - cone - e0) / h).floor().max(0.0) as usize;
            let m_hi = (((c.center + cone - e0) / h).ceil() as usize).min(n_cells);
            if m_hi <= m_lo {
                continue;
            }
            let n = m_hi - m_lo;
            let th = at.tau / h;
            // u(τ⁻, y_m) from A at y_m + τ and B at y_m − τ; both sit at a fixed offset from the nodes
            let pa = m_lo as f64 + 0.5 + th;
            let (ia, fa) = (pa.floor() as usize, pa - pa.floor());
            let pb = (m_lo + nt) as f64 + 0.5 - th;
            let (ib, fb) = (pb.floor() as usize, pb - pb.floor());
            self.table.fill(e0 + m_lo as f64 * h - at.xi, h, n + 1, &mut kv);
            mass.clear();
            mass.extend(
                a[ia..=ia + n]
                    .windows(2)
                    .zip(b[ib..=ib + n].windows(2))
                    .zip(kv.windows(2))
                    .map(|((aw, bw), kw)| {
                        let av = aw[0] + fa * (aw[1] - aw[0]);
                        let bv = bw[0] + fb * (bw[1] - bw[0]);
                        at.zeta * (1.0 + 0.5 * (av - bv)) * (kw[1] - kw[0])
                    }),
            );
            cum.clear();
            qcum.clear();
            let (mut cs, mut qs) = (0.0, 0.0);
            cum.push(0.0);
            qcum.push(0.0);
            for &m in &mass {
                qs += cs * h + 0.5 * m * h;
                cs += m;
                cum.push(cs);
                qcum.push(qs);
            }
            // node k of A sits at cell position k − m_lo − τ/h of this impulse, of B at k − nt − m_lo + τ/h
            let deposit = |arr: &mut [f64], prim: &mut [f64], shift: f64| {
                let q = shift.floor();
                let f = shift - q;
                let (fh, f2h) = (f * h, 0.5 * f * f * h);
                let start = m_lo as i64 - q as i64;
                let k_first = start.max(0) as usize;
                let k_end = ((start + n as i64).max(0) as usize).min(n_nodes);
                if k_end > k_first {
                    let j0 = (k_first as i64 - start) as usize;
                    let len = k_end - k_first;
                    for (((ak, pk), (&cj, &qj)), &mj) in arr[k_first..k_end]
                        .iter_mut()
                        .zip(prim[k_first..k_end].iter_mut())
                        .zip(cum[j0..j0 + len].iter().zip(&qcum[j0..j0 + len]))
                        .zip(&mass[j0..j0 + len])
                    {
                        *ak += cj + mj * f;
                        *pk += qj + cj * fh + mj * f2h;
                    }
                }
                let (tot, qtot) = (cum[n], qcum[n]);
                let k_tail = k_end.max(k_first);
                let over0 = (k_tail as i64 - start - n as i64) as f64 + f;
                for (i, (ak, pk)) in arr[k_tail..].iter_mut().zip(prim[k_tail..].iter_mut()).enumerate() {
                    *ak += tot;
                    *pk += qtot + tot * (over0 + i as f64) * h;
                }
            };
            deposit(&mut a, &mut aa, -th);
            deposit(&mut b, &mut bb, th - nt as f64);
        }
        while next_snap < times.len() {
            snap(&a, &b, &aa, &bb, &mut out);
            next_snap += 1;
        }
        out
    }

    fn grid_geometry(&self) -> Result<(f64, usize, usize)> {
        let c = &self.cfg;
        let h = self.h;
        let steps = (c.t_max / h).round() as usize;
        if ((steps as f64) * h - c.t_max).abs() > 1e-9 * c.t_max {
            return domain(format!("t_max {} is not a multiple of the grid step {h}", c.t_max));
        }
        for &t in &c.snapshot_times() {
            if ((t / h).round() * h - t).abs() > 1e-9 * (1.0 + t) {
                return domain(format!("snapshot time {t} is not on the time grid (step {h})"));
            }
        }
        let half = ((c.half_width + c.t_max) / h).ceil() as usize + 1;
        let x0 = c.center - half as f64 * h;
        Ok((x0, 2 * half + 1, steps))
    }

    /// Leapfrog at Δt = Δx with exact impulse injection.
    fn leapfrog(&self, cloud: &AtomCloud) -> Result<NodeField> {
        let (x0, n, steps) = self.grid_geometry()?;
        let h = self.h;
        let m1 = self.spec.drift();
        let drift = if m1 == 0.0 { 0.0 } else { -m1 * self.kernel.l1_norm() * h * h };
        let atoms = cloud.atoms();
        let mut next_atom = 0;
        let mut kick = |n_step: usize, cur: &[f64], next: &mut [f64], corr: &mut [f64], scratch: &mut Scratch| {
            let (tn, tn1) = (n_step as f64 * h, (n_step + 1) as f64 * h);
            while next_atom < atoms.len() && atoms[next_atom].tau <= tn1 {
                let at = atoms[next_atom];
                next_atom += 1;
                if at.tau <= tn {
                    continue;
                }
                let theta = (at.tau - tn) / h;
                let (k0, k1) = match self.kernel {
                    KernelSpec::Integrable { support, .. } => (
                        (((at.xi - support - x0) / h + 0.5).floor().max(0.0)) as usize,
                        ((((at.xi + support - x0) / h + 0.5).floor() as usize) + 1).min(n),
                    ),
                    KernelSpec::Riesz { .. } => (0, n),
                };
                if k1 <= k0 {
                    continue;
                }
                scratch.mass.clear();
                for k in k0..k1 {
                    let base = cur[k] + corr[k];
                    let u = base + theta * (next[k] - base);
                    let xk = x0 + k as f64 * h;
                    let w = self.table.k(xk + 0.5 * h - at.xi) - self.table.k(xk - 0.5 * h - at.xi);
                    scratch.mass.push(at.zeta * u * w);
                }
                inject(&scratch.mass, k0, 1.0 - theta, theta, next, corr, &mut scratch.cum);
            }
        };
        self.march(x0, n, steps, drift, |s, cur, next, corr, sc| kick(s, cur, next, corr, sc))
    }

    fn march<F>(&self, x0: f64, n: usize, steps: usize, drift: f64, mut kick: F) -> Result<NodeField>
    where
        F: FnMut(usize, &[f64], &mut [f64], &mut [f64], &mut Scratch),
    {
        let h = self.h;
        let times = self.cfg.snapshot_times();
        let mut rows = Vec::with_capacity(times.len());
        // u^{-1} chosen so that the first step has zero initial velocity
        let mut prev = vec![1.0 + 0.5 * drift; n];
        let mut cur = vec![1.0; n];
        let mut next = vec![1.0; n];
        let mut corr = vec![0.0; n];
        let mut scratch = Scratch::default();
        let snap_steps: Vec<usize> = times.iter().map(|t| (t / h).round() as usize).collect();
        let mut si = 0;
        for step in 0..=steps {
            while si < snap_steps.len() && snap_steps[si] == step {
                rows.push(cur.clone());
                si += 1;
            }
            if step == steps {
                break;
            }
            next[0] = cur[0];
            next[n - 1] = cur[n - 1];
            for k in 1..n - 1 {
                next[k] = cur[k + 1] + cur[k - 1] - prev[k] + drift * cur[k];
            }
            corr.iter_mut().for_each(|c| *c = 0.0);
            kick(step, &cur, &mut next, &mut corr, &mut scratch);
            for k in 0..n {
                prev[k] = cur[k] + corr[k];
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(NodeField { x0, h, times, rows })
    }

    /// Gaussian comparison model U driven by √m₂ times the colored Gaussian noise (Grid only).
    pub fn solve_gaussian<R: Rng + ?Sized>(&self, m2: f64, rng: &mut R) -> Result<SolutionField> {
        if self.cfg.scheme != Scheme::Grid {
            return Err(Error::Unsupported("the Gaussian model is solved on the grid scheme only".into()));
        }
        if !(m2 >= 0.0) {
            return domain(format!("m2 must be >= 0, got {m2}"));
        }
        let (x0, n, steps) = self.grid_geometry()?;
        let h = self.h;
        let reach = self.kernel.reach();
        let j_max = (reach / h).ceil() as i64 + 1;
        // double cell integrals of k over cells at offset j, per unit white-noise mass
        let taps: Vec<f64> = (-j_max..=j_max)
            .map(|j| {
                let d = j as f64 * h;
                let k2 = |x: f64| self.kernel.second_antiderivative(x);
                (k2(d + h) - 2.0 * k2(d) + k2(d - h)) / h
            })
            .collect();
        let sd = (m2 * h * h).sqrt();
        let c = &self.cfg;
        let (hw, tm, center) = (c.half_width, c.t_max, c.center);
        let mut noise = Vec::new();
        let kick = |step: usize, cur: &[f64], next: &mut [f64], corr: &mut [f64], scratch: &mut Scratch| {
            let tn = step as f64 * h;
            let cone = hw + tm - tn + h;
            let k0 = (((center - cone - x0) / h).floor().max(1.0)) as usize;
            let k1 = ((((center + cone - x0) / h).ceil()) as usize + 1).min(n - 1);
            let l0 = k0 as i64 - j_max;
            let l1 = k1 as i64 + j_max;
            noise.clear();
            for _ in l0..l1 {
                let g: f64 = rng.sample(StandardNormal);
                noise.push(sd * g);
            }
            if m2 == 0.0 {
                return;
            }
            scratch.mass.clear();
            for k in k0..k1 {
                let base = cur[k] + corr[k];
                let u = base + 0.5 * (next[k] - base);
                let mut s = 0.0;
                for (j, &w) in taps.iter().enumerate() {
                    let l = k as i64 - (j as i64 - j_max);
                    s += w * noise[(l - l0) as usize];
                }
                scratch.mass.push(u * s);
            }
            for (i, k) in (k0..k1).enumerate() {
                next[k] += 0.5 * scratch.mass[i];
                corr[k] -= 0.5 * scratch.mass[i];
            }
        };
        let nodes = self.march(x0, n, steps, 0.0, kick)?;
        Ok(SolutionField { cfg: self.cfg.clone(), repr: Repr::Nodes(nodes) })
    }
}

#[derive(Default)]
struct Scratch {
    mass: Vec<f64>,
    cum: Vec<f64>,
}

/// Adds ψ(s_hi·h) to `next` and −ψ(s_lo·h) to `corr`, where ψ(s)(x) = ½∫_{x−s}^{x+s} P and P has
/// cell masses `mass` on node cells k0.. (cell k = [x_k − h/2, x_k + h/2]).
fn inject(mass: &[f64], k0: usize, s_hi: f64, s_lo: f64, next: &mut [f64], corr: &mut [f64], cum: &mut Vec<f64>) {
    let n_cells = mass.len();
    cum.clear();
    cum.push(0.0);
    for m in mass {
        let last = cum[cum.len() - 1];
        cum.push(last + m);
    }
    // C at node k plus offset σ (in cells): cell index k + ½ + σ relative to k0
    let cdf = |pos: f64| -> f64 {
        if pos <= 0.0 {
            return 0.0;
        }
        if pos >= n_cells as f64 {
            return cum[n_cells];
        }
        let j = pos as usize;
        cum[j] + (pos - j as f64) * mass[j]
    };
    let n = next.len();
    let lo = k0.saturating_sub(1);
    let hi = (k0 + n_cells + 1).min(n);
    for k in lo..hi {
        let p = k as f64 - k0 as f64 + 0.5;
        next[k] += 0.5 * (cdf(p + s_hi) - cdf(p - s_hi));
        corr[k] -= 0.5 * (cdf(p + s_lo) - cdf(p - s_lo));
    }
}

/// u for one realization.
pub fn solve_u(cloud: &AtomCloud, kernel: &KernelSpec, spec: &LevyMeasureSpec, cfg: &SolverConfig) -> Result<SolutionField> {
    Solver::new(kernel, spec, cfg)?.solve_u(cloud)
}

/// v^{(r,y,z)} for one realization.
pub fn solve_v_delta(
    cloud: &AtomCloud,
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    r: f64,
    y: f64,
    z: f64,
    cfg: &SolverConfig,
) -> Result<SolutionField> {
    Solver::new(kernel, spec, cfg)?.solve_v_delta(cloud, r, y, z)
}

/// Gaussian comparison model U.
pub fn solve_u_gaussian<R: Rng + ?Sized>(rng: &mut R, kernel: &KernelSpec, m2: f64, cfg: &SolverConfig) -> Result<SolutionField> {
    Solver::new(kernel, &LevyMeasureSpec::rademacher(), cfg)?.solve_gaussian(m2, rng)
}

/// Picard iterates of the delta-forced equation.
pub fn picard_iterates(
    kernel: &KernelSpec,
    spec: &LevyMeasureSpec,
    cloud: &AtomCloud,
    forcing: Forcing,
    cfg: &SolverConfig,
) -> Result<Vec<SolutionField>> {
    Solver::new(kernel, spec, cfg)?.picard_iterates(cloud, forcing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::covariance_kernel;
    use crate::levy_noise::{sample_atoms, stream_rng, DEFAULT_ATOM_BUDGET};
    use crate::quad;
    use proptest::prelude::*;

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    fn cloud_for(cfg: &SolverConfig, k: &KernelSpec, seed: u64, i: u64) -> AtomCloud {
        let spec = LevyMeasureSpec::rademacher();
        sample_atoms(&spec, cfg.t_max, cfg.required_half_width(k), DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, i)).unwrap()
    }

    #[test]
    fn empty_cloud_gives_one() {
        let rad = LevyMeasureSpec::rademacher();
        for k in [KernelSpec::gaussian(), KernelSpec::riesz_for_window(0.5, 3.0)] {
            let cfg = SolverConfig::event_driven(1.0, 0.0, 2.0).with_times(&[0.5, 1.0]);
            let cloud = AtomCloud::empty(1.0, cfg.required_half_width(&k)).unwrap();
            let u = solve_u(&cloud, &k, &rad, &cfg).unwrap();
            assert_eq!(u.eval(1.0, 0.3).unwrap(), 1.0);
            assert_eq!(u.spatial_average(0.5, 2.0).unwrap(), 0.0);
            let g = solve_u(&cloud, &k, &rad, &SolverConfig::grid(1.0, 0.0, 2.0, 0.125)).unwrap();
            assert_eq!(g.eval(1.0, 0.25).unwrap(), 1.0);
        }
    }

    #[test]
    fn one_atom_geometry_and_value() {
        let k = KernelSpec::gaussian_with(1.0, 2.0);
        let a = 2.0;
        let cfg = SolverConfig::event_driven(2.0, 0.0, 5.0).with_quad_h(0.01);
        let cloud = AtomCloud::new(2.0, 9.0, vec![Atom::new(0.5, 1.0, -1.0)]).unwrap();
        let u = solve_u(&cloud, &k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        for i in 0..=100 {
            let x = -5.0 + 0.1 * i as f64;
            for t in [0.25, 0.5, 1.0, 2.0] {
                let v = u.eval(t, x).unwrap();
                let d = (t - 0.5_f64).max(0.0);
                if (x - 1.0).abs() >= d + a {
                    assert_eq!(v, 1.0);
                } else {
                    let exact = 1.0 - 0.5 * (k.antiderivative(x + d - 1.0) - k.antiderivative(x - d - 1.0));
                    assert!((v - exact).abs() < 1e-12, "t={t} x={x}: {v} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn zero_time_returns_initial_condition() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::event_driven(1.0, 0.0, 1.0);
        let u = solve_u(&cloud_for(&cfg, &k, 1, 0), &k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        assert_eq!(u.eval(0.0, 0.5).unwrap(), 1.0);
        assert!(u.eval(1.5, 0.0).is_err());
        assert!(u.eval(0.5, 3.0).is_err());
    }

    #[test]
    fn drift_rejected_by_event_driven() {
        let k = KernelSpec::gaussian();
        let spec = LevyMeasureSpec::two_point(0.5, 1.0, 0.5).unwrap();
        let cfg = SolverConfig::event_driven(1.0, 0.0, 1.0);
        let cloud = AtomCloud::empty(1.0, 10.0).unwrap();
        assert!(matches!(solve_u(&cloud, &k, &spec, &cfg), Err(Error::Unsupported(_))));
        let g = SolverConfig::grid(1.0, 0.0, 1.0, 0.05);
        assert!(solve_u(&cloud, &k, &spec, &g).is_ok());
        assert!(matches!(solve_u(&cloud, &KernelSpec::riesz(0.5, 10.0), &spec, &g), Err(Error::Unsupported(_))));
    }

    #[test]
    fn drift_alone_matches_ode() {
        // no atoms: u_tt = -m1 |k|_1 u with u(0) = 1, u_t(0) = 0, so u(t) = cos(√c t)
        let k = KernelSpec::gaussian();
        let spec = LevyMeasureSpec::two_point(0.5, 1.0, 0.5).unwrap();
        let g = SolverConfig::grid(1.0, 0.0, 1.0, 0.01);
        let cloud = AtomCloud::empty(1.0, 10.0).unwrap();
        let u = solve_u(&cloud, &k, &spec, &g).unwrap();
        let c = spec.mean() * k.l1_norm();
        assert!((u.eval(1.0, 0.0).unwrap() - c.sqrt().cos()).abs() < 1e-4);
    }

    #[test]
    fn window_must_cover_cone_and_reach() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::event_driven(1.0, 0.0, 4.0);
        let cloud = AtomCloud::empty(1.0, 8.0).unwrap();
        assert!(solve_u(&cloud, &k, &LevyMeasureSpec::rademacher(), &cfg).is_err());
    }

    #[test]
    fn mean_one_property() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::at_point(1.0, 0.0).with_quad_h(0.1);
        let solver = Solver::new(&k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|i| solver.solve_u(&cloud_for(&cfg, &k, 11, i)).unwrap().eval(1.0, 0.0).unwrap()).collect();
        let (m, se) = mean_se(&xs);
        assert!((m - 1.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn v_without_atoms_is_the_forcing() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::event_driven(2.0, 0.0, 3.0);
        let cloud = AtomCloud::empty(2.0, 20.0).unwrap();
        let v = solve_v_delta(&cloud, &k, &LevyMeasureSpec::rademacher(), 0.5, 0.2, 3.0, &cfg).unwrap();
        assert_eq!(v.eval(1.5, 0.2).unwrap(), 1.5);
        assert_eq!(v.eval(1.5, 1.3).unwrap(), 0.0);
        assert_eq!(v.eval(0.4, 0.2).unwrap(), 0.0);
        assert!((v.spatial_average(1.5, 3.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(solve_v_delta(&cloud, &k, &LevyMeasureSpec::rademacher(), 2.0, 0.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn v_light_cone_and_mean() {
        let k = KernelSpec::gaussian();
        let (r, y, z) = (0.3, 0.5, 1.5);
        let cfg = SolverConfig::event_driven(1.5, 0.0, 2.0).with_quad_h(0.1);
        let solver = Solver::new(&k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        let mut inside = Vec::new();
        for i in 0..10_000 {
            let v = solver.solve_v_delta(&cloud_for(&cfg, &k, 5, i), r, y, z).unwrap();
            for x in [-2.0, -0.7, 1.7, 2.0] {
                assert_eq!(v.eval(1.5, x).unwrap(), 0.0);
            }
            inside.push(v.eval(1.5, 0.0).unwrap());
        }
        let (m, se) = mean_se(&inside);
        assert!((m - 0.5 * z).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn picard_iterates_contract() {
        let k = KernelSpec::gaussian();
        let (r, y, z) = (0.0, 0.0, 1.0);
        let cfg = SolverConfig::event_driven(1.0, 0.0, 1.0).with_quad_h(0.1);
        let solver = Solver::new(&k, &LevyMeasureSpec::rademacher().with_total_mass(2.0).unwrap(), &cfg).unwrap();
        let probes: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let sup = |a: &SolutionField, b: &SolutionField| {
            probes.iter().map(|&x| (a.eval(1.0, x).unwrap() - b.eval(1.0, x).unwrap()).abs()).fold(0.0, f64::max)
        };
        let (mut d21, mut d32) = (0.0, 0.0);
        let empty = AtomCloud::empty(1.0, 10.0).unwrap();
        let flat = solver.picard_iterates(&empty, Forcing::Delta { r, y, z }).unwrap();
        assert_eq!(flat.len(), 4);
        for f in &flat {
            assert_eq!(f.eval(1.0, 0.3).unwrap(), 0.5);
        }
        let spec = LevyMeasureSpec::rademacher().with_total_mass(2.0).unwrap();
        for i in 0..100 {
            let cloud = sample_atoms(&spec, 1.0, cfg.required_half_width(&k), DEFAULT_ATOM_BUDGET, &mut stream_rng(9, i)).unwrap();
            let it = solver.picard_iterates(&cloud, Forcing::Delta { r, y, z }).unwrap();
            assert_eq!(it[0].eval(1.0, 0.3).unwrap(), 0.5);
            d21 += sup(&it[2], &it[1]);
            d32 += sup(&it[3], &it[2]);
            // the fixed point is the direct solve
            let v = solver.solve_v_delta(&cloud, r, y, z).unwrap();
            let deep = Solver::new(&k, &spec, &SolverConfig { n_max: 40, ..cfg.clone() }).unwrap();
            let last = deep.picard_iterates(&cloud, Forcing::Delta { r, y, z }).unwrap().pop().unwrap();
            assert!((last.eval(1.0, 0.2).unwrap() - v.eval(1.0, 0.2).unwrap()).abs() < 1e-12);
        }
        assert!(d32 < d21, "{d32} vs {d21}");
    }

    #[test]
    fn schemes_agree_on_shared_atoms() {
        let k = KernelSpec::gaussian();
        let dx = 0.025;
        let ev = SolverConfig::event_driven(1.0, 0.0, 4.0).with_quad_h(dx);
        let gr = SolverConfig::grid(1.0, 0.0, 4.0, dx);
        let spec = LevyMeasureSpec::rademacher().with_total_mass(3.0).unwrap();
        let cloud = sample_atoms(&spec, 1.0, ev.required_half_width(&k), DEFAULT_ATOM_BUDGET, &mut stream_rng(4, 0)).unwrap();
        let a = solve_u(&cloud, &k, &spec, &ev).unwrap();
        let b = solve_u(&cloud, &k, &spec, &gr).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let x = -3.8 + 0.4 * i as f64;
            let (va, vb) = (a.eval(1.0, x).unwrap(), b.eval(1.0, x).unwrap());
            worst = worst.max((va - vb).abs() / va.abs().max(1e-3));
        }
        assert!(worst <= 5.0 * dx, "worst relative difference {worst}");
        let fa = a.spatial_average(1.0, 4.0).unwrap();
        let fb = b.spatial_average(1.0, 4.0).unwrap();
        assert!((fa - fb).abs() <= 5.0 * dx * fa.abs().max(1.0));
    }

    #[test]
    fn riesz_sweep_matches_superposition() {
        let k = KernelSpec::riesz_for_window(0.5, 3.0);
        let cfg = SolverConfig::event_driven(1.0, 0.0, 2.0).with_quad_h(0.03125).with_times(&[0.5, 1.0]);
        let spec = LevyMeasureSpec::rademacher();
        let cloud = cloud_for(&cfg, &k, 21, 0);
        let solver = Solver::new(&k, &spec, &cfg).unwrap();
        let sweep = solver.solve_u(&cloud).unwrap();
        let sup = SolutionField { cfg: cfg.clone(), repr: Repr::Super(solver.superpose(cloud.atoms(), Forcing::One, None)) };
        for t in [0.5, 1.0] {
            for i in 0..9 {
                let x = -2.0 + 0.5 * i as f64;
                let (a, b) = (sweep.eval(t, x).unwrap(), sup.eval(t, x).unwrap());
                assert!((a - b).abs() < 2e-2 * b.abs().max(1.0), "t={t} x={x}: {a} vs {b}");
            }
            let (fa, fb) = (sweep.spatial_average(t, 2.0).unwrap(), sup.spatial_average(t, 2.0).unwrap());
            assert!((fa - fb).abs() < 2e-2 * fb.abs().max(1.0), "F: {fa} vs {fb}");
        }
    }

    #[test]
    fn spatial_average_matches_pointwise_quadrature() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::event_driven(1.0, 0.0, 3.0).with_quad_h(0.1);
        let u = solve_u(&cloud_for(&cfg, &k, 2, 3), &k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        let direct = quad::integrate(|x| u.eval(0.8, x).unwrap() - 1.0, -3.0, 3.0, 1e-11, 1e-10).unwrap();
        assert!((u.spatial_average(0.8, 3.0).unwrap() - direct).abs() < 1e-8);
        let whole = u.spatial_average_on(0.8, -3.0, 3.0).unwrap();
        let parts = u.spatial_average_on(0.8, -3.0, 0.0).unwrap() + u.spatial_average_on(0.8, 0.0, 3.0).unwrap();
        assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
    }

    fn q_t(k: &KernelSpec, t: f64) -> f64 {
        let f = covariance_kernel(k).unwrap();
        quad::integrate(
            |s| {
                0.25 * quad::integrate(|d| (2.0 * s - d.abs()) * f.eval(d), -2.0 * s, 2.0 * s, 1e-12, 1e-10).unwrap()
            },
            0.0,
            t,
            1e-11,
            1e-9,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_model_zero_noise_and_first_order_variance() {
        let k = KernelSpec::gaussian();
        let cfg = SolverConfig::grid(1.0, 0.0, 0.0, 0.05);
        let solver = Solver::new(&k, &LevyMeasureSpec::rademacher(), &cfg).unwrap();
        let u = solver.solve_gaussian(0.0, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(u.eval(1.0, 0.0).unwrap(), 1.0);
        // small m2: higher chaoses are O(m2²)
        let m2 = 0.04;
        let xs: Vec<f64> = (0..20_000)
            .map(|i| solver.solve_gaussian(m2, &mut stream_rng(2, i)).unwrap().eval(1.0, 0.0).unwrap() - 1.0)
            .collect();
        let n = xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
        let se = (xs.iter().map(|x| (x * x - var).powi(2)).sum::<f64>() / n).sqrt() / n.sqrt();
        let want = m2 * q_t(&k, 1.0);
        assert!((var - want).abs() < 3.0 * se + 0.05 * want, "{var} vs {want} (se {se})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn locality_is_bit_exact(seed in any::<u64>(), t in 0.3f64..1.5, x in -1.0f64..1.0) {
            let k = KernelSpec::gaussian_with(0.5, 1.5);
            let cfg = SolverConfig::at_point(t, x).with_quad_h(0.05);
            let spec = LevyMeasureSpec::rademacher().with_total_mass(4.0).unwrap();
            let cloud = sample_atoms(&spec, t, cfg.required_half_width(&k), DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, 0)).unwrap();
            let kept: Vec<Atom> = cloud.atoms().iter().copied().filter(|a| (x - a.xi).abs() < t - a.tau + 1.5).collect();
            let pruned = AtomCloud::new(cloud.t_max, cloud.half_width, kept).unwrap();
            let a = solve_u(&cloud, &k, &spec, &cfg).unwrap().eval(t, x).unwrap();
            let b = solve_u(&pruned, &k, &spec, &cfg).unwrap().eval(t, x).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
