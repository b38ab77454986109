//! Experiment configuration files and the runner behind the `ham-levy` binary.
//!
//! A config is flat `key = value` text under `[experiment]`, `[model]` and `[run]` headers;
//! `#` starts a comment.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::chaos_combinatorics::chaos_suite;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::levy_noise::LevyMeasureSpec;
use crate::malliavin::{poincare_experiment, representation_spot_check, verify_key_d, verify_key_d2};
use crate::report::{ExperimentReport, Status};
use crate::solver::SolverConfig;
use crate::stats::ensemble::{in_pool, run_ensemble, Ensemble, EnsembleConfig, Model};
use crate::stats::experiments::{
    covariance_limit, ergodic_check, fclt_experiment, qclt_experiment, variance_scan, CovarianceReference, DK_THRESHOLD,
};
use crate::stats::gamma::{audit_gamma_rates, RatePlan};

/// Env var holding the default worker count.
pub const WORKERS_ENV: &str = "HAM_LEVY_WORKERS";

/// Riesz truncation used by the deterministic rate audit (effectively untruncated).
const AUDIT_TRUNCATION: f64 = 1e15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VarianceScan,
    Covariance,
    Qclt,
    Fclt,
    Ergodic,
    MalliavinVerify,
    ChaosVerify,
    GammaAudit,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::VarianceScan,
        ExperimentKind::Covariance,
        ExperimentKind::Qclt,
        ExperimentKind::Fclt,
        ExperimentKind::Ergodic,
        ExperimentKind::MalliavinVerify,
        ExperimentKind::ChaosVerify,
        ExperimentKind::GammaAudit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::VarianceScan => "variance-scan",
            ExperimentKind::Covariance => "covariance",
            ExperimentKind::Qclt => "qclt",
            ExperimentKind::Fclt => "fclt",
            ExperimentKind::Ergodic => "ergodic",
            ExperimentKind::MalliavinVerify => "malliavin-verify",
            ExperimentKind::ChaosVerify => "chaos-verify",
            ExperimentKind::GammaAudit => "gamma-audit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn needs_slope(&self) -> bool {
        matches!(self, ExperimentKind::VarianceScan | ExperimentKind::Ergodic | ExperimentKind::Qclt | ExperimentKind::GammaAudit)
    }
}

/// Reference for the integrable-kernel covariance experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Chain,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub kernel: KernelSpec,
    pub noise: LevyMeasureSpec,
    pub p: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "R_list")]
    pub radii: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub n_replicates: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    /// Atom window half-width L; `None` uses max R + T + reach.
    pub window: Option<f64>,
    pub quad_h: Option<f64>,
    pub pairs: Vec<(f64, f64)>,
    pub threshold: f64,
    pub p_prime: f64,
    pub reference: ReferenceKind,
    pub gaussian_dx: f64,
    /// Probe point (t, x) of the Malliavin checks.
    pub probe: (f64, f64),
    /// Radius of the optional Poincaré check.
    pub poincare_r: Option<f64>,
}

const KEYS: [(&str, &[&str]); 3] = [
    ("experiment", &["kind", "out"]),
    ("model", &["kernel", "noise", "window", "quad_h", "gaussian_dx"]),
    (
        "run",
        &["p", "T", "R_list", "t_grid", "n_replicates", "seed", "workers", "pairs", "threshold", "p_prime", "reference", "probe", "poincare_R"],
    ),
];

/// Field-level diagnostics collected while parsing.
#[derive(Default)]
struct Diagnostics(Vec<String>);

impl Diagnostics {
    fn push(&mut self, field: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{field}: {msg}"));
    }

    fn into_result(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.0.join("\n")))
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, text: &str, d: &mut Diagnostics) -> Option<T> {
    match text.trim().parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            d.push(field, format!("cannot parse '{text}' as a number"));
            None
        }
    }
}

fn parse_list(field: &str, text: &str, d: &mut Diagnostics) -> Option<Vec<f64>> {
    let vals: Vec<Option<f64>> = text.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(field, s, d)).collect();
    vals.into_iter().collect()
}

fn parse_pairs(text: &str, d: &mut Diagnostics) -> Option<Vec<(f64, f64)>> {
    let mut out = vec![];
    for item in text.split(',').filter(|s| !s.trim().is_empty()) {
        let Some((a, b)) = item.split_once(':') else {
            d.push("pairs", format!("expected t:s, got '{item}'"));
            return None;
        };
        out.push((parse_num("pairs", a, d)?, parse_num("pairs", b, d)?));
    }
    Some(out)
}

/// Parses `gaussian`, `gaussian(sd=0.5, support=3)`, `box(a=0.5)` or
/// `riesz(alpha=0.5, truncation=1000)`. Without an explicit truncation the Riesz kernel is cut
/// at eight times `window`.
pub fn parse_kernel(text: &str, window: f64) -> Result<KernelSpec> {
    let t: String = text.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
    let (name, args) = match t.find('(') {
        Some(i) if t.ends_with(')') => (&t[..i], &t[i + 1..t.len() - 1]),
        Some(_) => return Err(Error::Config(format!("unbalanced parentheses in kernel '{text}'"))),
        None => (t.as_str(), ""),
    };
    let mut named = BTreeMap::new();
    for kv in args.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected name=value in kernel '{text}', got '{kv}'")))?;
        let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad number '{v}' in kernel '{text}'")))?;
        named.insert(k.to_string(), v);
    }
    let take = |named: &mut BTreeMap<String, f64>, k: &str| named.remove(k);
    let spec = match name {
        "gaussian" => {
            let sd = take(&mut named, "sd").unwrap_or(1.0);
            let support = take(&mut named, "support").unwrap_or(6.0 * sd);
            KernelSpec::gaussian_with(sd, support)
        }
        "box" => KernelSpec::box_fixture(take(&mut named, "a").ok_or_else(|| Error::Config(format!("box kernel needs a=..., got '{text}'")))?),
        "riesz" => {
            let alpha = take(&mut named, "alpha").ok_or_else(|| Error::Config(format!("riesz kernel needs alpha=..., got '{text}'")))?;
            match take(&mut named, "truncation") {
                Some(tr) => KernelSpec::riesz(alpha, tr),
                None => KernelSpec::riesz_for_window(alpha, window),
            }
        }
        _ => return Err(Error::Config(format!("unknown kernel '{text}'"))),
    };
    if let Some(k) = named.keys().next() {
        return Err(Error::Config(format!("unknown kernel parameter '{k}' in '{text}'")));
    }
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

impl ExperimentConfig {
    /// Parses and validates a config file's text; all field errors are reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut d = Diagnostics::default();
        let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                match KEYS.iter().find(|(s, _)| *s == name.trim()) {
                    Some((s, _)) => section = Some(s),
                    None => d.push(&format!("line {lineno}"), format!("unknown section [{name}]")),
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                d.push(&format!("line {lineno}"), format!("expected key = value, got '{line}'"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(sec) = section else {
                d.push(k, format!("line {lineno}: key outside any section"));
                continue;
            };
            let allowed = KEYS.iter().find(|(s, _)| *s == sec).map(|(_, ks)| *ks).unwrap_or(&[]);
            let Some(key) = allowed.iter().find(|a| **a == k) else {
                let home = KEYS.iter().find(|(_, ks)| ks.contains(&k)).map(|(s, _)| format!(" (belongs in [{s}])")).unwrap_or_default();
                d.push(k, format!("line {lineno}: unknown key in [{sec}]{home}"));
                continue;
            };
            if values.insert(key, (lineno, v)).is_some() {
                d.push(k, format!("line {lineno}: duplicate key"));
            }
        }
        let get = |k: &str| values.get(k).map(|(_, v)| *v);

        let kind = match get("kind") {
            None => {
                d.push("kind", "missing");
                None
            }
            Some(s) => ExperimentKind::parse(s).or_else(|| {
                let all: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
                d.push("kind", format!("unknown experiment '{s}', expected one of {}", all.join(", ")));
                None
            }),
        };
        let p = get("p").map_or(Some(2.0), |v| parse_num("p", v, &mut d));
        let t_final = get("T").map_or(Some(1.0), |v| parse_num("T", v, &mut d));
        let radii = get("R_list").map_or(Some(vec![8.0, 16.0, 32.0, 64.0]), |v| parse_list("R_list", v, &mut d));
        let t_grid = get("t_grid").map(|v| parse_list("t_grid", v, &mut d));
        let n_replicates = get("n_replicates").map_or(Some(1000usize), |v| parse_num("n_replicates", v, &mut d));
        let seed = get("seed").map_or(Some(1u64), |v| parse_num("seed", v, &mut d));
        let workers = get("workers").map(|v| parse_num::<usize>("workers", v, &mut d));
        let window = get("window").map(|v| parse_num::<f64>("window", v, &mut d));
        let quad_h = get("quad_h").map(|v| parse_num::<f64>("quad_h", v, &mut d));
        let pairs = get("pairs").map_or(Some(vec![(1.0, 1.0), (2.0, 1.0), (2.0, 2.0), (1.5, 1.0)]), |v| parse_pairs(v, &mut d));
        let threshold = get("threshold").map_or(Some(DK_THRESHOLD), |v| parse_num("threshold", v, &mut d));
        let p_prime = get("p_prime").map_or(Some(2.0), |v| parse_num("p_prime", v, &mut d));
        let gaussian_dx = get("gaussian_dx").map_or(Some(0.05), |v| parse_num("gaussian_dx", v, &mut d));
        let poincare_r = get("poincare_R").map(|v| parse_num::<f64>("poincare_R", v, &mut d));
        let reference = match get("reference") {
            None | Some("chain") => Some(ReferenceKind::Chain),
            Some("gaussian") => Some(ReferenceKind::Gaussian),
            Some(o) => {
                d.push("reference", format!("expected chain or gaussian, got '{o}'"));
                None
            }
        };
        let probe = match get("probe") {
            None => t_final.map(|t| (t, 0.0)),
            Some(v) => match parse_list("probe", v, &mut d).as_deref() {
                Some([t, x]) => Some((*t, *x)),
                Some(_) => {
                    d.push("probe", "expected t,x");
                    None
                }
                None => None,
            },
        };
        let noise = match get("noise") {
            None => Some(LevyMeasureSpec::rademacher()),
            Some(v) => LevyMeasureSpec::parse(v).map_err(|e| d.push("noise", e)).ok(),
        };
        let kernel = match (get("kernel"), &radii, t_final, kind) {
            (None, ..) => Some(KernelSpec::gaussian()),
            (Some(v), Some(rs), Some(t), Some(k)) => {
                let w = rs.iter().copied().fold(0.0, f64::max) + t;
                let parsed = if k == ExperimentKind::GammaAudit && v.contains("riesz") && !v.contains("truncation") {
                    parse_kernel(v, AUDIT_TRUNCATION / 8.0)
                } else {
                    parse_kernel(v, w)
                };
                parsed.map_err(|e| d.push("kernel", e)).ok()
            }
            _ => None,
        };
        // Any parse failure above leaves a None and a diagnostic.
        d.into_result()?;
        let (Some(kind), Some(kernel), Some(noise), Some(p), Some(t_final), Some(radii), Some(n_replicates), Some(seed)) =
            (kind, kernel, noise, p, t_final, radii, n_replicates, seed)
        else {
            return Err(Error::Config("incomplete configuration".into()));
        };
        let opt = |o: Option<Option<f64>>| o.flatten();
        let t_grid = match t_grid.flatten() {
            Some(g) => g,
            None if kind == ExperimentKind::Fclt => (1..=6).map(|i| t_final * i as f64 / 6.0).collect(),
            None => vec![t_final],
        };
        let cfg = ExperimentConfig {
            kind,
            kernel,
            noise,
            p,
            t_final,
            radii,
            t_grid,
            n_replicates,
            seed,
            workers: workers.flatten(),
            out_dir: PathBuf::from(get("out").unwrap_or("results")),
            window: opt(window),
            quad_h: opt(quad_h),
            pairs: pairs.unwrap_or_default(),
            threshold: threshold.unwrap_or(DK_THRESHOLD),
            p_prime: p_prime.unwrap_or(2.0),
            reference: reference.unwrap_or(ReferenceKind::Chain),
            gaussian_dx: gaussian_dx.unwrap_or(0.05),
            probe: probe.unwrap_or((t_final, 0.0)),
            poincare_r: opt(poincare_r),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn r_max(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    /// Largest time any part of the run touches.
    fn t_max(&self) -> f64 {
        let pairs = self.pairs.iter().map(|(t, s)| t.max(*s));
        self.t_grid.iter().copied().chain(pairs).fold(self.t_final, f64::max)
    }

    /// Cross-field checks; every violation is reported.
    pub fn validate(&self) -> Result<()> {
        let mut d = Diagnostics::default();
        if self.n_replicates == 0 {
            d.push("n_replicates", "must be positive");
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            d.push("T", format!("must be positive, got {}", self.t_final));
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            d.push("R_list", "needs positive finite radii");
        }
        if self.kind.needs_slope() && self.radii.len() < 2 {
            d.push("R_list", format!("{} fits a slope and needs at least two radii", self.kind.as_str()));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            d.push("t_grid", "needs positive finite times");
        }
        if self.kind == ExperimentKind::Fclt && self.t_grid.len() < 2 {
            d.push("t_grid", "fclt needs at least two times");
        }
        if self.kind == ExperimentKind::Covariance && (self.pairs.is_empty() || self.pairs.iter().any(|(t, s)| !(*t > 0.0 && *s > 0.0))) {
            d.push("pairs", "needs at least one pair of positive times");
        }
        if self.workers == Some(0) {
            d.push("workers", "must be at least 1");
        }
        if let Some(h) = self.quad_h {
            if !(h > 0.0) {
                d.push("quad_h", format!("must be positive, got {h}"));
            }
        }
        if !(self.gaussian_dx > 0.0) {
            d.push("gaussian_dx", format!("must be positive, got {}", self.gaussian_dx));
        }
        if !(self.threshold > 0.0) {
            d.push("threshold", "must be positive");
        }
        if matches!(self.kind, ExperimentKind::Qclt | ExperimentKind::GammaAudit) && !(self.p > 1.0 && self.p <= 2.0) {
            d.push("p", format!("must lie in (1, 2], got {}", self.p));
        }
        if let (true, KernelSpec::Riesz { alpha, .. }) = (matches!(self.kind, ExperimentKind::Qclt | ExperimentKind::GammaAudit), self.kernel) {
            let lo = 2.0 / (2.0 - alpha);
            if !(self.p > lo) {
                d.push("p", format!("the Riesz kernel with alpha={alpha} needs p > 2/(2-alpha) = {lo:.4}, got {}", self.p));
            }
        }
        if self.kind == ExperimentKind::Fclt && !(self.p_prime >= 2.0) {
            d.push("p_prime", format!("must be at least 2, got {}", self.p_prime));
        }
        if let Some(w) = self.window {
            let need = self.r_max() + self.t_max() + self.kernel.reach();
            if !(w >= need) {
                d.push("window", format!("L={w} is below max(R_list) + T + reach = {need}"));
            }
        }
        if self.kind == ExperimentKind::MalliavinVerify {
            let (t, _) = self.probe;
            if !(t > 0.0) {
                d.push("probe", "probe time must be positive");
            }
            if self.n_replicates < 100 {
                d.push("n_replicates", "malliavin-verify needs at least 100 replicates");
            }
        }
        d.into_result()
    }

    fn ensemble(&self, t_grid: &[f64], model: Model) -> EnsembleConfig {
        let mut grid = t_grid.to_vec();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let mut e = EnsembleConfig::new(self.kernel, self.noise, &grid, &self.radii, self.n_replicates, self.seed);
        e.model = model;
        e.quad_h = self.quad_h;
        e.window = self.window;
        e
    }

    /// Beyond the reach cone |y − x| ≤ (t − r) + a, but inside the probe's atom window.
    fn outside_cone(&self, r: f64) -> f64 {
        let (t, x) = self.probe;
        x + (t - r) + self.kernel.reach() + 0.5 * r
    }

    /// Default D probe grid: three times, four offsets plus one point outside the reach cone.
    fn probe_grid(&self) -> Vec<(f64, f64)> {
        let (t, x) = self.probe;
        let mut g = vec![];
        for r in [0.2 * t, 0.5 * t, 0.8 * t] {
            for y in [x - 1.0, x - 0.25, x + 0.5, x + 1.0] {
                g.push((r, y));
            }
            if !self.kernel.is_riesz() {
                g.push((r, self.outside_cone(r)));
            }
        }
        g.push((t, x));
        g
    }

    fn probe_pairs(&self) -> Vec<((f64, f64), (f64, f64))> {
        let (t, x) = self.probe;
        let mut pairs = vec![
            ((0.2 * t, x - 0.5), (0.6 * t, x + 0.3)),
            ((0.3 * t, x + 0.4), (0.5 * t, x - 0.2)),
            ((0.1 * t, x), (0.7 * t, x + 0.6)),
            ((0.4 * t, x - 0.8), (0.8 * t, x - 0.1)),
        ];
        if !self.kernel.is_riesz() {
            pairs.push(((0.3 * t, x), (0.5 * t, self.outside_cone(0.5 * t))));
        }
        pairs
    }
}

fn ensemble_for(cfg: &ExperimentConfig, t_grid: &[f64]) -> Result<Ensemble> {
    run_ensemble(&cfg.ensemble(t_grid, Model::Levy))
}

fn dispatch(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let (k, nu) = (&cfg.kernel, &cfg.noise);
    let t = cfg.t_final;
    match cfg.kind {
        ExperimentKind::VarianceScan => variance_scan(&ensemble_for(cfg, &[t])?, k, nu, t),
        ExperimentKind::Ergodic => ergodic_check(&ensemble_for(cfg, &[t])?, k, nu, t),
        ExperimentKind::Qclt => qclt_experiment(&ensemble_for(cfg, &[t])?, k, nu, t, cfg.p, cfg.threshold),
        ExperimentKind::Fclt => fclt_experiment(&ensemble_for(cfg, &cfg.t_grid)?, k, nu, cfg.r_max(), cfg.p_prime),
        ExperimentKind::Covariance => {
            let times: Vec<f64> = cfg.pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
            let ens = ensemble_for(cfg, &times)?;
            if cfg.reference == ReferenceKind::Gaussian && !k.is_riesz() {
                let g = run_ensemble(&cfg.ensemble(&times, Model::Gaussian { dx: cfg.gaussian_dx }))?;
                covariance_limit(&ens, k, nu, &cfg.pairs, CovarianceReference::GaussianModel(&g))
            } else {
                covariance_limit(&ens, k, nu, &cfg.pairs, CovarianceReference::Chain)
            }
        }
        ExperimentKind::GammaAudit => audit_gamma_rates(k, nu, &RatePlan::new(k, cfg.p)?, t, &cfg.radii),
        ExperimentKind::ChaosVerify => chaos_suite(cfg.n_replicates.min(2000), cfg.n_replicates, cfg.seed),
        ExperimentKind::MalliavinVerify => {
            let (pt, px) = cfg.probe;
            let mut solver = SolverConfig::at_point(pt, px);
            if let Some(h) = cfg.quad_h {
                solver = solver.with_quad_h(h);
            }
            let mut rep = ExperimentReport::new("malliavin-verify", &k.label(), &nu.to_string(), Some(cfg.p));
            let d = verify_key_d(k, nu, &solver, cfg.p, cfg.probe, &cfg.probe_grid(), cfg.n_replicates, cfg.seed)?;
            rep.absorb("D", &d);
            let d2 = verify_key_d2(k, nu, &solver, cfg.p, cfg.probe, &cfg.probe_pairs(), cfg.n_replicates, cfg.seed)?;
            rep.absorb("D2", &d2);
            if k.is_riesz() {
                rep.note("representation spot-check skipped: needs a compactly supported kernel");
            } else {
                rep.absorb("representation", &representation_spot_check(k, nu, 1e-3)?);
            }
            if let Some(r) = cfg.poincare_r {
                rep.absorb("poincare", &poincare_experiment(k, nu, pt, r, cfg.n_replicates, cfg.seed, 4, 0.5)?);
            }
            Ok(rep)
        }
    }
}

/// Runs the experiment on `cfg.workers` threads and returns its report with the config embedded.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = in_pool(cfg.workers, || dispatch(cfg))??;
    rep.config = serde_json::to_value(cfg).map_err(|e| Error::Io(e.to_string()))?;
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(OutputFormat::Csv),
            "json" => Some(OutputFormat::Json),
            "both" => Some(OutputFormat::Both),
            _ => None,
        }
    }
}

/// PASS/FAIL/INCONCLUSIVE summary, one `key=value` per line.
pub fn summary(rep: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment={}", rep.experiment);
    let _ = writeln!(s, "kernel={}", rep.kernel);
    let _ = writeln!(s, "nu={}", rep.nu);
    let _ = writeln!(s, "status={}", rep.status.as_str());
    let _ = writeln!(s, "exit_code={}", rep.status.exit_code());
    for r in rep.rows.iter().filter(|r| r.status.is_some_and(|st| st != Status::Pass)) {
        let _ = writeln!(s, "check.{}={}", r.statistic, r.status.map(|x| x.as_str()).unwrap_or(""));
    }
    s
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("unix={secs}")
}

/// Writes `{kind}.csv`, `{kind}.json` and `summary.txt` under `dir`.
pub fn write_artifacts(rep: &ExperimentReport, kind: ExperimentKind, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = vec![];
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        let p = dir.join(format!("{}.csv", kind.as_str()));
        rep.write_csv(&p, &timestamp())?;
        written.push(p);
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        let p = dir.join(format!("{}.json", kind.as_str()));
        rep.write_json(&p)?;
        written.push(p);
    }
    let p = dir.join("summary.txt");
    std::fs::write(&p, summary(rep))?;
    written.push(p);
    Ok(written)
}

const MOMENT_ORDERS: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 4.0];

/// Kernel and noise presets with β, reach and the moment table m_p = ∫|z|^p ν(dz).
pub fn list_presets() -> String {
    let mut s = String::from("kernels\n");
    let kernels = [
        ("gaussian", KernelSpec::gaussian()),
        ("gaussian(sd=0.5)", KernelSpec::gaussian_with(0.5, 3.0)),
        ("box(a=0.5)", KernelSpec::box_fixture(0.5)),
        ("riesz(alpha=0.25)", KernelSpec::riesz_for_window(0.25, 66.0)),
        ("riesz(alpha=0.5)", KernelSpec::riesz_for_window(0.5, 66.0)),
        ("riesz(alpha=0.75)", KernelSpec::riesz_for_window(0.75, 66.0)),
    ];
    for (name, k) in kernels {
        let reach = if k.is_riesz() { "8*(max R + T)".to_string() } else { k.reach().to_string() };
        let _ = writeln!(s, "  {name:<20} beta={} reach={reach}", k.beta());
    }
    s.push_str("noise\n");
    let noises = [
        ("rademacher", LevyMeasureSpec::rademacher()),
        ("uniform(1)", LevyMeasureSpec::uniform(1.0).expect("valid preset")),
        ("uniform(2)", LevyMeasureSpec::uniform(2.0).expect("valid preset")),
        ("centered-two-point(0.25,3,1)", LevyMeasureSpec::centered_two_point(0.25, 3.0, 1.0).expect("valid preset")),
    ];
    for (name, nu) in noises {
        let _ = write!(s, "  {name:<30}");
        for p in MOMENT_ORDERS {
            let _ = write!(s, " m_{p}={:.6}", nu.moment(p));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[experiment]\nkind = qclt\n[model]\nkernel = gaussian\nnoise = rademacher\n[run]\np = 2\nT = 1\nR_list = 4, 8\nn_replicates = 200\nseed = 9\n";

    #[test]
    fn parses_base_config() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.kind, ExperimentKind::Qclt);
        assert_eq!(c.radii, vec![4.0, 8.0]);
        assert_eq!(c.t_grid, vec![1.0]);
        assert_eq!(c.kernel, KernelSpec::gaussian());
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn field_level_errors_are_collected() {
        let text = BASE.replace("n_replicates = 200", "n_replicates = x\nbogus = 1").replace("kind = qclt", "kind = qclt\np = 2");
        let Err(Error::Config(msg)) = ExperimentConfig::parse(&text) else { panic!("expected config error") };
        assert!(msg.contains("n_replicates"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("belongs in [run]"), "{msg}");
    }

    #[test]
    fn riesz_p_window_is_enforced() {
        let text = BASE.replace("kernel = gaussian", "kernel = riesz(alpha=0.9)").replace("p = 2", "p = 1.1");
        let Err(Error::Config(msg)) = ExperimentConfig::parse(&text) else { panic!("expected config error") };
        assert!(msg.contains("2/(2-alpha)"), "{msg}");
    }

    #[test]
    fn zero_replicates_rejected() {
        assert!(ExperimentConfig::parse(&BASE.replace("n_replicates = 200", "n_replicates = 0")).is_err());
    }

    #[test]
    fn small_window_rejected() {
        let text = BASE.replace("noise = rademacher", "noise = rademacher\nwindow = 10");
        let Err(Error::Config(msg)) = ExperimentConfig::parse(&text) else { panic!("expected config error") };
        assert!(msg.contains("window"), "{msg}");
        assert!(ExperimentConfig::parse(&BASE.replace("noise = rademacher", "noise = rademacher\nwindow = 20")).is_ok());
    }

    #[test]
    fn kernel_grammar() {
        assert_eq!(parse_kernel("gaussian(sd=0.5)", 10.0).unwrap(), KernelSpec::gaussian_with(0.5, 3.0));
        assert_eq!(parse_kernel("box(a=0.5)", 10.0).unwrap(), KernelSpec::box_fixture(0.5));
        assert_eq!(parse_kernel("riesz(alpha=0.5)", 66.0).unwrap(), KernelSpec::riesz_for_window(0.5, 66.0));
        assert_eq!(parse_kernel("riesz(alpha=0.5, truncation=100)", 66.0).unwrap(), KernelSpec::riesz(0.5, 100.0));
        assert!(parse_kernel("riesz(alpha=1.5)", 66.0).is_err());
        assert!(parse_kernel("gaussian(width=2)", 66.0).is_err());
        assert!(parse_kernel("cauchy", 66.0).is_err());
    }

    #[test]
    fn fclt_default_grid_has_six_points() {
        let c = ExperimentConfig::parse(&BASE.replace("kind = qclt", "kind = fclt").replace("T = 1", "T = 2")).unwrap();
        assert_eq!(c.t_grid.len(), 6);
        assert_eq!(*c.t_grid.last().unwrap(), 2.0);
    }

    #[test]
    fn presets_are_stable_and_complete() {
        let a = list_presets();
        assert_eq!(a, list_presets());
        assert!(a.contains("riesz(alpha=0.5)"));
        let line = a.lines().find(|l| l.trim_start().starts_with("rademacher")).unwrap();
        for p in MOMENT_ORDERS {
            assert!(line.contains(&format!("m_{p}=1.000000")), "{line}");
        }
    }

    #[test]
    fn run_embeds_config_and_is_deterministic() {
        let c = ExperimentConfig::parse(&BASE.replace("kind = qclt", "kind = chaos-verify").replace("n_replicates = 200", "n_replicates = 4000")).unwrap();
        let a = run(&c).unwrap();
        let b = run(&ExperimentConfig { workers: Some(2), ..c.clone() }).unwrap();
        assert_eq!(a.csv_body(), b.csv_body());
        assert_eq!(a.config["kind"], "chaos-verify");
        assert_eq!(a.status, Status::Pass);
    }

    #[test]
    fn artifacts_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut rep = ExperimentReport::new("qclt", "k", "nu", None);
        rep.check("x", (None, None, None), 1.0, Status::Fail);
        let files = write_artifacts(&rep, ExperimentKind::Qclt, dir.path(), OutputFormat::Both).unwrap();
        assert_eq!(files.len(), 3);
        let s = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(s.contains("status=FAIL") && s.contains("exit_code=2") && s.contains("check.x=FAIL"));
    }
}
