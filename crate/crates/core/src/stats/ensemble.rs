//! Coupled replicate ensembles: every replicate yields F_R(t) for all requested (t, R) from one
//! realization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kernels::KernelSpec;
use crate::levy_noise::{sample_atoms, stream_rng, LevyMeasureSpec, DEFAULT_ATOM_BUDGET};
use crate::solver::{SolutionField, Solver, SolverConfig};

/// Which equation drives the ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    /// The Lévy-driven equation, event-driven scheme.
    Levy,
    /// The Gaussian comparison model on the leapfrog grid with spacing `dx`.
    Gaussian { dx: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub kernel: KernelSpec,
    pub spec: LevyMeasureSpec,
    pub model: Model,
    pub t_grid: Vec<f64>,
    pub radii: Vec<f64>,
    pub n_replicates: usize,
    pub seed: u64,
    /// Event-driven cell width override.
    pub quad_h: Option<f64>,
    /// Thread count; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    /// Atom window half-width; `None` uses the minimum admissible one.
    pub window: Option<f64>,
}

impl EnsembleConfig {
    pub fn new(kernel: KernelSpec, spec: LevyMeasureSpec, t_grid: &[f64], radii: &[f64], n_replicates: usize, seed: u64) -> Self {
        EnsembleConfig {
            kernel,
            spec,
            model: Model::Levy,
            t_grid: t_grid.to_vec(),
            radii: radii.to_vec(),
            n_replicates,
            seed,
            quad_h: None,
            workers: None,
            window: None,
        }
    }

    pub fn t_max(&self) -> f64 {
        self.t_grid.iter().copied().fold(0.0, f64::max)
    }

    pub fn r_max(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.spec.validate()?;
        if self.n_replicates == 0 {
            return domain("n_replicates must be positive");
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return domain("t_grid must be non-empty with positive finite times");
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return domain("R list must be non-empty with positive finite radii");
        }
        if let Model::Gaussian { dx } = self.model {
            if !(dx > 0.0) {
                return domain(format!("Gaussian-model grid spacing must be positive, got {dx}"));
            }
        }
        if let Some(w) = self.window {
            let need = self.min_window();
            if !(w >= need) {
                return domain(format!("window L={w} is below max R + T + reach = {need}"));
            }
        }
        Ok(())
    }

    /// max R + T + reach.
    pub fn min_window(&self) -> f64 {
        self.r_max() + self.t_max() + self.kernel.reach()
    }

    /// Atom window half-width L.
    pub fn window(&self) -> f64 {
        self.window.unwrap_or_else(|| self.min_window())
    }

    pub fn solver_config(&self) -> SolverConfig {
        let (t, r) = (self.t_max(), self.r_max());
        let cfg = match self.model {
            Model::Levy => SolverConfig::event_driven(t, 0.0, r),
            Model::Gaussian { dx } => SolverConfig::grid(t, 0.0, r, dx),
        };
        let cfg = cfg.with_times(&self.t_grid);
        match self.quad_h {
            Some(h) => cfg.with_quad_h(h),
            None => cfg,
        }
    }
}

/// F_R(t) per replicate, row layout `[t_index * radii.len() + r_index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub t_grid: Vec<f64>,
    pub radii: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn index(&self, t: f64, r: f64) -> Result<usize> {
        let ti = position(&self.t_grid, t).ok_or_else(|| Error::Domain(format!("t={t} not in the ensemble grid")))?;
        let ri = position(&self.radii, r).ok_or_else(|| Error::Domain(format!("R={r} not in the ensemble radii")))?;
        Ok(ti * self.radii.len() + ri)
    }

    /// Samples of F_R(t).
    pub fn column(&self, t: f64, r: f64) -> Result<Vec<f64>> {
        let j = self.index(t, r)?;
        Ok(self.rows.iter().map(|row| row[j]).collect())
    }

    pub fn r_max(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    /// The first `n` replicates.
    pub fn truncated(&self, n: usize) -> Ensemble {
        Ensemble { t_grid: self.t_grid.clone(), radii: self.radii.clone(), rows: self.rows[..n.min(self.n())].to_vec() }
    }
}

fn position(xs: &[f64], v: f64) -> Option<usize> {
    xs.iter().position(|x| (x - v).abs() <= 1e-12 * (1.0 + v.abs()))
}

/// F_R(t) = ∫_{−R}^{R}(u(t,x) − 1)dx of one solved realization.
pub fn spatial_average(field: &SolutionField, t: f64, radius: f64) -> Result<f64> {
    field.spatial_average(t, radius)
}

/// Runs `f` on a pool of `workers` threads (global pool when `None`).
pub fn in_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Resource(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// One replicate of the ensemble: replicate `i` always uses stream `i` of the root seed.
pub fn replicate(cfg: &EnsembleConfig, solver: &Solver, i: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, i);
    let field = match cfg.model {
        Model::Levy => {
            let cloud = sample_atoms(&cfg.spec, cfg.t_max(), cfg.window(), DEFAULT_ATOM_BUDGET, &mut rng)?;
            solver.solve_u(&cloud)?
        }
        Model::Gaussian { .. } => solver.solve_gaussian(cfg.spec.m2(), &mut rng)?,
    };
    let mut row = Vec::with_capacity(cfg.t_grid.len() * cfg.radii.len());
    for &t in &cfg.t_grid {
        for &r in &cfg.radii {
            row.push(spatial_average(&field, t, r)?);
        }
    }
    Ok(row)
}

/// Runs all replicates in parallel; the result does not depend on the worker count.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let solver = Solver::new(&cfg.kernel, &cfg.spec, &cfg.solver_config())?;
    let rows = in_pool(cfg.workers, || {
        (0..cfg.n_replicates as u64)
            .into_par_iter()
            .map(|i| replicate(cfg, &solver, i))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(Ensemble { t_grid: cfg.t_grid.clone(), radii: cfg.radii.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::estimators::mean_se;

    fn small(n: usize) -> EnsembleConfig {
        let mut c = EnsembleConfig::new(KernelSpec::gaussian(), LevyMeasureSpec::rademacher(), &[0.5, 1.0], &[2.0, 4.0], n, 11);
        c.quad_h = Some(0.25);
        c
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        let mut a = small(24);
        a.workers = Some(1);
        let mut b = a.clone();
        b.workers = Some(3);
        assert_eq!(run_ensemble(&a).unwrap(), run_ensemble(&b).unwrap());
    }

    #[test]
    fn centered_in_mean() {
        let e = run_ensemble(&small(400)).unwrap();
        let (m, se) = mean_se(&e.column(1.0, 4.0).unwrap());
        assert!(m.abs() < 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn additivity_on_one_realization() {
        let c = small(1);
        let solver = Solver::new(&c.kernel, &c.spec, &c.solver_config()).unwrap();
        let cloud = sample_atoms(&c.spec, 1.0, c.window(), DEFAULT_ATOM_BUDGET, &mut stream_rng(3, 0)).unwrap();
        let u = solver.solve_u(&cloud).unwrap();
        let whole = u.spatial_average(1.0, 4.0).unwrap();
        let parts = u.spatial_average_on(1.0, -4.0, 0.0).unwrap() + u.spatial_average_on(1.0, 0.0, 4.0).unwrap();
        assert!((whole - parts).abs() < 1e-10 * (1.0 + whole.abs()));
    }

    #[test]
    fn noise_free_is_zero() {
        let mut c = small(3);
        c.spec = c.spec.with_total_mass(0.0).unwrap();
        let e = run_ensemble(&c).unwrap();
        assert!(e.rows.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_empty_inputs() {
        let mut c = small(0);
        assert!(run_ensemble(&c).is_err());
        c.n_replicates = 2;
        c.radii.clear();
        assert!(run_ensemble(&c).is_err());
    }

    #[test]
    fn window_below_minimum_is_rejected() {
        let mut c = small(2);
        c.window = Some(c.min_window() - 0.5);
        assert!(c.validate().is_err());
        c.window = Some(c.min_window() + 3.0);
        assert!(c.validate().is_ok());
        assert_eq!(c.window(), c.min_window() + 3.0);
    }
}
