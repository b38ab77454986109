//! Multiple Poisson integrals on finite spaces, contractions and the product formula,
//! plus deterministic truncated chaos moments of u.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{domain, Error, Result};
use crate::kernels::{covariance_kernel, CovarianceKernel, KernelSpec};
use crate::levy_noise::{stream_rng, LevyMeasureSpec};
use crate::quad::gauss_legendre_on;
use crate::report::{ExperimentReport, Status};

pub const MAX_CELLS: usize = 8;
pub const MAX_TOTAL_RANK: usize = 6;
pub const MAX_CHAOS_ORDER: usize = 4;

/// Finite measure space: cells with positive masses.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSpace {
    masses: Vec<f64>,
}

impl DiscreteSpace {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.len() > MAX_CELLS {
            return domain(format!("need 1..={MAX_CELLS} cells, got {}", masses.len()));
        }
        if let Some(m) = masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return domain(format!("cell masses must be positive and finite, got {m}"));
        }
        Ok(DiscreteSpace { masses })
    }

    pub fn cells(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Independent Poisson(𝔪(cell)) counts.
    pub fn sample_counts<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        self.masses
            .iter()
            .map(|&m| Poisson::new(m).expect("validated mass").sample(rng) as u64)
            .collect()
    }
}

/// Dense rank-n array over the cells of a space.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rank: usize,
    cells: usize,
    data: Vec<f64>,
}

fn decode(mut flat: usize, cells: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = flat % cells;
        flat /= cells;
    }
}

fn encode(idx: impl IntoIterator<Item = usize>, cells: usize) -> usize {
    idx.into_iter().fold(0, |acc, i| acc * cells + i)
}

impl Tensor {
    pub fn zeros(rank: usize, cells: usize) -> Result<Self> {
        if cells == 0 || cells > MAX_CELLS {
            return domain(format!("need 1..={MAX_CELLS} cells, got {cells}"));
        }
        if rank > MAX_TOTAL_RANK {
            return domain(format!("rank {rank} exceeds the cap {MAX_TOTAL_RANK}"));
        }
        Ok(Tensor { rank, cells, data: vec![0.0; cells.pow(rank as u32)] })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rank: 0, cells: 1, data: vec![v] }
    }

    pub fn from_fn(rank: usize, cells: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Self::zeros(rank, cells)?;
        let mut idx = vec![0; rank];
        for (i, v) in t.data.iter_mut().enumerate() {
            decode(i, cells, &mut idx);
            *v = f(&idx);
        }
        Ok(t)
    }

    pub fn from_vec(rank: usize, cells: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self::zeros(rank, cells)?;
        if data.len() != t.data.len() {
            return domain(format!("rank-{rank} tensor over {cells} cells needs {} entries, got {}", t.data.len(), data.len()));
        }
        Ok(Tensor { data, ..t })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[encode(idx.iter().copied(), self.cells)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = encode(idx.iter().copied(), self.cells);
        self.data[i] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// ⟨f, g⟩ in L²(𝔪ⁿ).
    pub fn inner(&self, other: &Tensor, space: &DiscreteSpace) -> Result<f64> {
        let c = contraction(self, other, self.rank, self.rank, space)?;
        if self.rank != other.rank {
            return domain("inner product needs equal ranks");
        }
        Ok(c.data[0])
    }

    /// True when every nonzero entry has a repeated cell.
    pub fn is_diagonal_supported(&self) -> bool {
        if self.rank < 2 || self.is_zero() {
            return false;
        }
        let mut idx = vec![0; self.rank];
        self.data.iter().enumerate().all(|(i, v)| {
            decode(i, self.cells, &mut idx);
            *v == 0.0 || has_repeat(&idx)
        })
    }

    fn check_space(&self, space: &DiscreteSpace) -> Result<()> {
        if self.rank > 0 && self.cells != space.cells() {
            return domain(format!("tensor over {} cells used on a {}-cell space", self.cells, space.cells()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return domain("tensor entries must be finite");
        }
        Ok(())
    }
}

fn has_repeat(idx: &[usize]) -> bool {
    (1..idx.len()).any(|i| idx[..i].contains(&idx[i]))
}

/// Zeroes every entry with a repeated cell.
pub fn mask_diagonals(f: &Tensor) -> Tensor {
    let mut out = f.clone();
    let mut idx = vec![0; f.rank];
    for (i, v) in out.data.iter_mut().enumerate() {
        decode(i, f.cells, &mut idx);
        if has_repeat(&idx) {
            *v = 0.0;
        }
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    let mut p: Vec<usize> = (0..n).collect();
    fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, p, out);
            let j = if k % 2 == 0 { i } else { 0 };
            p.swap(j, k - 1);
        }
    }
    heap(n, &mut p, &mut out);
    out
}

/// f̃: average over all argument permutations.
pub fn symmetrize(f: &Tensor, n: usize) -> Result<Tensor> {
    if f.rank != n {
        return domain(format!("symmetrize: declared rank {n}, tensor has rank {}", f.rank));
    }
    if n <= 1 {
        return Ok(f.clone());
    }
    let perms = permutations(n);
    let w = 1.0 / perms.len() as f64;
    let mut idx = vec![0; n];
    let mut out = f.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        decode(i, f.cells, &mut idx);
        *v = w * perms.iter().map(|p| f.data[encode(p.iter().map(|&k| idx[k]), f.cells)]).sum::<f64>();
    }
    Ok(out)
}

/// Symmetrization of g(z₁…z_n, z) already symmetric in its first n arguments:
/// (n+1)⁻¹ Σ_j g(z without z_j, z_j).
pub fn symmetrize_last_argument(g: &Tensor) -> Result<Tensor> {
    let n1 = g.rank;
    if n1 == 0 {
        return Ok(g.clone());
    }
    let mut idx = vec![0; n1];
    let mut moved = vec![0; n1];
    // symmetry in the leading block is a precondition
    for (i, v) in g.data.iter().enumerate() {
        for a in 0..n1.saturating_sub(2) {
            decode(i, g.cells, &mut idx);
            idx.swap(a, a + 1);
            let sw = g.data[encode(idx.iter().copied(), g.cells)];
            if (sw - v).abs() > 1e-12 * (1.0 + v.abs()) {
                return domain("leading arguments must already be symmetric");
            }
        }
    }
    let mut out = g.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        decode(i, g.cells, &mut idx);
        let mut s = 0.0;
        for j in 0..n1 {
            let mut k = 0;
            for (a, &c) in idx.iter().enumerate() {
                if a != j {
                    moved[k] = c;
                    k += 1;
                }
            }
            moved[n1 - 1] = idx[j];
            s += g.data[encode(moved.iter().copied(), g.cells)];
        }
        *v = s / n1 as f64;
    }
    Ok(out)
}

/// f ⋆ₖ^ℓ g. Arguments of both tensors are read as (ℓ integrated, k−ℓ identified, free);
/// the result has arguments (identified, free of f, free of g).
pub fn contraction(f: &Tensor, g: &Tensor, k: usize, l: usize, space: &DiscreteSpace) -> Result<Tensor> {
    let (n, m) = (f.rank, g.rank);
    if !(l <= k && k <= n.min(m)) {
        return domain(format!("contraction needs 0 ≤ ℓ ≤ k ≤ min(n,m); got k={k}, ℓ={l}, n={n}, m={m}"));
    }
    if n + m > MAX_TOTAL_RANK {
        return domain(format!("n + m = {} exceeds the cap {MAX_TOTAL_RANK}", n + m));
    }
    f.check_space(space)?;
    g.check_space(space)?;
    let c = space.cells();
    let rank = n + m - k - l;
    let mut out = Tensor::zeros(rank, c)?;
    let (ki, nf, mf) = (k - l, n - k, m - k);
    let mut oidx = vec![0; rank];
    let mut zidx = vec![0; l];
    let nz = c.pow(l as u32);
    for (o, v) in out.data.iter_mut().enumerate() {
        decode(o, c, &mut oidx);
        let (gam, rest) = oidx.split_at(ki);
        let (tf, sg) = rest.split_at(nf);
        debug_assert_eq!(sg.len(), mf);
        let mut acc = 0.0;
        for z in 0..nz {
            decode(z, c, &mut zidx);
            let w: f64 = zidx.iter().map(|&i| space.masses[i]).product();
            let fi = encode(zidx.iter().chain(gam).chain(tf).copied(), c);
            let gi = encode(zidx.iter().chain(gam).chain(sg).copied(), c);
            acc += w * f.data[fi] * g.data[gi];
        }
        *v = acc;
    }
    Ok(out)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Per-cell factor of the factorial-measure expansion for a cell repeated r times:
/// Σ_j C(r,j)(−1)^{r−j}(N)_j 𝔪^{r−j}.
fn cell_factors(counts: &[u64], space: &DiscreteSpace, rmax: usize) -> Vec<Vec<f64>> {
    counts
        .iter()
        .zip(&space.masses)
        .map(|(&nc, &m)| {
            (0..=rmax)
                .map(|r| {
                    let mut s = 0.0;
                    let mut falling = 1.0;
                    for j in 0..=r {
                        if j > 0 {
                            falling *= nc as f64 - (j - 1) as f64;
                        }
                        let sign = if (r - j) % 2 == 0 { 1.0 } else { -1.0 };
                        s += binom(r, j) * sign * falling * m.powi((r - j) as i32);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn integral_with(factors: &[Vec<f64>], f: &Tensor) -> f64 {
    if f.rank == 0 {
        return f.data[0];
    }
    let mut idx = vec![0; f.rank];
    let mut mult = [0usize; MAX_CELLS];
    let mut s = 0.0;
    for (i, &v) in f.data.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        decode(i, f.cells, &mut idx);
        mult[..f.cells].iter_mut().for_each(|m| *m = 0);
        for &c in &idx {
            mult[c] += 1;
        }
        let w: f64 = mult[..f.cells].iter().enumerate().filter(|(_, &r)| r > 0).map(|(c, &r)| factors[c][r]).product();
        s += v * w;
    }
    s
}

/// I_n(f) for the Poisson measure with the given realized counts. Cells are read as
/// non-atomic sets carrying constant values of f, so the factorial-measure expansion is exact.
pub fn multiple_integral(counts: &[u64], space: &DiscreteSpace, f: &Tensor) -> Result<f64> {
    f.check_space(space)?;
    if counts.len() != space.cells() {
        return domain(format!("{} counts for {} cells", counts.len(), space.cells()));
    }
    if f.is_diagonal_supported() {
        return domain("integrand is supported on diagonals only");
    }
    Ok(integral_with(&cell_factors(counts, space, f.rank), f))
}

/// Terms (coefficient, contraction) of the product formula for I_n(f)I_m(g).
pub fn product_formula_terms(f: &Tensor, g: &Tensor, space: &DiscreteSpace) -> Result<Vec<(f64, Tensor)>> {
    let (n, m) = (f.rank, g.rank);
    let mut terms = vec![];
    for k in 0..=n.min(m) {
        let ck = factorial(k) * binom(n, k) * binom(m, k);
        for l in 0..=k {
            terms.push((ck * binom(k, l), contraction(f, g, k, l, space)?));
        }
    }
    Ok(terms)
}

/// Monte-Carlo comparison of both sides of the product formula, realization by realization.
/// f and g are symmetrized first.
pub fn product_formula_check(space: &DiscreteSpace, f: &Tensor, g: &Tensor, draws: usize, seed: u64) -> Result<ExperimentReport> {
    let fs = symmetrize(f, f.rank)?;
    let gs = symmetrize(g, g.rank)?;
    let terms = product_formula_terms(&fs, &gs, space)?;
    let rmax = f.rank + g.rank;
    let mut rng = stream_rng(seed, 0);
    let (mut max_err, mut max_scale) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let counts = space.sample_counts(&mut rng);
        let fac = cell_factors(&counts, space, rmax);
        let lhs = integral_with(&fac, &fs) * integral_with(&fac, &gs);
        let rhs: f64 = terms.iter().map(|(c, t)| c * integral_with(&fac, t)).sum();
        max_err = max_err.max((lhs - rhs).abs());
        max_scale = max_scale.max(lhs.abs()).max(rhs.abs());
    }
    let mut rep = ExperimentReport::new("product_formula", "discrete", &format!("{}-cell", space.cells()), None);
    rep.push("n", (None, None, None), f.rank as f64, None, None);
    rep.push("m", (None, None, None), g.rank as f64, None, None);
    rep.push("draws", (None, None, None), draws as f64, None, None);
    rep.push("max_abs_lhs", (None, None, None), max_scale, None, None);
    let tol = 1e-10 * (1.0 + max_scale);
    rep.check("max_abs_discrepancy", (None, None, None), max_err, Status::from_bool(max_err <= tol));
    Ok(rep)
}

/// Monte-Carlo check of E[I_n(f)] = 0 and E[I_n(f)I_m(g)] = δ_{nm}·n!·⟨f̃, g̃⟩ (isometry for
/// g = f, orthogonality for n ≠ m), each within 3 standard errors.
pub fn isometry_check(space: &DiscreteSpace, f: &Tensor, g: &Tensor, draws: usize, seed: u64) -> Result<ExperimentReport> {
    if draws < 2 {
        return domain("need at least two draws");
    }
    let fs = mask_diagonals(&symmetrize(f, f.rank)?);
    let gs = mask_diagonals(&symmetrize(g, g.rank)?);
    let mut rng = stream_rng(seed, 0);
    let (mut mf, mut mff, mut mfg) = (Vec::with_capacity(draws), Vec::with_capacity(draws), Vec::with_capacity(draws));
    for _ in 0..draws {
        let counts = space.sample_counts(&mut rng);
        let a = if fs.is_zero() { 0.0 } else { multiple_integral(&counts, space, &fs)? };
        let b = if gs.is_zero() { 0.0 } else { multiple_integral(&counts, space, &gs)? };
        mf.push(a);
        mff.push(a * a);
        mfg.push(a * b);
    }
    let isometry = factorial(f.rank) * fs.inner(&fs, space)?;
    let cross = if f.rank == g.rank { factorial(f.rank) * fs.inner(&gs, space)? } else { 0.0 };
    let mut rep = ExperimentReport::new("multiple_integral_moments", "discrete", &format!("{}-cell", space.cells()), None);
    rep.push("n", (None, None, None), f.rank as f64, None, None);
    rep.push("m", (None, None, None), g.rank as f64, None, None);
    let within = |rep: &mut ExperimentReport, name: &str, xs: &[f64], want: f64| {
        let (mean, se) = crate::stats::estimators::mean_se(xs);
        let gap = (mean - want).abs();
        rep.push(&format!("{name}_expected"), (None, None, None), want, None, None);
        rep.push(name, (None, None, None), mean, Some(se), None);
        let ratio = if se > 0.0 { gap / se } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
        rep.check(&format!("{name}_gap_over_se"), (None, None, None), ratio, Status::from_bool(ratio <= 3.0));
    };
    within(&mut rep, "mean_I_f", &mf, 0.0);
    within(&mut rep, "mean_I_f_sq", &mff, isometry);
    within(&mut rep, "mean_I_f_I_g", &mfg, cross);
    Ok(rep)
}

/// The finite-space suite: product formula for (n, m) ∈ {(1,1), (1,2), (2,2)}, the
/// vanishing-contraction case, and mean/isometry/orthogonality of multiple integrals.
pub fn chaos_suite(product_draws: usize, moment_draws: usize, seed: u64) -> Result<ExperimentReport> {
    let space = DiscreteSpace::new(vec![0.6, 1.2, 0.9, 0.4])?;
    let cells = space.cells();
    let mut rng = stream_rng(seed, u64::MAX);
    let mut random = |rank: usize| Tensor::from_fn(rank, cells, |_| rng.random_range(-1.0..1.0));
    let (f1, g1, f2, g2) = (random(1)?, random(1)?, random(2)?, random(2)?);
    let mut rep = ExperimentReport::new("chaos-verify", "discrete", &format!("{cells}-cell"), None);
    for (label, f, g) in [("product_1_1", &f1, &g1), ("product_1_2", &f1, &g2), ("product_2_2", &f2, &g2)] {
        rep.absorb(label, &product_formula_check(&space, f, g, product_draws, seed)?);
    }

    // f on cells {0, 1}, g on {2, 3}: every contraction vanishes.
    let f = Tensor::from_fn(2, cells, |i| if i.iter().all(|&c| c < 2) { f2.get(i) } else { 0.0 })?;
    let g = Tensor::from_fn(2, cells, |i| if i.iter().all(|&c| c >= 2) { g2.get(i) } else { 0.0 })?;
    let terms = product_formula_terms(&symmetrize(&f, 2)?, &symmetrize(&g, 2)?, &space)?;
    let nonzero = terms.iter().skip(1).filter(|(_, t)| !t.is_zero()).count();
    rep.check("disjoint.nonzero_contractions", (None, None, None), nonzero as f64, Status::from_bool(nonzero == 0));
    rep.absorb("disjoint", &product_formula_check(&space, &f, &g, product_draws, seed ^ 1)?);

    for (i, (label, f, g)) in [("isometry_1", &f1, &f1), ("isometry_2", &f2, &f2), ("orthogonal_2_1", &f2, &f1)].into_iter().enumerate() {
        rep.absorb(label, &isometry_check(&space, f, g, moment_draws, seed.wrapping_add(1 + i as u64))?);
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Deterministic truncated chaos moments.
//
// With A_τ(u) = ¼(2τ − |u|)₊ = (G_τ ∗ G_τ)(u), the n-th chaos contribution reduces to a
// chain in the difference variable d = y − y′:
//   Φ₁ = f,   Φ_{j+1}(s,d) = f(d) ∫₀ˢ ds′ (A_{s−s′} ∗ Φ_j(s′,·))(d).
// We store χ_j = Φ_j / f on a symmetric d-grid (piecewise linear) and integrate f·χ with
// exact moments of f, so the Riesz singularity at 0 costs nothing.

/// Result of a truncated chaos sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ChaosMoment {
    pub value: f64,
    /// Contributions of orders 1..=n_max.
    pub terms: Vec<f64>,
    /// Upper bound on the omitted orders.
    pub remainder_bound: f64,
    /// |value − value at half resolution|.
    pub residual: f64,
}

/// Spatial window of a covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovarianceWindow {
    /// Cov(F_R(t), F_R(s)) with F_R = ∫_{−R}^{R}(u − 1).
    Radius(f64),
    /// lim Cov(F_R(t), F_R(s)) / R (integrable kernels).
    Limit,
}

#[derive(Clone, Copy, Debug)]
enum Outer {
    Diagonal { t: f64 },
    Window { t: f64, s: f64, radius: f64 },
    Limit { t: f64, s: f64 },
}

struct Grid<'a> {
    f: &'a CovarianceKernel,
    d0: f64,
    h: f64,
    n: usize,
}

impl Grid<'_> {
    fn x(&self, k: usize) -> f64 {
        self.d0 + k as f64 * self.h
    }

    /// Primitives G1 = ∫f·χ and G2 = ∫G1 from the left end, at the nodes.
    fn primitives(&self, chi: &[f64]) -> Primitives<'_> {
        let mut g1 = vec![0.0; self.n];
        let mut g2 = vec![0.0; self.n];
        for k in 0..self.n - 1 {
            let (a, b) = (self.x(k), self.x(k + 1));
            let q = (chi[k + 1] - chi[k]) / self.h;
            let p = chi[k] - q * a;
            let [m0, m1, m2] = self.f.moments(a, b);
            let ig = p * m0 + q * m1;
            g1[k + 1] = g1[k] + ig;
            g2[k + 1] = g2[k] + g1[k] * self.h + (b * ig - (p * m1 + q * m2));
        }
        Primitives { grid: self, chi: chi.to_vec(), g1, g2 }
    }
}

struct Primitives<'a> {
    grid: &'a Grid<'a>,
    chi: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl Primitives<'_> {
    fn g2_at(&self, x: f64) -> f64 {
        let gr = self.grid;
        let last = gr.n - 1;
        let u = (x - gr.d0) / gr.h;
        if u <= 0.0 {
            return 0.0;
        }
        if u >= last as f64 {
            return self.g2[last] + self.g1[last] * (x - gr.x(last));
        }
        let k = (u as usize).min(last - 1);
        let a = gr.x(k);
        let q = (self.chi[k + 1] - self.chi[k]) / gr.h;
        let p = self.chi[k] - q * a;
        let [m0, m1, m2] = gr.f.moments(a, x);
        self.g2[k] + self.g1[k] * (x - a) + x * (p * m0 + q * m1) - (p * m1 + q * m2)
    }

    /// (A_τ ∗ fχ)(x).
    fn tri(&self, x: f64, tau: f64) -> f64 {
        0.25 * (self.g2_at(x + 2.0 * tau) - 2.0 * self.g2_at(x) + self.g2_at(x - 2.0 * tau))
    }

    fn total(&self) -> f64 {
        self.g1[self.grid.n - 1]
    }
}

fn barycentric_weights(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| 1.0 / (0..x.len()).filter(|&j| j != i).map(|j| x[i] - x[j]).product::<f64>())
        .collect()
}

fn lagrange_row(x: &[f64], w: &[f64], s: f64) -> Vec<f64> {
    if let Some(i) = x.iter().position(|&xi| xi == s) {
        let mut row = vec![0.0; x.len()];
        row[i] = 1.0;
        return row;
    }
    let terms: Vec<f64> = x.iter().zip(w).map(|(xi, wi)| wi / (s - xi)).collect();
    let tot: f64 = terms.iter().sum();
    terms.into_iter().map(|v| v / tot).collect()
}

/// ∫ T(v)(2R − |v + d|)₊ dv with T = G_{τ1} ∗ G_{τ2}.
fn window_weight(d: f64, tau1: f64, tau2: f64, radius: f64) -> f64 {
    let span = tau1 + tau2;
    let tr = |v: f64| 0.25 * ((v + tau1).min(tau2) - (v - tau1).max(-tau2)).max(0.0);
    let tri = |v: f64| (2.0 * radius - (v + d).abs()).max(0.0);
    let mut pts = vec![-span, span];
    for b in [-(tau1 - tau2).abs(), (tau1 - tau2).abs(), -d - 2.0 * radius, -d, -d + 2.0 * radius] {
        if b > -span && b < span {
            pts.push(b);
        }
    }
    pts.sort_by(f64::total_cmp);
    let g = 0.5 / 3f64.sqrt();
    pts.windows(2)
        .map(|w| {
            let (m, h) = (0.5 * (w[0] + w[1]), w[1] - w[0]);
            0.5 * h * (tr(m - g * h) * tri(m - g * h) + tr(m + g * h) * tri(m + g * h))
        })
        .sum()
}

fn chain_sum(f: &CovarianceKernel, m2: f64, outer: Outer, n_max: usize, nodes: usize, step: f64, reach: f64) -> Result<Vec<f64>> {
    let (t_c, half) = match outer {
        Outer::Diagonal { t } => (t, 2.0 * t),
        Outer::Window { t, s, radius } => {
            let tc = t.min(s);
            let mut d = 2.0 * radius + t + s;
            if !f.is_power() {
                d = d.min(2.0 * tc + 2.0 * reach);
            }
            (tc, d)
        }
        Outer::Limit { t, s } => {
            let tc = t.min(s);
            (tc, 2.0 * tc + 2.0 * reach)
        }
    };
    if n_max == 0 || t_c <= 0.0 {
        return Ok(vec![0.0; n_max]);
    }
    let h_target = step.min(half / 400.0);
    let m = (half / h_target).ceil() as usize;
    let h = half / m as f64;
    let grid = Grid { f, d0: -half, h, n: 2 * m + 1 };
    let (sig, wsig) = gauss_legendre_on(nodes, 0.0, t_c);
    let bw = barycentric_weights(&sig);

    let outer_integrand = |q: usize, chi: &[f64]| -> f64 {
        let s_n = sig[q];
        match outer {
            Outer::Diagonal { t } => grid.primitives(chi).tri(0.0, t - s_n),
            Outer::Limit { t, s } => 2.0 * (t - s_n) * (s - s_n) * grid.primitives(chi).total(),
            Outer::Window { t, s, radius } => {
                let weighted: Vec<f64> =
                    chi.iter().enumerate().map(|(k, c)| c * window_weight(grid.x(k), t - s_n, s - s_n, radius)).collect();
                grid.primitives(&weighted).total()
            }
        }
    };

    let mut chi: Vec<Vec<f64>> = vec![vec![1.0; grid.n]; nodes];
    let mut terms = Vec::with_capacity(n_max);
    for order in 1..=n_max {
        let term: f64 = (0..nodes).map(|q| wsig[q] * outer_integrand(q, &chi[q])).sum();
        terms.push(m2.powi(order as i32) * term);
        if order == n_max {
            break;
        }
        let mut next = vec![vec![0.0; grid.n]; nodes];
        for (q, row) in next.iter_mut().enumerate() {
            let (sp, wp) = gauss_legendre_on(nodes, 0.0, sig[q]);
            for (s_r, w_r) in sp.iter().zip(&wp) {
                let lag = lagrange_row(&sig, &bw, *s_r);
                let mut c = vec![0.0; grid.n];
                for (l, chi_l) in lag.iter().zip(&chi) {
                    c.iter_mut().zip(chi_l).for_each(|(a, b)| *a += l * b);
                }
                let prim = grid.primitives(&c);
                let tau = sig[q] - s_r;
                for (k, v) in row.iter_mut().enumerate() {
                    *v += w_r * prim.tri(grid.x(k), tau);
                }
            }
        }
        chi = next;
    }
    if terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { msg: "chaos chain produced a non-finite term".into(), residual: f64::NAN });
    }
    Ok(terms)
}

/// Σ_{n>n_max} of the Volterra bound (m₂κΓ(e+1))ⁿ t^{(e+1)n} / Γ((e+1)n+1).
fn tail_bound(f: &CovarianceKernel, m2: f64, t: f64, n_max: usize) -> f64 {
    let (kappa, e) = f.growth();
    let c = m2 * kappa * gamma(e + 1.0);
    if c == 0.0 || t == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for n in n_max + 1..n_max + 400 {
        let nf = n as f64;
        let ln = nf * c.ln() + (e + 1.0) * nf * t.ln() - ln_gamma((e + 1.0) * nf + 1.0);
        let v = ln.exp();
        s += v;
        if v < 1e-17 * s.max(1e-300) {
            break;
        }
    }
    s
}

const CHAIN_NODES: usize = 32;
const CHAIN_STEP: f64 = 0.02;
const CHAIN_REL_TOL: f64 = 2e-2;

fn finish(terms: Vec<f64>, coarse: Vec<f64>, base: f64, remainder_bound: f64) -> Result<ChaosMoment> {
    let value = base + terms.iter().sum::<f64>();
    let residual = (terms.iter().sum::<f64>() - coarse.iter().sum::<f64>()).abs();
    if residual > CHAIN_REL_TOL * (value - base).abs() + 1e-12 {
        return Err(Error::Numeric { msg: "truncated chaos quadrature did not settle".into(), residual });
    }
    Ok(ChaosMoment { value, terms, remainder_bound, residual })
}

fn check_order(n_max: usize) -> Result<()> {
    if n_max > MAX_CHAOS_ORDER {
        return domain(format!("n_max = {n_max} exceeds {MAX_CHAOS_ORDER}"));
    }
    Ok(())
}

/// E|u(t,x)|² truncated after chaos order n_max, for the Gaussian model with variance
/// parameter m₂ (the Lévy model shares it).
pub fn truncated_second_moment_gaussian(kernel: &KernelSpec, m2: f64, t: f64, _x: f64, n_max: usize) -> Result<ChaosMoment> {
    check_order(n_max)?;
    if !(t >= 0.0 && t.is_finite()) || !(m2 >= 0.0 && m2.is_finite()) {
        return domain(format!("need t ≥ 0 and m₂ ≥ 0, got t={t}, m₂={m2}"));
    }
    let f = covariance_kernel(kernel)?;
    let outer = Outer::Diagonal { t };
    let fine = chain_sum(&f, m2, outer, n_max, CHAIN_NODES, CHAIN_STEP, kernel.reach())?;
    let coarse = chain_sum(&f, m2, outer, n_max, CHAIN_NODES / 2, 2.0 * CHAIN_STEP, kernel.reach())?;
    finish(fine, coarse, 1.0, tail_bound(&f, m2, t, n_max))
}

/// E|u(t,x)|² truncated after chaos order n_max.
pub fn truncated_second_moment(kernel: &KernelSpec, spec: &LevyMeasureSpec, t: f64, x: f64, n_max: usize) -> Result<ChaosMoment> {
    spec.validate()?;
    truncated_second_moment_gaussian(kernel, spec.m2(), t, x, n_max)
}

/// Truncated chaos sum of Cov(F_R(t), F_R(s)), or of its limit divided by R.
pub fn truncated_covariance(kernel: &KernelSpec, m2: f64, t: f64, s: f64, window: CovarianceWindow, n_max: usize) -> Result<ChaosMoment> {
    check_order(n_max)?;
    if !(t >= 0.0 && s >= 0.0 && t.is_finite() && s.is_finite()) {
        return domain(format!("need finite t, s ≥ 0, got {t}, {s}"));
    }
    let f = covariance_kernel(kernel)?;
    let (outer, bound) = match window {
        CovarianceWindow::Radius(r) => {
            if !(r > 0.0 && r.is_finite()) {
                return domain(format!("radius must be positive, got {r}"));
            }
            // Cauchy–Schwarz against the diagonal tails, times (2R)²
            let b = 4.0 * r * r * (tail_bound(&f, m2, t, n_max) * tail_bound(&f, m2, s, n_max)).sqrt();
            (Outer::Window { t, s, radius: r }, b)
        }
        CovarianceWindow::Limit => {
            if f.is_power() {
                return Err(Error::Unsupported("the covariance limit at scale R needs an integrable kernel".into()));
            }
            let (kappa, e) = f.growth();
            let tc = t.min(s);
            let c = m2 * kappa * gamma(e + 1.0);
            let mut b = 0.0;
            for n in n_max + 1..n_max + 400 {
                let j = (n - 1) as f64;
                let v = 2.0 * t * s * m2 * (c.ln() * j + ((e + 1.0) * j + 1.0) * tc.ln() - ln_gamma((e + 1.0) * j + 2.0)).exp();
                b += v;
                if v < 1e-17 * b.max(1e-300) {
                    break;
                }
            }
            (Outer::Limit { t, s }, if c == 0.0 { 0.0 } else { b })
        }
    };
    let fine = chain_sum(&f, m2, outer, n_max, CHAIN_NODES, CHAIN_STEP, kernel.reach())?;
    let coarse = chain_sum(&f, m2, outer, n_max, CHAIN_NODES / 2, 2.0 * CHAIN_STEP, kernel.reach())?;
    finish(fine, coarse, 0.0, bound)
}
