//! Finite-activity Poisson random measures and compensated Lévy-noise integrals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

use crate::error::{domain, Error, Result};
use crate::quad;

/// Default cap on the expected number of atoms in one cloud.
pub const DEFAULT_ATOM_BUDGET: f64 = 5.0e6;

/// Law of a single jump size Z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum JumpLaw {
    /// ±1 with probability ½ each.
    Rademacher,
    /// Uniform on [-a, a].
    Uniform { a: f64 },
    /// +a with probability p, -b with probability 1-p.
    TwoPoint { p: f64, a: f64, b: f64 },
}

/// ν = λ·Law(Z), a finite Lévy measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasureSpec {
    pub total_mass: f64,
    pub law: JumpLaw,
}

impl LevyMeasureSpec {
    pub fn new(total_mass: f64, law: JumpLaw) -> Result<Self> {
        let s = LevyMeasureSpec { total_mass, law };
        s.validate()?;
        Ok(s)
    }

    pub fn rademacher() -> Self {
        LevyMeasureSpec { total_mass: 1.0, law: JumpLaw::Rademacher }
    }

    pub fn uniform(a: f64) -> Result<Self> {
        Self::new(1.0, JumpLaw::Uniform { a })
    }

    /// Two-point law with mean zero; requires p·a = (1-p)·b.
    pub fn centered_two_point(p: f64, a: f64, b: f64) -> Result<Self> {
        let s = Self::new(1.0, JumpLaw::TwoPoint { p, a, b })?;
        if (p * a - (1.0 - p) * b).abs() > 1e-12 * (a + b) {
            return domain(format!("centered two-point law needs p*a = (1-p)*b, got p={p}, a={a}, b={b}"));
        }
        Ok(s)
    }

    /// Two-point law without the centering constraint (exercises the compensator drift).
    pub fn two_point(p: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(1.0, JumpLaw::TwoPoint { p, a, b })
    }

    pub fn with_total_mass(mut self, total_mass: f64) -> Result<Self> {
        self.total_mass = total_mass;
        self.validate()?;
        Ok(self)
    }

    /// Parses a preset name such as `rademacher`, `uniform(2)`, `uniform(±2)`,
    /// `centered-two-point(0.25, 3, 1)` or `two-point(0.5, 1, 0.5)`.
    pub fn parse(text: &str) -> Result<Self> {
        let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let (name, args) = match t.find('(') {
            Some(i) => {
                if !t.ends_with(')') {
                    return Err(Error::Config(format!("unbalanced parentheses in noise preset '{text}'")));
                }
                let inner = &t[i + 1..t.len() - 1];
                let vals = inner
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        let s = s.trim_start_matches('±').trim_start_matches("+-");
                        let s = s.rsplit('=').next().unwrap_or(s);
                        s.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad number '{s}' in noise preset '{text}'")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                (&t[..i], vals)
            }
            None => (t.as_str(), Vec::new()),
        };
        let wrong = || Error::Config(format!("wrong number of arguments in noise preset '{text}'"));
        let spec = match name.to_ascii_lowercase().as_str() {
            "rademacher" if args.is_empty() => Self::rademacher(),
            "uniform" => match args[..] {
                [a] => Self::uniform(a),
                _ => return Err(wrong()),
            }?,
            "centered-two-point" => match args[..] {
                [p, a, b] => Self::centered_two_point(p, a, b),
                _ => return Err(wrong()),
            }?,
            "two-point" => match args[..] {
                [p, a, b] => Self::two_point(p, a, b),
                _ => return Err(wrong()),
            }?,
            _ => return Err(Error::Config(format!("unknown noise preset '{text}'"))),
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_mass >= 0.0 && self.total_mass.is_finite()) {
            return domain(format!("total mass must be finite and >= 0, got {}", self.total_mass));
        }
        match self.law {
            JumpLaw::Rademacher => {}
            JumpLaw::Uniform { a } => {
                if !(a > 0.0 && a.is_finite()) {
                    return domain(format!("uniform half-width must be positive, got {a}"));
                }
            }
            JumpLaw::TwoPoint { p, a, b } => {
                if !(p > 0.0 && p < 1.0) {
                    return domain(format!("two-point probability must lie in (0,1), got {p}"));
                }
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return domain(format!("two-point magnitudes must be positive, got a={a}, b={b}"));
                }
            }
        }
        Ok(())
    }

    /// E|Z|^p.
    pub fn abs_moment(&self, p: f64) -> f64 {
        match self.law {
            JumpLaw::Rademacher => 1.0,
            JumpLaw::Uniform { a } => a.powf(p) / (p + 1.0),
            JumpLaw::TwoPoint { p: q, a, b } => q * a.powf(p) + (1.0 - q) * b.powf(p),
        }
    }

    /// m_p = λ·E|Z|^p.
    pub fn moment(&self, p: f64) -> f64 {
        self.total_mass * self.abs_moment(p)
    }

    /// m₂.
    pub fn m2(&self) -> f64 {
        self.moment(2.0)
    }

    /// m₁ = λ·E[Z], the compensator drift.
    pub fn mean(&self) -> f64 {
        self.total_mass
            * match self.law {
                JumpLaw::Rademacher | JumpLaw::Uniform { .. } => 0.0,
                JumpLaw::TwoPoint { p, a, b } => p * a - (1.0 - p) * b,
            }
    }

    /// m₁, with centered laws reported as exactly zero.
    pub fn drift(&self) -> f64 {
        if self.is_centered() {
            0.0
        } else {
            self.mean()
        }
    }

    /// m₁ = 0 up to rounding in the law's parameters.
    pub fn is_centered(&self) -> bool {
        self.mean().abs() <= 1e-12 * self.moment(1.0)
    }

    /// Support points and probabilities for discrete laws.
    pub fn atoms_of_law(&self) -> Option<Vec<(f64, f64)>> {
        match self.law {
            JumpLaw::Rademacher => Some(vec![(-1.0, 0.5), (1.0, 0.5)]),
            JumpLaw::Uniform { .. } => None,
            JumpLaw::TwoPoint { p, a, b } => Some(vec![(-b, 1.0 - p), (a, p)]),
        }
    }

    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.law {
            JumpLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            JumpLaw::Uniform { a } => loop {
                let z = a * (2.0 * rng.random::<f64>() - 1.0);
                if z != 0.0 {
                    break z;
                }
            },
            JumpLaw::TwoPoint { p, a, b } => {
                if rng.random::<f64>() < p {
                    a
                } else {
                    -b
                }
            }
        }
    }
}

impl fmt::Display for LevyMeasureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.law {
            JumpLaw::Rademacher => write!(f, "rademacher")?,
            JumpLaw::Uniform { a } => write!(f, "uniform(±{a})")?,
            JumpLaw::TwoPoint { p, a, b } if self.is_centered() => write!(f, "centered-two-point({p},{a},{b})")?,
            JumpLaw::TwoPoint { p, a, b } => write!(f, "two-point({p},{a},{b})")?,
        }
        if self.total_mass != 1.0 {
            write!(f, "[lambda={}]", self.total_mass)?;
        }
        Ok(())
    }
}

/// One point (τ, ξ, ζ) of the Poisson random measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub tau: f64,
    pub xi: f64,
    pub zeta: f64,
}

impl Atom {
    pub fn new(tau: f64, xi: f64, zeta: f64) -> Self {
        Atom { tau, xi, zeta }
    }

    fn order(&self, other: &Self) -> Ordering {
        self.tau
            .total_cmp(&other.tau)
            .then(self.xi.total_cmp(&other.xi))
            .then(self.zeta.total_cmp(&other.zeta))
    }
}

/// A realization of the noise on (0,T]×[-L,L], sorted by time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomCloud {
    pub t_max: f64,
    pub half_width: f64,
    atoms: Vec<Atom>,
}

impl AtomCloud {
    pub fn new(t_max: f64, half_width: f64, mut atoms: Vec<Atom>) -> Result<Self> {
        if !(t_max > 0.0 && half_width > 0.0) {
            return domain(format!("window needs T > 0 and L > 0, got T={t_max}, L={half_width}"));
        }
        for a in &atoms {
            a.check(t_max, half_width)?;
        }
        atoms.sort_by(Atom::order);
        Ok(AtomCloud { t_max, half_width, atoms })
    }

    pub fn empty(t_max: f64, half_width: f64) -> Result<Self> {
        Self::new(t_max, half_width, Vec::new())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Copy with one more atom, kept in order.
    pub fn with_atom(&self, extra: Atom) -> Result<Self> {
        extra.check(self.t_max, self.half_width)?;
        let mut atoms = self.atoms.clone();
        let pos = atoms.partition_point(|a| a.order(&extra) == Ordering::Less);
        atoms.insert(pos, extra);
        Ok(AtomCloud { atoms, ..self.clone() })
    }

    /// Atoms whose time lies in (lo, hi].
    pub fn between(&self, lo: f64, hi: f64) -> impl Iterator<Item = &Atom> {
        self.atoms.iter().filter(move |a| a.tau > lo && a.tau <= hi)
    }
}

impl Atom {
    fn check(&self, t_max: f64, half_width: f64) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= t_max) {
            return domain(format!("atom time {} outside (0, {t_max}]", self.tau));
        }
        if !(self.xi.abs() <= half_width) {
            return domain(format!("atom position {} outside [-{half_width}, {half_width}]", self.xi));
        }
        if !(self.zeta != 0.0 && self.zeta.is_finite()) {
            return domain(format!("atom jump must be finite and nonzero, got {}", self.zeta));
        }
        Ok(())
    }
}

/// Samples the Poisson random measure with intensity dt dx ν(dz) on (0,T]×[-L,L].
pub fn sample_atoms<R: Rng + ?Sized>(
    spec: &LevyMeasureSpec,
    t_max: f64,
    half_width: f64,
    budget: f64,
    rng: &mut R,
) -> Result<AtomCloud> {
    spec.validate()?;
    if !(t_max > 0.0 && half_width > 0.0) {
        return domain(format!("window needs T > 0 and L > 0, got T={t_max}, L={half_width}"));
    }
    let mean = spec.total_mass * t_max * 2.0 * half_width;
    if !(mean <= budget) {
        return Err(Error::Resource(format!("expected atom count {mean:.3e} exceeds the budget {budget:.3e}")));
    }
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|e| Error::Domain(e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let mut atoms = Vec::with_capacity(count);
    for _ in 0..count {
        // 1 - U lies in (0, 1]
        let tau = t_max * (1.0 - rng.random::<f64>());
        let xi = half_width * (2.0 * rng.random::<f64>() - 1.0);
        let zeta = spec.sample_jump(rng);
        atoms.push(Atom { tau, xi, zeta });
    }
    atoms.sort_by(Atom::order);
    Ok(AtomCloud { t_max, half_width, atoms })
}

/// Σ φ(τ_i, ξ_i) ζ_i − m₁ ∫∫ φ over the window.
pub fn levy_integral<F>(cloud: &AtomCloud, spec: &LevyMeasureSpec, mut phi: F) -> Result<f64>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let mut s = 0.0;
    for a in cloud.atoms() {
        s += phi(a.tau, a.xi)? * a.zeta;
    }
    let m1 = spec.drift();
    if m1 != 0.0 {
        let mut err = None;
        let l = cloud.half_width;
        let outer = quad::integrate(
            |t| {
                quad::integrate(
                    |x| match phi(t, x) {
                        Ok(v) => v,
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    },
                    -l,
                    l,
                    1e-10,
                    1e-8,
                )
                .unwrap_or(f64::NAN)
            },
            0.0,
            cloud.t_max,
            1e-9,
            1e-8,
        );
        if let Some(e) = err {
            return Err(e);
        }
        s -= m1 * outer?;
    }
    Ok(s)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for replicate `index` under `root`.
///
/// The root seed is expanded by SplitMix64 into a ChaCha8 key; the index selects the ChaCha
/// stream, so streams for distinct indices never overlap.
pub fn stream_rng(root: u64, index: u64) -> ChaCha8Rng {
    let mut st = root;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut st).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Sub-stream for a named purpose inside one replicate (e.g. the Gaussian panel).
pub fn substream(root: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut st = root ^ purpose.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    stream_rng(splitmix64(&mut st), index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn presets_and_moments() {
        let r = LevyMeasureSpec::rademacher();
        for p in [0.0, 0.5, 1.0, 2.0, 3.7] {
            assert_eq!(r.moment(p), 1.0);
        }
        assert_eq!(r.mean(), 0.0);
        let u = LevyMeasureSpec::uniform(3.0).unwrap();
        assert_relative_eq!(u.m2(), 3.0);
        let c = LevyMeasureSpec::centered_two_point(0.25, 3.0, 1.0).unwrap();
        assert_eq!(c.mean(), 0.0);
        assert_relative_eq!(c.m2(), 0.25 * 9.0 + 0.75);
        assert!(LevyMeasureSpec::centered_two_point(0.5, 3.0, 1.0).is_err());
        let d = LevyMeasureSpec::two_point(0.5, 1.0, 0.5).unwrap();
        assert_relative_eq!(d.mean(), 0.25);
    }

    #[test]
    fn parse_round_trip() {
        for s in ["rademacher", "uniform(±2)", "centered-two-point(0.25,3,1)", "two-point(0.5,1,0.5)"] {
            let spec = LevyMeasureSpec::parse(s).unwrap();
            assert_eq!(spec.to_string(), s);
            assert_eq!(LevyMeasureSpec::parse(&spec.to_string()).unwrap(), spec);
        }
        assert_eq!(LevyMeasureSpec::parse("uniform(a=2)").unwrap(), LevyMeasureSpec::uniform(2.0).unwrap());
        assert!(LevyMeasureSpec::parse("stable(1.5)").is_err());
        assert!(LevyMeasureSpec::parse("uniform(1,2)").is_err());
        assert!(LevyMeasureSpec::parse("uniform(-1)").is_err());
    }

    #[test]
    fn empty_when_massless() {
        let spec = LevyMeasureSpec::rademacher().with_total_mass(0.0).unwrap();
        let cloud = sample_atoms(&spec, 1.0, 10.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(1, 0)).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(levy_integral(&cloud, &spec, |_, _| Ok(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn budget_is_enforced() {
        let r = sample_atoms(&LevyMeasureSpec::rademacher(), 1.0, 1e9, DEFAULT_ATOM_BUDGET, &mut stream_rng(1, 0));
        assert!(matches!(r, Err(Error::Resource(_))));
    }

    #[test]
    fn mean_atom_count() {
        let spec = LevyMeasureSpec::rademacher();
        let n = 10_000;
        let total: usize = (0..n)
            .map(|i| sample_atoms(&spec, 1.0, 50.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(7, i)).unwrap().len())
            .sum();
        let mean = total as f64 / n as f64;
        // Poisson(100): sd of the mean is 10/100
        assert!((mean - 100.0).abs() < 3.0 * 0.1, "mean {mean}");
    }

    #[test]
    fn single_atom_integral() {
        let cloud = AtomCloud::new(1.0, 1.0, vec![Atom::new(0.5, 0.0, 2.0)]).unwrap();
        let v = levy_integral(&cloud, &LevyMeasureSpec::rademacher(), |t, _| Ok(t)).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn drift_compensator() {
        let spec = LevyMeasureSpec::two_point(0.5, 1.0, 0.5).unwrap();
        let cloud = AtomCloud::empty(1.0, 1.0).unwrap();
        let v = levy_integral(&cloud, &spec, |_, _| Ok(1.0)).unwrap();
        assert_relative_eq!(v, -0.25 * 2.0, max_relative = 1e-9);
    }

    #[test]
    fn window_checks() {
        assert!(AtomCloud::new(1.0, 1.0, vec![Atom::new(0.0, 0.0, 1.0)]).is_err());
        assert!(AtomCloud::new(1.0, 1.0, vec![Atom::new(0.5, 1.5, 1.0)]).is_err());
        assert!(AtomCloud::new(1.0, 1.0, vec![Atom::new(0.5, 0.0, 0.0)]).is_err());
        let c = AtomCloud::new(1.0, 1.0, vec![Atom::new(0.7, 0.0, 1.0), Atom::new(0.2, 0.0, 1.0)]).unwrap();
        let c = c.with_atom(Atom::new(0.5, 0.1, -1.0)).unwrap();
        let taus: Vec<f64> = c.atoms().iter().map(|a| a.tau).collect();
        assert_eq!(taus, vec![0.2, 0.5, 0.7]);
        assert_eq!(c.between(0.2, 0.7).count(), 2);
    }

    fn variance_of(f: impl Fn(&AtomCloud) -> f64, spec: &LevyMeasureSpec, t: f64, l: f64, n: u64, seed: u64) -> (f64, f64) {
        let xs: Vec<f64> = (0..n)
            .map(|i| f(&sample_atoms(spec, t, l, DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, i)).unwrap()))
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        (v, ((m4 - v * v) / n as f64).sqrt())
    }

    #[test]
    fn isometry_for_five_test_functions() {
        let spec = LevyMeasureSpec::rademacher();
        let phis: [(fn(f64, f64) -> f64, f64); 5] = [
            (|_, _| 1.0, 2.0),
            (|t, _| t, 2.0 / 3.0),
            (|_, x| x, 2.0 / 3.0),
            (|t, x| t * x * x, 2.0 / 15.0),
            (|t, x| if x > 0.0 { 1.0 } else { -t }, 1.0 + 1.0 / 3.0),
        ];
        for (k, (phi, norm2)) in phis.iter().enumerate() {
            let (v, se) = variance_of(
                |c| levy_integral(c, &spec, |t, x| Ok(phi(t, x))).unwrap(),
                &spec,
                1.0,
                1.0,
                20_000,
                100 + k as u64,
            );
            assert!((v - spec.m2() * norm2).abs() < 3.0 * se, "phi {k}: {v} vs {norm2} (se {se})");
        }
    }

    #[test]
    fn disjoint_slabs_uncorrelated() {
        let spec = LevyMeasureSpec::uniform(1.0).unwrap();
        let n = 20_000u64;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let c = sample_atoms(&spec, 2.0, 1.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(3, i)).unwrap();
                let a: f64 = c.atoms().iter().filter(|a| a.tau <= 1.0).map(|a| a.zeta).sum();
                let b: f64 = c.atoms().iter().filter(|a| a.tau > 1.0).map(|a| a.zeta).sum();
                (a, b)
            })
            .collect();
        let nf = n as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
        let prods: Vec<f64> = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).collect();
        let cov = prods.iter().sum::<f64>() / nf;
        let se = (prods.iter().map(|x| (x - cov).powi(2)).sum::<f64>() / nf).sqrt() / nf.sqrt();
        assert!(cov.abs() < 3.0 * se, "cov {cov} se {se}");
    }

    proptest! {
        #[test]
        fn reproducible_and_inside_window(seed in any::<u64>(), idx in 0u64..1000, lambda in 0.0f64..3.0) {
            let spec = LevyMeasureSpec::uniform(2.0).unwrap().with_total_mass(lambda).unwrap();
            let a = sample_atoms(&spec, 1.5, 4.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, idx)).unwrap();
            let b = sample_atoms(&spec, 1.5, 4.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, idx)).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.atoms().windows(2) {
                prop_assert!(w[0].tau <= w[1].tau);
            }
            for at in a.atoms() {
                prop_assert!(at.tau > 0.0 && at.tau <= 1.5 && at.xi.abs() <= 4.0 && at.zeta != 0.0);
            }
        }

        #[test]
        fn rademacher_jumps_are_unit(seed in any::<u64>()) {
            let c = sample_atoms(&LevyMeasureSpec::rademacher(), 1.0, 20.0, DEFAULT_ATOM_BUDGET, &mut stream_rng(seed, 0)).unwrap();
            prop_assert!(c.atoms().iter().all(|a| a.zeta.abs() == 1.0));
        }

        #[test]
        fn distinct_streams_differ(seed in any::<u64>(), i in 0u64..100) {
            let mut a = stream_rng(seed, i);
            let mut b = stream_rng(seed, i + 1);
            prop_assert_ne!(a.random::<u64>(), b.random::<u64>());
        }
    }
}
