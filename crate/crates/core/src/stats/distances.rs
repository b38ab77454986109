//! Empirical distances to the standard normal law and two-sample tests.

use statrs::distribution::{ContinuousCDF, Normal};

use super::estimators::sum;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Kolmogorov distance sup|F_n − Φ|.
pub fn kolmogorov(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let z = std_normal();
    sorted(xs)
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = z.cdf(x);
            ((i + 1) as f64 / n - c).max(c - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// 1-Wasserstein distance via the quantile coupling at midpoints (i − ½)/n.
pub fn wasserstein1(xs: &[f64]) -> f64 {
    let n = xs.len();
    let z = std_normal();
    let s = sorted(xs);
    sum(s.iter().enumerate().map(|(i, &x)| (x - z.inverse_cdf((i as f64 + 0.5) / n as f64)).abs())) / n as f64
}

/// DKW half-width: P(sup|F_n − F| > ε) ≤ δ for ε = √(ln(2/δ)/(2n)).
pub fn dkw_floor(n: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// (d_K, d_W) of a standardized sample.
pub fn clt_distances(xs: &[f64]) -> (f64, f64) {
    (kolmogorov(xs), wasserstein1(xs))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_tail(lam))
}

/// Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}.
pub fn kolmogorov_tail(lam: f64) -> f64 {
    if lam < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lam * lam).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}
