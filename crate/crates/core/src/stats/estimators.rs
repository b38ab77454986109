//! Order-robust accumulators, block jackknife and log-log regression.

use crate::error::{domain, Result};

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = CompensatedSum::default();
    xs.into_iter().for_each(|x| s.add(x));
    s.value()
}

/// Count, mean and centered second moment with an associative merge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        // two-pass for accuracy
        let n = xs.len();
        if n == 0 {
            return Self::default();
        }
        let mean = sum(xs.iter().copied()) / n as f64;
        let m2 = sum(xs.iter().map(|x| (x - mean).powi(2)));
        Moments { n: n as u64, mean, m2 }
    }

    /// Chan's pairwise combination.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        Moments {
            n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
        }
    }

    /// Unbiased variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn se_mean(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

pub const JACKKNIFE_BLOCKS: usize = 50;

/// Point estimate and delete-one-block jackknife standard error.
///
/// `stat` receives the retained samples as at most two contiguous slices.
pub fn jackknife<T>(samples: &[T], blocks: usize, stat: impl Fn(&[&[T]]) -> f64) -> (f64, f64) {
    let n = samples.len();
    let full = stat(&[samples]);
    let b = blocks.min(n);
    if b < 2 {
        return (full, f64::NAN);
    }
    let bounds: Vec<usize> = (0..=b).map(|i| i * n / b).collect();
    let reps: Vec<f64> = (0..b)
        .map(|i| stat(&[&samples[..bounds[i]], &samples[bounds[i + 1]..]]))
        .collect();
    let mean = sum(reps.iter().copied()) / b as f64;
    let ss = sum(reps.iter().map(|r| (r - mean).powi(2)));
    (full, ((b - 1) as f64 / b as f64 * ss).sqrt())
}

pub fn parts_mean(parts: &[&[f64]]) -> f64 {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    sum(parts.iter().flat_map(|p| p.iter().copied())) / n as f64
}

/// Unbiased variance of the concatenated parts.
pub fn parts_variance(parts: &[&[f64]]) -> f64 {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let m = parts_mean(parts);
    sum(parts.iter().flat_map(|p| p.iter().map(move |x| (x - m).powi(2)))) / (n as f64 - 1.0)
}

/// Mean and jackknife SE of a scalar sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    jackknife(xs, JACKKNIFE_BLOCKS, parts_mean)
}

/// Unbiased variance and jackknife SE.
pub fn variance_se(xs: &[f64]) -> (f64, f64) {
    jackknife(xs, JACKKNIFE_BLOCKS, parts_variance)
}

/// Least-squares line y = intercept + slope·x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual-based slope SE (NaN with two points).
    pub slope_se: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() {
        return domain("regression needs equally many x and y values");
    }
    if n < 2 {
        return domain("a slope needs at least two points");
    }
    let mx = sum(x.iter().copied()) / n as f64;
    let my = sum(y.iter().copied()) / n as f64;
    let sxx = sum(x.iter().map(|v| (v - mx).powi(2)));
    if !(sxx > 0.0) {
        return domain("regression abscissae are all equal");
    }
    let sxy = sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss = sum(x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)));
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LineFit { slope, intercept, slope_se })
}

/// Slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return domain("log-log regression needs positive values");
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

/// Jackknife SE of a statistic over coupled replicate rows (one row per replicate).
pub fn jackknife_rows(rows: &[Vec<f64>], stat: impl Fn(&[&[Vec<f64>]]) -> f64) -> (f64, f64) {
    jackknife(rows, JACKKNIFE_BLOCKS, stat)
}

/// Column `j` of the retained rows.
pub fn column(parts: &[&[Vec<f64>]], j: usize) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().map(move |r| r[j])).collect()
}
