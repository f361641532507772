use serde::Serialize;

use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsSummary {
    pub n: usize,
    pub mean_s: f64,
    pub median_s: f64,
    /// Sample standard deviation (n - 1). Zero when n = 1.
    pub stddev_s: f64,
    /// Lower edge of the most populated 1-second bin.
    pub mode_s: f64,
    /// Nearest-rank 95th percentile.
    pub p95_s: f64,
}

impl StatsSummary {
    pub fn note(&self) -> Option<&'static str> {
        (self.n == 1).then_some("single sample, stddev set to 0")
    }
}

pub fn summarize(delays: &[f64]) -> Result<StatsSummary, SimError> {
    if delays.is_empty() {
        return Err(SimError::Validation("cannot summarize an empty sample".into()));
    }
    if delays.iter().any(|d| !d.is_finite()) {
        return Err(SimError::Validation("sample contains a non-finite value".into()));
    }
    let n = delays.len();
    let mut sorted = delays.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let stddev =
        if n < 2 { 0.0 } else { (sorted.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    // Sorted input makes equal bins contiguous; strict > keeps the smallest.
    let (mut best_bin, mut best_count) = (sorted[0].floor(), 0usize);
    let mut i = 0;
    while i < n {
        let bin = sorted[i].floor();
        let run = sorted[i..].iter().take_while(|d| d.floor() == bin).count();
        if run > best_count {
            (best_bin, best_count) = (bin, run);
        }
        i += run;
    }
    let rank = (0.95 * n as f64).ceil() as usize;
    Ok(StatsSummary {
        n,
        mean_s: mean,
        median_s: median,
        stddev_s: stddev,
        mode_s: best_bin,
        p95_s: sorted[rank.clamp(1, n) - 1],
    })
}

/// One-sample Kolmogorov-Smirnov statistic against the uniform distribution
/// on `[lo, hi)`.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let cdf = |x: f64| ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the two
/// empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
