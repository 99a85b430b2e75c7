//! Statistical helpers shared across the laboratory.
//!
//! Everything here is classical: Kolmogorov-Smirnov with the small-sample
//! correction, moment estimators, serial correlation, a circular block
//! bootstrap for dependent series, and interval estimates for proportions.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::error::PhLabError;

/// Sample mean; zero for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero when fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n - F|` against `cdf`.
/// Sorts a copy of the sample.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, PhLabError> {
    if sample.is_empty() {
        return Err(PhLabError::InsufficientPower("KS statistic of empty sample".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Asymptotic Kolmogorov-Smirnov p-value with the Stephens finite-sample
/// rescaling, accurate to a few 1e-3 for n >= 20.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let t = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    if t < 0.3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        let signed = if k % 2 == 1 { term } else { -term };
        p += signed;
        if term < 1e-10 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// Lag-`k` serial correlation of a single series.
pub fn autocorrelation(xs: &[f64], lag: usize) -> Result<f64, PhLabError> {
    if xs.len() <= lag + 1 {
        return Err(PhLabError::InsufficientPower(format!(
            "need more than {} points for lag-{} autocorrelation, got {}",
            lag + 1,
            lag,
            xs.len()
        )));
    }
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = xs[..xs.len() - lag].iter().zip(&xs[lag..]).map(|(a, b)| (a - m) * (b - m)).sum();
    Ok(num / denom)
}

/// Pearson correlation of paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, PhLabError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PhLabError::InvalidInput(format!(
            "pearson needs two equally long series of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Standard error of `stat` on a weakly dependent series via the circular
/// block bootstrap: resamples whole blocks of `block_len` consecutive
/// entries (wrapping) until the original length is covered.
pub fn block_bootstrap_se<T: Clone>(
    series: &[T],
    block_len: usize,
    reps: usize,
    rng: &mut impl Rng,
    stat: impl Fn(&[T]) -> f64,
) -> Result<f64, PhLabError> {
    if series.len() < 2 * block_len.max(1) || block_len == 0 {
        return Err(PhLabError::InsufficientPower(format!(
            "series of {} too short for block length {}",
            series.len(),
            block_len
        )));
    }
    let n = series.len();
    let mut stats = Vec::with_capacity(reps);
    let mut resample: Vec<T> = Vec::with_capacity(n + block_len);
    for _ in 0..reps {
        resample.clear();
        while resample.len() < n {
            let start = rng.gen_range(0..n);
            for j in 0..block_len {
                resample.push(series[(start + j) % n].clone());
            }
        }
        resample.truncate(n);
        stats.push(stat(&resample));
    }
    Ok(variance(&stats).sqrt())
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> Result<(f64, f64), PhLabError> {
    if trials == 0 {
        return Err(PhLabError::InsufficientPower("Wilson interval with zero trials".into()));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Upper tail `P(N >= n)` of a Poisson variable with the given mean.
pub fn poisson_upper_tail(mean: f64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if mean <= 0.0 {
        return 0.0;
    }
    let pois = Poisson::new(mean).expect("positive mean");
    1.0 - pois.cdf(n - 1)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Total variation distance `0.5 * sum |p_i - q_i|` between mass vectors of
/// equal length (shorter one is implicitly zero-padded).
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (at(p, i) - at(q, i)).abs()).sum::<f64>()
}
