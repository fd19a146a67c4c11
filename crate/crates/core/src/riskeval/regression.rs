//! Least-squares risk curves over (similarity, transfer rate) points and
//! percentile bootstrap intervals.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matcore::RngStream;
use crate::registry::{Named, Registry};

/// Nominal coverage of bootstrap intervals.
pub const CI_LEVEL: f64 = 0.90;
pub const MIN_TRIALS: usize = 100;
/// Largest tolerated fraction of failed resamples.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

/// Maps rates to the scale the line is fitted on, and back.
pub trait Link: Named + Send + Sync {
    fn transform(&self, rate: f64) -> f64;
    fn inverse(&self, eta: f64) -> f64;
}

pub struct IdentityLink;

impl Named for IdentityLink {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl Link for IdentityLink {
    fn transform(&self, rate: f64) -> f64 {
        rate
    }

    fn inverse(&self, eta: f64) -> f64 {
        eta
    }
}

/// `ln(y / (1 - y))` after clipping `y` to `[delta, 1 - delta]`.
pub struct LogitLink {
    pub delta: f64,
}

impl LogitLink {
    pub const DEFAULT_DELTA: f64 = 1e-3;
}

impl Default for LogitLink {
    fn default() -> Self {
        Self {
            delta: Self::DEFAULT_DELTA,
        }
    }
}

impl Named for LogitLink {
    fn name(&self) -> &'static str {
        "logit"
    }
}

impl Link for LogitLink {
    fn transform(&self, rate: f64) -> f64 {
        let y = rate.clamp(self.delta, 1.0 - self.delta);
        (y / (1.0 - y)).ln()
    }

    fn inverse(&self, eta: f64) -> f64 {
        1.0 / (1.0 + (-eta).exp())
    }
}

pub fn links() -> Registry<dyn Link> {
    Registry::<dyn Link>::new("regression link")
        .with(Arc::new(IdentityLink))
        .with(Arc::new(LogitLink::default()))
}

pub fn link_from_str(s: &str) -> Result<Arc<dyn Link>> {
    links().get(s)
}

/// `link(rate) ~ intercept + slope * similarity`.
#[derive(Clone)]
pub struct RegressionModel {
    pub link: Arc<dyn Link>,
    pub intercept: f64,
    pub slope: f64,
    /// Residuals on the link scale, in input order.
    pub residuals: Vec<f64>,
}

impl fmt::Debug for RegressionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionModel")
            .field("link", &self.link.name())
            .field("intercept", &self.intercept)
            .field("slope", &self.slope)
            .field("residuals", &self.residuals)
            .finish()
    }
}

impl PartialEq for RegressionModel {
    fn eq(&self, other: &Self) -> bool {
        self.link.name() == other.link.name()
            && self.intercept == other.intercept
            && self.slope == other.slope
            && self.residuals == other.residuals
    }
}

impl RegressionModel {
    /// Predicted rate at `similarity`, clamped to `[0, 1]`.
    pub fn predict(&self, similarity: f64) -> f64 {
        self.link
            .inverse(self.intercept + self.slope * similarity)
            .clamp(0.0, 1.0)
    }
}

/// Ordinary least squares of `link(rate)` on similarity.
pub fn fit_risk_regression(points: &[(f64, f64)], link: Arc<dyn Link>) -> Result<RegressionModel> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Config("regression points must be finite".into()));
    }
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    if lo == hi {
        return Err(Error::RankDeficient(format!("every similarity equals {lo}")));
    }
    let n = points.len() as f64;
    let ys: Vec<f64> = points.iter().map(|&(_, y)| link.transform(y)).collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&(x, _), &y) in points.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = points
        .iter()
        .zip(&ys)
        .map(|(&(x, _), &y)| y - (intercept + slope * x))
        .collect();
    Ok(RegressionModel {
        link,
        intercept,
        slope,
        residuals,
    })
}

/// Two-sided percentile interval from a bootstrap distribution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub trials: usize,
    pub failed: usize,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    /// Smallest superset of `self` that contains `point`.
    pub fn containing(self, point: f64) -> Self {
        Self {
            lower: self.lower.min(point),
            upper: self.upper.max(point),
            ..self
        }
    }
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::RankDeficient(_) | Error::InsufficientData(_) | Error::Degenerate(_)
    )
}

/// Percentile bootstrap of `statistic`, resampling `items` with replacement.
pub fn bootstrap_ci<T: Clone>(
    items: &[T],
    statistic: impl Fn(&[T]) -> Result<f64>,
    trials: usize,
    seed: u64,
) -> Result<Interval> {
    bootstrap_ci_stratified(&[items], statistic, trials, seed)
}

/// Like [`bootstrap_ci`] but resamples within each stratum separately, so
/// every resample keeps the stratum sizes.
pub fn bootstrap_ci_stratified<T: Clone>(
    strata: &[&[T]],
    statistic: impl Fn(&[T]) -> Result<f64>,
    trials: usize,
    seed: u64,
) -> Result<Interval> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("bootstrap needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    let total: usize = strata.iter().map(|s| s.len()).sum();
    if total < 3 || strata.iter().any(|s| s.is_empty()) {
        return Err(Error::InsufficientData(format!(
            "bootstrap needs at least 3 items and no empty stratum, got {total}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut stats = Vec::with_capacity(trials);
    let mut failed = 0;
    let mut sample = Vec::with_capacity(total);
    for _ in 0..trials {
        sample.clear();
        for s in strata {
            for _ in 0..s.len() {
                sample.push(s[rng.index(s.len())].clone());
            }
        }
        match statistic(&sample) {
            Ok(v) if v.is_finite() => stats.push(v),
            Ok(v) => return Err(Error::Numerical(format!("bootstrap statistic evaluated to {v}"))),
            Err(e) if recoverable(&e) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * trials as f64 {
        return Err(Error::Instability { failed, trials });
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - CI_LEVEL) / 2.0;
    Ok(Interval {
        lower: quantile(&stats, tail),
        upper: quantile(&stats, 1.0 - tail),
        trials,
        failed,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("spearman is undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> Arc<dyn Link> {
        Arc::new(IdentityLink)
    }

    #[test]
    fn exact_line_and_constant_rates() {
        let pts: Vec<_> = [0.1, 0.3, 0.5, 0.9].iter().map(|&x| (x, 0.5 * x + 0.1)).collect();
        let m = fit_risk_regression(&pts, identity()).unwrap();
        assert!((m.slope - 0.5).abs() <= 1e-9 && (m.intercept - 0.1).abs() <= 1e-9);
        assert!(m.residuals.iter().all(|r| r.abs() <= 1e-12));
        let flat: Vec<_> = [0.1, 0.3, 0.5].iter().map(|&x| (x, 0.4)).collect();
        assert!(fit_risk_regression(&flat, identity()).unwrap().slope.abs() <= 1e-9);
        let logit = fit_risk_regression(&flat, link_from_str("logit").unwrap()).unwrap();
        assert!(logit.slope.abs() <= 1e-9);
        assert!((logit.predict(0.7) - 0.4).abs() <= 1e-12);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_risk_regression(&[(0.1, 0.2), (0.2, 0.3)], identity()),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            fit_risk_regression(&[(0.1, 0.2), (0.1, 0.3), (0.1, 0.5)], identity()),
            Err(Error::RankDeficient(_))
        ));
        assert!(link_from_str("probit").is_err());
    }

    #[test]
    fn logit_clips_extremes() {
        let l = LogitLink::default();
        assert_eq!(l.transform(0.0), l.transform(1e-3));
        assert_eq!(l.transform(1.0), l.transform(1.0 - 1e-3));
        assert!((l.inverse(l.transform(0.3)) - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn noisy_slope_with_seed_42() {
        let mut rng = RngStream::new(42);
        let pts: Vec<_> = (0..20)
            .map(|_| {
                let x = rng.uniform();
                (x, 0.8 * x + 0.02 * rng.normal())
            })
            .collect();
        let m = fit_risk_regression(&pts, identity()).unwrap();
        assert!((0.7..=0.9).contains(&m.slope), "{}", m.slope);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64 / 10.0, 0.3 * i as f64 / 10.0 + 0.2)).collect();
        let slope = |s: &[(f64, f64)]| fit_risk_regression(s, Arc::new(IdentityLink)).map(|m| m.slope);
        let ci = bootstrap_ci(&pts, slope, 200, 5).unwrap();
        assert!(ci.width() <= 1e-6);
        assert!((ci.lower - 0.3).abs() <= 1e-6);
        assert_eq!(ci, bootstrap_ci(&pts, slope, 200, 5).unwrap());
        assert!(bootstrap_ci(&pts, slope, 50, 5).is_err());
    }

    #[test]
    fn bootstrap_instability() {
        // Three points with two sharing x: many resamples are rank deficient.
        let pts = [(0.1, 0.1), (0.1, 0.2), (0.5, 0.3)];
        let slope = |s: &[(f64, f64)]| fit_risk_regression(s, Arc::new(IdentityLink)).map(|m| m.slope);
        assert!(matches!(bootstrap_ci(&pts, slope, 100, 1), Err(Error::Instability { .. })));
    }

    #[test]
    fn stratified_keeps_sizes() {
        let a = [1.0, 2.0];
        let b = [10.0];
        let ci = bootstrap_ci_stratified(
            &[&a, &b],
            |s| {
                assert_eq!(s.iter().filter(|&&v| v >= 10.0).count(), 1);
                Ok(s.iter().sum())
            },
            100,
            3,
        )
        .unwrap();
        assert!(ci.lower >= 12.0 && ci.upper <= 14.0);
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Ties take average ranks: x ranks [1.5, 1.5, 3], y ranks [1, 2, 3].
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() <= 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
