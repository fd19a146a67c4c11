use std::sync::Arc;

use proptest::prelude::*;
use transfer_risk::matcore::RngStream;
use transfer_risk::riskeval::{bootstrap_ci, fit_risk_regression, IdentityLink, LogitLink};

/// Intercept and slope from the 2x2 normal equations by Cramer's rule.
fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let det = n * sxx - sx * sx;
    ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
}

/// Similarities with a guaranteed spread so the system is well conditioned.
fn points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..30).prop_map(|mut v| {
        v.push((0.0, 0.5));
        v.push((1.0, 0.5));
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn identity_fit_matches_normal_equations(pts in points()) {
        let model = fit_risk_regression(&pts, Arc::new(IdentityLink)).unwrap();
        let (a, b) = normal_equations(&pts);
        prop_assert!((model.intercept - a).abs() <= 1e-9, "{} vs {}", model.intercept, a);
        prop_assert!((model.slope - b).abs() <= 1e-9, "{} vs {}", model.slope, b);
        let rss: f64 = model.residuals.iter().sum();
        prop_assert!(rss.abs() <= 1e-9);
    }

    #[test]
    fn predictions_stay_in_unit_interval(pts in points(), s in -1.0f64..=2.0) {
        for link in [Arc::new(IdentityLink) as _, Arc::new(LogitLink::default()) as _] {
            let p = fit_risk_regression(&pts, link).unwrap().predict(s);
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn bootstrap_interval_covers_true_slope() {
    let (intercept, slope, sigma) = (0.1, 0.5, 0.02);
    let mut covered = 0;
    for rep in 0..100u64 {
        let mut rng = RngStream::new(1000 + rep);
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|_| {
                let x = rng.uniform_range(0.2, 0.9);
                (x, intercept + slope * x + sigma * rng.normal())
            })
            .collect();
        let ci = bootstrap_ci(
            &pts,
            |s| fit_risk_regression(s, Arc::new(IdentityLink)).map(|m| m.slope),
            1000,
            rep,
        )
        .unwrap();
        if ci.contains(slope) {
            covered += 1;
        }
    }
    assert!(covered >= 85, "{covered} of 100 intervals contain the true slope");
}
