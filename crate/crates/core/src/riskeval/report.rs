//! Pool-level aggregates, the fitted risk curve and their bootstrap
//! intervals, serialized as JSON plus CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::activations::csv_error;
use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::riskeval::regression::{
    bootstrap_ci_stratified, fit_risk_regression, spearman, Interval, Link, RegressionModel,
};
use crate::riskeval::transfer::TransferRecord;
use crate::selection::{recommend_n, Pool, SurrogatePools};

/// Number of equally spaced similarity values the curve is sampled at.
pub const CURVE_POINTS: usize = 101;

/// Slack for the report's own invariant checks.
const CHECK_TOL: f64 = 1e-12;

#[derive(Clone)]
pub struct ReportConfig {
    pub attacks: Vec<AttackConfig>,
    pub link: Arc<dyn Link>,
    pub bootstrap_trials: usize,
    pub bootstrap_seed: u64,
    /// Free-form run description: seeds, zoo summary and so on.
    pub metadata: BTreeMap<String, String>,
}

/// Attack identity for coverage purposes; the per-surrogate seed is ignored.
pub fn attack_label(a: &AttackConfig) -> String {
    a.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolsSummary {
    pub method: String,
    pub r1: f64,
    pub r2: f64,
    pub min_m1: usize,
    pub min_m2: usize,
    pub min_total: usize,
    pub recommended_total: usize,
    pub m1: Vec<PoolEntry>,
    pub m2: Vec<PoolEntry>,
    pub excluded: Vec<PoolEntry>,
    pub advisory: Option<String>,
}

impl PoolsSummary {
    fn new(pools: &SurrogatePools) -> Self {
        let entries = |v: &[crate::selection::PoolMember]| {
            v.iter()
                .map(|m| PoolEntry {
                    id: m.id.clone(),
                    score: m.score,
                })
                .collect()
        };
        let p = &pools.policy;
        Self {
            method: p.method.to_string(),
            r1: p.r1,
            r2: p.r2,
            min_m1: p.min_m1,
            min_m2: p.min_m2,
            min_total: p.min_total,
            recommended_total: p.recommended_total,
            m1: entries(&pools.m1),
            m2: entries(&pools.m2),
            excluded: entries(&pools.excluded),
            advisory: recommend_n(pools, p).message(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Largest observed restricted transfer rate.
    pub worst_case: f64,
    pub mean_m1: f64,
    pub mean_m2: f64,
    /// Curve value at `r1`. An extrapolation for unseen, highly similar
    /// surrogates.
    pub predicted_at_r1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateIntervals {
    pub slope: Interval,
    pub worst_case: Interval,
    pub mean_m1: Interval,
    pub mean_m2: Interval,
    pub predicted_at_r1: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub link: String,
    pub intercept: f64,
    pub slope: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub similarity: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub attack: String,
    pub points: usize,
    pub regression: RegressionSummary,
    pub aggregates: Aggregates,
    pub intervals: AggregateIntervals,
    /// Rank correlation of similarity and restricted transfer rate, when
    /// defined.
    pub spearman: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    /// The only field that differs between identical runs.
    pub generated_at: Option<String>,
    pub target: String,
    /// Headline risk: maximum restricted transfer rate over every pool and
    /// attack.
    pub worst_case: f64,
    pub ci_level: f64,
    pub bootstrap_trials: usize,
    pub bootstrap_seed: u64,
    pub pools: PoolsSummary,
    pub sections: Vec<AttackSection>,
    pub records: Vec<TransferRecord>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone)]
struct Point {
    pool: Pool,
    similarity: f64,
    rate: f64,
}

fn mean_of(points: &[Point], pool: Pool) -> Result<f64> {
    let v: Vec<f64> = points.iter().filter(|p| p.pool == pool).map(|p| p.rate).collect();
    if v.is_empty() {
        return Err(Error::InsufficientData(format!("no {} points", pool.as_str())));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn worst_of(points: &[Point]) -> f64 {
    points.iter().map(|p| p.rate).fold(0.0, f64::max)
}

fn fit(points: &[Point], link: &Arc<dyn Link>) -> Result<RegressionModel> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.similarity, p.rate)).collect();
    fit_risk_regression(&xy, link.clone())
}

fn section(
    attack: &AttackConfig,
    points: Vec<Point>,
    r1: f64,
    config: &ReportConfig,
    seed: u64,
) -> Result<AttackSection> {
    let model = fit(&points, &config.link)?;
    let aggregates = Aggregates {
        worst_case: worst_of(&points),
        mean_m1: mean_of(&points, Pool::M1)?,
        mean_m2: mean_of(&points, Pool::M2)?,
        predicted_at_r1: model.predict(r1),
    };
    let m1: Vec<Point> = points.iter().filter(|p| p.pool == Pool::M1).cloned().collect();
    let m2: Vec<Point> = points.iter().filter(|p| p.pool == Pool::M2).cloned().collect();
    let strata: [&[Point]; 2] = [&m1, &m2];
    let trials = config.bootstrap_trials;
    let link = &config.link;
    let ci = |f: &dyn Fn(&[Point]) -> Result<f64>, offset: u64, point: f64| {
        bootstrap_ci_stratified(&strata, f, trials, seed.wrapping_add(offset)).map(|i| i.containing(point))
    };
    let intervals = AggregateIntervals {
        slope: ci(&|s| fit(s, link).map(|m| m.slope), 0, model.slope)?,
        worst_case: ci(&|s| Ok(worst_of(s)), 1, aggregates.worst_case)?,
        mean_m1: ci(&|s| mean_of(s, Pool::M1), 2, aggregates.mean_m1)?,
        mean_m2: ci(&|s| mean_of(s, Pool::M2), 3, aggregates.mean_m2)?,
        predicted_at_r1: ci(&|s| fit(s, link).map(|m| m.predict(r1)), 4, aggregates.predicted_at_r1)?,
    };
    let sims: Vec<f64> = points.iter().map(|p| p.similarity).collect();
    let rates: Vec<f64> = points.iter().map(|p| p.rate).collect();
    let curve = (0..CURVE_POINTS)
        .map(|i| {
            let similarity = i as f64 / (CURVE_POINTS - 1) as f64;
            CurvePoint {
                similarity,
                predicted: model.predict(similarity),
            }
        })
        .collect();
    Ok(AttackSection {
        attack: attack_label(attack),
        points: points.len(),
        regression: RegressionSummary {
            link: model.link.name().to_string(),
            intercept: model.intercept,
            slope: model.slope,
            residuals: model.residuals.clone(),
        },
        aggregates,
        intervals,
        spearman: spearman(&sims, &rates).ok(),
        curve,
    })
}

/// Builds the report from records covering every tested surrogate under every
/// configured attack.
pub fn build_report(pools: &SurrogatePools, records: &[TransferRecord], config: &ReportConfig) -> Result<RiskReport> {
    if config.attacks.is_empty() {
        return Err(Error::Config("no attacks configured".into()));
    }
    let labels: Vec<String> = config.attacks.iter().map(attack_label).collect();
    let mut cells: BTreeMap<(String, String), &TransferRecord> = BTreeMap::new();
    for r in records {
        if r.target != pools.target {
            return Err(Error::Config(format!(
                "record targets '{}' but the pools target '{}'",
                r.target, pools.target
            )));
        }
        match pools.pool_of(&r.surrogate) {
            Some(Pool::M1 | Pool::M2) => {}
            _ => {
                return Err(Error::Config(format!("'{}' is not in M1 or M2", r.surrogate)));
            }
        }
        let label = attack_label(&r.attack);
        if !labels.contains(&label) {
            return Err(Error::Config(format!("record uses unconfigured attack {label}")));
        }
        if cells.insert((r.surrogate.clone(), label.clone()), r).is_some() {
            return Err(Error::Config(format!("duplicate record for '{}' under {label}", r.surrogate)));
        }
    }
    let mut missing = Vec::new();
    for m in pools.tested() {
        for label in &labels {
            if !cells.contains_key(&(m.id.clone(), label.clone())) {
                missing.push((m.id.clone(), label.clone()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteCoverage(missing));
    }

    let mut sections = Vec::new();
    let mut ordered = Vec::new();
    for (i, (attack, label)) in config.attacks.iter().zip(&labels).enumerate() {
        let mut points = Vec::new();
        for m in pools.tested() {
            let r = cells[&(m.id.clone(), label.clone())];
            ordered.push(r.clone());
            points.push(Point {
                pool: pools.pool_of(&m.id).expect("tested member"),
                similarity: r.similarity,
                rate: r.transfer_restricted,
            });
        }
        let seed = config.bootstrap_seed.wrapping_add(1000 * i as u64);
        sections.push(section(attack, points, pools.policy.r1, config, seed)?);
    }
    let report = RiskReport {
        generated_at: None,
        target: pools.target.clone(),
        worst_case: sections.iter().map(|s| s.aggregates.worst_case).fold(0.0, f64::max),
        ci_level: crate::riskeval::regression::CI_LEVEL,
        bootstrap_trials: config.bootstrap_trials,
        bootstrap_seed: config.bootstrap_seed,
        pools: PoolsSummary::new(pools),
        sections,
        records: ordered,
        metadata: config.metadata.clone(),
    };
    report.validate()?;
    Ok(report)
}

impl RiskReport {
    /// Re-checks the declared invariants, recomputing aggregates from the
    /// record table.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Numerical(format!("report invariant violated: {msg}")));
        let pool_of = |id: &str| {
            if self.pools.m1.iter().any(|e| e.id == id) {
                Some(Pool::M1)
            } else if self.pools.m2.iter().any(|e| e.id == id) {
                Some(Pool::M2)
            } else {
                None
            }
        };
        let mut headline: f64 = 0.0;
        for s in &self.sections {
            let recs: Vec<&TransferRecord> = self
                .records
                .iter()
                .filter(|r| attack_label(&r.attack) == s.attack)
                .collect();
            let rates = |pool: Pool| -> Vec<f64> {
                recs.iter()
                    .filter(|r| pool_of(&r.surrogate) == Some(pool))
                    .map(|r| r.transfer_restricted)
                    .collect()
            };
            let (m1, m2) = (rates(Pool::M1), rates(Pool::M2));
            if m1.is_empty() || m2.is_empty() {
                return bad(format!("{}: a pool has no records", s.attack));
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let worst = m1.iter().chain(&m2).copied().fold(0.0, f64::max);
            let a = &s.aggregates;
            if (a.mean_m1 - mean(&m1)).abs() > CHECK_TOL
                || (a.mean_m2 - mean(&m2)).abs() > CHECK_TOL
                || a.worst_case != worst
            {
                return bad(format!("{}: aggregates disagree with the records", s.attack));
            }
            if a.worst_case < a.mean_m1 || a.worst_case < a.mean_m2 {
                return bad(format!("{}: worst case below a pool mean", s.attack));
            }
            if s.curve.len() != CURVE_POINTS || s.curve.iter().any(|c| !(0.0..=1.0).contains(&c.predicted)) {
                return bad(format!("{}: curve outside [0, 1]", s.attack));
            }
            let iv = &s.intervals;
            for (name, ci, point) in [
                ("slope", iv.slope, s.regression.slope),
                ("worst_case", iv.worst_case, a.worst_case),
                ("mean_m1", iv.mean_m1, a.mean_m1),
                ("mean_m2", iv.mean_m2, a.mean_m2),
                ("predicted_at_r1", iv.predicted_at_r1, a.predicted_at_r1),
            ] {
                if !ci.contains(point) {
                    return bad(format!("{}: {name} interval misses its estimate", s.attack));
                }
            }
            headline = headline.max(a.worst_case);
        }
        if self.worst_case != headline {
            return bad("headline worst case".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| Error::format(e.column(), e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn with_timestamp(mut self, generated_at: impl Into<String>) -> Self {
        self.generated_at = Some(generated_at.into());
        self
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `attack,similarity,predicted` rows for every section.
    pub fn write_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["attack", "similarity", "predicted"])
            .map_err(|e| csv_error(path, e))?;
        for s in &self.sections {
            for c in &s.curve {
                w.write_record([s.attack.clone(), c.similarity.to_string(), c.predicted.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Risk report for target '{}'", self.target);
        let _ = writeln!(s, "  worst-case transfer rate: {:.4}", self.worst_case);
        for sec in &self.sections {
            let a = &sec.aggregates;
            let iv = &sec.intervals;
            let _ = writeln!(s, "  {}", sec.attack);
            let _ = writeln!(
                s,
                "    mean M1 {:.4} [{:.4}, {:.4}]   mean M2 {:.4} [{:.4}, {:.4}]",
                a.mean_m1, iv.mean_m1.lower, iv.mean_m1.upper, a.mean_m2, iv.mean_m2.lower, iv.mean_m2.upper
            );
            let _ = writeln!(
                s,
                "    slope ({} link) {:.4} [{:.4}, {:.4}]",
                sec.regression.link, sec.regression.slope, iv.slope.lower, iv.slope.upper
            );
            let _ = writeln!(
                s,
                "    predicted at r1 = {} (extrapolation): {:.4}",
                self.pools.r1, a.predicted_at_r1
            );
            if let Some(rho) = sec.spearman {
                let _ = writeln!(s, "    spearman(similarity, rate) = {rho:.4}");
            }
        }
        if let Some(adv) = &self.pools.advisory {
            let _ = writeln!(s, "  ADVISORY: {adv}");
        }
        s
    }
}
