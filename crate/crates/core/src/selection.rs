//! High/low-similarity surrogate pools.
//!
//! Given whole-model similarity scores of each candidate surrogate against a
//! target, `M1 = {S : score >= r1}` and `M2 = {S : score <= r2}` with
//! `0 < r2 < r1 < 1`. Candidates strictly between the thresholds are not
//! tested but are reported. `n` counts trained surrogate instances.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::csv_error;
use crate::error::{Error, Result};
use crate::similarity::{SimilarityMethod, SimilarityRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPolicy {
    /// Inclusive lower bound for M1.
    pub r1: f64,
    /// Inclusive upper bound for M2.
    pub r2: f64,
    pub min_m1: usize,
    pub min_m2: usize,
    /// Minimum of `|M1| + |M2|`; must exceed 2.
    pub min_total: usize,
    /// Below this total an advisory is raised.
    pub recommended_total: usize,
    pub method: SimilarityMethod,
}

impl ThresholdPolicy {
    pub const CKA_R1: f64 = 0.55;
    pub const CKA_R2: f64 = 0.35;
    pub const DIAG_BAND_R1: f64 = 0.7;
    pub const DIAG_BAND_R2: f64 = 0.45;

    /// Default thresholds for scores produced by `method`.
    pub fn for_method(method: SimilarityMethod) -> Self {
        let (r1, r2) = match method {
            SimilarityMethod::DiagBand => (Self::DIAG_BAND_R1, Self::DIAG_BAND_R2),
            SimilarityMethod::CkaLinear | SimilarityMethod::CkaRbf => (Self::CKA_R1, Self::CKA_R2),
        };
        Self {
            r1,
            r2,
            min_m1: 1,
            min_m2: 1,
            min_total: 3,
            recommended_total: 5,
            method,
        }
    }

    pub fn with_thresholds(mut self, r1: f64, r2: f64) -> Self {
        self.r1 = r1;
        self.r2 = r2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.r2 && self.r2 < self.r1 && self.r1 < 1.0) {
            return Err(Error::Policy(format!(
                "thresholds must satisfy 0 < r2 < r1 < 1, got r1 = {}, r2 = {}",
                self.r1, self.r2
            )));
        }
        if self.min_m1 < 1 || self.min_m2 < 1 {
            return Err(Error::Policy("each pool needs a minimum of at least 1".into()));
        }
        if self.min_total <= 2 {
            return Err(Error::Policy(format!(
                "minimum total must exceed 2, got {}",
                self.min_total
            )));
        }
        Ok(())
    }
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self::for_method(SimilarityMethod::CkaLinear)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    M1,
    M2,
    Excluded,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::M1 => "m1",
            Pool::M2 => "m2",
            Pool::Excluded => "excluded",
        }
    }
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(Pool::M1),
            "m2" => Ok(Pool::M2),
            "excluded" => Ok(Pool::Excluded),
            _ => Err(Error::Config(format!("unknown pool '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogatePools {
    pub target: String,
    pub policy: ThresholdPolicy,
    pub m1: Vec<PoolMember>,
    pub m2: Vec<PoolMember>,
    pub excluded: Vec<PoolMember>,
}

impl SurrogatePools {
    pub fn tested_count(&self) -> usize {
        self.m1.len() + self.m2.len()
    }

    /// Pool membership of a surrogate.
    pub fn pool_of(&self, id: &str) -> Option<Pool> {
        let has = |v: &[PoolMember]| v.iter().any(|m| m.id == id);
        if has(&self.m1) {
            Some(Pool::M1)
        } else if has(&self.m2) {
            Some(Pool::M2)
        } else if has(&self.excluded) {
            Some(Pool::Excluded)
        } else {
            None
        }
    }

    /// M1 then M2 members, i.e. everything that gets attacked.
    pub fn tested(&self) -> impl Iterator<Item = &PoolMember> {
        self.m1.iter().chain(&self.m2)
    }

    pub fn score_of(&self, id: &str) -> Option<f64> {
        self.m1
            .iter()
            .chain(&self.m2)
            .chain(&self.excluded)
            .find(|m| m.id == id)
            .map(|m| m.score)
    }
}

fn by_score_desc(a: &PoolMember, b: &PoolMember) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

fn nearest(candidates: &[PoolMember], take: usize, highest: bool) -> Vec<(String, f64)> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(by_score_desc);
    if !highest {
        sorted.reverse();
    }
    sorted.into_iter().take(take).map(|m| (m.id, m.score)).collect()
}

/// Threshold partition without the cardinality checks.
pub fn partition_pools(records: &[SimilarityRecord], policy: &ThresholdPolicy) -> Result<SurrogatePools> {
    policy.validate()?;
    let target = records.first().map(|r| r.model_a.clone()).unwrap_or_default();
    let mut seen = BTreeSet::new();
    let (mut m1, mut m2, mut excluded) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        if r.model_a != target {
            return Err(Error::Config(format!(
                "records mix targets '{target}' and '{}'",
                r.model_a
            )));
        }
        if r.method != policy.method {
            return Err(Error::Config(format!(
                "record for '{}' uses {} but the policy expects {}",
                r.model_b, r.method, policy.method
            )));
        }
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Config(format!("score {} of '{}' outside [0, 1]", r.score, r.model_b)));
        }
        if !seen.insert(r.model_b.clone()) {
            return Err(Error::Config(format!("surrogate '{}' listed twice", r.model_b)));
        }
        let member = PoolMember {
            id: r.model_b.clone(),
            score: r.score,
        };
        if r.score >= policy.r1 {
            m1.push(member);
        } else if r.score <= policy.r2 {
            m2.push(member);
        } else {
            excluded.push(member);
        }
    }
    m1.sort_by(by_score_desc);
    m2.sort_by(by_score_desc);
    excluded.sort_by(by_score_desc);
    Ok(SurrogatePools {
        target,
        policy: policy.clone(),
        m1,
        m2,
        excluded,
    })
}

/// Partitions surrogates by their score against one target and enforces the
/// pool minimums.
pub fn select_pools(records: &[SimilarityRecord], policy: &ThresholdPolicy) -> Result<SurrogatePools> {
    let pools = partition_pools(records, policy)?;
    check_cardinality(&pools)?;
    Ok(pools)
}

fn check_cardinality(pools: &SurrogatePools) -> Result<()> {
    let policy = &pools.policy;
    let (m1, m2, excluded) = (&pools.m1, &pools.m2, &pools.excluded);
    if m1.len() < policy.min_m1 {
        let rest: Vec<PoolMember> = excluded.iter().chain(m2).cloned().collect();
        return Err(Error::InsufficientPool {
            pool: "M1",
            have: m1.len(),
            need: policy.min_m1,
            nearest: nearest(&rest, 3, true),
        });
    }
    if m2.len() < policy.min_m2 {
        let rest: Vec<PoolMember> = excluded.iter().chain(m1).cloned().collect();
        return Err(Error::InsufficientPool {
            pool: "M2",
            have: m2.len(),
            need: policy.min_m2,
            nearest: nearest(&rest, 3, false),
        });
    }
    if m1.len() + m2.len() < policy.min_total {
        return Err(Error::InsufficientTotal {
            have: m1.len() + m2.len(),
            need: policy.min_total,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Advisory {
    pub total: usize,
    pub recommended: usize,
    pub below_recommended: bool,
}

impl Advisory {
    pub fn message(&self) -> Option<String> {
        self.below_recommended.then(|| {
            format!(
                "only {} surrogates tested; at least {} are recommended for statistically meaningful coverage",
                self.total, self.recommended
            )
        })
    }
}

pub fn recommend_n(pools: &SurrogatePools, policy: &ThresholdPolicy) -> Advisory {
    let total = pools.tested_count();
    Advisory {
        total,
        recommended: policy.recommended_total,
        below_recommended: total < policy.recommended_total,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRow {
    target: String,
    surrogate: String,
    method: String,
    score: f64,
    pool: String,
}

pub fn write_pools_csv(path: impl AsRef<Path>, pools: &SurrogatePools) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (pool, members) in [(Pool::M1, &pools.m1), (Pool::M2, &pools.m2), (Pool::Excluded, &pools.excluded)] {
        for m in members {
            w.serialize(PoolRow {
                target: pools.target.clone(),
                surrogate: m.id.clone(),
                method: pools.policy.method.to_string(),
                score: m.score,
                pool: pool.as_str().into(),
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reloads a pools CSV and re-checks it against `policy`.
pub fn read_pools_csv(path: impl AsRef<Path>, policy: &ThresholdPolicy) -> Result<SurrogatePools> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut records = Vec::new();
    let mut stored = Vec::new();
    for row in r.deserialize::<PoolRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        stored.push((row.surrogate.clone(), row.pool.parse::<Pool>()?));
        records.push(SimilarityRecord {
            model_a: row.target,
            model_b: row.surrogate,
            method: row.method.parse()?,
            scope: crate::similarity::LayerScope::Aggregate,
            score: row.score,
            probe_set_id: String::new(),
            n: 2,
            clamped: false,
        });
    }
    let pools = select_pools(&records, policy)?;
    for (id, pool) in stored {
        if pools.pool_of(&id) != Some(pool) {
            return Err(Error::Config(format!(
                "{}: '{id}' is listed in {} but the thresholds place it elsewhere",
                path.display(),
                pool.as_str()
            )));
        }
    }
    Ok(pools)
}

/// Human-readable pool section for reports.
pub fn pools_text(pools: &SurrogatePools) -> String {
    let p = &pools.policy;
    let mut s = String::new();
    let _ = writeln!(s, "Surrogate pools for target '{}'", pools.target);
    let _ = writeln!(
        s,
        "  method {}; r1 = {}, r2 = {}; minimums |M1| >= {}, |M2| >= {}, total >= {}",
        p.method, p.r1, p.r2, p.min_m1, p.min_m2, p.min_total
    );
    for (label, members) in [
        ("M1 (score >= r1)", &pools.m1),
        ("M2 (score <= r2)", &pools.m2),
        ("excluded (r2 < score < r1, not tested)", &pools.excluded),
    ] {
        let _ = writeln!(s, "  {label}: {} member(s)", members.len());
        for m in members {
            let _ = writeln!(s, "    {:<20} {:.6}", m.id, m.score);
        }
    }
    let advisory = recommend_n(pools, p);
    let _ = writeln!(s, "  tested: {} (recommended >= {})", advisory.total, advisory.recommended);
    if let Some(msg) = advisory.message() {
        let _ = writeln!(s, "  ADVISORY: {msg}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::LayerScope;

    fn rec(id: &str, score: f64) -> SimilarityRecord {
        SimilarityRecord {
            model_a: "target".into(),
            model_b: id.into(),
            method: SimilarityMethod::CkaLinear,
            scope: LayerScope::Aggregate,
            score,
            probe_set_id: "p".into(),
            n: 64,
            clamped: false,
        }
    }

    fn ids(v: &[PoolMember]) -> Vec<&str> {
        v.iter().map(|m| m.id.as_str()).collect()
    }

    #[test]
    fn worked_partition() {
        let policy = ThresholdPolicy::default();
        let three = vec![rec("a", 0.60), rec("b", 0.50), rec("c", 0.30)];
        let pools = partition_pools(&three, &policy).unwrap();
        assert_eq!(ids(&pools.m1), ["a"]);
        assert_eq!(ids(&pools.m2), ["c"]);
        assert_eq!(ids(&pools.excluded), ["b"]);
        // Only two surrogates get tested, below the default minimum of three.
        assert!(matches!(
            select_pools(&three, &policy),
            Err(Error::InsufficientTotal { have: 2, need: 3 })
        ));
        let four = vec![rec("a", 0.60), rec("b", 0.50), rec("c", 0.30), rec("d", 0.20)];
        let pools = select_pools(&four, &policy).unwrap();
        assert_eq!(ids(&pools.m2), ["c", "d"]);
    }

    #[test]
    fn empty_input_is_insufficient() {
        assert!(matches!(
            select_pools(&[], &ThresholdPolicy::default()),
            Err(Error::InsufficientPool { pool: "M1", .. })
        ));
    }

    #[test]
    fn thresholds_are_inclusive() {
        let p = ThresholdPolicy::default();
        let pools = select_pools(&[rec("a", 0.55), rec("b", 0.35), rec("c", 0.1)], &p).unwrap();
        assert_eq!(ids(&pools.m1), ["a"]);
        assert_eq!(ids(&pools.m2), ["b", "c"]);
    }

    #[test]
    fn defaults() {
        let p = ThresholdPolicy::default();
        assert_eq!((p.r1, p.r2), (0.55, 0.35));
        assert_eq!((p.min_m1, p.min_m2, p.min_total, p.recommended_total), (1, 1, 3, 5));
        let d = ThresholdPolicy::for_method(SimilarityMethod::DiagBand);
        assert_eq!((d.r1, d.r2), (0.7, 0.45));
    }

    #[test]
    fn policy_errors() {
        let bad = ThresholdPolicy::default().with_thresholds(0.4, 0.4);
        assert!(matches!(select_pools(&[rec("a", 0.5)], &bad), Err(Error::Policy(_))));
        let bad = ThresholdPolicy::default().with_thresholds(1.0, 0.4);
        assert!(bad.validate().is_err());
        let bad = ThresholdPolicy { min_total: 2, ..ThresholdPolicy::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deficient_pool_names_nearest_misses() {
        let p = ThresholdPolicy::default();
        let records = vec![rec("a", 0.50), rec("b", 0.54), rec("c", 0.2), rec("d", 0.1)];
        match select_pools(&records, &p) {
            Err(Error::InsufficientPool { pool, nearest, .. }) => {
                assert_eq!(pool, "M1");
                assert_eq!(nearest[0], ("b".to_string(), 0.54));
            }
            other => panic!("{other:?}"),
        }
        let records = vec![rec("a", 0.9), rec("b", 0.8), rec("c", 0.4), rec("d", 0.36)];
        match select_pools(&records, &p) {
            Err(Error::InsufficientPool { pool, nearest, .. }) => {
                assert_eq!(pool, "M2");
                assert_eq!(nearest[0], ("d".to_string(), 0.36));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_inputs_rejected() {
        let p = ThresholdPolicy::default();
        let mut other = rec("x", 0.9);
        other.model_a = "other".into();
        assert!(matches!(select_pools(&[rec("a", 0.9), other], &p), Err(Error::Config(_))));
        let mut band = rec("x", 0.9);
        band.method = SimilarityMethod::DiagBand;
        assert!(matches!(select_pools(&[band], &p), Err(Error::Config(_))));
        assert!(matches!(select_pools(&[rec("a", 0.9), rec("a", 0.1)], &p), Err(Error::Config(_))));
    }

    #[test]
    fn advisory_boundaries() {
        let p = ThresholdPolicy::default();
        let make = |n1: usize, n2: usize| {
            let mut v: Vec<_> = (0..n1).map(|i| rec(&format!("h{i}"), 0.9)).collect();
            v.extend((0..n2).map(|i| rec(&format!("l{i}"), 0.1)));
            select_pools(&v, &p).unwrap()
        };
        assert!(recommend_n(&make(2, 1), &p).below_recommended);
        assert!(!recommend_n(&make(3, 2), &p).below_recommended);
        assert!(!recommend_n(&make(6, 6), &p).below_recommended);
        assert!(pools_text(&make(2, 1)).contains("ADVISORY"));
    }

    #[test]
    fn csv_round_trip() {
        let p = ThresholdPolicy::default();
        let pools = select_pools(&[rec("a", 0.7), rec("b", 0.4), rec("c", 0.3), rec("d", 0.2)], &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.csv");
        write_pools_csv(&path, &pools).unwrap();
        assert_eq!(read_pools_csv(&path, &p).unwrap(), pools);
        let stricter = p.clone().with_thresholds(0.75, 0.35);
        assert!(read_pools_csv(&path, &stricter).is_err());
    }
}
