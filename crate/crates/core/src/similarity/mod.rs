//! HSIC-normalized similarity (CKA) between activation matrices, per layer
//! pair and aggregated to a whole-model score.

pub mod aggregate;
pub mod cka;
pub mod hsic;
pub mod kernel;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::csv_error;
use crate::error::{Error, Result};

pub use aggregate::{aggregate_score, aggregator_from_str, aggregators, DiagBand, FinalLayer, LayerAggregator, MeanAll};
pub use cka::{cka, layer_matrix, layer_matrix_with, minibatch_cka, partition, LayerSimilarityMatrix};
pub use hsic::{hsic, Estimator};
pub use kernel::{kernel_from_str, kernels, Bandwidth, Kernel, Linear, Rbf};

/// Slack allowed before an out-of-range CKA value counts as a bug.
pub const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SimilarityMethod {
    CkaLinear,
    CkaRbf,
    /// Diagonal-band mean over a layer-pair CKA grid. This approximates the
    /// Diagonal Box Similarity score, whose exact definition is external.
    DiagBand,
}

impl SimilarityMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMethod::CkaLinear => "cka_linear",
            SimilarityMethod::CkaRbf => "cka_rbf",
            SimilarityMethod::DiagBand => "diag_band",
        }
    }
}

impl fmt::Display for SimilarityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SimilarityMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka_linear" => Ok(SimilarityMethod::CkaLinear),
            "cka_rbf" => Ok(SimilarityMethod::CkaRbf),
            "diag_band" => Ok(SimilarityMethod::DiagBand),
            _ => Err(Error::Config(format!("unknown similarity method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerScope {
    Pair(usize, usize),
    Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRecord {
    pub model_a: String,
    pub model_b: String,
    pub method: SimilarityMethod,
    pub scope: LayerScope,
    pub score: f64,
    pub probe_set_id: String,
    pub n: usize,
    /// The raw estimate fell outside `[0, 1]` (within tolerance) and was
    /// clamped.
    pub clamped: bool,
}

/// On-disk row. Layer columns hold indices or the word `aggregate`.
#[derive(Debug, Serialize, Deserialize)]
struct SimilarityRow {
    model_a: String,
    model_b: String,
    method: String,
    layer_a: String,
    layer_b: String,
    score: f64,
    n: usize,
    probe_set: String,
    clamped: bool,
}

const AGGREGATE: &str = "aggregate";

impl From<&SimilarityRecord> for SimilarityRow {
    fn from(r: &SimilarityRecord) -> Self {
        let (a, b) = match r.scope {
            LayerScope::Pair(a, b) => (a.to_string(), b.to_string()),
            LayerScope::Aggregate => (AGGREGATE.to_string(), AGGREGATE.to_string()),
        };
        Self {
            model_a: r.model_a.clone(),
            model_b: r.model_b.clone(),
            method: r.method.to_string(),
            layer_a: a,
            layer_b: b,
            score: r.score,
            n: r.n,
            probe_set: r.probe_set_id.clone(),
            clamped: r.clamped,
        }
    }
}

impl TryFrom<SimilarityRow> for SimilarityRecord {
    type Error = Error;

    fn try_from(row: SimilarityRow) -> Result<Self> {
        let scope = if row.layer_a == AGGREGATE && row.layer_b == AGGREGATE {
            LayerScope::Aggregate
        } else {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layer index '{s}'")))
            };
            LayerScope::Pair(parse(&row.layer_a)?, parse(&row.layer_b)?)
        };
        if !(0.0..=1.0).contains(&row.score) {
            return Err(Error::Config(format!("score {} outside [0, 1]", row.score)));
        }
        if row.model_a.is_empty() || row.model_b.is_empty() || row.n < 2 {
            return Err(Error::Config("similarity row needs model ids and n >= 2".into()));
        }
        Ok(Self {
            model_a: row.model_a,
            model_b: row.model_b,
            method: row.method.parse()?,
            scope,
            score: row.score,
            probe_set_id: row.probe_set,
            n: row.n,
            clamped: row.clamped,
        })
    }
}

pub fn similarity_csv_string(records: &[SimilarityRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(SimilarityRow::from(r))
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_similarity_csv(path: impl AsRef<Path>, records: &[SimilarityRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, similarity_csv_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_similarity_csv(path: impl AsRef<Path>) -> Result<Vec<SimilarityRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize::<SimilarityRow>()
        .map(|row| row.map_err(|e| csv_error(path, e)).and_then(SimilarityRecord::try_from))
        .collect()
}
