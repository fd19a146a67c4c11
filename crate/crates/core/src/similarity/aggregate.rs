//! Whole-model scores from a layer-pair CKA grid.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::similarity::cka::LayerSimilarityMatrix;
use crate::similarity::{LayerScope, SimilarityMethod, SimilarityRecord};

pub trait LayerAggregator: Named + Send + Sync {
    /// Method tag of the aggregated record, given the per-cell method.
    fn method(&self, cells: SimilarityMethod) -> SimilarityMethod {
        cells
    }

    fn aggregate(&self, lm: &LayerSimilarityMatrix) -> Result<f64>;
}

/// Mean of cells `(i, j)` with `|i/L_a - j/L_b| <= width`, skipping missing
/// cells. Compares layers at corresponding depth fractions; used as a
/// stand-in for the Diagonal Box Similarity score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagBand {
    pub width: f64,
}

impl DiagBand {
    pub const DEFAULT_WIDTH: f64 = 0.25;

    pub fn new(width: f64) -> Result<Self> {
        if !(width >= 0.0 && width.is_finite()) {
            return Err(Error::Config(format!("band width must be >= 0, got {width}")));
        }
        Ok(Self { width })
    }

    pub fn in_band(&self, i: usize, j: usize, la: usize, lb: usize) -> bool {
        (i as f64 / la as f64 - j as f64 / lb as f64).abs() <= self.width
    }
}

impl Default for DiagBand {
    fn default() -> Self {
        Self {
            width: Self::DEFAULT_WIDTH,
        }
    }
}

impl Named for DiagBand {
    fn name(&self) -> &'static str {
        "diag_band"
    }
}

impl LayerAggregator for DiagBand {
    fn method(&self, _cells: SimilarityMethod) -> SimilarityMethod {
        SimilarityMethod::DiagBand
    }

    fn aggregate(&self, lm: &LayerSimilarityMatrix) -> Result<f64> {
        let (la, lb) = lm.dims();
        let cells: Vec<f64> = lm
            .grid
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(j, _)| self.in_band(i, *j, la, lb))
                    .filter_map(|(_, c)| *c)
            })
            .collect();
        if cells.is_empty() {
            return Err(Error::Config(format!(
                "diagonal band of width {} selects no cells of the {la}x{lb} grid",
                self.width
            )));
        }
        Ok(cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

pub struct MeanAll;

impl Named for MeanAll {
    fn name(&self) -> &'static str {
        "mean_all"
    }
}

impl LayerAggregator for MeanAll {
    fn aggregate(&self, lm: &LayerSimilarityMatrix) -> Result<f64> {
        let cells: Vec<f64> = lm.grid.iter().flatten().filter_map(|c| *c).collect();
        if cells.is_empty() {
            return Err(Error::Degenerate("every layer pair is missing".into()));
        }
        Ok(cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

/// Score of the last layer pair (the logits).
pub struct FinalLayer;

impl Named for FinalLayer {
    fn name(&self) -> &'static str {
        "final_layer"
    }
}

impl LayerAggregator for FinalLayer {
    fn aggregate(&self, lm: &LayerSimilarityMatrix) -> Result<f64> {
        lm.grid
            .last()
            .and_then(|row| row.last())
            .copied()
            .flatten()
            .ok_or_else(|| Error::Degenerate("final layer pair is missing".into()))
    }
}

pub fn aggregators() -> Registry<dyn LayerAggregator> {
    Registry::<dyn LayerAggregator>::new("layer aggregator")
        .with(Arc::new(DiagBand::default()))
        .with(Arc::new(MeanAll))
        .with(Arc::new(FinalLayer))
}

/// Parses `diag_band`, `diag_band:<width>`, `mean_all` or `final_layer`.
pub fn aggregator_from_str(s: &str) -> Result<Arc<dyn LayerAggregator>> {
    match s.split_once(':') {
        Some(("diag_band", w)) => {
            let w: f64 = w
                .parse()
                .map_err(|_| Error::Config(format!("bad band width '{w}'")))?;
            Ok(Arc::new(DiagBand::new(w)?))
        }
        Some(_) => Err(Error::Config(format!("bad layer aggregator '{s}'"))),
        None => aggregators().get(s),
    }
}

pub fn aggregate_score(lm: &LayerSimilarityMatrix, aggregator: &dyn LayerAggregator) -> Result<SimilarityRecord> {
    let score = aggregator.aggregate(lm)?;
    Ok(SimilarityRecord {
        model_a: lm.model_a.clone(),
        model_b: lm.model_b.clone(),
        method: aggregator.method(lm.method),
        scope: LayerScope::Aggregate,
        score,
        probe_set_id: lm.probe_set_id.clone(),
        n: lm.n,
        clamped: false,
    })
}
