use crate::activations::ActivationMatrix;
use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::similarity::hsic::Estimator;
use crate::similarity::kernel::Kernel;
use crate::similarity::{LayerScope, SimilarityMethod, SimilarityRecord, SCORE_SLACK};

/// Centered Gram of one activation matrix together with its self-HSIC.
struct Prepared {
    centered: Matrix,
    self_hsic: f64,
}

fn prepare(x: &ActivationMatrix, kernel: &dyn Kernel, estimator: Estimator) -> Result<Prepared> {
    let data = x.data();
    let nonconstant = (0..data.cols()).any(|j| {
        let first = data.get(0, j);
        (1..data.rows()).any(|i| data.get(i, j) != first)
    });
    if !nonconstant {
        return Err(Error::Degenerate(format!(
            "{} layer {}: all features constant",
            x.model_id, x.layer_index
        )));
    }
    let centered = estimator.center(&kernel.gram(data)?)?;
    let self_hsic = estimator.combine(&centered, &centered)?;
    if self_hsic <= 0.0 {
        return Err(Error::Degenerate(format!(
            "{} layer {}: self-HSIC is {self_hsic}",
            x.model_id, x.layer_index
        )));
    }
    Ok(Prepared { centered, self_hsic })
}

/// Normalizes a cross term, clamping within slack. Returns (score, clamped).
fn normalize(cross: f64, self_x: f64, self_y: f64, estimator: Estimator) -> Result<(f64, bool)> {
    let raw = cross / (self_x * self_y).sqrt();
    if !raw.is_finite() || raw > 1.0 + SCORE_SLACK {
        return Err(Error::Numerical(format!("CKA estimate {raw} above 1")));
    }
    if raw < 0.0 {
        // The biased estimator is an inner product of PSD matrices and
        // cannot go meaningfully negative; the unbiased one can.
        if estimator == Estimator::Biased && raw < -SCORE_SLACK {
            return Err(Error::Numerical(format!("biased CKA estimate {raw} below 0")));
        }
        return Ok((0.0, true));
    }
    if raw > 1.0 {
        return Ok((1.0, true));
    }
    Ok((raw, false))
}

fn check_pair(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<()> {
    if x.probe_set_id != y.probe_set_id {
        return Err(Error::Config(format!(
            "probe sets differ: '{}' vs '{}'",
            x.probe_set_id, y.probe_set_id
        )));
    }
    if x.n_probes() != y.n_probes() {
        return Err(Error::Shape(format!(
            "probe counts differ: {} vs {}",
            x.n_probes(),
            y.n_probes()
        )));
    }
    Ok(())
}

/// CKA between two layers' activations on the same probe set.
pub fn cka(
    x: &ActivationMatrix,
    y: &ActivationMatrix,
    kernel: &dyn Kernel,
    estimator: Estimator,
) -> Result<SimilarityRecord> {
    check_pair(x, y)?;
    let px = prepare(x, kernel, estimator)?;
    let py = prepare(y, kernel, estimator)?;
    let cross = estimator.combine(&px.centered, &py.centered)?;
    let (score, clamped) = normalize(cross, px.self_hsic, py.self_hsic, estimator)?;
    Ok(SimilarityRecord {
        model_a: x.model_id.clone(),
        model_b: y.model_id.clone(),
        method: kernel.method(),
        scope: LayerScope::Pair(x.layer_index, y.layer_index),
        score,
        probe_set_id: x.probe_set_id.clone(),
        n: x.n_probes(),
        clamped,
    })
}

/// Per-layer-pair CKA grid. Degenerate cells are `None`, not zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSimilarityMatrix {
    pub model_a: String,
    pub model_b: String,
    pub method: SimilarityMethod,
    pub probe_set_id: String,
    pub n: usize,
    pub layers_a: Vec<usize>,
    pub layers_b: Vec<usize>,
    pub grid: Vec<Vec<Option<f64>>>,
}

impl LayerSimilarityMatrix {
    pub fn dims(&self) -> (usize, usize) {
        (self.layers_a.len(), self.layers_b.len())
    }

    /// One record per present cell, row-major.
    pub fn records(&self) -> Vec<SimilarityRecord> {
        let mut out = Vec::new();
        for (i, row) in self.grid.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(score) = *cell {
                    out.push(SimilarityRecord {
                        model_a: self.model_a.clone(),
                        model_b: self.model_b.clone(),
                        method: self.method,
                        scope: LayerScope::Pair(self.layers_a[i], self.layers_b[j]),
                        score,
                        probe_set_id: self.probe_set_id.clone(),
                        n: self.n,
                        clamped: false,
                    });
                }
            }
        }
        out
    }
}

fn prepare_all(acts: &[ActivationMatrix], kernel: &dyn Kernel, est: Estimator) -> Result<Vec<Option<Prepared>>> {
    acts.iter()
        .map(|a| match prepare(a, kernel, est) {
            Ok(p) => Ok(Some(p)),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// `grid[i][j] = cka(acts_a[i], acts_b[j])` with the biased estimator.
pub fn layer_matrix(
    acts_a: &[ActivationMatrix],
    acts_b: &[ActivationMatrix],
    kernel: &dyn Kernel,
) -> Result<LayerSimilarityMatrix> {
    layer_matrix_with(acts_a, acts_b, kernel, Estimator::Biased)
}

pub fn layer_matrix_with(
    acts_a: &[ActivationMatrix],
    acts_b: &[ActivationMatrix],
    kernel: &dyn Kernel,
    estimator: Estimator,
) -> Result<LayerSimilarityMatrix> {
    let (Some(first), Some(_)) = (acts_a.first(), acts_b.first()) else {
        return Err(Error::Config("layer_matrix needs non-empty activation lists".into()));
    };
    for y in acts_a.iter().chain(acts_b) {
        check_pair(first, y)?;
    }
    let pa = prepare_all(acts_a, kernel, estimator)?;
    let pb = prepare_all(acts_b, kernel, estimator)?;
    let mut grid = vec![vec![None; pb.len()]; pa.len()];
    for (i, a) in pa.iter().enumerate() {
        for (j, b) in pb.iter().enumerate() {
            if let (Some(a), Some(b)) = (a, b) {
                let cross = estimator.combine(&a.centered, &b.centered)?;
                grid[i][j] = Some(normalize(cross, a.self_hsic, b.self_hsic, estimator)?.0);
            }
        }
    }
    Ok(LayerSimilarityMatrix {
        model_a: first.model_id.clone(),
        model_b: acts_b[0].model_id.clone(),
        method: kernel.method(),
        probe_set_id: first.probe_set_id.clone(),
        n: first.n_probes(),
        layers_a: acts_a.iter().map(|a| a.layer_index).collect(),
        layers_b: acts_b.iter().map(|b| b.layer_index).collect(),
        grid,
    })
}

/// Splits a matrix into consecutive probe batches of `batch_size` rows; the
/// last batch absorbs any remainder.
pub fn partition(x: &ActivationMatrix, batch_size: usize) -> Result<Vec<ActivationMatrix>> {
    if batch_size < Estimator::Unbiased.min_samples() {
        return Err(Error::Config(format!("batch size {batch_size} below 4")));
    }
    let n = x.n_probes();
    let batches = (n / batch_size).max(1);
    (0..batches)
        .map(|b| {
            let end = if b + 1 == batches { n } else { (b + 1) * batch_size };
            let idx: Vec<usize> = (b * batch_size..end).collect();
            x.select_probes(&idx)
        })
        .collect()
}

/// Accumulates unbiased HSIC terms over matching probe batches, then
/// normalizes once.
pub fn minibatch_cka(
    x_batches: &[ActivationMatrix],
    y_batches: &[ActivationMatrix],
    kernel: &dyn Kernel,
) -> Result<SimilarityRecord> {
    let est = Estimator::Unbiased;
    if x_batches.is_empty() || x_batches.len() != y_batches.len() {
        return Err(Error::Config(format!(
            "mismatched partitions: {} vs {} batches",
            x_batches.len(),
            y_batches.len()
        )));
    }
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    let mut n = 0;
    for (x, y) in x_batches.iter().zip(y_batches) {
        if x.n_probes() != y.n_probes() || x.probe_set_id != y.probe_set_id {
            return Err(Error::Config("mismatched partitions: batch sizes or probe sets differ".into()));
        }
        if x.probe_set_id != x_batches[0].probe_set_id {
            return Err(Error::Config("batches come from different probe sets".into()));
        }
        let kx = est.center(&kernel.gram(x.data())?)?;
        let ky = est.center(&kernel.gram(y.data())?)?;
        xy += est.combine(&kx, &ky)?;
        xx += est.combine(&kx, &kx)?;
        yy += est.combine(&ky, &ky)?;
        n += x.n_probes();
    }
    if xx <= 0.0 || yy <= 0.0 {
        return Err(Error::Degenerate("accumulated self-HSIC is not positive".into()));
    }
    let (score, clamped) = normalize(xy, xx, yy, est)?;
    let first = &x_batches[0];
    Ok(SimilarityRecord {
        model_a: first.model_id.clone(),
        model_b: y_batches[0].model_id.clone(),
        method: kernel.method(),
        scope: LayerScope::Pair(first.layer_index, y_batches[0].layer_index),
        score,
        probe_set_id: first.probe_set_id.clone(),
        n,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::RngStream;
    use crate::similarity::kernel::{Linear, Rbf};

    fn act(id: &str, layer: usize, m: Matrix) -> ActivationMatrix {
        ActivationMatrix::new(id, layer, "probe", m).unwrap()
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let mut rng = RngStream::new(8);
        let x = act("a", 0, rng.normal_matrix(30, 6));
        let y = act("b", 0, rng.normal_matrix(30, 4));
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let s = cka(&x, &x, &Linear, est).unwrap().score;
            assert!((s - 1.0).abs() <= 1e-6);
            let xy = cka(&x, &y, &Linear, est).unwrap().score;
            let yx = cka(&y, &x, &Linear, est).unwrap().score;
            assert_eq!(xy.to_bits(), yx.to_bits());
        }
        let r = cka(&x, &x, &Rbf::median(), Estimator::Biased).unwrap();
        assert!((r.score - 1.0).abs() <= 1e-6);
        assert_eq!(r.method, SimilarityMethod::CkaRbf);
    }

    #[test]
    fn error_paths() {
        let mut rng = RngStream::new(2);
        let x = act("a", 0, rng.normal_matrix(10, 3));
        let c = act("c", 0, Matrix::from_rows(&vec![vec![1.0, 2.0]; 10]).unwrap());
        assert!(matches!(cka(&x, &c, &Linear, Estimator::Biased), Err(Error::Degenerate(_))));
        let other = ActivationMatrix::new("b", 0, "other-probe", rng.normal_matrix(10, 3)).unwrap();
        assert!(matches!(cka(&x, &other, &Linear, Estimator::Biased), Err(Error::Config(_))));
    }

    #[test]
    fn unbiased_negative_is_clamped_and_flagged() {
        // Search seeds for an independent pair whose unbiased estimate dips
        // below zero.
        let mut found = false;
        for seed in 0..200 {
            let mut rng = RngStream::new(seed);
            let x = act("a", 0, rng.normal_matrix(8, 2));
            let y = act("b", 0, rng.normal_matrix(8, 2));
            let r = cka(&x, &y, &Linear, Estimator::Unbiased).unwrap();
            if r.clamped {
                assert_eq!(r.score, 0.0);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn layer_grid() {
        let mut rng = RngStream::new(4);
        let a = vec![act("a", 1, rng.normal_matrix(20, 5)), act("a", 3, rng.normal_matrix(20, 2))];
        let b = vec![
            act("b", 1, rng.normal_matrix(20, 3)),
            act("b", 3, Matrix::from_rows(&vec![vec![0.0, 0.0]; 20]).unwrap()),
            act("b", 5, rng.normal_matrix(20, 2)),
        ];
        let lm = layer_matrix(&a, &b, &Linear).unwrap();
        assert_eq!(lm.dims(), (2, 3));
        assert!(lm.grid[0][1].is_none() && lm.grid[1][1].is_none());
        for (i, x) in a.iter().enumerate() {
            for j in [0, 2] {
                let direct = cka(x, &b[j], &Linear, Estimator::Biased).unwrap().score;
                assert_eq!(lm.grid[i][j], Some(direct));
            }
        }
        let same = layer_matrix(&a, &a, &Linear).unwrap();
        for i in 0..2 {
            assert!((same.grid[i][i].unwrap() - 1.0).abs() <= 1e-6);
        }
        assert!(matches!(layer_matrix(&[], &b, &Linear), Err(Error::Config(_))));
    }

    #[test]
    fn minibatch_reductions() {
        let mut rng = RngStream::new(6);
        let x = act("a", 0, rng.normal_matrix(40, 5));
        let base = rng.normal_matrix(40, 5);
        let y = act("b", 0, base.matmul(&rng.normal_matrix(5, 3)).unwrap());
        let single = minibatch_cka(std::slice::from_ref(&x), std::slice::from_ref(&y), &Linear).unwrap();
        let full = cka(&x, &y, &Linear, Estimator::Unbiased).unwrap();
        assert!((single.score - full.score).abs() <= 1e-10);

        let xb = partition(&x, 10).unwrap();
        let yb = partition(&y, 10).unwrap();
        assert_eq!(xb.len(), 4);
        let fwd = minibatch_cka(&xb, &yb, &Linear).unwrap();
        let mut xr = xb.clone();
        let mut yr = yb.clone();
        xr.reverse();
        yr.reverse();
        let rev = minibatch_cka(&xr, &yr, &Linear).unwrap();
        assert!((fwd.score - rev.score).abs() <= 1e-12);
        assert_eq!(fwd.n, 40);

        assert!(matches!(minibatch_cka(&xb, &yb[..3], &Linear), Err(Error::Config(_))));
        assert!(matches!(partition(&x, 3), Err(Error::Config(_))));
    }
}
