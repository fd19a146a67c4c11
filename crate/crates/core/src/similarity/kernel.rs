use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::registry::{Named, Registry};
use crate::similarity::SimilarityMethod;

/// Builds the n x n Gram matrix of an activation matrix's rows.
pub trait Kernel: Named + Send + Sync {
    fn method(&self) -> SimilarityMethod;
    fn gram(&self, x: &Matrix) -> Result<Matrix>;
}

/// `K = X X^T`.
pub struct Linear;

impl Named for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
}

impl Kernel for Linear {
    fn method(&self) -> SimilarityMethod {
        SimilarityMethod::CkaLinear
    }

    fn gram(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() < 2 {
            return Err(Error::Degenerate("gram needs at least 2 rows".into()));
        }
        x.matmul_transposed(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance of the rows.
    Median,
    Fixed(f64),
}

/// Gaussian kernel `exp(-|xi - xj|^2 / (2 sigma^2))`.
pub struct Rbf {
    bandwidth: Bandwidth,
}

impl Rbf {
    pub fn median() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn fixed(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("rbf bandwidth must be positive, got {sigma}")));
        }
        Ok(Self {
            bandwidth: Bandwidth::Fixed(sigma),
        })
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }
}

impl Named for Rbf {
    fn name(&self) -> &'static str {
        "rbf"
    }
}

impl Kernel for Rbf {
    fn method(&self) -> SimilarityMethod {
        SimilarityMethod::CkaRbf
    }

    fn gram(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() < 2 {
            return Err(Error::Degenerate("gram needs at least 2 rows".into()));
        }
        let d2 = squared_distances(x);
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => {
                let s = median_distance(&d2);
                if s <= 0.0 {
                    return Err(Error::Degenerate(
                        "median pairwise distance is zero (duplicate probes)".into(),
                    ));
                }
                s
            }
        };
        let denom = 2.0 * sigma * sigma;
        Ok(d2.map(|v| (-v / denom).exp()))
    }
}

fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Median over the strict upper triangle of Euclidean distances.
fn median_distance(d2: &Matrix) -> f64 {
    let n = d2.rows();
    let mut dist: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2.get(i, j).sqrt())
        .collect();
    dist.sort_by(f64::total_cmp);
    let m = dist.len();
    if m % 2 == 1 {
        dist[m / 2]
    } else {
        0.5 * (dist[m / 2 - 1] + dist[m / 2])
    }
}

pub fn kernels() -> Registry<dyn Kernel> {
    Registry::<dyn Kernel>::new("kernel")
        .with(Arc::new(Linear))
        .with(Arc::new(Rbf::median()))
}

/// Parses `linear`, `rbf` (median bandwidth) or `rbf:<sigma>`.
pub fn kernel_from_str(s: &str) -> Result<Arc<dyn Kernel>> {
    match s.split_once(':') {
        Some(("rbf", sigma)) => {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| Error::Config(format!("bad rbf bandwidth '{sigma}'")))?;
            Ok(Arc::new(Rbf::fixed(sigma)?))
        }
        Some(_) => Err(Error::Config(format!("bad kernel '{s}'"))),
        None => kernels().get(s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity() {
        let k = Linear.gram(&Matrix::identity(2)).unwrap();
        assert_eq!(k, Matrix::identity(2));
    }

    #[test]
    fn rbf_has_unit_diagonal_and_median_matches_oracle() {
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![3.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        let k = Rbf::median().gram(&x).unwrap();
        for i in 0..5 {
            assert_eq!(k.get(i, i), 1.0);
        }
        // Independent oracle: all 10 pairwise distances, sorted, middle pair.
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (x.get(i, 0), x.get(i, 1))).collect();
        let mut d = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                d.push(((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let sigma = (d[4] + d[5]) / 2.0;
        for i in 0..5 {
            for j in 0..5 {
                let r2 = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
                let expect = (-r2 / (2.0 * sigma * sigma)).exp();
                assert!((k.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bandwidth_errors() {
        assert!(matches!(Rbf::fixed(0.0), Err(Error::Config(_))));
        assert!(matches!(kernel_from_str("rbf:-1"), Err(Error::Config(_))));
        let dup = Matrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        assert!(matches!(Rbf::median().gram(&dup), Err(Error::Degenerate(_))));
        assert!(kernel_from_str("rbf:0.5").is_ok());
        assert_eq!(kernel_from_str("linear").unwrap().name(), "linear");
        assert!(kernel_from_str("poly").is_err());
    }
}
